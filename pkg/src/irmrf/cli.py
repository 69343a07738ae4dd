"""Command-line front end: ``irmrf {synth,train,detect,fuse,eval}``.

Settings come from built-in defaults, then an optional ``key=value`` config
file (``--config``), then command-line flags.  Every command writes a
``run.json`` beside its outputs recording inputs (with content hashes), the
resolved configuration, its hash and the seed.  No timestamps, so identical
runs produce byte-identical files.

Failures print one line ``error: <code>: <message>`` on stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autologistic import AutoParams, DegenerateLabelsError, fit_auto
from .bgsub import DEFAULT_BANDWIDTH, DEFAULT_HISTORY, DEFAULT_TAU, KdeModel, foreground_mask, fuse_and
from .core import DatasetError, Frame, ImageError, read_kv, write_kv, write_label_pgm
from .core import load_frames as _load_frames
from .detect import (
    DEFAULT_LADDER_SIZE,
    DEFAULT_MIN_AREA,
    FrameCounts,
    components_from_mask,
    default_ladder,
    detect,
    build_roc,
    evaluate_frame,
    merge_boxes,
    read_detections_csv,
    summarize,
    write_detections_csv,
)
from .icm import I_AUTO, SAR_AUTO, SAR_I, IidGaussian, ModelVariant, MonotonicityError, icm_infer, parse_tag, ratio_map
from .sar import InsufficientSamplesError, SarParams, fit_sar
from . import synth

TARGET_FILE = "target.sar"
BACKGROUND_FILE = "background.sar"
PRIOR_FILE = "prior.auto"
IID_FILE = "iid.params"
RUN_FILE = "run.json"

SYNTH_KINDS = ("planted", "distractor", "sequence", "static-sequence")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    variant: str = SAR_AUTO
    models: str | None = None
    ladder: int = DEFAULT_LADDER_SIZE
    min_area: int = DEFAULT_MIN_AREA
    delta: float = 0.0
    bg_T: int = DEFAULT_HISTORY
    bg_sigma: float = DEFAULT_BANDWIDTH
    bg_tau: float = DEFAULT_TAU
    seed: int = 0

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "variant", parse_tag(self.variant))
        except ValueError as exc:
            raise CliError("config", str(exc)) from None
        if self.ladder < 1:
            raise CliError("config", f"ladder size must be >= 1, got {self.ladder}")
        if self.min_area < 1:
            raise CliError("config", f"min_area must be >= 1, got {self.min_area}")
        if not math.isfinite(self.delta):
            raise CliError("config", "delta must be finite")
        if self.bg_T < 1:
            raise CliError("config", f"bg_T must be >= 1, got {self.bg_T}")
        if not self.bg_sigma > 0:
            raise CliError("config", f"bg_sigma must be positive, got {self.bg_sigma}")
        if not 0.0 <= self.bg_tau <= 1.0:
            raise CliError("config", f"bg_tau must lie in [0, 1], got {self.bg_tau}")

    def as_dict(self) -> dict[str, object]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_CONVERT = {"int": int, "float": float, "str": str, "str | None": str}


def resolve_config(config_path: str | None, overrides: dict[str, object]) -> RunConfig:
    values: dict[str, object] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise CliError("io", f"no such config file: {path}")
        for key, text in read_kv(path).items():
            key = key.replace("-", "_")
            if key not in _FIELD_TYPES:
                raise CliError("config", f"{path}: unknown key {key!r}")
            try:
                values[key] = _CONVERT[_FIELD_TYPES[key]](text)
            except ValueError:
                raise CliError("config", f"{path}: bad value for {key}: {text!r}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(
    out_dir: Path, command: str, config: RunConfig, inputs: Sequence[Path], outputs: Sequence[Path]
) -> Path:
    record = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "config": config.as_dict(),
        "config_hash": config.digest(),
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "outputs": sorted(str(Path(p).name) for p in outputs),
    }
    path = out_dir / RUN_FILE
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def load_frames(manifest: str | Path) -> tuple[list[Frame], list[str], list[Path]]:
    """Frames, their ids (image file stems) and every file read."""
    from .core import read_manifest

    pairs = read_manifest(manifest)
    if not pairs:
        raise CliError("dataset", f"manifest {manifest} lists no frames")
    frames = _load_frames(manifest)
    ids = [img.stem for img, _ in pairs]
    files = [Path(manifest)] + [p for pair in pairs for p in pair]
    return frames, ids, files


def _check_shapes(frames: Sequence[Frame]) -> None:
    shapes = {f.image.shape for f in frames}
    if len(shapes) > 1:
        raise CliError("dataset", f"frames differ in size: {sorted(shapes)}")


def background_patches(frames: Sequence[Frame], rng: np.random.Generator, tries: int = 200) -> list[np.ndarray]:
    """One random out-of-box patch per truth box, of the same size as the box."""
    patches = []
    for frame in frames:
        y = np.asarray(frame.image)
        occupied = np.asarray(frame.truth_labels())
        h_img, w_img = y.shape
        for box in frame.truth:
            if box.w > w_img or box.h > h_img:
                continue
            for _ in range(tries):
                x0 = int(rng.integers(0, w_img - box.w + 1))
                y0 = int(rng.integers(0, h_img - box.h + 1))
                if not occupied[y0 : y0 + box.h, x0 : x0 + box.w].any():
                    patches.append(y[y0 : y0 + box.h, x0 : x0 + box.w])
                    break
    return patches


def load_variant(config: RunConfig) -> tuple[ModelVariant, list[Path]]:
    if config.models is None:
        raise CliError("config", "no model directory given (--models or models=...)")
    root = Path(config.models)
    need = {
        SAR_AUTO: (TARGET_FILE, BACKGROUND_FILE, PRIOR_FILE),
        SAR_I: (TARGET_FILE, BACKGROUND_FILE, IID_FILE),
        I_AUTO: (IID_FILE, PRIOR_FILE),
    }[config.variant]
    paths = [root / name for name in need]
    for p in paths:
        if not p.exists():
            raise CliError("missing-model", f"{config.variant} needs {p}")
    if config.variant == I_AUTO:
        iid = read_kv(root / IID_FILE)
        target = IidGaussian(float(iid["target_mean"]), float(iid["target_var"]))
        background = IidGaussian(float(iid["background_mean"]), float(iid["background_var"]))
        return ModelVariant(I_AUTO, target, background, AutoParams.load(root / PRIOR_FILE)), paths
    target = SarParams.load(root / TARGET_FILE)
    background = SarParams.load(root / BACKGROUND_FILE)
    if config.variant == SAR_I:
        rate = float(read_kv(root / IID_FILE)["target_rate"])
        return ModelVariant(SAR_I, target, background, rate), paths
    return ModelVariant(SAR_AUTO, target, background, AutoParams.load(root / PRIOR_FILE)), paths


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(kind: str, frames: int, out_dir: str, config: RunConfig) -> Path:
    if frames < 1:
        raise CliError("config", "need at least one frame")
    if kind == "planted":
        data = synth.planted_dataset(frames, 2, config.seed)
        gen = (synth.SCENE_TARGET, synth.SCENE_BACKGROUND)
    elif kind == "distractor":
        data = synth.distractor_dataset(frames, seed=config.seed)
        gen = (synth.SPECKLE_TARGET, synth.SMOOTH_BACKGROUND)
    elif kind in ("sequence", "static-sequence"):
        try:
            data = synth.moving_sequence(frames, config.seed, distractor=kind == "sequence")
        except ValueError as exc:
            raise CliError("config", str(exc)) from None
        gen = (synth.SCENE_TARGET, synth.SCENE_BACKGROUND)
    else:
        raise CliError("config", f"unknown synth kind {kind!r}; expected one of {', '.join(SYNTH_KINDS)}")
    out = _out_dir(out_dir)
    manifest = synth.write_dataset(data, out)
    gen_dir = out / "generator"
    gen_dir.mkdir(exist_ok=True)
    gen[0].save(gen_dir / TARGET_FILE)
    gen[1].save(gen_dir / BACKGROUND_FILE)
    outputs = [manifest] + sorted(out.glob("frame_*"))
    write_run_manifest(out, f"synth {kind}", config, [], outputs)
    return manifest


def cmd_train(manifest: str, out_dir: str, config: RunConfig) -> dict[str, object]:
    frames, _, inputs = load_frames(manifest)
    labels = [f.truth_labels() for f in frames]
    try:
        prior = fit_auto(labels)
    except DegenerateLabelsError as exc:
        raise CliError("degenerate-labels", str(exc)) from None
    target_patches = [np.asarray(f.image)[b.slices()] for f in frames for b in f.truth]
    rng = np.random.default_rng(config.seed)
    bg_patches = background_patches(frames, rng)
    if not bg_patches:
        raise CliError("dataset", "no box-sized background patch fits outside the truth boxes")
    try:
        target = fit_sar(target_patches)
        background = fit_sar(bg_patches)
    except InsufficientSamplesError as exc:
        raise CliError("insufficient-samples", str(exc)) from None

    inside = np.concatenate([np.asarray(f.image)[np.asarray(l) == 1] for f, l in zip(frames, labels)])
    outside = np.concatenate([np.asarray(f.image)[np.asarray(l) == 0] for f, l in zip(frames, labels)])
    g1, g0 = IidGaussian.fit(inside), IidGaussian.fit(outside)
    rate = inside.size / (inside.size + outside.size)

    out = _out_dir(out_dir)
    target.save(out / TARGET_FILE)
    background.save(out / BACKGROUND_FILE)
    prior.save(out / PRIOR_FILE)
    write_kv(
        out / IID_FILE,
        {
            "target_mean": g1.mean,
            "target_var": g1.var,
            "background_mean": g0.mean,
            "background_var": g0.var,
            "target_rate": float(rate),
        },
    )
    outputs = [out / n for n in (TARGET_FILE, BACKGROUND_FILE, PRIOR_FILE, IID_FILE)]
    write_run_manifest(out, "train", config, inputs, outputs)
    return {"target": target, "background": background, "prior": prior, "iid": (g1, g0, rate)}


def _infer(variant: ModelVariant, frame: Frame):
    labels, sweeps = icm_infer(variant, frame.image)
    return labels, ratio_map(variant, frame.image, labels), sweeps


def cmd_detect(manifest: str, out_dir: str, config: RunConfig, save_maps: bool = False):
    frames, ids, inputs = load_frames(manifest)
    variant, model_files = load_variant(config)
    out = _out_dir(out_dir)
    rhos, dets, outputs = [], [], []
    for fid, frame in zip(ids, frames):
        labels, rho, _ = _infer(variant, frame)
        rhos.append(rho)
        dets.append((fid, detect(rho, config.delta, config.min_area)))
        if save_maps:
            rho.save(out / f"{fid}.rho")
            write_label_pgm(out / f"{fid}_labels.pgm", labels)
            outputs += [out / f"{fid}.rho", out / f"{fid}_labels.pgm"]
    ladder = default_ladder(rhos, config.ladder)
    report = build_roc([(r, f.truth) for r, f in zip(rhos, frames)], ladder, config.min_area)
    write_detections_csv(out / "detections.csv", dets)
    report.write_csv(out / "roc.csv")
    outputs += [out / "detections.csv", out / "roc.csv"]
    write_run_manifest(out, "detect", config, inputs + model_files, outputs)
    return report


@dataclass(frozen=True)
class FusionTable:
    """HIT rate and FA per frame before (b) and after (a) fusion, plus background subtraction alone."""

    frames: int
    bgsub_hit: float
    bgsub_fa: float
    hit_b: float
    hit_a: float
    fa_b: float
    fa_a: float

    def format(self) -> str:
        head = f"{'frames':>6}  {'BGsub HIT':>9}  {'BGsub FA':>8}  {'HIT-b':>6}  {'HIT-a':>6}  {'FA-b -> FA-a':>14}"
        row = (
            f"{self.frames:>6}  {100 * self.bgsub_hit:>8.1f}%  {self.bgsub_fa:>8.2f}  "
            f"{100 * self.hit_b:>5.1f}%  {100 * self.hit_a:>5.1f}%  {self.fa_b:>6.2f} -> {self.fa_a:<5.2f}"
        )
        return head + "\n" + row

    def write_csv(self, path: Path) -> None:
        names = [f.name for f in dataclasses.fields(self)]
        vals = [str(getattr(self, n)) if n == "frames" else repr(float(getattr(self, n))) for n in names]
        path.write_text(",".join(names) + "\n" + ",".join(vals) + "\n")


def run_fusion(variant: ModelVariant, frames: Sequence[Frame], config: RunConfig):
    """Score frames 1.. against a KDE built from the frames before them.

    Frame 0 only seeds the history.  Returns the table and, per scored frame,
    the fused detections.
    """
    if len(frames) < 2:
        raise CliError("dataset", f"fusion needs at least 2 frames, got {len(frames)}")
    _check_shapes(frames)
    kde = KdeModel(config.bg_T, config.bg_sigma)
    kde.update(frames[0].image)
    before, after, bg_only, fused_dets = [], [], [], []
    for frame in frames[1:]:
        labels, rho, _ = _infer(variant, frame)
        fg = foreground_mask(kde.background_prob(frame.image), config.bg_tau)
        kde.update(frame.image)
        fused = fuse_and(labels, fg)
        scores = np.asarray(rho)
        d_b = merge_boxes(components_from_mask(labels, scores, config.min_area))
        d_a = merge_boxes(components_from_mask(fused, scores, config.min_area))
        d_bg = merge_boxes(components_from_mask(fg, scores, config.min_area))
        before.append(evaluate_frame(d_b, frame.truth))
        after.append(evaluate_frame(d_a, frame.truth))
        bg_only.append(evaluate_frame(d_bg, frame.truth))
        fused_dets.append(d_a)
    hb, fb = summarize(before)
    ha, fa = summarize(after)
    hg, fg_ = summarize(bg_only)
    return FusionTable(len(before), hg, fg_, hb, ha, fb, fa), fused_dets


def cmd_fuse(manifest: str, out_dir: str, config: RunConfig) -> FusionTable:
    frames, ids, inputs = load_frames(manifest)
    variant, model_files = load_variant(config)
    table, dets = run_fusion(variant, frames, config)
    out = _out_dir(out_dir)
    write_detections_csv(out / "fused_detections.csv", list(zip(ids[1:], dets)))
    table.write_csv(out / "fusion.csv")
    (out / "fusion.txt").write_text(table.format() + "\n")
    outputs = [out / "fused_detections.csv", out / "fusion.csv", out / "fusion.txt"]
    write_run_manifest(out, "fuse", config, inputs + model_files, outputs)
    return table


def cmd_eval(detections: str, manifest: str, out_dir: str, config: RunConfig) -> tuple[float, float]:
    frames, ids, inputs = load_frames(manifest)
    det_path = Path(detections)
    if not det_path.exists():
        raise CliError("io", f"no such detections file: {det_path}")
    try:
        by_frame = read_detections_csv(det_path)
    except ValueError as exc:
        raise CliError("dataset", str(exc)) from None
    unknown = sorted(set(by_frame) - set(ids))
    if unknown:
        raise CliError("dataset", f"detections for frames not in the manifest: {', '.join(unknown)}")
    counts: list[FrameCounts] = [evaluate_frame(by_frame.get(fid, []), f.truth) for fid, f in zip(ids, frames)]
    hit_rate, fa = summarize(counts)
    out = _out_dir(out_dir)
    with open(out / "eval.csv", "w") as fh:
        fh.write("frame_id,hits,misses,false_alarms\n")
        for fid, c in zip(ids, counts):
            fh.write(f"{fid},{c.hits},{c.misses},{c.false_alarms}\n")
        fh.write(f"total,{sum(c.hits for c in counts)},{sum(c.misses for c in counts)},"
                 f"{sum(c.false_alarms for c in counts)}\n")
    write_run_manifest(out, "eval", config, inputs + [det_path], [out / "eval.csv"])
    return hit_rate, fa


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default=".", help="output directory (default: current)")
    p.add_argument("--variant", type=str.lower, choices=[t.lower() for t in (SAR_AUTO, SAR_I, I_AUTO)])
    p.add_argument("--models", help="directory with trained model files")
    p.add_argument("--ladder", type=int, metavar="K", help="number of ROC thresholds")
    p.add_argument("--min-area", type=int, metavar="N", help="smallest component kept, in pixels")
    p.add_argument("--delta", type=float, help="log-rho threshold for the detections CSV")
    p.add_argument("--bg-T", type=int, dest="bg_T", help="KDE history length in frames")
    p.add_argument("--bg-sigma", type=float, dest="bg_sigma", help="KDE bandwidth (intensity levels)")
    p.add_argument("--bg-tau", type=float, dest="bg_tau", help="foreground threshold on background probability")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irmrf", description="SAR/auto-logistic MRF target detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("kind", choices=SYNTH_KINDS)
    p.add_argument("--frames", type=int, default=20)
    _common(p)

    p = sub.add_parser("train", help="fit class SAR models, the label prior and i.i.d. baselines")
    p.add_argument("manifest")
    _common(p)

    p = sub.add_parser("detect", help="ICM, ratio maps, detections and ROC")
    p.add_argument("manifest")
    p.add_argument("--save-maps", action="store_true", help="also write ratio maps and label images")
    _common(p)

    p = sub.add_parser("fuse", help="AND-fuse MRF labels with KDE background subtraction")
    p.add_argument("manifest")
    _common(p)

    p = sub.add_parser("eval", help="score a detections CSV against the truth")
    p.add_argument("detections")
    p.add_argument("manifest")
    _common(p)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, object]:
    keys = ("variant", "models", "ladder", "min_area", "delta", "bg_T", "bg_sigma", "bg_tau", "seed")
    return {k: getattr(args, k) for k in keys}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args.config, _overrides(args))
        if args.command == "synth":
            print(cmd_synth(args.kind, args.frames, args.out_dir, config))
        elif args.command == "train":
            fitted = cmd_train(args.manifest, args.out_dir, config)
            print(f"target {fitted['target']}\nbackground {fitted['background']}\nprior {fitted['prior']}")
        elif args.command == "detect":
            report = cmd_detect(args.manifest, args.out_dir, config, args.save_maps)
            print(f"best hit rate at <=1 FA/frame: {report.best_hit_rate(1.0):.3f}")
        elif args.command == "fuse":
            print(cmd_fuse(args.manifest, args.out_dir, config).format())
        elif args.command == "eval":
            hit, fa = cmd_eval(args.detections, args.manifest, args.out_dir, config)
            print(f"hit_rate={hit!r} fa_per_frame={fa!r}")
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except (ImageError, DatasetError, FileNotFoundError) as exc:
        return _fail("io", str(exc))
    except DegenerateLabelsError as exc:
        return _fail("degenerate-labels", str(exc))
    except (np.linalg.LinAlgError, MonotonicityError) as exc:
        return _fail("numerical", str(exc))
    except ValueError as exc:
        return _fail("invalid-input", str(exc))
    return 0


def _fail(code: str, message: str) -> int:
    print(f"error: {code}: {message}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
