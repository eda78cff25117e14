"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime or parse failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .bench import bench_scaling
from .checkpoint import model_from_checkpoint, parse_config_text
from .checks import GROUPS, format_results, geo_dead_bias_gradient, timed_suite
from .metrics import MetricsReport, evaluate_case
from .model import ModelConfig, build_model, predict_volume
from .phantom import PhantomSpec, VolumeSample, gen_dataset
from .train import TrainConfig, parse_overrides, train
from .volume_io import export_prediction, read_volume, read_vseg, write_vseg

MANIFEST = "dataset.txt"
SPLITS = ("train", "val", "test")
ABLATION_VARIANTS = (("B", False, False), ("B+BiM", True, False),
                     ("B+GeoAttn", False, True), ("B+BiM+GeoAttn", True, True))
ABLATION_COLUMNS = ("dice", "iou", "recall", "precision", "hd95_mm")


class UsageError(Exception):
    pass


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def write_dataset(out: Path, spec: PhantomSpec, splits: dict[str, list[VolumeSample]], seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"seed={seed}"] + [f"spec.{k}={v}" for k, v in spec.to_dict().items()]
    for split in SPLITS:
        for s in splits[split]:
            write_vseg(s.image, s.spacing, out / f"{s.case_id}.image.vseg")
            write_vseg(s.mask, s.spacing, out / f"{s.case_id}.mask.vseg")
            lines.append(f"case.{s.case_id}={split}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def read_dataset(root: Path) -> tuple[dict[str, str], dict[str, list[VolumeSample]]]:
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise CliError(f"{root} has no {MANIFEST}; create it with `generate`")
    entries = parse_config_text(manifest.read_text())
    splits: dict[str, list[VolumeSample]] = {s: [] for s in SPLITS}
    for key, split in entries.items():
        if not key.startswith("case."):
            continue
        case_id = key[5:]
        if split not in splits:
            raise CliError(f"{manifest}: case {case_id} has unknown split {split!r}")
        image, spacing = read_vseg(root / f"{case_id}.image.vseg")
        mask, _ = read_vseg(root / f"{case_id}.mask.vseg")
        splits[split].append(VolumeSample(image, mask, spacing, case_id))
    return entries, splits


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def split_config(d: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    unknown = sorted(set(d) - MODEL_KEYS - TRAIN_KEYS)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    try:
        mcfg = ModelConfig.from_dict({k: v for k, v in d.items() if k in MODEL_KEYS})
        tcfg = TrainConfig.from_dict({k: v for k, v in d.items() if k in TRAIN_KEYS})
        mcfg.validate()
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}") from None
    return mcfg, tcfg


def gather_config(config_file: str | None, overrides: Sequence[str]) -> dict[str, str]:
    d: dict[str, str] = {}
    if config_file:
        try:
            d.update(parse_config_text(Path(config_file).read_text()))
        except OSError as exc:
            raise CliError(f"cannot read config {config_file}: {exc}") from None
    try:
        d.update(parse_overrides(overrides))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return d


def _spacing_str(spacing) -> str:
    return "x".join(str(float(v)) for v in spacing)


def check_compatibility(ckpt_cfg: dict[str, str], samples: Sequence[VolumeSample]) -> None:
    """Raise ``CliError`` naming the first setting where checkpoint and data disagree."""
    trained = ckpt_cfg.get("train.spacing")
    for s in samples:
        if trained is not None and _spacing_str(s.spacing) != _spacing_str(trained.split("x")):
            raise CliError(f"config conflict: spacing: checkpoint trained at {trained} mm, "
                           f"data case {s.case_id} has {_spacing_str(s.spacing)} mm")
        if s.image.ndim != 3:
            raise CliError(f"config conflict: in_channels: case {s.case_id} is not a single-channel volume")
        k = int(ckpt_cfg.get("num_classes", 2))
        if int(s.mask.max(initial=0)) >= k:
            raise CliError(f"config conflict: num_classes: checkpoint has {k}, "
                           f"case {s.case_id} has label {int(s.mask.max())}")


def _patch_of(ckpt_cfg: dict[str, str]) -> tuple[int, int, int]:
    raw = ckpt_cfg.get("train.patch")
    return TrainConfig.from_dict({"patch": raw}).patch if raw else TrainConfig().patch


def evaluate(model, samples: Sequence[VolumeSample], patch, overlap: float = 0.5) -> MetricsReport:
    report = MetricsReport()
    for s in samples:
        report.add(evaluate_case(s.case_id, predict_volume(model, s.image, patch, overlap), s.mask, s.spacing))
    return report


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec = PhantomSpec()
    if args.spec:
        d = parse_config_text(Path(args.spec).read_text())
        try:
            spec = PhantomSpec.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid phantom spec: {exc}") from None
    tr, va, te = gen_dataset(spec, args.n_train, args.n_val, args.n_test, base_seed=args.seed)
    write_dataset(Path(args.out), spec, {"train": tr, "val": va, "test": te}, args.seed)
    _say(f"wrote {len(tr)}/{len(va)}/{len(te)} train/val/test cases to {args.out}")
    return 0


def cmd_train(args) -> int:
    mcfg, tcfg = split_config(gather_config(args.config, args.overrides))
    _, splits = read_dataset(Path(args.data))
    model = build_model(mcfg, seed=tcfg.seed)
    _say(f"training {mcfg.variant} ({model.num_parameters()} parameters) for {tcfg.epochs} epochs")
    result = train(model, splits["train"], splits["val"], tcfg, progress=None if args.quiet else _say)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "best.bgck").write_bytes(result.best_checkpoint)
    (out / "train_log.csv").write_text(result.log_csv())
    _say(f"best val dice {result.best_val_dice:.4f} at epoch {result.best_epoch}; "
         f"{result.seconds:.1f}s; wrote {out / 'best.bgck'}")
    return 0


def cmd_eval(args) -> int:
    model, ckpt_cfg = model_from_checkpoint(Path(args.checkpoint).read_bytes())
    _, splits = read_dataset(Path(args.data))
    samples = splits[args.split]
    if not samples:
        raise CliError(f"split {args.split!r} is empty")
    check_compatibility(ckpt_cfg, samples)
    report = evaluate(model, samples, _patch_of(ckpt_cfg), args.overlap)
    report.write_csv(args.report)
    _say(f"mean dice {report.mean('dice'):.4f}; hd95 defined on {report.hd95_defined}/{len(samples)}; "
         f"wrote {args.report}")
    return 0


def cmd_predict(args) -> int:
    model, ckpt_cfg = model_from_checkpoint(Path(args.checkpoint).read_bytes())
    volume, spacing = read_volume(args.input)
    mask = predict_volume(model, volume, _patch_of(ckpt_cfg), args.overlap)
    export_prediction(mask, spacing, args.out)
    _say(f"wrote {args.out} ({int(mask.sum())} foreground voxels)")
    return 0


def cmd_gradcheck(args) -> int:
    groups = GROUPS if args.module == "all" else (args.module,)
    results, seconds = timed_suite(groups, seed=args.seed)
    _say(format_results(results, seconds))
    ok = all(r.passed for r in results)
    if "geoattn" in groups:
        dead = geo_dead_bias_gradient(args.seed)
        _say(f"[geoattn] normalised-away biases: max |grad| = {dead:.2e} (expected 0)")
        ok &= dead < 1e-10
    return 0 if ok else 2


def cmd_bench(args) -> int:
    report = bench_scaling(args.depths, args.batch, args.channels, args.height, args.width,
                           repeats=args.repeats, warmup=args.warmup, threads_one=not args.parallel)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    _say(text.rstrip())
    for method in ("bim_scan", "depth_attention"):
        ratios = ", ".join(f"t({d})/t({d // 2})={r:.2f}" for d, r in report.doubling_ratios(method).items())
        _say(f"{method}: {ratios}")
    return 0


def ablation_table(per_variant: dict[str, list[MetricsReport]]) -> str:
    lines = ["variant," + ",".join(ABLATION_COLUMNS)]
    for name, _, _ in ABLATION_VARIANTS:
        vals = []
        for col in ABLATION_COLUMNS:
            pooled = [v for rep in per_variant[name] for v in rep.column(col)]
            vals.append(f"{np.mean(pooled):.4f}" if pooled else "NA")
        lines.append(name + "," + ",".join(vals))
    return "\n".join(lines) + "\n"


def run_ablation(splits, mcfg: ModelConfig, tcfg: TrainConfig, seeds: Sequence[int],
                 variants=ABLATION_VARIANTS, progress=None) -> dict[str, list[MetricsReport]]:
    """Train and test each variant once per seed; all variants share the seed and data."""
    out: dict[str, list[MetricsReport]] = {}
    for name, use_bim, use_geo in variants:
        out[name] = []
        for seed in seeds:
            cfg = ModelConfig(**{**{f.name: getattr(mcfg, f.name) for f in fields(ModelConfig)},
                                 "use_bim": use_bim, "use_geoattn": use_geo})
            tc = TrainConfig(**{**{f.name: getattr(tcfg, f.name) for f in fields(TrainConfig)}, "seed": seed})
            model = build_model(cfg, seed=seed)
            res = train(model, splits["train"], splits["val"], tc)
            best, _ = model_from_checkpoint(res.best_checkpoint)
            rep = evaluate(best, splits["test"], tc.patch, tc.val_overlap)
            out[name].append(rep)
            if progress:
                progress(f"{name} seed={seed}: best val {res.best_val_dice:.2f}, test dice {rep.mean('dice'):.2f}")
    return out


def cmd_ablate(args) -> int:
    mcfg, tcfg = split_config(gather_config(args.config, args.overrides))
    _, splits = read_dataset(Path(args.data))
    seeds = args.seeds if args.seeds else [tcfg.seed]
    results = run_ablation(splits, mcfg, tcfg, seeds, progress=_say)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ablation_table(results)
    (out / "ablation.csv").write_text(table)
    _say(table.rstrip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vesselseg", description="Volumetric dual-lumen vessel segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=30)
    g.add_argument("--n-val", type=int, default=4)
    g.add_argument("--n-test", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec", help="key=value phantom spec file")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--overlap", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment one .vseg or .nii volume")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--overlap", type=float, default=0.5)
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--module", choices=("all",) + GROUPS, default="all")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="depth-scaling benchmark")
    b.add_argument("--depths", type=int, nargs="+", default=[16, 32, 64, 128])
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--channels", type=int, default=32)
    b.add_argument("--height", type=int, default=8)
    b.add_argument("--width", type=int, default=8)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--out", help="also write the CSV here")
    b.add_argument("--parallel", action="store_true",
                   help="let BLAS use all threads (ratios are only meaningful single-threaded)")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="train and compare the four bottleneck variants")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="key=value config file")
    a.add_argument("--seeds", type=int, nargs="+", help="seeds to average over (default: config seed)")
    a.add_argument("overrides", nargs="*", metavar="key=value")
    a.set_defaults(func=cmd_ablate)
    return p


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help
        return int(exc.code or 0)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
