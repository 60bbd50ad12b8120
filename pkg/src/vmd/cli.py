"""Command-line entry point: ``vmd synth | train | eval | ablate | gradcheck``.

Every command writes into an output directory holding exactly one
``manifest.json`` that records the inputs needed to reproduce it.
Exit codes: 0 success, 1 usage, 2 data/IO, 3 numeric failure, 4 failed
trend assertion.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

from . import gradcheck as gc
from .eval import AblationSpec, check_trends, infer_branch, run_ablation
from .metrics import compute_metrics
from .rng import stream
from .networks import STUDENT, TEACHER, CheckpointError, load_model
from .synthdata import DatasetFormatError, GeneratorSpec, SplitPlan, as_arrays, generate, load, save, split
from .train import NonFiniteLossError, TrainConfig, build_model, load_config, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_ASSERT = 0, 1, 2, 3, 4

logger = logging.getLogger("vmd")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class RunManifest:
    command: str
    config: dict
    dataset_sha256: Optional[str] = None
    seeds: list = field(default_factory=list)
    version: str = field(default_factory=tool_version)
    outputs: list = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_data(path: str):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset not found: {p}")
    samples = load(p)
    if not samples:
        raise DataError(f"dataset {p} has no records")
    return p, samples


def _train_config(args) -> TrainConfig:
    path = getattr(args, "config", None)
    if path and not Path(path).is_file():
        raise DataError(f"config file not found: {path}")
    try:
        cfg = load_config(path) if path else TrainConfig()
        d = cfg.to_dict()
        for key in ("epochs", "batch_size", "lr", "seed", "latent_dim"):
            value = getattr(args, key, None)
            if value is not None:
                d[key] = value
        cfg = TrainConfig.from_dict(d)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    if getattr(args, "paper_scale", False):
        cfg = cfg.paper_scale()
    return cfg


def _rel(paths, root: Path) -> list:
    return [str(Path(p).relative_to(root)) for p in paths]


# -- commands ----------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = GeneratorSpec(
        n_samples=args.n,
        feature_dim=args.feature_dim,
        report_dim=args.report_dim,
        signal_dims=args.signal_dims,
        mask_noise_dims=args.mask_noise_dims,
        class_balance=args.class_balance,
        noise_scale=args.noise_scale,
        seed=args.seed,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    data_path = out / "dataset.jsonl"
    save(generate(spec), data_path, spec)
    outputs = [data_path, out / "dataset.meta.json"]
    RunManifest("synth", spec.to_dict(), sha256_file(data_path), [spec.seed], outputs=_rel(outputs, out)).write(out)
    print(f"wrote {spec.n_samples} samples to {data_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    data_path, samples = _load_data(args.data)
    cfg = _train_config(args)
    out = _out_dir(args.out)
    plan = split(samples, ratio=args.test_ratio, seed=cfg.seed)
    d = cfg.to_dict()
    d["checkpoint_dir"] = str(out / "checkpoints")
    cfg = TrainConfig.from_dict(d)
    split_path = out / "split.json"
    split_path.write_text(json.dumps(plan.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    log_path = out / "log.jsonl"
    model = build_model(cfg, samples)
    run_training(model, samples, cfg, plan.train, log_path=log_path)
    final = out / "checkpoints" / "final.vmdckpt"
    config = {k: v for k, v in cfg.to_dict().items() if k != "checkpoint_dir"}
    config["test_ratio"] = args.test_ratio
    RunManifest(
        "train", config, sha256_file(data_path), [cfg.seed], outputs=_rel([split_path, log_path, final], out)
    ).write(out)
    print(f"trained {cfg.epochs} epochs; checkpoint {final}")
    return EXIT_OK


def _split_indices(args, n: int) -> list:
    if args.split == "all":
        return list(range(n))
    split_file = Path(args.split_file) if args.split_file else Path(args.checkpoint).resolve().parent.parent / "split.json"
    if not split_file.is_file():
        raise DataError(f"split file not found: {split_file} (pass --split-file or --split all)")
    plan = SplitPlan.from_dict(json.loads(split_file.read_text(encoding="utf-8")))
    idx = plan.train if args.split == "train" else plan.test
    if any(i >= n for i in idx):
        raise DataError(f"split file {split_file} indexes past the dataset size {n}")
    return idx


def cmd_eval(args) -> int:
    data_path, samples = _load_data(args.data)
    try:
        model, _, _ = load_model(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from None
    idx = _split_indices(args, len(samples))
    if not idx:
        raise DataError(f"split {args.split!r} is empty")
    arr = as_arrays(samples, idx)
    branch = STUDENT if args.branch == "student" else TEACHER
    x = arr.x_s if branch == STUDENT else arr.x_t
    rng = stream(args.seed, "eval/eps") if args.mode == "sample" else None
    pred = infer_branch(model, branch, x, args.mode, rng)
    report = compute_metrics(pred.scores(), arr.labels, threshold=args.threshold)
    out = _out_dir(args.out)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = [f"{k}: {v}" for k, v in report.to_dict().items() if k != "errors"]
    text = "\n".join(lines) + "\n"
    (out / "metrics.txt").write_text(text, encoding="utf-8")
    config = {"checkpoint": str(args.checkpoint), "split": args.split, "mode": args.mode,
              "branch": args.branch, "threshold": args.threshold}
    RunManifest("eval", config, sha256_file(data_path), [args.seed],
                outputs=["metrics.json", "metrics.txt"]).write(out)
    sys.stdout.write(text)
    for err in report.errors:
        print(f"warning: {err}", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    seeds = list(args.seeds)
    if len(seeds) < 2:
        raise UsageError("ablation needs at least 2 seeds for mean±std")
    data_path, samples = _load_data(args.data)
    cfg = _train_config(args)
    spec = AblationSpec(test_ratio=args.test_ratio)
    if args.variants:
        try:
            spec = spec.select(args.variants)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    result = run_ablation(spec, samples, seeds, cfg, workers=args.workers)
    out = _out_dir(args.out)
    (out / "ablation.json").write_text(result.to_json() + "\n", encoding="utf-8")
    text = result.to_text()
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    config = cfg.to_dict()
    config.update(variants=[v.name for v in spec.variants], test_ratio=spec.test_ratio)
    RunManifest("ablate", config, sha256_file(data_path), seeds, outputs=["ablation.json", "ablation.txt"]).write(out)
    sys.stdout.write(text)
    if args.assert_trends:
        checks = check_trends(result, args.min_gap)
        for desc, ok in checks:
            print(f"{'PASS' if ok else 'FAIL'}  {desc}")
        if not checks or not all(ok for _, ok in checks):
            return EXIT_ASSERT
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = args.op or None
    if ops:
        unknown = sorted(set(ops) - set(gc.OP_CASES))
        if unknown:
            raise UsageError(f"unknown op(s) {unknown}; registered: {sorted(gc.OP_CASES)}")
    report = gc.run(ops, objective=not args.no_objective and not ops, trials=args.trials, seed=args.seed)
    sys.stdout.write(report.to_text())
    if args.out:
        out = _out_dir(args.out)
        (out / "gradcheck.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        config = {"ops": ops or sorted(gc.OP_CASES), "trials": args.trials}
        RunManifest("gradcheck", config, None, [args.seed], outputs=["gradcheck.json"]).write(out)
    return EXIT_OK if report.passed else EXIT_NUMERIC


# -- parser -----------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_train_flags(p) -> None:
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--test-ratio", type=float, default=1 / 6, help="held-out fraction (default 1/6)")
    p.add_argument("--paper-scale", action="store_true", help="400 epochs, latent size 512")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vmd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    d = GeneratorSpec()
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=d.n_samples)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--feature-dim", type=int, default=d.feature_dim)
    p.add_argument("--report-dim", type=int, default=d.report_dim)
    p.add_argument("--signal-dims", type=int, default=d.signal_dims)
    p.add_argument("--mask-noise-dims", type=int, default=d.mask_noise_dims)
    p.add_argument("--class-balance", type=float, default=d.class_balance)
    p.add_argument("--noise-scale", type=float, default=d.noise_scale)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train all three branches")
    _add_train_flags(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--split-file", help="defaults to split.json of the training run")
    p.add_argument("--branch", choices=("student", "teacher"), default="student")
    p.add_argument("--mode", choices=("mean", "sample"), default="mean")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every variant over several seeds")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", nargs="+", help="subset of variant names")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--assert-trends", action="store_true")
    p.add_argument("--min-gap", type=float, default=0.02)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--op", action="append", help="check only this op (repeatable)")
    p.add_argument("--no-objective", action="store_true")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"vmd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vmd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetFormatError, CheckpointError, OSError) as exc:
        print(f"vmd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"vmd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # what remains are data problems such as dimension mismatches
        print(f"vmd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
