"""Student-only inference, metrics and the ablation harness."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .losses import LossWeights
from .metrics import METRIC_NAMES, MetricReport, compute_metrics, summarize
from .networks import STUDENT, TEACHER, Prediction, VmdModel, branch_name
from .synthdata import Sample, as_arrays, split
from .tensor import no_grad
from .train import TrainConfig, build_model, run_training

__all__ = [
    "AblationSpec",
    "AblationResult",
    "Variant",
    "compute_metrics",
    "infer_branch",
    "infer_student",
    "run_ablation",
]

logger = logging.getLogger(__name__)


def infer_branch(
    model: VmdModel,
    branch: str,
    x,
    mode: str = "mean",
    rng: Optional[np.random.Generator] = None,
) -> Prediction:
    """Forward one branch only, without recording a graph."""
    if mode not in ("mean", "sample"):
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs a seeded rng")
    with no_grad():
        z = model.encode(branch, x, rng=rng if mode == "sample" else None)
        return model.classify(branch, z, mode=mode)


def infer_student(
    model: VmdModel, x_s, mode: str = "mean", rng: Optional[np.random.Generator] = None
) -> Prediction:
    """Diagnose from raw student input alone; no mask, report, teacher or expert."""
    return infer_branch(model, STUDENT, x_s, mode, rng)


# -- ablation ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    name: str
    weights: LossWeights
    branch: str = STUDENT


def _w(alpha, lam) -> LossWeights:
    return LossWeights(alpha=alpha, lam=lam)


STUDENT_VARIANTS = (
    Variant("baseline", _w((0, 0, 0, 1), (0, 1, 0))),
    Variant("w/o teacher", _w((0, 1, 0, 1), (1, 1, 1))),
    Variant("w/o expert", _w((1, 0, 0, 1), (1, 1, 1))),
    Variant("full VMD", _w((1, 1, 1, 1), (1, 1, 1))),
)
TEACHER_VARIANTS = (
    Variant("teacher w/o expert", _w((0, 0, 0, 1), (1, 0, 0)), TEACHER),
    Variant("teacher", _w((0, 0, 1, 1), (1, 0, 1)), TEACHER),
)


@dataclass
class AblationSpec:
    """Named training variants differing only in their loss weights."""

    variants: tuple = STUDENT_VARIANTS + TEACHER_VARIANTS
    test_ratio: float = 1 / 6

    def __post_init__(self):
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variant names: {names}")
        for v in self.variants:
            branch_name(v.branch)

    def select(self, names: Sequence[str]) -> "AblationSpec":
        chosen = tuple(v for v in self.variants if v.name in set(names))
        missing = set(names) - {v.name for v in chosen}
        if missing:
            raise ValueError(f"unknown variants: {sorted(missing)}")
        return AblationSpec(chosen, self.test_ratio)


@dataclass
class AblationResult:
    seeds: list
    reports: dict = field(default_factory=dict)  # variant -> list[MetricReport] (seed order)
    branches: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {name: summarize(reps) for name, reps in self.reports.items()}

    def mean_roc(self, name: str) -> float:
        return self.summary()[name]["roc_auc"]["mean"]

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "columns": list(METRIC_NAMES),
            "rows": [
                {
                    "setting": name,
                    "branch": self.branches[name],
                    **{m: s[m] for m in METRIC_NAMES},
                    "per_seed": [r.to_dict() for r in self.reports[name]],
                }
                for name, s in self.summary().items()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        header = ["Setting", "Branch", "ROC", "Accuracy", "Precision", "Recall", "Fbeta"]
        rows = []
        for name, s in self.summary().items():
            cells = [name, self.branches[name]]
            for m in METRIC_NAMES:
                mu, sd = s[m]["mean"], s[m]["std"]
                cells.append("n/a" if mu is None else f"{mu:.4f}±{sd:.4f}")
            rows.append(cells)
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
        return "\n".join(lines) + "\n"


def _run_one(args) -> tuple[str, int, MetricReport]:
    variant, seed, samples, base_cfg, test_ratio = args
    plan = split(samples, ratio=test_ratio, seed=seed)
    d = base_cfg.to_dict()
    d.update(seed=seed, weights=variant.weights.to_dict(), checkpoint_dir=None)
    cfg = TrainConfig.from_dict(d)
    model = build_model(cfg, samples)
    run_training(model, samples, cfg, plan.train)
    arr = as_arrays(samples, plan.test)
    x = arr.x_s if variant.branch == STUDENT else arr.x_t
    pred = infer_branch(model, variant.branch, x)
    return variant.name, seed, compute_metrics(pred.scores(), arr.labels)


def run_ablation(
    spec: AblationSpec,
    samples: Sequence[Sample],
    seeds: Sequence[int],
    base_cfg: Optional[TrainConfig] = None,
    workers: int = 1,
) -> AblationResult:
    """Train every variant for every seed and score it on that seed's held-out test split.

    Within one seed all variants share the split and the initialization.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("an ablation needs at least 2 seeds for mean±std")
    base_cfg = base_cfg or TrainConfig()
    jobs = [(v, s, samples, base_cfg, spec.test_ratio) for v in spec.variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_one(job))
            logger.info("%s seed %d: roc %s", *results[-1][:2], results[-1][2].roc_auc)
    out = AblationResult(seeds=seeds)
    for v in spec.variants:
        out.branches[v.name] = v.branch
        by_seed = {s: rep for name, s, rep in results if name == v.name}
        out.reports[v.name] = [by_seed[s] for s in seeds]
    return out


def check_trends(result: AblationResult, min_gap: float = 0.02) -> list[tuple[str, bool]]:
    """Ordering checks on mean test ROC AUC; returns (description, passed) pairs."""
    checks = []
    roc = {name: result.mean_roc(name) for name in result.reports}
    if {"baseline", "w/o teacher", "w/o expert", "full VMD"} <= set(roc):
        full, base = roc["full VMD"], roc["baseline"]
        for single in ("w/o teacher", "w/o expert"):
            checks.append((f"full VMD > {single}", full > roc[single]))
            checks.append((f"{single} > baseline", roc[single] > base))
        checks.append((f"full VMD - baseline >= {min_gap}", full - base >= min_gap))
    if {"teacher", "teacher w/o expert"} <= set(roc):
        checks.append(("teacher > teacher w/o expert", roc["teacher"] > roc["teacher w/o expert"]))
    return checks
