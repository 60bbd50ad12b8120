"""Finite-difference verification of every differentiable op and of the full objective."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .losses import BatchOutputs, LossWeights, global_objective
from .networks import BRANCHES, EXPERT, STUDENT, TEACHER, ModelConfig, VmdModel, teacher_input
from .rng import stream
from .synthdata import GeneratorSpec, as_arrays, generate
from .tensor import Tensor, gradient_check

TOLERANCE = 1e-4

# Each case wraps the op in a smooth scalar readout. Fixed readout weights
# are drawn once per check so f stays the same function across perturbations.


def _case(name: str, shapes: Sequence[tuple], f: Callable, readout: Optional[tuple] = None):
    return name, (tuple(shapes), f, readout)


def _cases() -> dict:
    return dict(
        [
            _case("add", [(3, 2), (3, 2)], lambda w, a, b: T.tsum(T.tanh(T.add(a, b)))),
            _case("sub", [(3, 2), (3, 2)], lambda w, a, b: T.tsum(T.tanh(T.sub(a, b)))),
            _case("mul", [(3, 2), (3, 2)], lambda w, a, b: T.tsum(T.mul(a, b))),
            _case("div", [(3, 2), (3, 2)], lambda w, a, b: T.tsum(T.div(a, T.add(T.exp(b), 0.5)))),
            _case("scale", [(5,)], lambda w, a: T.tsum(T.tanh(T.scale(a, -1.7)))),
            _case("exp", [(4,)], lambda w, a: T.tsum(T.exp(a))),
            _case("log", [(4,)], lambda w, a: T.tsum(T.log(T.add(T.mul(a, a), 0.3)))),
            _case("tanh", [(4,)], lambda w, a: T.tsum(T.tanh(a))),
            _case("relu", [(6,)], lambda w, a: T.tsum(T.mul(T.relu(a), a))),
            _case("clamp", [(6,)], lambda w, a: T.tsum(T.mul(T.clamp(a, -0.5, 0.5), a))),
            _case("matmul", [(3, 4), (4, 2)], lambda w, a, b: T.tsum(T.tanh(T.matmul(a, b)))),
            _case("linear", [(3, 4), (4, 2), (2,)], lambda w, x, W, b: T.tsum(T.tanh(T.linear(x, W, b)))),
            _case("sum", [(3, 4)], lambda w, a: T.tsum(T.tanh(T.tsum(a, axis=1)))),
            _case("mean", [(3, 4)], lambda w, a: T.tsum(T.tanh(T.mean(a, axis=0)))),
            _case("getitem", [(3, 4)], lambda w, a: T.tsum(T.tanh(a[:, 1:]))),
            _case("reshape", [(2, 3)], lambda w, a: T.tsum(T.tanh(T.reshape(a, (6,))))),
            _case("transpose", [(2, 3)], lambda w, a: T.tsum(T.mul(T.transpose(a), w)), (3, 2)),
            _case("softmax", [(3, 4)], lambda w, a: T.tsum(T.mul(T.softmax(a, axis=1), w)), (3, 4)),
            _case(
                "cosine_similarity",
                [(3, 4), (3, 4)],
                lambda w, a, b: T.tsum(T.mul(T.cosine_similarity(a, b), w)),
                (3,),
            ),
            _case(
                "pairwise_cosine",
                [(3, 4), (2, 4)],
                lambda w, a, b: T.tsum(T.mul(T.pairwise_cosine(a, b), w)),
                (3, 2),
            ),
        ]
    )


OP_CASES = _cases()


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    trials: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def worst(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    def to_dict(self) -> dict:
        return {
            "tolerance": TOLERANCE,
            "passed": self.passed,
            "results": [
                {"name": r.name, "max_rel_error": r.max_rel_error, "trials": r.trials,
                 "seconds": r.seconds, "passed": r.passed}
                for r in self.results
            ],
        }

    def to_text(self) -> str:
        width = max((len(r.name) for r in self.results), default=4)
        lines = [
            f"{r.name.ljust(width)}  {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}"
            for r in self.results
        ]
        return "\n".join(lines) + "\n"


def check_op(name: str, trials: int = 10, seed: int = 0) -> CheckResult:
    """Gradcheck one registered op on ``trials`` random inputs."""
    if name not in OP_CASES:
        raise KeyError(f"unknown op {name!r}; registered: {sorted(OP_CASES)}")
    shapes, f, readout = OP_CASES[name]
    r = stream(seed, f"gradcheck/{name}")
    w = Tensor(r.standard_normal(readout)) if readout else None
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        inputs = [Tensor(r.standard_normal(s), requires_grad=True) for s in shapes]
        worst = max(worst, gradient_check(lambda *xs: f(w, *xs), *inputs))
    return CheckResult(name, worst, trials, time.perf_counter() - t0)


def objective_batch(seed: int = 0, n: int = 4):
    """A small synthetic batch with both classes present."""
    spec = GeneratorSpec(n_samples=4 * n, feature_dim=12, report_dim=6, signal_dims=3, mask_noise_dims=4, seed=seed)
    data = as_arrays(generate(spec))
    pos, neg = np.flatnonzero(data.labels == 1), np.flatnonzero(data.labels == 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError(f"seed {seed} produced a single-class pool; pick another")
    k = min(n // 2, neg.size)
    idx = np.sort(np.concatenate([neg[:k], pos[: n - k]]))
    return data.x_s[idx], teacher_input(data.x_s[idx], data.mask[idx]), data.x_e[idx], data.labels[idx]


def check_objective(seed: int = 0, weights: Optional[LossWeights] = None) -> CheckResult:
    """Gradcheck the full objective with respect to every model parameter at once.

    The reparameterization noise is drawn once and held fixed, so the
    objective is a deterministic function of the parameters.
    """
    x_s, x_t, x_e, labels = objective_batch(seed)
    cfg = ModelConfig(feature_dim=x_s.shape[1], report_dim=x_e.shape[1], hidden_dims=[8, 8],
                      expert_hidden_dims=[8, 8], latent_dim=4)
    model = VmdModel.init(cfg, seed)
    r = stream(seed, "gradcheck/objective")
    eps = {b: r.standard_normal((labels.size, cfg.latent_dim)) for b in BRANCHES}
    weights = weights or LossWeights()

    def f(*_params):
        z = {
            STUDENT: model.encode(STUDENT, x_s, eps=eps[STUDENT]),
            TEACHER: model.encode(TEACHER, x_t, eps=eps[TEACHER]),
            EXPERT: model.encode(EXPERT, x_e, eps=eps[EXPERT]),
        }
        preds = {b: model.classify(b, z[b]) for b in BRANCHES}
        batch = BatchOutputs(z, preds, model.classify(STUDENT, z[EXPERT]), labels)
        return global_objective(batch, weights, report_inactive=False).loss

    params = list(model.named_parameters().values())
    t0 = time.perf_counter()
    err = gradient_check(f, *params)
    return CheckResult("objective", err, 1, time.perf_counter() - t0)


def run(ops: Optional[Sequence[str]] = None, objective: bool = True, trials: int = 10, seed: int = 0) -> GradcheckReport:
    names = sorted(OP_CASES) if not ops else list(ops)
    report = GradcheckReport([check_op(n, trials, seed) for n in names])
    if objective:
        report.results.append(check_objective(seed))
    return report
