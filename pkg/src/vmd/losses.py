"""Objective terms for student-teacher-expert variational distillation.

Every term is a batch mean. The mutual-information surrogates are quantities
to *maximize*; :func:`global_objective` negates them into one loss to
minimize.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .networks import GaussianLatent, Prediction
from .tensor import (
    ShapeError,
    Tensor,
    add,
    clamp,
    exp,
    log,
    mean,
    mul,
    no_grad,
    pairwise_cosine,
    scale,
    softmax,
    sub,
    tsum,
)

PROB_MIN = 1e-7
PROB_MAX = 1.0 - 1e-7

TERM_NAMES = ("I_ST", "I_SE", "I_TE", "H_cls")


@dataclass
class LossWeights:
    alpha: tuple = (1.0, 1.0, 1.0, 1.0)
    lam: tuple = (1.0, 1.0, 1.0)
    tau: float = 0.5

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        self.lam = tuple(float(v) for v in self.lam)
        self.tau = float(self.tau)
        if len(self.alpha) != 4 or len(self.lam) != 3:
            raise ValueError("alpha needs 4 weights and lam needs 3")
        for w in self.alpha + self.lam:
            if not (math.isfinite(w) and w >= 0):
                raise ValueError(f"loss weights must be finite and >= 0, got {w}")
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be > 0, got {self.tau}")

    def to_dict(self) -> dict:
        return {"alpha": list(self.alpha), "lambda": list(self.lam), "tau": self.tau}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(
            alpha=d.get("alpha", (1, 1, 1, 1)),
            lam=d.get("lambda", d.get("lam", (1, 1, 1))),
            tau=d.get("tau", 0.5),
        )


@dataclass
class BatchOutputs:
    """Forward results of one minibatch.

    ``expert_via_image`` is the shared image classifier applied to the
    expert's sampled latent; it feeds the likelihood part of both ELBO terms.
    """

    latents: dict
    preds: dict
    expert_via_image: Prediction
    labels: np.ndarray

    def __post_init__(self):
        self.labels = _check_labels(self.labels)
        n = len(self.labels)
        if n < 1:
            raise ValueError("batch must contain at least one sample")
        for p in list(self.preds.values()) + [self.expert_via_image]:
            if len(p) != n:
                raise ShapeError(f"prediction batch {len(p)} != label count {n}")


@dataclass
class LossReport:
    """Minimized total plus each objective term as a float."""

    total: float
    terms: dict = field(default_factory=dict)
    loss: Optional[Tensor] = None

    def as_dict(self) -> dict:
        return {"total": self.total, **self.terms}


def _check_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {arr.shape}")
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"labels must be 0 or 1, got {sorted(set(arr.tolist()))}")
    return arr.astype(np.int64)


def _one_hot(labels: np.ndarray) -> np.ndarray:
    out = np.zeros((labels.size, 2))
    out[np.arange(labels.size), labels] = 1.0
    return out


def gaussian_kld(q: GaussianLatent, p: GaussianLatent, reduction: str = "mean") -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over latent dims.

    ``reduction`` is "mean" (over the batch, a scalar) or "none" (one value per row).
    """
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"gaussian_kld: latent shapes {q.mean.shape} and {p.mean.shape} differ")
    # log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2
    var_ratio = exp(scale(sub(q.log_std, p.log_std), 2.0))
    diff = sub(q.mean, p.mean)
    mahal = mul(mul(diff, diff), exp(scale(p.log_std, -2.0)))
    per_dim = add(sub(p.log_std, q.log_std), scale(add(var_ratio, mahal), 0.5))
    per_dim = sub(per_dim, 0.5)
    per_row = tsum(per_dim, axis=1)
    if reduction == "none":
        return per_row
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return mean(per_row)


def log_likelihood(pred: Prediction, labels) -> Tensor:
    """Batch mean of log p(true class), probabilities clamped to [1e-7, 1-1e-7]."""
    labels = _check_labels(labels)
    if len(pred) != labels.size:
        raise ShapeError(f"{len(pred)} predictions for {labels.size} labels")
    logp = log(clamp(pred.probabilities, PROB_MIN, PROB_MAX))
    return scale(tsum(mul(logp, Tensor(_one_hot(labels)))), 1.0 / labels.size)


def cross_entropy(pred: Prediction, labels) -> Tensor:
    return scale(log_likelihood(pred, labels), -1.0)


def elbo_term(
    expert_z: GaussianLatent,
    image_prior: GaussianLatent,
    image_pred_with_expert_z: Prediction,
    labels,
) -> Tensor:
    """Single-draw ELBO: log p(y | image head applied to z_E) - KL(q_E || p_image)."""
    return sub(log_likelihood(image_pred_with_expert_z, labels), gaussian_kld(expert_z, image_prior))


def _similarity_input(pred: Prediction, use: str) -> Tensor:
    if use == "logits":
        return pred.logits
    if use == "probs":
        return pred.probabilities
    raise ValueError(f"similarity_input must be 'logits' or 'probs', got {use!r}")


def similarity_matrix(
    anchors: Prediction, candidates: Prediction, tau: float, use: str = "logits"
) -> Tensor:
    """M[j, k] = softmax_k(cos(anchor_j, candidate_k) / tau)."""
    if len(candidates) < 1:
        raise ValueError("similarity model needs at least one candidate")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    cos = pairwise_cosine(_similarity_input(anchors, use), _similarity_input(candidates, use))
    return softmax(scale(cos, 1.0 / tau), axis=1)


def similarity_model(
    anchor: Prediction, candidates: Prediction, i: int, tau: float, use: str = "logits"
) -> Tensor:
    """M(anchor, candidate_i) for a single-row anchor prediction."""
    if len(candidates) < 1:
        raise ValueError("similarity model needs at least one candidate")
    if len(anchor) != 1:
        raise ShapeError(f"anchor must hold exactly one prediction, got {len(anchor)}")
    if not 0 <= i < len(candidates):
        raise IndexError(f"candidate index {i} out of range for {len(candidates)} candidates")
    return similarity_matrix(anchor, candidates, tau, use)[0, i]


def contrastive_mi(
    anchor_preds: Prediction,
    candidate_preds: Prediction,
    labels,
    tau: float,
    use: str = "logits",
) -> Tensor:
    """Label-supervised InfoNCE-style MI surrogate (to be maximized).

    For each anchor j: sum of log M over same-class candidates (j itself
    included) plus sum of log(1 - M) over other-class candidates, averaged
    over anchors. M is clamped to [1e-7, 1-1e-7].
    """
    labels = _check_labels(labels)
    n = labels.size
    if len(anchor_preds) != n or len(candidate_preds) != n:
        raise ShapeError(
            f"contrastive_mi: {len(anchor_preds)} anchors, {len(candidate_preds)} candidates, {n} labels"
        )
    if n < 1:
        raise ValueError("contrastive_mi needs at least one sample")
    M = clamp(similarity_matrix(anchor_preds, candidate_preds, tau, use), PROB_MIN, PROB_MAX)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    pos = tsum(mul(log(M), Tensor(same)))
    total = pos
    if not same.all():
        neg = tsum(mul(log(sub(1.0, M)), Tensor(1.0 - same)))
        total = add(pos, neg)
    return scale(total, 1.0 / n)


def teacher_constraint(
    expert_z: GaussianLatent,
    teacher_prior: GaussianLatent,
    teacher_pred_with_expert_z: Prediction,
    labels,
    teacher_preds: Prediction,
    expert_preds: Prediction,
    tau: float,
    use: str = "logits",
) -> Tensor:
    """Teacher-expert term: ELBO against the teacher prior plus contrastive MI
    with teacher anchors and expert candidates."""
    return add(
        elbo_term(expert_z, teacher_prior, teacher_pred_with_expert_z, labels),
        contrastive_mi(teacher_preds, expert_preds, labels, tau, use),
    )


def h_cls(
    preds_T: Prediction, preds_S: Prediction, preds_E: Prediction, labels, lam: Sequence[float]
) -> Tensor:
    """lam1*CE(T) + lam2*CE(S) + lam3*CE(E). Zero-weight terms are left off the graph."""
    labels = _check_labels(labels)
    total: Optional[Tensor] = None
    for w, pred in zip(lam, (preds_T, preds_S, preds_E)):
        if w == 0:
            continue
        term = scale(cross_entropy(pred, labels), w)
        total = term if total is None else add(total, term)
    return Tensor(0.0) if total is None else total


def _term_values(batch: BatchOutputs, weights: LossWeights, use: str, elbo_expectation: str):
    S, T, E = "student", "teacher", "expert"
    z, p, y = batch.latents, batch.preds, batch.labels
    if elbo_expectation == "expert_z":
        like_S = like_T = batch.expert_via_image
    elif elbo_expectation == "student_z":
        like_S, like_T = p[S], p[T]
    else:
        raise ValueError(f"elbo_expectation must be 'expert_z' or 'student_z', got {elbo_expectation!r}")
    return {
        "I_ST": lambda: contrastive_mi(p[T], p[S], y, weights.tau, use),
        "I_SE": lambda: elbo_term(z[E], z[S], like_S, y),
        "I_TE": lambda: teacher_constraint(z[E], z[T], like_T, y, p[T], p[E], weights.tau, use),
        "H_cls": lambda: h_cls(p[T], p[S], p[E], y, weights.lam),
    }


def global_objective(
    batch: BatchOutputs,
    weights: LossWeights,
    similarity_input: str = "logits",
    elbo_expectation: str = "expert_z",
    report_inactive: bool = True,
) -> LossReport:
    """Loss to minimize: -(a1*I_ST + a2*I_SE + a3*I_TE) + a4*H_cls.

    Terms with zero weight are evaluated off the graph (for the report only)
    so they contribute nothing to any gradient. The report also carries the
    two KL divergences.
    """
    makers = _term_values(batch, weights, similarity_input, elbo_expectation)
    signs = {"I_ST": -1.0, "I_SE": -1.0, "I_TE": -1.0, "H_cls": 1.0}
    terms: dict[str, float] = {}
    loss: Optional[Tensor] = None
    for name, a in zip(TERM_NAMES, weights.alpha):
        if a == 0:
            if report_inactive:
                with no_grad():
                    terms[name] = makers[name]().item()
            continue
        value = makers[name]()
        terms[name] = value.item()
        piece = scale(value, signs[name] * a)
        loss = piece if loss is None else add(loss, piece)
    if loss is None:
        loss = Tensor(0.0)
    if report_inactive:
        with no_grad():
            terms["kld_SE"] = gaussian_kld(batch.latents["expert"], batch.latents["student"]).item()
            terms["kld_TE"] = gaussian_kld(batch.latents["expert"], batch.latents["teacher"]).item()
    return LossReport(total=loss.item(), terms=terms, loss=loss)


def combine(terms: dict, weights: LossWeights) -> float:
    """Recompute the minimized total from reported term values."""
    a1, a2, a3, a4 = weights.alpha
    return -(a1 * terms["I_ST"] + a2 * terms["I_SE"] + a3 * terms["I_TE"]) + a4 * terms["H_cls"]
