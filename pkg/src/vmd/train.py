"""Training loop: joint optimization of student, teacher and expert with Adam."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import rng as rngmod
from .losses import BatchOutputs, LossReport, LossWeights, cross_entropy, global_objective
from .metrics import compute_metrics
from .networks import (
    BRANCHES,
    EXPERT,
    STUDENT,
    TEACHER,
    CheckpointError,
    ModelConfig,
    VmdModel,
    load_parameters,
    read_container,
    teacher_input,
    write_container,
)
from .synthdata import Sample, as_arrays
from .tensor import no_grad

logger = logging.getLogger(__name__)

FULL_SCALE_EPOCHS = 400
FULL_SCALE_LATENT_DIM = 512


class NonFiniteLossError(FloatingPointError):
    """A loss term became NaN or infinite during training."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 1e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 10
    checkpoint_dir: Optional[str] = None
    checkpoint_every: int = 0
    latent_dim: int = 32
    hidden_dims: list = field(default_factory=lambda: [64, 64])
    expert_hidden_dims: list = field(default_factory=lambda: [64, 64])
    similarity_input: str = "logits"
    elbo_expectation: str = "expert_z"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def paper_scale(self) -> "TrainConfig":
        """Copy with the full-scale epoch count (400) and latent size (512)."""
        d = self.to_dict()
        d.update(epochs=FULL_SCALE_EPOCHS, latent_dim=FULL_SCALE_LATENT_DIM)
        return TrainConfig.from_dict(d)

    def model_config(self, feature_dim: int, report_dim: int) -> ModelConfig:
        return ModelConfig(
            feature_dim=feature_dim,
            report_dim=report_dim,
            hidden_dims=list(self.hidden_dims),
            expert_hidden_dims=list(self.expert_hidden_dims),
            latent_dim=self.latent_dim,
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path: Union[str, Path]) -> TrainConfig:
    """Read a TOML config with optional [train], [model], [weights], [loss] sections.

    Top-level keys are accepted too; every TrainConfig field is addressable.
    """
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    flat: dict = {}
    for key, value in raw.items():
        if key == "weights":
            flat["weights"] = value
        elif isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    return TrainConfig.from_dict(flat)


# -- optimizer -----------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, lr: float, weight_decay: float) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Parameters whose ``grad`` is None are left untouched.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"Adam moment shape {m.shape} != parameter {name} shape {p.shape}")
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- training state ----------------------------------------------------------------------

RNG_STREAMS = ("shuffle", "eps/student", "eps/teacher", "eps/expert")


def make_rngs(seed: int) -> dict:
    return {name: rngmod.stream(seed, f"train/{name}") for name in RNG_STREAMS}


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def append(self, entry: dict) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def deterministic_view(self) -> list:
        """Entries without wall-clock fields."""
        return [{k: v for k, v in e.items() if k != "seconds"} for e in self.entries]

    def write_jsonl(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


@dataclass
class TrainState:
    model: VmdModel
    adam: AdamState
    rngs: dict
    epoch: int = 0
    log: TrainLog = field(default_factory=TrainLog)


def new_state(model: VmdModel, cfg: TrainConfig) -> TrainState:
    return TrainState(model=model, adam=AdamState(), rngs=make_rngs(cfg.seed))


def checkpoint(state: TrainState, path: Union[str, Path], cfg: Optional[TrainConfig] = None) -> None:
    """Write model parameters, Adam moments, RNG states and the log so far."""
    arrays = {k: v.data for k, v in state.model.named_parameters().items()}
    for name in sorted(state.adam.m):
        arrays[f"adam.m.{name}"] = state.adam.m[name]
        arrays[f"adam.v.{name}"] = state.adam.v[name]
    train_config = None
    if cfg is not None:
        # the output location is not part of the run; leaving it out keeps
        # checkpoints of identical runs byte-identical wherever they land
        train_config = {k: v for k, v in cfg.to_dict().items() if k != "checkpoint_dir"}
    header = {
        "kind": "vmd-train-state",
        "model_config": state.model.config.to_dict(),
        "train_config": train_config,
        "epoch": state.epoch,
        "adam": {
            "step": state.adam.step,
            "beta1": state.adam.beta1,
            "beta2": state.adam.beta2,
            "eps": state.adam.eps,
        },
        "rng": {k: rngmod.get_state(r) for k, r in state.rngs.items()},
        "log": state.log.deterministic_view(),
    }
    write_container(path, header, arrays)


def restore(path: Union[str, Path], model_config: Optional[ModelConfig] = None) -> TrainState:
    """Inverse of :func:`checkpoint`. ``model_config``, if given, must match."""
    header, arrays = read_container(path)
    if header.get("kind") not in ("vmd-train-state", "vmd-model"):
        raise CheckpointError(f"{path}: unexpected checkpoint kind {header.get('kind')!r}")
    config = ModelConfig.from_dict(header["model_config"])
    if model_config is not None and model_config.to_dict() != config.to_dict():
        raise CheckpointError(
            f"{path}: checkpoint dims {config.to_dict()} do not match {model_config.to_dict()}"
        )
    model = VmdModel.init(config, seed=0)
    load_parameters(model, arrays)
    adam_hdr = header.get("adam", {})
    adam = AdamState(
        beta1=adam_hdr.get("beta1", 0.9),
        beta2=adam_hdr.get("beta2", 0.999),
        eps=adam_hdr.get("eps", 1e-8),
        step=adam_hdr.get("step", 0),
    )
    params = model.named_parameters()
    for key, arr in arrays.items():
        for prefix, target in (("adam.m.", adam.m), ("adam.v.", adam.v)):
            if key.startswith(prefix):
                name = key[len(prefix):]
                if name not in params or params[name].shape != arr.shape:
                    raise CheckpointError(f"{path}: optimizer entry {key} does not fit the model")
                target[name] = arr.copy()
    seed = (header.get("train_config") or {}).get("seed", 0)
    rngs = make_rngs(seed)
    for k, st in header.get("rng", {}).items():
        rngmod.set_state(rngs[k], st)
    return TrainState(model, adam, rngs, epoch=header.get("epoch", 0), log=TrainLog(header.get("log", [])))


# -- the loop ------------------------------------------------------------------------------


def forward_batch(
    model: VmdModel, x_s: np.ndarray, x_t: np.ndarray, x_e: np.ndarray, labels: np.ndarray, rngs: dict
) -> BatchOutputs:
    latents = {
        STUDENT: model.encode(STUDENT, x_s, rng=rngs["eps/student"]),
        TEACHER: model.encode(TEACHER, x_t, rng=rngs["eps/teacher"]),
        EXPERT: model.encode(EXPERT, x_e, rng=rngs["eps/expert"]),
    }
    preds = {b: model.classify(b, latents[b], "sample") for b in BRANCHES}
    expert_via_image = model.classify(STUDENT, latents[EXPERT], "sample")
    return BatchOutputs(latents, preds, expert_via_image, labels)


def _check_finite(report: LossReport) -> None:
    for name, value in report.terms.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss term {name} is non-finite ({value})")
    if not math.isfinite(report.total):
        raise NonFiniteLossError(f"total loss is non-finite ({report.total})")


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = indices[rng.permutation(indices.size)]
    for start in range(0, order.size, batch_size):
        chunk = order[start : start + batch_size]
        # a trailing singleton has no contrastive partner; skip it
        if chunk.size >= 2 or order.size < 2:
            yield chunk


def evaluate_branch(model: VmdModel, branch: str, x: np.ndarray, labels: np.ndarray):
    with no_grad():
        pred = model.classify(branch, model.encode(branch, x), mode="mean")
    return compute_metrics(pred.scores(), labels)


def run_training(
    model: VmdModel,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    train_idx: Optional[Sequence[int]] = None,
    val_idx: Optional[Sequence[int]] = None,
    state: Optional[TrainState] = None,
    log_path: Optional[Union[str, Path]] = None,
    on_step=None,
) -> tuple[VmdModel, TrainLog]:
    """Train all branches jointly for ``cfg.epochs`` epochs.

    Per minibatch: mask the student input for the teacher, encode all three
    branches, evaluate the global objective, backpropagate, and take one Adam
    step. Pass ``state`` (from :func:`restore`) to resume; training then runs
    from ``state.epoch`` up to ``cfg.epochs``. ``on_step(state)`` is called
    after every optimizer step.
    """
    if not samples:
        raise ValueError("training needs a nonempty dataset")
    data = as_arrays(samples)
    dims = (data.x_s.shape[1], data.x_e.shape[1])
    if dims != (model.config.feature_dim, model.config.report_dim):
        raise ValueError(
            f"data dims (feature, report) = {dims} do not match model "
            f"({model.config.feature_dim}, {model.config.report_dim})"
        )
    x_t = teacher_input(data.x_s, data.mask)
    train_idx = np.arange(len(samples)) if train_idx is None else np.asarray(train_idx, dtype=np.int64)
    val_idx = None if val_idx is None or len(val_idx) == 0 else np.asarray(val_idx, dtype=np.int64)
    if state is None:
        state = new_state(model, cfg)
    elif state.model is not model:
        raise ValueError("resume state belongs to a different model")
    params = model.named_parameters()
    log_fh = open(log_path, "a" if state.epoch else "w", encoding="utf-8") if log_path else None
    try:
        while state.epoch < cfg.epochs:
            t0 = time.perf_counter()
            sums: dict = {}
            n_batches = 0
            for idx in _batches(train_idx, cfg.batch_size, state.rngs["shuffle"]):
                batch = forward_batch(model, data.x_s[idx], x_t[idx], data.x_e[idx], data.labels[idx], state.rngs)
                report = global_objective(
                    batch, cfg.weights, cfg.similarity_input, cfg.elbo_expectation
                )
                _check_finite(report)
                model.zero_grad()
                if report.loss.node is not None:
                    report.loss.backward()
                adam_step(params, state.adam, cfg.lr, cfg.weight_decay)
                for k, v in report.as_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
                if on_step is not None:
                    on_step(state)
            state.epoch += 1
            entry = {
                "epoch": state.epoch,
                "steps": state.adam.step,
                "loss": {k: v / max(n_batches, 1) for k, v in sums.items()},
                "val": None,
            }
            if val_idx is not None and cfg.eval_every and state.epoch % cfg.eval_every == 0:
                entry["val"] = evaluate_branch(model, STUDENT, data.x_s[val_idx], data.labels[val_idx]).to_dict()
            entry["seconds"] = time.perf_counter() - t0
            state.log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            logger.debug("epoch %d loss %.5f", state.epoch, entry["loss"].get("total", float("nan")))
            if cfg.checkpoint_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
                checkpoint(state, Path(cfg.checkpoint_dir) / f"epoch_{state.epoch:04d}.vmdckpt", cfg)
    finally:
        if log_fh:
            log_fh.close()
    if cfg.checkpoint_dir:
        Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        checkpoint(state, Path(cfg.checkpoint_dir) / "final.vmdckpt", cfg)
    return model, state.log


def train_student_ce(
    model: VmdModel,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    train_idx: Optional[Sequence[int]] = None,
) -> VmdModel:
    """Plain cross-entropy training of the student branch alone.

    Shares the RNG stream names of :func:`run_training`, so it is the
    reference the objective-reduction check compares against.
    """
    data = as_arrays(samples)
    train_idx = np.arange(len(samples)) if train_idx is None else np.asarray(train_idx, dtype=np.int64)
    rngs = make_rngs(cfg.seed)
    params = model.branch_parameters(STUDENT)
    adam = AdamState()
    for _ in range(cfg.epochs):
        for idx in _batches(train_idx, cfg.batch_size, rngs["shuffle"]):
            z = model.encode(STUDENT, data.x_s[idx], rng=rngs["eps/student"])
            loss = cross_entropy(model.classify(STUDENT, z, "sample"), data.labels[idx])
            for p in params.values():
                p.zero_grad()
            loss.backward()
            adam_step(params, adam, cfg.lr, cfg.weight_decay)
    return model


def build_model(cfg: TrainConfig, samples: Sequence[Sample]) -> VmdModel:
    if not samples:
        raise ValueError("cannot size a model from an empty dataset")
    return VmdModel.init(cfg.model_config(samples[0].x_s.size, samples[0].x_e.size), cfg.seed)
