"""Student, teacher and expert sub-networks.

Each branch is an MLP encoder (tanh) followed by a variational head that
emits a diagonal Gaussian latent. Student and teacher classify their latents
with one shared linear head; the expert has its own.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from . import rng as rngmod
from .tensor import ShapeError, Tensor, as_tensor, clamp, exp, linear, mul, add, softmax, tanh

STUDENT, TEACHER, EXPERT = "student", "teacher", "expert"
BRANCHES = (STUDENT, TEACHER, EXPERT)
_ALIASES = {"S": STUDENT, "T": TEACHER, "E": EXPERT}

LOG_STD_MIN, LOG_STD_MAX = -10.0, 10.0
NUM_CLASSES = 2


def branch_name(net: str) -> str:
    net = _ALIASES.get(net, net)
    if net not in BRANCHES:
        raise ValueError(f"unknown branch {net!r}; expected one of {BRANCHES}")
    return net


@dataclass
class EncoderConfig:
    input_dim: int
    hidden_dims: list = field(default_factory=lambda: [64, 64])
    latent_dim: int = 32

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError(f"hidden_dims must be nonempty and positive, got {self.hidden_dims}")
        if self.latent_dim < 2:
            raise ValueError(f"latent_dim must be >= 2, got {self.latent_dim}")


@dataclass
class ModelConfig:
    """Dimensions of all three branches. The latent size is common to all."""

    feature_dim: int
    report_dim: int
    hidden_dims: list = field(default_factory=lambda: [64, 64])
    expert_hidden_dims: list = field(default_factory=lambda: [64, 64])
    latent_dim: int = 32

    def encoder(self, branch: str) -> EncoderConfig:
        branch = branch_name(branch)
        if branch == EXPERT:
            return EncoderConfig(self.report_dim, list(self.expert_hidden_dims), self.latent_dim)
        return EncoderConfig(self.feature_dim, list(self.hidden_dims), self.latent_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class GaussianLatent:
    """Batched diagonal Gaussian: rows are samples. ``eps`` is the recorded noise."""

    mean: Tensor
    log_std: Tensor
    sample: Tensor
    eps: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)


@dataclass
class Prediction:
    logits: Tensor
    probabilities: Tensor

    def __len__(self) -> int:
        return self.logits.shape[0]

    def scores(self) -> np.ndarray:
        """Probability of the positive (vulnerable) class per row."""
        return self.probabilities.data[:, 1].copy()


def prediction_from_logits(logits: Tensor) -> Prediction:
    return Prediction(logits, softmax(logits, axis=1))


class Linear:
    """Affine map with a call counter for access instrumentation."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias
        self.calls = 0

    @classmethod
    def init(cls, in_dim: int, out_dim: int, name: str, seed: int, gain: float = 1.0) -> "Linear":
        limit = gain * np.sqrt(6.0 / (in_dim + out_dim))
        w = rngmod.stream(seed, f"init/{name}.weight").uniform(-limit, limit, size=(in_dim, out_dim))
        return cls(
            Tensor(w, requires_grad=True, name=f"{name}.weight"),
            Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.bias"),
        )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        self.calls += 1
        return linear(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Encoder:
    def __init__(self, layers: list[Linear]):
        self.layers = layers

    @classmethod
    def init(cls, cfg: EncoderConfig, name: str, seed: int) -> "Encoder":
        dims = [cfg.input_dim] + list(cfg.hidden_dims)
        return cls(
            [Linear.init(dims[i], dims[i + 1], f"{name}.layer{i}", seed) for i in range(len(dims) - 1)]
        )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers:
            h = tanh(layer(h))
        return h


class VariationalHead:
    """Linear map to 2*latent_dim outputs read as (mean, log_std)."""

    def __init__(self, proj: Linear):
        if proj.out_dim % 2:
            raise ShapeError("variational head needs an even output width")
        self.proj = proj

    @property
    def latent_dim(self) -> int:
        return self.proj.out_dim // 2

    def __call__(self, h: Tensor, eps: np.ndarray) -> GaussianLatent:
        out = self.proj(h)
        d = self.latent_dim
        mu = out[:, :d]
        log_std = clamp(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)
        sample = add(mu, mul(exp(log_std), Tensor(eps)))
        return GaussianLatent(mu, log_std, sample, eps)


class VmdModel:
    """Parameters of the three branches plus the classification heads.

    ``classifier(STUDENT) is classifier(TEACHER)``: the two branches read
    the same parameter tensors.
    """

    def __init__(
        self,
        config: ModelConfig,
        encoders: dict[str, Encoder],
        heads: dict[str, VariationalHead],
        shared_classifier: Linear,
        expert_classifier: Linear,
    ):
        self.config = config
        self.encoders = encoders
        self.heads = heads
        self.shared_classifier = shared_classifier
        self.expert_classifier = expert_classifier

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "VmdModel":
        encoders, heads = {}, {}
        for b in BRANCHES:
            enc_cfg = config.encoder(b)
            encoders[b] = Encoder.init(enc_cfg, f"{b}_encoder", seed)
            heads[b] = VariationalHead(
                Linear.init(enc_cfg.hidden_dims[-1], 2 * enc_cfg.latent_dim, f"{b}_head", seed)
            )
        L = config.latent_dim
        return cls(
            config,
            encoders,
            heads,
            Linear.init(L, NUM_CLASSES, "shared_classifier", seed),
            Linear.init(L, NUM_CLASSES, "expert_classifier", seed),
        )

    def classifier(self, branch: str) -> Linear:
        return self.expert_classifier if branch_name(branch) == EXPERT else self.shared_classifier

    def modules(self) -> Iterator[tuple[str, Linear]]:
        """Every distinct Linear, keyed by canonical path prefix."""
        for b in BRANCHES:
            for i, layer in enumerate(self.encoders[b].layers):
                yield f"{b}_encoder.layer{i}", layer
            yield f"{b}_head", self.heads[b].proj
        yield "shared_classifier", self.shared_classifier
        yield "expert_classifier", self.expert_classifier

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in self.modules():
            out[f"{prefix}.weight"] = mod.weight
            out[f"{prefix}.bias"] = mod.bias
        return out

    def branch_parameters(self, branch: str) -> dict[str, Tensor]:
        """Parameters a branch reads, including its classifier."""
        branch = branch_name(branch)
        prefixes = (f"{branch}_encoder.", f"{branch}_head.", "expert_classifier." if branch == EXPERT else "shared_classifier.")
        return {k: v for k, v in self.named_parameters().items() if k.startswith(prefixes)}

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def access_counts(self) -> dict[str, int]:
        """Forward calls per parameter group since construction or reset."""
        counts = {}
        for prefix, mod in self.modules():
            group = prefix.split(".")[0]
            counts[group] = counts.get(group, 0) + mod.calls
        return counts

    def reset_access_counts(self) -> None:
        for _, mod in self.modules():
            mod.calls = 0

    # -- forward ---------------------------------------------------------------

    def encode(
        self,
        net: str,
        x,
        rng: Optional[np.random.Generator] = None,
        eps: Optional[np.ndarray] = None,
    ) -> GaussianLatent:
        """Encode a batch [N, input_dim] (or one vector) into a Gaussian latent.

        Noise comes from ``eps`` if given, else from ``rng``; with neither the
        sample equals the mean.
        """
        branch = branch_name(net)
        x = as_tensor(x)
        if x.ndim == 1:
            x = Tensor(x.data.reshape(1, -1))
        encoder = self.encoders[branch]
        if x.ndim != 2 or x.shape[1] != encoder.input_dim:
            raise ShapeError(
                f"{branch} encoder expects input of width {encoder.input_dim}, got shape {x.shape}"
            )
        if not np.all(np.isfinite(x.data)):
            raise ValueError(f"{branch} encoder input contains non-finite values")
        shape = (x.shape[0], self.config.latent_dim)
        if eps is None:
            eps = rng.standard_normal(shape) if rng is not None else np.zeros(shape)
        elif eps.shape != shape:
            raise ShapeError(f"eps shape {eps.shape} != {shape}")
        return self.heads[branch](encoder(x), eps)

    def classify(self, net: str, z: GaussianLatent, mode: str = "sample") -> Prediction:
        if mode not in ("sample", "mean"):
            raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")
        inp = z.sample if mode == "sample" else z.mean
        if inp.shape[1] != self.config.latent_dim:
            raise ShapeError(f"latent width {inp.shape[1]} != {self.config.latent_dim}")
        return prediction_from_logits(self.classifier(net)(inp))


def teacher_input(x_s, mask) -> np.ndarray:
    """Masked view for the teacher: elementwise x_s * mask."""
    x_s = np.asarray(x_s, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if x_s.shape != mask.shape:
        raise ShapeError(f"teacher_input: x_s shape {x_s.shape} != mask shape {mask.shape}")
    if np.any((mask < 0) | (mask > 1)):
        raise ValueError("teacher_input: mask entries must lie in [0, 1]")
    return x_s * mask


# -- checkpoint container ---------------------------------------------------------

MAGIC = b"VMDCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path: Union[str, Path], header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write MAGIC | u64 header length | JSON header | (u64 count | f64[count]) per array.

    All integers and floats are little-endian; arrays follow the order of
    ``header["tensors"]``, which is filled in here.
    """
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            flat = np.ascontiguousarray(v, dtype="<f8").reshape(-1)
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.tobytes())


def read_container(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a VMD checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from None
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')!r}"
        )
    arrays = {}
    for entry in header["tensors"]:
        if len(raw) < pos + 8:
            raise CheckpointError(f"{path}: truncated before tensor {entry['name']}")
        (count,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        expected = int(np.prod(entry["shape"], dtype=np.int64))
        if count != expected or len(raw) < pos + 8 * count:
            raise CheckpointError(f"{path}: tensor {entry['name']} has bad length")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
        pos += 8 * count
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return header, arrays


def save_model(model: VmdModel, path: Union[str, Path], extra_header: Optional[dict] = None,
               extra_arrays: Optional[dict[str, np.ndarray]] = None) -> None:
    arrays = {k: v.data for k, v in model.named_parameters().items()}
    arrays.update(extra_arrays or {})
    header = {"kind": "vmd-model", "model_config": model.config.to_dict()}
    header.update(extra_header or {})
    write_container(path, header, arrays)


def load_parameters(model: VmdModel, arrays: dict[str, np.ndarray]) -> None:
    """Copy stored values into the model's parameter tensors in place."""
    params = model.named_parameters()
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:3]}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {arrays[name].shape} != model shape {p.shape}"
            )
        p.data[...] = arrays[name]
        p.zero_grad()


def load_model(path: Union[str, Path], expect: Optional[ModelConfig] = None) -> tuple[VmdModel, dict, dict]:
    """Rebuild a model from a checkpoint. Returns (model, header, arrays)."""
    header, arrays = read_container(path)
    config = ModelConfig.from_dict(header["model_config"])
    if expect is not None and expect.to_dict() != config.to_dict():
        raise CheckpointError(
            f"checkpoint dims {config.to_dict()} do not match expected {expect.to_dict()}"
        )
    model = VmdModel.init(config, seed=0)
    load_parameters(model, arrays)
    return model, header, arrays
