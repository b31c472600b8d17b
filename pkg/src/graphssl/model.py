"""MLP encoder, feature normalization, classifier and projection heads, EMA.

The encoder is a relu MLP producing features h; an optional layer norm gives
the normalized feature used by both the linear classifier (class
probabilities p) and the two-layer projection head (unit embedding z). The
EMA shadow mirrors every parameter and is the model used for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DimensionError, ParameterError, ValidationError


@dataclass
class ModelConfig:
    input_dim: int = 2
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    proj_hidden: int = 32
    proj_dim: int = 8
    class_count: int = 2
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.proj_dim >= self.feature_dim:
            raise ValidationError(
                f"proj_dim must be smaller than feature_dim, got {self.proj_dim} >= {self.feature_dim}"
            )
        if self.ln_eps <= 0.0:
            raise ParameterError(f"ln_eps must be positive, got {self.ln_eps}")


@dataclass
class EncoderParams:
    layers: list[tuple[Tensor, Tensor]]  # (weight, bias) per layer, relu between
    input_dim: int
    hidden_dims: tuple[int, ...]
    feature_dim: int


@dataclass
class Heads:
    classifier_w: Tensor
    proj_w1: Tensor
    proj_b1: Tensor
    proj_w2: Tensor
    proj_b2: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    ln_eps: float = 1e-5


@dataclass
class ModelParams:
    encoder: EncoderParams
    heads: Heads
    config: ModelConfig

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(self.encoder.layers):
            out[f"encoder.{i}.weight"] = w
            out[f"encoder.{i}.bias"] = b
        h = self.heads
        out["classifier_w"] = h.classifier_w
        out["proj_w1"] = h.proj_w1
        out["proj_b1"] = h.proj_b1
        out["proj_w2"] = h.proj_w2
        out["proj_b2"] = h.proj_b2
        out["ln_gain"] = h.ln_gain
        out["ln_bias"] = h.ln_bias
        return out

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None


# Layer-norm parameters are excluded from weight decay.
NO_DECAY = ("ln_gain", "ln_bias")


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Xavier-uniform weights, zero biases, layer-norm gain 1 / bias 0."""
    dims = [cfg.input_dim, *cfg.hidden_dims, cfg.feature_dim]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        layers.append(
            (
                Tensor(_xavier(rng, fan_in, fan_out), requires_grad=True),
                Tensor(np.zeros(fan_out), requires_grad=True),
            )
        )
    encoder = EncoderParams(layers, cfg.input_dim, tuple(cfg.hidden_dims), cfg.feature_dim)
    heads = Heads(
        classifier_w=Tensor(_xavier(rng, cfg.feature_dim, cfg.class_count), requires_grad=True),
        proj_w1=Tensor(_xavier(rng, cfg.feature_dim, cfg.proj_hidden), requires_grad=True),
        proj_b1=Tensor(np.zeros(cfg.proj_hidden), requires_grad=True),
        proj_w2=Tensor(_xavier(rng, cfg.proj_hidden, cfg.proj_dim), requires_grad=True),
        proj_b2=Tensor(np.zeros(cfg.proj_dim), requires_grad=True),
        ln_gain=Tensor(np.ones(cfg.feature_dim), requires_grad=True),
        ln_bias=Tensor(np.zeros(cfg.feature_dim), requires_grad=True),
        ln_eps=cfg.ln_eps,
    )
    return ModelParams(encoder, heads, cfg)


def forward_features(x: Tensor, params: EncoderParams) -> Tensor:
    """h = MLP(x): relu between layers, no activation after the last."""
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = dc.add(dc.matmul(h, w), b)
        if i != last:
            h = dc.relu(h)
    return h


def feature_normalize(h: Tensor, heads: Heads, enabled: bool = True) -> Tensor:
    """Layer-normalized feature, or h unchanged when the flag is off."""
    if not enabled:
        return h
    return dc.layer_norm(h, heads.ln_gain, heads.ln_bias, heads.ln_eps)


def classify(h_hat: Tensor, classifier_w: Tensor) -> Tensor:
    """Class probabilities: row softmax of h_hat @ W at temperature 1."""
    return dc.softmax_rows(dc.matmul(h_hat, classifier_w), 1.0)


def project(h_hat: Tensor, heads: Heads) -> Tensor:
    """Unit embedding from the two-layer relu projection head."""
    hidden = dc.relu(dc.add(dc.matmul(h_hat, heads.proj_w1), heads.proj_b1))
    raw = dc.add(dc.matmul(hidden, heads.proj_w2), heads.proj_b2)
    return dc.l2_normalize_rows(raw)


# ---------------------------------------------------------------------------
# EMA shadow
# ---------------------------------------------------------------------------


@dataclass
class EmaShadow:
    values: dict[str, np.ndarray]
    decay: float

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ParameterError(f"EMA decay must be in (0, 1), got {self.decay}")


def init_ema(params: ModelParams, decay: float) -> EmaShadow:
    return EmaShadow({name: t.values.copy() for name, t in params.named_parameters().items()}, decay)


def ema_update(shadow: EmaShadow, params: ModelParams) -> None:
    """shadow <- decay * shadow + (1 - decay) * live, elementwise."""
    d = shadow.decay
    for name, tensor in params.named_parameters().items():
        current = shadow.values[name]
        if current.shape != tensor.values.shape:
            raise DimensionError(
                f"EMA shape mismatch for {name}: {current.shape} vs {tensor.values.shape}"
            )
        shadow.values[name] = d * current + (1.0 - d) * tensor.values


def params_from_arrays(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild a (gradient-free) parameter set from named arrays."""
    template = init_model(cfg, np.random.default_rng(0))
    for name, tensor in template.named_parameters().items():
        if name not in arrays:
            raise ValidationError(f"missing parameter array: {name}")
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != tensor.values.shape:
            raise DimensionError(f"array {name} has shape {arr.shape}, expected {tensor.values.shape}")
        tensor.values = arr.copy()
        tensor.requires_grad = False
    return template


def ema_model(shadow: EmaShadow, cfg: ModelConfig) -> ModelParams:
    """Evaluation model built from the EMA arrays."""
    return params_from_arrays(cfg, shadow.values)


# ---------------------------------------------------------------------------
# flatten / unflatten helpers (grad verification, checkpoints)
# ---------------------------------------------------------------------------


def flatten_params(params: ModelParams) -> np.ndarray:
    return np.concatenate([t.values.reshape(-1) for t in params.named_parameters().values()])


def assign_flat(params: ModelParams, flat: np.ndarray) -> None:
    offset = 0
    for tensor in params.named_parameters().values():
        n = tensor.values.size
        tensor.values = flat[offset : offset + n].reshape(tensor.values.shape).copy()
        offset += n
    if offset != flat.size:
        raise DimensionError(f"flat vector has {flat.size} entries, model needs {offset}")
