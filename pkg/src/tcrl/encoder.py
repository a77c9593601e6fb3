"""Toy feature encoder: flatten, centre -> Linear -> ReLU -> Linear -> L2 normalize.

The backward pass is written out by hand and includes the Jacobian of the
output normalization. Adam with decoupled weight decay and the warm-up
learning-rate schedule live here too since they only touch encoder params.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_FLOOR = 1e-6
PIXEL_CENTER = 0.5
PARAM_NAMES = ("W1", "b1", "W2", "b2")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 5e-4

LR_START = 3e-4
LR_PEAK = 3e-2
LR_LATE = 3e-3
WARMUP_EPOCHS = 10
DECAY_EPOCH = 31
MAX_EPOCH = 50


class EncoderError(ValueError):
    pass


class NonFiniteGradient(EncoderError):
    pass


@dataclass
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(getattr(self, k).copy() for k in PARAM_NAMES))

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.W2.shape[0]


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "OptimState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.as_dict().items()},
            {k: np.zeros_like(a) for k, a in params.as_dict().items()},
        )


@dataclass
class Cache:
    x: np.ndarray
    pre1: np.ndarray
    hidden: np.ndarray
    z: np.ndarray
    norm: np.ndarray
    features: np.ndarray
    params_id: int = field(default=0)


def init_params(input_dim: int, hidden: int = 128, dim: int = 64, rng=None) -> EncoderParams:
    """Uniform init scaled by fan-in, zero biases."""
    rng = np.random.default_rng(rng)
    a1 = 1.0 / np.sqrt(input_dim)
    a2 = 1.0 / np.sqrt(hidden)
    return EncoderParams(
        rng.uniform(-a1, a1, (hidden, input_dim)),
        np.zeros(hidden),
        rng.uniform(-a2, a2, (dim, hidden)),
        np.zeros(dim),
    )


def _flatten(batch, input_dim: int) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    x = x.reshape(len(x), -1) - PIXEL_CENTER
    if x.shape[1] != input_dim:
        raise EncoderError(f"images flatten to {x.shape[1]} values, encoder expects {input_dim}")
    return x


def encode(params: EncoderParams, batch) -> tuple[np.ndarray, Cache]:
    """Features of shape ``(B, D)`` with unit norm (norm floored at 1e-6)."""
    x = _flatten(batch, params.input_dim)
    pre1 = x @ params.W1.T + params.b1
    hidden = np.maximum(pre1, 0.0)
    z = hidden @ params.W2.T + params.b2
    norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), NORM_FLOOR)
    features = z / norm
    return features, Cache(x, pre1, hidden, z, norm, features, id(params))


def backward(cache: Cache, grad_features, params: EncoderParams) -> EncoderParams:
    """Gradient of ``sum(grad_features * features)`` with respect to every parameter."""
    if cache.params_id != id(params):
        raise EncoderError("cache was produced by a different parameter set")
    g = np.asarray(grad_features, dtype=np.float64)
    if g.shape != cache.features.shape:
        raise EncoderError(f"grad shape {g.shape} != feature shape {cache.features.shape}")
    f = cache.features
    floored = (np.linalg.norm(cache.z, axis=1, keepdims=True) < NORM_FLOOR)
    # d(z/|z|)/dz = (I - f f^T)/|z|; below the floor the map is z/const
    gz = np.where(floored, g, g - f * np.sum(g * f, axis=1, keepdims=True)) / cache.norm
    gW2 = gz.T @ cache.hidden
    gb2 = gz.sum(axis=0)
    gh = gz @ params.W2
    gpre = gh * (cache.pre1 > 0)
    gW1 = gpre.T @ cache.x
    gb1 = gpre.sum(axis=0)
    return EncoderParams(gW1, gb1, gW2, gb2)


def add_grads(a: EncoderParams, b: EncoderParams) -> EncoderParams:
    return EncoderParams(*(getattr(a, k) + getattr(b, k) for k in PARAM_NAMES))


def adam_update(p, g, m, v, step: int, lr: float, weight_decay: float = WEIGHT_DECAY):
    """Array-level Adam update; `step` is the 1-based step count after this update."""
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
    m_hat = m / (1.0 - ADAM_BETA1**step)
    v_hat = v / (1.0 - ADAM_BETA2**step)
    p = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS) - lr * weight_decay * p
    return p, m, v


def adam_step(
    params: EncoderParams,
    grads: EncoderParams,
    state: OptimState,
    lr: float,
    weight_decay: float = WEIGHT_DECAY,
) -> tuple[EncoderParams, OptimState]:
    """One Adam step with decoupled (AdamW-style) weight decay. Inputs are not mutated."""
    for k in PARAM_NAMES:
        if not np.all(np.isfinite(getattr(grads, k))):
            raise NonFiniteGradient(f"non-finite gradient in {k}; parameters not updated")
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k in PARAM_NAMES:
        new_p[k], new_m[k], new_v[k] = adam_update(
            getattr(params, k), getattr(grads, k), state.m[k], state.v[k], step, lr, weight_decay
        )
    return EncoderParams(**new_p), OptimState(new_m, new_v, step)


def lr_at(epoch: int, base: float = LR_PEAK) -> float:
    """Learning rate for a 1-based epoch: linear warm-up to the peak over 10
    epochs, flat until epoch 30, then a tenth of the peak. Scaled by base/3e-2."""
    if not 1 <= epoch <= MAX_EPOCH:
        raise EncoderError(f"epoch {epoch} outside 1..{MAX_EPOCH}")
    if epoch <= WARMUP_EPOCHS:
        lr = LR_START + (LR_PEAK - LR_START) * (epoch - 1) / (WARMUP_EPOCHS - 1)
    elif epoch < DECAY_EPOCH:
        lr = LR_PEAK
    else:
        lr = LR_LATE
    return lr * base / LR_PEAK
