"""Shared numeric primitives: grids, poses, losses with closed-form gradients, seeded RNG."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class CodeAlignError(Exception):
    """Base class. ``exit_code`` is what the CLI returns for this failure."""

    exit_code = 1


class ShapeError(CodeAlignError, ValueError):
    exit_code = 2


class ConfigError(CodeAlignError, ValueError):
    exit_code = 2


class MissingArtifactError(CodeAlignError, FileNotFoundError):
    exit_code = 3


class ConstraintError(CodeAlignError):
    exit_code = 4


class IsolationViolation(ConstraintError):
    pass


class DataError(CodeAlignError):
    exit_code = 5


class NumericError(CodeAlignError):
    exit_code = 5


class CorruptionError(CodeAlignError):
    exit_code = 5


# ---------------------------------------------------------------- grids

def check_feature_map(F: np.ndarray, name: str = "feature map") -> np.ndarray:
    """Validate an (H, W, C) grid; returns it as float64."""
    F = np.asarray(F)
    if F.ndim != 3:
        raise ShapeError(f"{name} must be (H, W, C), got shape {F.shape}")
    if min(F.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {F.shape}")
    F = F.astype(np.float64, copy=False)
    if not np.all(np.isfinite(F)):
        raise NumericError(f"{name} contains non-finite entries")
    return F


def check_detection_map(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ShapeError(f"detection map must be (H, W), got {S.shape}")
    if not np.all(np.isfinite(S)) or S.min(initial=0.0) < 0.0 or S.max(initial=0.0) > 1.0:
        raise NumericError("detection scores must be finite and within [0, 1]")
    return S


def wrap_angle(theta: float) -> float:
    """Normalise to (-pi, pi]."""
    if -math.pi < theta <= math.pi:
        return theta
    t = math.fmod(theta + math.pi, 2.0 * math.pi)
    if t <= 0.0:
        t += 2.0 * math.pi
    return t - math.pi


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise NumericError(f"non-finite pose {self!r}")
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.heading]

    @classmethod
    def from_list(cls, v) -> "Pose":
        return cls(float(v[0]), float(v[1]), float(v[2]))


ORIGIN = Pose()


# ---------------------------------------------------------------- rng

def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``.

    Streams depend only on the key tuple, never on call order, so scenes and
    agents can be generated in any order (or in parallel) with identical results.
    """
    if seed < 0 or seed >= 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def name_key(name: str) -> int:
    """Stable integer key for a string (Python's hash() is salted per process)."""
    h = 1469598103934665603
    for b in name.encode("utf-8"):
        h = ((h ^ b) * 1099511628211) % 2**64
    return h % 2**32


# ---------------------------------------------------------------- losses

def smooth_l1(a, b, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean Smooth-L1 between ``a`` and ``b`` and its gradient w.r.t. ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"smooth_l1 shape mismatch: {a.shape} vs {b.shape}")
    if not beta > 0:
        raise ConfigError("beta must be positive")
    if a.size == 0:
        return 0.0, np.zeros_like(a)
    d = a - b
    ad = np.abs(d)
    quad = ad < beta
    elem = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d)) / d.size
    return float(elem.mean()), grad


def l2_loss(a, b) -> tuple[float, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"l2 shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0, np.zeros_like(a)
    d = a - b
    return float(np.mean(d * d)), 2.0 * d / d.size


def cosine_loss(a, b, eps: float = 1e-12) -> tuple[float, np.ndarray]:
    """Mean over rows (last axis = vector) of 1 - cos(a, b); gradient w.r.t. ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    A = a.reshape(-1, a.shape[-1])
    B = b.reshape(-1, b.shape[-1])
    n = A.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(a)
    na = np.linalg.norm(A, axis=1, keepdims=True) + eps
    nb = np.linalg.norm(B, axis=1, keepdims=True) + eps
    cos = np.sum(A * B, axis=1, keepdims=True) / (na * nb)
    grad = -(B / (na * nb) - cos * A / (na * na)) / n
    return float(np.mean(1.0 - cos)), grad.reshape(a.shape)


SIMILARITY_LOSSES = {"smooth_l1": smooth_l1, "l2": l2_loss, "cosine": cosine_loss}


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits, target: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of one logit vector against a class index."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ShapeError("logits must be a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericError("logits must be finite")
    if not 0 <= target < z.size:
        raise IndexError(f"target {target} out of range for {z.size} classes")
    m = z.max()
    lse = m + math.log(float(np.sum(np.exp(z - m))))
    p = np.exp(z - lse)
    grad = p.copy()
    grad[target] -= 1.0
    return float(lse - z[target]), grad


def sigmoid(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logistic_loss(s: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on logits ``s``; returns gradient w.r.t. ``s``.

    Two-class special case of softmax_xent with logits (0, s).
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if s.shape != y.shape:
        raise ShapeError(f"logistic shape mismatch: {s.shape} vs {y.shape}")
    # log(1 + exp(-|s|)) + max(s, 0) - y*s
    elem = np.logaddexp(0.0, s) - y * s
    g = sigmoid(s) - y
    if weights is None:
        n = max(s.size, 1)
        return float(elem.sum() / n), g / n
    w = np.asarray(weights, dtype=np.float64)
    tot = max(float(w.sum()), 1e-12)
    return float((elem * w).sum() / tot), g * w / tot


# ---------------------------------------------------------------- optimisation

def sgd_step(params, grads, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError(f"params/grads length mismatch: {params.shape} vs {grads.shape}")
    if not lr > 0:
        raise ConfigError("learning rate must be positive")
    return params - lr * grads
