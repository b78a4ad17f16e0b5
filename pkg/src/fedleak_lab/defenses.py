"""Perturbations applied to an outgoing client update.

All functions take and return flat float64 vectors (or a ParameterSet, in
which case the result keeps its layout). They are pure functions of their
inputs and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import ParameterSet

KINDS = ("none", "gaussian-dp", "sparsify", "quantize", "expose")


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    epsilon: float = 100.0
    delta: float = 1e-5
    clip: float = 1.0
    keep_ratio: float = 1.0
    bits: int = 32
    mode: str = "top"
    fraction: float = 1.0
    attach: str = "step"          # DP noise per local step or once per round
    sigma_decay: float = 1.0      # adaptive DP: sigma multiplier per round
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"defense kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "gaussian-dp":
            if not self.epsilon > 0:
                raise ValueError("epsilon must be positive")
            if not 0.0 < self.delta < 1.0:
                raise ValueError("delta must lie in (0, 1)")
            if not self.clip > 0:
                raise ValueError("clip norm must be positive")
            if self.attach not in ("step", "round"):
                raise ValueError("attach must be 'step' or 'round'")
            if not 0.0 < self.sigma_decay <= 1.0:
                raise ValueError("sigma_decay must lie in (0, 1]")
        if self.kind == "sparsify" and not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must lie in (0, 1]")
        if self.kind == "quantize" and not (isinstance(self.bits, (int, np.integer)) and 1 <= self.bits <= 32):
            raise ValueError("bits must be an integer in 1..32")
        if self.kind == "expose":
            if self.mode not in ("top", "bottom"):
                raise ValueError("expose mode must be 'top' or 'bottom'")
            if not 0.0 < self.fraction <= 1.0:
                raise ValueError("fraction must lie in (0, 1]")

    def round_sigma_scale(self, round_index: int) -> float:
        return self.sigma_decay ** round_index


def dp_sigma(epsilon: float, delta: float) -> float:
    """Gaussian-mechanism noise multiplier sqrt(2 ln(1/delta)) / epsilon."""
    if not epsilon > 0 or not 0.0 < delta < 1.0:
        raise ValueError("need epsilon > 0 and 0 < delta < 1")
    return math.sqrt(2.0 * math.log(1.0 / delta)) / epsilon


def _flat(g):
    if isinstance(g, ParameterSet):
        return g.flat(), g
    return np.asarray(g, dtype=np.float64).ravel().copy(), None


def _restore(vec, template, original_shape=None):
    if template is not None:
        return template.unflatten(vec)
    return vec if original_shape is None else vec.reshape(original_shape)


def clip_norm(vec: np.ndarray, clip: float) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm > clip:
        return vec * (clip / norm)
    return vec


def dp_gaussian(g, epsilon: float, delta: float, clip: float, seed: int, sigma_scale: float = 1.0):
    """Clip to L2 norm ``clip`` then add N(0, (sigma * clip)^2) per element."""
    if not clip > 0:
        raise ValueError("clip norm must be positive")
    sigma = dp_sigma(epsilon, delta) * sigma_scale if math.isfinite(epsilon) else 0.0
    vec, tmpl = _flat(g)
    shape = None if tmpl is not None else np.shape(g)
    out = clip_norm(vec, clip)
    if sigma > 0.0:
        out = out + np.random.default_rng(seed).normal(0.0, sigma * clip, size=out.shape)
    return _restore(out, tmpl, shape)


def _ceil_count(fraction: float, n: int) -> int:
    # round() guards against 0.7 * 10 = 7.000000000000001
    return min(n, int(math.ceil(round(fraction * n, 9))))


def magnitude_order(vec: np.ndarray) -> np.ndarray:
    """Indices by decreasing |value|, ties by ascending index."""
    return np.argsort(-np.abs(vec), kind="stable")


def sparsify_topk(g, keep_ratio: float):
    """Keep the ceil(p*n) largest-magnitude elements, zero the rest."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep_ratio must lie in (0, 1]")
    vec, tmpl = _flat(g)
    shape = None if tmpl is not None else np.shape(g)
    keep = magnitude_order(vec)[:_ceil_count(keep_ratio, vec.size)]
    out = np.zeros_like(vec)
    out[keep] = vec[keep]
    return _restore(out, tmpl, shape)


def _quantize_array(a: np.ndarray, bits: int) -> np.ndarray:
    if a.size == 0:
        return a.copy()
    if bits == 1:
        nz = np.abs(a[a != 0])
        scale = float(nz.mean()) if nz.size else 0.0
        return np.sign(a) * scale
    top = float(np.max(np.abs(a)))
    if top == 0.0:
        return np.zeros_like(a)
    half = (2 ** bits - 2) // 2  # levels -half..half, 2^b - 1 in total
    step = top / half
    return np.clip(np.round(a / step), -half, half) * step


def quantize(g, bits: int):
    """Symmetric uniform quantizer with 2^b - 1 levels over [-max|g|, max|g|], per tensor.

    A ParameterSet is quantized entry by entry; a plain array as one tensor.
    One bit keeps the sign and the mean magnitude of the nonzero elements.
    """
    if not 1 <= int(bits) <= 32:
        raise ValueError("bits must lie in 1..32")
    if isinstance(g, ParameterSet):
        return ParameterSet({k: _quantize_array(v, int(bits)) for k, v in g.entries.items()})
    a = np.asarray(g, dtype=np.float64)
    return _quantize_array(a, int(bits))


def expose_partition(g, mode: str, fraction: float):
    """Keep the top or bottom magnitude band and zero the rest.

    Both bands come from one magnitude ordering: ``top`` keeps the first
    ceil(f*n) positions and ``bottom`` keeps the last n - ceil((1-f)*n), so
    top(f) and bottom(1-f) split the indices exactly.
    """
    if mode not in ("top", "bottom"):
        raise ValueError("mode must be 'top' or 'bottom'")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    vec, tmpl = _flat(g)
    shape = None if tmpl is not None else np.shape(g)
    n = vec.size
    order = magnitude_order(vec)
    if mode == "top":
        keep = order[:_ceil_count(fraction, n)]
    else:
        keep = order[_ceil_count(1.0 - fraction, n):]
    out = np.zeros_like(vec)
    out[keep] = vec[keep]
    return _restore(out, tmpl, shape)


def apply_defense(g, config: DefenseConfig, seed: int | None = None, sigma_scale: float = 1.0):
    """Dispatch on ``config.kind``; ``seed`` overrides ``config.seed`` for DP noise."""
    kind = config.kind
    if kind == "none":
        return g
    if kind == "gaussian-dp":
        return dp_gaussian(g, config.epsilon, config.delta, config.clip,
                           config.seed if seed is None else seed, sigma_scale)
    if kind == "sparsify":
        return sparsify_topk(g, config.keep_ratio)
    if kind == "quantize":
        return quantize(g, config.bits)
    return expose_partition(g, config.mode, config.fraction)
