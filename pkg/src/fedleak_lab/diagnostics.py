"""Analysis instruments for gradient matching.

Curvature/smoothness ratio estimates, step-size convergence checks on
quadratics, the two-point Hessian-vector estimate, the one-dimensional
regularization toy, the magnitude/sensitivity correlation probe, the
gradient uniqueness probe and the min-removal mean property.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autodiff import Tensor, grad, ops
from .models import Model, loss_and_param_grads, traced_param_grads


def mu_l_estimate(x_dummy, x_true, direction) -> tuple[float, float, float]:
    """(mu, L, 2 mu / L) from one dummy point and the direction followed there."""
    x_dummy = np.asarray(x_dummy, dtype=np.float64).ravel()
    x_true = np.asarray(x_true, dtype=np.float64).ravel()
    direction = np.asarray(direction, dtype=np.float64).ravel()
    delta = x_dummy - x_true
    dd = float(delta @ delta)
    if dd == 0.0:
        raise ValueError("mu/L undefined when the dummy equals the ground truth")
    mu = float(delta @ direction) / dd
    lip = float(direction @ direction) / dd
    ratio = 2.0 * mu / lip if lip > 0 else math.inf
    return mu, lip, ratio


# ---------------------------------------------------------------------------
# quadratics


def quadratic_gd(curvature, eta: float, x0: float = 1.0, iterations: int = 1000) -> np.ndarray:
    """Gradient descent path on D(x) = curvature / 2 * x^2."""
    path = np.empty(iterations + 1)
    path[0] = x = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(iterations):
            x = x - eta * curvature * x
            path[i + 1] = x
    return path


def gd_converges(curvature: float, eta: float, x0: float = 1.0, iterations: int = 1000) -> bool:
    """Whether plain GD on the scalar quadratic contracts toward the minimum.

    The iteration is linear, so shrinking over the run is equivalent to a
    contraction factor below one, which resolves step sizes within about
    1e-12 of the boundary.
    """
    path = quadratic_gd(curvature, eta, x0, iterations)
    return bool(np.isfinite(path[-1]) and abs(path[-1]) < abs(x0))


def safe_step_bound(curvature: float) -> float:
    """Largest convergent step 2 mu / L for D(x) = curvature / 2 * x^2.

    Here mu = curvature and L = curvature^2 (L bounds the squared gradient
    norm), so the ratio is 2 / curvature.
    """
    _, _, ratio = mu_l_estimate([1.0], [0.0], [curvature])
    return ratio


def hvp_two_point(grad_fn, x, probe: float) -> np.ndarray:
    """(grad(x + phi) - grad(x)) / probe with phi = probe * d / ||d||, d = grad(x).

    Approximates the Hessian applied to the unit gradient direction.
    """
    x = np.asarray(x, dtype=np.float64)
    d1 = np.asarray(grad_fn(x), dtype=np.float64)
    unit = d1 / np.linalg.norm(d1)
    d2 = np.asarray(grad_fn(x + probe * unit), dtype=np.float64)
    return (d2 - d1) / probe


def regularization_toy(x0: float = 0.5, step: float = 1.0, blend: float = 0.3,
                       iterations: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Minimize x^2 with gradients blended at x and at the next descent point x - step * 2x.

    Returns (path, blended gradients). ``blend = 0`` is plain gradient descent.
    """
    path = [float(x0)]
    mixed = []
    x = float(x0)
    for _ in range(iterations):
        d1 = 2.0 * x
        d2 = 2.0 * (x - step * d1)
        d = d1 + blend * (d2 - d1)
        mixed.append(d)
        x = x - step * d
        path.append(x)
    return np.array(path), np.array(mixed)


def quadratic_estimation_bound(hessian, x_true, x_star) -> tuple[float, float]:
    """For g(x) = A x: returns (||g(x*) - g(x)||, sigma_min * ||x* - x||)."""
    a = np.asarray(hessian, dtype=np.float64)
    diff = np.asarray(x_star, dtype=np.float64) - np.asarray(x_true, dtype=np.float64)
    sigma_min = float(np.linalg.eigvalsh(a).min())
    return float(np.linalg.norm(a @ diff)), sigma_min * float(np.linalg.norm(diff))


# ---------------------------------------------------------------------------
# magnitude / sensitivity correlation


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("need two equal-length series of at least 2 values")
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if na == 0.0 or nb == 0.0:
        raise ValueError("correlation undefined for a constant series")
    return float(da @ db) / (na * nb)


def head_sensitivity(model: Model, params, x, y, include_bias: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """|g'[i]| and sum_j |d g'[i] / d x'[j]| over the head's weight gradient (optionally its bias too)."""
    head = model.head.name
    wanted = {f"{head}.weight"} | ({f"{head}.bias"} if include_bias else set())
    names = [n for n, _ in model.param_shapes]
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    _, grads, _ = traced_param_grads(model, params, xt, y)
    picked = [g for n, g in zip(names, grads) if n in wanted]
    flat = ops.flatten_all(picked)
    mags = np.abs(flat.data)
    sens = np.empty(flat.size)
    for i in range(flat.size):
        elem = ops.index(flat, (i,))
        if not elem.requires_grad:
            sens[i] = 0.0
            continue
        (gx,) = grad(elem, [xt])
        sens[i] = float(np.abs(gx.data).sum())
    return mags, sens


def fisher_correlation(model: Model, params, x, y, include_bias: bool = False) -> float:
    """Pearson r between head weight-gradient magnitude and its input sensitivity."""
    mags, sens = head_sensitivity(model, params, x, y, include_bias)
    return pearson(mags, sens)


# ---------------------------------------------------------------------------
# uniqueness and min-removal


@dataclass
class UniquenessReport:
    trials: int
    min_distance: float
    collisions: int

    @property
    def collided(self) -> bool:
        return self.collisions > 0


COLLISION_TOL = 1e-10


def uniqueness_probe(model: Model, params, x, y, trials: int = 1000, scale: float = 0.1,
                     seed: int = 0) -> UniquenessReport:
    """Gradient distances between ``x`` and random perturbations of it."""
    fcs = [layer for layer in model.layers if layer.kind == "fc"]
    if len(fcs) < 2 or not any(layer.kind == "fc" for layer in model.layers[:2]):
        raise ValueError("probe needs a model starting with at least two fully-connected layers")
    x = np.asarray(x, dtype=np.float64)
    _, g_ref = loss_and_param_grads(model, params, x, y)
    ref = g_ref.flat()
    rng = np.random.default_rng(seed)
    best, hits = math.inf, 0
    for _ in range(trials):
        pert = rng.normal(0.0, scale, size=x.shape)
        while not np.any(pert):
            pert = rng.normal(0.0, scale, size=x.shape)
        _, g = loss_and_param_grads(model, params, x + pert, y)
        d = float(np.linalg.norm(g.flat() - ref))
        best = min(best, d)
        hits += d < COLLISION_TOL
    return UniquenessReport(trials, best, hits)


@dataclass
class MinRemovalVerdict:
    old_mean: Fraction
    new_mean: Fraction
    strict_expected: bool

    @property
    def holds(self) -> bool:
        if self.new_mean < self.old_mean:
            return False
        return not self.strict_expected or self.new_mean > self.old_mean


def theorem3_check(values) -> MinRemovalVerdict:
    """Remove one minimum; the mean must not drop, and must rise if the minimum was below it.

    Means are compared in exact rational arithmetic so rounding cannot fake
    a violation or a strict case.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("need at least two values")
    exact = [Fraction(float(e)) for e in v]
    i = int(np.argmin(v))
    old = sum(exact) / len(exact)
    new = (sum(exact) - exact[i]) / (len(exact) - 1)
    return MinRemovalVerdict(old, new, exact[i] < old)
