"""Optimization-based reconstruction of client images from parameter gradients.

``fedleak_attack`` matches only the largest-magnitude gradient elements
(re-selected every iteration from the dummy gradients) with an L1 + cosine
distance, regularizes through a two-point gradient blend, and projects the
dummy images onto [0, 1] after each adaptive-moment step. ``baseline_attack``
runs the same loop with full L2 or cosine matching.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tensor, glt, grad, ops
from .diagnostics import mu_l_estimate
from .models import Model, traced_param_grads

log = logging.getLogger(__name__)

BASELINES = ("fedleak", "l2", "cosine")
SCHEDULES = ("constant", "cosine-annealing")


@dataclass
class AttackConfig:
    eta: float = 1e-4
    iterations: int = 10000
    blend: float = 0.7
    probe: float = 1e-3
    ratio: float = 50.0
    tv_weight: float = 1e-5
    act_weight: float = 1e-4
    restarts: int = 1
    schedule: str = "constant"
    period: int = 1000
    baseline: str = "fedleak"
    refine_labels: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")
        if not 0.0 < self.ratio <= 100.0:
            raise ValueError("ratio must lie in (0, 100]")
        if self.probe == 0:
            raise ValueError("probe length must be non-zero")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.period < 1:
            raise ValueError("period must be at least 1")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")


@dataclass
class ReconTrace:
    x: np.ndarray
    labels: np.ndarray
    distance: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    lipschitz: list = field(default_factory=list)
    ratio: list = field(default_factory=list)
    final_distance: float = math.nan
    restart: int = 0
    flags: list = field(default_factory=list)
    aborted: list = field(default_factory=list)

    def __len__(self):
        return len(self.distance)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "distance", "grad_norm", "mu", "L", "two_mu_over_L"])
            for i in range(len(self.distance)):
                w.writerow([i, repr(self.distance[i]), repr(self.grad_norm[i]),
                            repr(self.mu[i]), repr(self.lipschitz[i]), repr(self.ratio[i])])

    def save(self, directory, pgm: bool = True) -> list[Path]:
        """Trace CSV, final images and labels as GLT1, plus optional PGM/PPM dumps."""
        from .harness.images import write_image

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = [d / "trace.csv", d / "recon.glt", d / "labels.glt"]
        self.write_csv(files[0])
        glt.save(files[1], self.x)
        glt.save(files[2], self.labels)
        if pgm:
            for i, img in enumerate(self.x):
                files.append(write_image(d / f"recon_{i:02d}", img))
        return files


# ---------------------------------------------------------------------------
# distance pieces


def top_magnitude_order(values) -> np.ndarray:
    """Indices sorted by decreasing magnitude; equal magnitudes keep ascending index."""
    return np.argsort(-np.abs(np.asarray(values, dtype=np.float64).ravel()), kind="stable")


def _ceil_count(fraction: float, n: int) -> int:
    return min(n, int(math.ceil(round(fraction * n, 9))))


def top_k_mask(values, count: int) -> np.ndarray:
    """Boolean mask of the ``count`` largest-magnitude entries; ties go to lower indices."""
    mag = np.abs(np.asarray(values, dtype=np.float64).ravel())
    n = mag.size
    mask = np.zeros(n, dtype=bool)
    if count <= 0:
        return mask
    if count >= n:
        mask[:] = True
        return mask
    threshold = np.partition(mag, n - count)[n - count]
    mask = mag > threshold
    short = count - int(mask.sum())
    if short > 0:
        mask[np.flatnonzero(mag == threshold)[:short]] = True
    return mask


def select_indices(g, ratio: float) -> np.ndarray:
    """Ascending indices of the ceil(ratio/100 * n) largest-|g| elements."""
    if not 0.0 < ratio <= 100.0:
        raise ValueError("ratio must lie in (0, 100]")
    g = g.data if isinstance(g, Tensor) else np.asarray(g)
    return np.flatnonzero(top_k_mask(g, _ceil_count(ratio / 100.0, g.size)))


def total_variation(x) -> Tensor:
    """Anisotropic TV averaged over the batch; a direction shorter than 2 contributes 0."""
    x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))
    if x.ndim != 4:
        raise ValueError(f"total_variation expects (B, C, H, W), got {x.shape}")
    b, _, h, w = x.shape
    tv = Tensor._wrap(np.zeros(()))
    if w >= 2:
        tv = ops.add(tv, ops.sum(ops.abs(ops.sub(x[:, :, :, 1:], x[:, :, :, :-1]))))
    if h >= 2:
        tv = ops.add(tv, ops.sum(ops.abs(ops.sub(x[:, :, 1:, :], x[:, :, :-1, :]))))
    return ops.mul(tv, 1.0 / b)


def activation_penalty(activations) -> Tensor:
    """Sum over recorded layers of the mean absolute activation."""
    if not activations:
        raise ValueError("activation record is empty")
    total = None
    for a in activations:
        term = ops.mean(ops.abs(a))
        total = term if total is None else ops.add(total, term)
    return total


def distance(g, g_hat, lam, x, activations, alpha: float, beta: float) -> Tensor:
    """Mean L1 + (1 - cosine) over the selected elements, plus TV and activation terms.

    The cosine term is the constant 1 when ``g_hat[lam]`` or ``g[lam]`` has zero norm.
    """
    g = g if isinstance(g, Tensor) else Tensor._wrap(np.asarray(g, dtype=np.float64))
    lam = np.asarray(lam, dtype=np.int64)
    if lam.size == 0:
        raise ValueError("empty index set")
    h = np.asarray(g_hat, dtype=np.float64)[lam]
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite target gradient")
    gl = ops.index(g, lam, unique=True)
    d = ops.mean(ops.abs(ops.sub(gl, h)))
    h_norm = float(np.linalg.norm(h))
    if h_norm == 0.0 or float(np.linalg.norm(gl.data)) == 0.0:
        d = ops.add(d, 1.0)
    else:
        cos = ops.div(ops.sum(ops.mul(gl, h)), ops.mul(ops.l2norm(gl), h_norm))
        d = ops.add(d, ops.sub(1.0, cos))
    if alpha:
        d = ops.add(d, ops.mul(total_variation(x), alpha))
    if beta and activations:
        d = ops.add(d, ops.mul(activation_penalty(activations), beta))
    return d


def _l2_objective(g, g_hat) -> Tensor:
    diff = ops.sub(g, np.asarray(g_hat, dtype=np.float64))
    return ops.sum(ops.mul(diff, diff))


def _cosine_objective(g, g_hat, x, alpha) -> Tensor:
    h = np.asarray(g_hat, dtype=np.float64)
    h_norm = float(np.linalg.norm(h))
    if h_norm == 0.0 or float(np.linalg.norm(g.data)) == 0.0:
        d = Tensor._wrap(np.ones(()))
        d = ops.add(d, ops.mul(ops.sum(g), 0.0))
    else:
        d = ops.sub(1.0, ops.div(ops.sum(ops.mul(g, h)), ops.mul(ops.l2norm(g), h_norm)))
    if alpha:
        d = ops.add(d, ops.mul(total_variation(x), alpha))
    return d


# ---------------------------------------------------------------------------
# regularized direction and optimizer


def regularized_direction(x, lam, blend: float, probe: float,
                          grad_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """Blend of the gradient at ``x`` and at ``x + phi``.

    ``phi = probe * d1 / ||d1||`` with ``d1 = grad_fn(x, lam)``; the second
    gradient reuses the same index set. A negative ``probe`` looks ahead
    along the descent direction instead.
    """
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must lie in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    d1 = np.asarray(grad_fn(x, lam), dtype=np.float64)
    norm = float(np.linalg.norm(d1))
    if norm == 0.0 or blend == 0.0:
        return d1
    phi = probe * d1 / norm
    d2 = np.asarray(grad_fn(x + phi, lam), dtype=np.float64)
    return d1 + blend * (d2 - d1)


class Adam:
    """Adaptive-moment update (0.9 / 0.999 / 1e-8) with an optional cosine-annealed step size."""

    def __init__(self, shape, eta: float, schedule: str = "constant", period: int = 1000,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.eta = eta
        self.schedule = schedule
        self.period = period
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step_size(self) -> float:
        if self.schedule == "cosine-annealing":
            phase = (self.t % self.period) / self.period
            return self.eta * 0.5 * (1.0 + math.cos(math.pi * phase))
        return self.eta

    def step(self, x, direction) -> np.ndarray:
        lr = self.step_size()
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * direction
        self.v = self.beta2 * self.v + (1 - self.beta2) * direction * direction
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return x - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(state: Adam, variable, direction) -> np.ndarray:
    return state.step(variable, direction)


def project_simplex(p: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto the probability simplex."""
    p = np.atleast_2d(p)
    u = -np.sort(-p, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, p.shape[1] + 1)
    cond = u - css / idx > 0
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(p.shape[0]), rho] / (rho + 1)
    return np.maximum(p - theta[:, None], 0.0)


# ---------------------------------------------------------------------------
# attack loop


class _Objective:
    """Evaluates the attack objective and its gradients at a dummy batch."""

    def __init__(self, model: Model, params, g_hat, cfg: AttackConfig):
        self.model = model
        self.params = params
        self.g_hat = np.asarray(g_hat, dtype=np.float64).ravel()
        self.cfg = cfg

    def __call__(self, x, labels, lam=None, need_label_grad=False):
        cfg = self.cfg
        xt = Tensor(x, requires_grad=True)
        yt = Tensor(labels, requires_grad=True) if need_label_grad else labels
        _, grads, acts = traced_param_grads(self.model, self.params, xt, yt)
        g = ops.flatten_all(grads)
        flagged = False
        if cfg.baseline == "fedleak":
            if lam is None:
                lam = select_indices(g.data, cfg.ratio)
            flagged = not np.any(self.g_hat[lam])
            d = distance(g, self.g_hat, lam, xt, acts, cfg.tv_weight, cfg.act_weight)
        elif cfg.baseline == "l2":
            d = _l2_objective(g, self.g_hat)
        else:
            d = _cosine_objective(g, self.g_hat, xt, cfg.tv_weight)
        wrt = [xt, yt] if need_label_grad else [xt]
        if not d.requires_grad:
            grads_out = [np.zeros_like(x)] + ([np.zeros_like(labels)] if need_label_grad else [])
        else:
            grads_out = [t.data for t in grad(d, wrt)]
        return d.item(), lam, grads_out, flagged


def _init_labels(labels, num_classes, batch):
    if labels is None:
        return np.full((batch, num_classes), 1.0 / num_classes)
    arr = np.asarray(labels)
    if arr.ndim == 1:
        return ops.one_hot(arr, num_classes)
    return arr.astype(np.float64)


def _run_restart(obj: _Objective, shape, labels0, cfg: AttackConfig, restart: int, ground_truth):
    rng = np.random.default_rng(cfg.seed + restart)
    x = rng.uniform(0.0, 1.0, size=shape)
    labels = labels0.copy()
    refine = cfg.refine_labels
    opt = Adam(shape, cfg.eta, cfg.schedule, cfg.period)
    label_opt = Adam(labels.shape, cfg.eta, cfg.schedule, cfg.period) if refine else None
    tr = ReconTrace(x=x, labels=labels, restart=restart)
    fedleak = cfg.baseline == "fedleak"
    target = labels if refine else (np.asarray(labels0).argmax(axis=1) if labels0.ndim == 2 else labels0)

    for it in range(cfg.iterations):
        y_arg = labels if refine else target
        dval, lam, grads, flagged = obj(x, y_arg, need_label_grad=refine)
        if not math.isfinite(dval) or not np.all(np.isfinite(grads[0])):
            tr.aborted.append(f"restart {restart}: non-finite distance at iteration {it}")
            log.warning("restart %d aborted at iteration %d: non-finite distance", restart, it)
            return None
        d1 = grads[0]
        direction = d1
        if fedleak and cfg.blend > 0.0:
            norm = float(np.linalg.norm(d1))
            if norm > 0.0:
                phi = cfg.probe * d1 / norm
                _, _, grads2, _ = obj(x + phi, y_arg, lam=lam)
                direction = d1 + cfg.blend * (grads2[0] - d1)
        tr.distance.append(dval)
        tr.selected.append(int(lam.size) if lam is not None else int(obj.g_hat.size))
        tr.grad_norm.append(float(np.linalg.norm(direction)))
        if flagged:
            tr.flags.append(f"iteration {it}: zero target on selected set, cosine term fixed at 1")
        if ground_truth is not None:
            try:
                mu, lip, ratio = mu_l_estimate(x, ground_truth, direction)
            except ValueError:
                mu = lip = ratio = math.nan
            tr.mu.append(mu)
            tr.lipschitz.append(lip)
            tr.ratio.append(ratio)
        else:
            tr.mu.append(math.nan)
            tr.lipschitz.append(math.nan)
            tr.ratio.append(math.nan)
        x = np.clip(opt.step(x, direction), 0.0, 1.0)
        if refine:
            labels = project_simplex(label_opt.step(labels, grads[1]))

    tr.x = x
    tr.labels = labels
    y_arg = labels if refine else target
    tr.final_distance, _, _, _ = obj(x, y_arg)
    return tr


def run_attack(model: Model, params, g_hat, labels, config: AttackConfig, ground_truth=None,
               batch_size: int | None = None) -> ReconTrace:
    if labels is None and not config.refine_labels:
        raise ValueError("labels are required unless label refinement is enabled")
    if labels is not None:
        batch = len(labels)
    elif batch_size is not None:
        batch = batch_size
    else:
        raise ValueError("batch size unknown: pass labels or batch_size")
    shape = (batch,) + tuple(model.input_shape)
    labels0 = _init_labels(labels, model.num_classes, batch)
    if ground_truth is not None:
        ground_truth = np.asarray(ground_truth, dtype=np.float64).reshape(shape)
    obj = _Objective(model, params, g_hat, config)
    best = None
    aborted = []
    for r in range(config.restarts):
        tr = _run_restart(obj, shape, labels0, config, r, ground_truth)
        if tr is None:
            aborted.append(f"restart {r} aborted: non-finite distance")
            continue
        if best is None or tr.final_distance < best.final_distance:
            best = tr
    if best is None:
        raise FloatingPointError("; ".join(aborted) or "all restarts aborted")
    best.aborted = aborted
    return best


def fedleak_attack(model: Model, params, g_hat, labels, config: AttackConfig | None = None,
                   ground_truth=None, batch_size: int | None = None) -> ReconTrace:
    """Reconstruct a client batch from its estimated gradient ``g_hat``."""
    config = config or AttackConfig()
    if config.baseline != "fedleak":
        config = AttackConfig(**{**config.__dict__, "baseline": "fedleak"})
    return run_attack(model, params, g_hat, labels, config, ground_truth, batch_size)


def baseline_attack(kind: str, model: Model, params, g_hat, labels, config: AttackConfig | None = None,
                    ground_truth=None, batch_size: int | None = None) -> ReconTrace:
    """Full-gradient L2 or cosine (+TV) matching with the same loop."""
    if kind not in ("l2", "cosine"):
        raise ValueError(f"unknown baseline {kind!r}")
    config = config or AttackConfig()
    config = AttackConfig(**{**config.__dict__, "baseline": kind})
    return run_attack(model, params, g_hat, labels, config, ground_truth, batch_size)
