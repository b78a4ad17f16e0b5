"""Reconstruction quality: PSNR, SSIM, gradient distances and truth matching."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: int) -> float:
    h, w = a.shape
    if h < window or w < window:
        wa, wb = a.reshape(1, 1, -1), b.reshape(1, 1, -1)
    else:
        wa = sliding_window_view(a, (window, window)).reshape(h - window + 1, w - window + 1, -1)
        wb = sliding_window_view(b, (window, window)).reshape(h - window + 1, w - window + 1, -1)
    mu_a, mu_b = wa.mean(-1), wb.mean(-1)
    var_a = (wa * wa).mean(-1) - mu_a ** 2
    var_b = (wb * wb).mean(-1) - mu_b ** 2
    cov = (wa * wb).mean(-1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over uniform ``window`` x ``window`` patches, averaged over channels.

    Accepts (H, W) or (C, H, W). Statistics are population moments; an image
    smaller than the window is treated as one global window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError("ssim expects (H, W) or (C, H, W)")
    return float(np.mean([_ssim_channel(a[c], b[c], window) for c in range(a.shape[0])]))


def gradient_distance(g1, g2, metric: str = "l2") -> float:
    """``l1`` mean absolute difference, ``l2`` Euclidean norm, ``l2-mean`` root-mean-square,
    ``cosine`` one minus cosine similarity (1 when either vector is zero)."""
    a = np.asarray(g1, dtype=np.float64).ravel()
    b = np.asarray(g2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.size} vs {b.size}")
    d = a - b
    if metric == "l1":
        return float(np.mean(np.abs(d)))
    if metric == "l2":
        return float(np.linalg.norm(d))
    if metric == "l2-mean":
        return float(np.sqrt(np.mean(d * d)))
    if metric == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            return 1.0
        return float(1.0 - (a @ b) / (na * nb))
    raise ValueError(f"unknown metric {metric!r}")


def psnr_matrix(recons, truths) -> np.ndarray:
    return np.array([[psnr(r, t) for r in recons] for t in truths])


def match_reconstructions(recons, truths, exclusive: bool = False) -> np.ndarray:
    """For each truth, the index of the highest-PSNR reconstruction (lowest index on ties).

    With ``exclusive`` each reconstruction is used at most once, assigned
    greedily from the best-scoring pair down.
    """
    recons, truths = list(recons), list(truths)
    if not recons or not truths:
        raise ValueError("need at least one reconstruction and one truth")
    scores = psnr_matrix(recons, truths)
    if not exclusive:
        return np.argmax(scores, axis=1).astype(np.int64)
    if len(recons) < len(truths):
        raise ValueError("exclusive matching needs at least as many reconstructions as truths")
    out = np.full(len(truths), -1, dtype=np.int64)
    flat = np.lexsort((np.arange(scores.size), -scores.ravel()))
    used_r, used_t = set(), set()
    for f in flat:
        t, r = divmod(int(f), len(recons))
        if t in used_t or r in used_r:
            continue
        out[t] = r
        used_t.add(t)
        used_r.add(r)
    return out


@dataclass
class MetricsReport:
    matched: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    grad_distance: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        out = {}
        for name in ("psnr", "ssim", "grad_distance"):
            vals = np.array([v for v in getattr(self, name) if v is not None and not math.isnan(v)])
            out[f"{name}_mean"] = float(vals.mean()) if vals.size else None
            out[f"{name}_median"] = float(np.median(vals)) if vals.size else None
        out["count"] = len(self.psnr)
        out.update(self.extra)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
            w.writerow(["truth", "matched", "psnr", "ssim", "grad_distance_l2"])
            for i in range(len(self.psnr)):
                gd = self.grad_distance[i] if i < len(self.grad_distance) else math.nan
                w.writerow([i, self.matched[i], f"{self.psnr[i]:.10g}", f"{self.ssim[i]:.10g}", f"{gd:.10g}"])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.aggregates(), fh, indent=1, sort_keys=True)


def evaluate_reconstruction(recons, truths, grad_fn=None, exclusive: bool = False) -> MetricsReport:
    """Match reconstructions to truths and score each pair.

    ``grad_fn(truth_index, recon_index)`` may supply the L2 gradient distance
    for a matched pair; it is left as NaN otherwise.
    """
    recons, truths = np.asarray(recons), np.asarray(truths)
    match = match_reconstructions(recons, truths, exclusive=exclusive)
    rep = MetricsReport()
    for t, r in enumerate(match):
        rep.matched.append(int(r))
        rep.psnr.append(psnr(recons[r], truths[t]))
        rep.ssim.append(ssim(recons[r], truths[t]))
        rep.grad_distance.append(float(grad_fn(t, int(r))) if grad_fn is not None else math.nan)
    return rep
