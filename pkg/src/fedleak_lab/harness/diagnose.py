"""Diagnostic suites behind the ``diagnose`` subcommand."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import diagnostics as dg
from .. import models
from ..seeding import rng_for
from .data import synth_dataset
from .experiment import write_rows


def suite_mu_l(seed: int, out: Path) -> dict:
    rows = []
    rng = rng_for(seed, "mu-l")
    for curvature in rng.uniform(0.1, 10.0, size=20):
        bound = dg.safe_step_bound(curvature)
        below = dg.gd_converges(curvature, bound * (1 - 1e-6))
        above = dg.gd_converges(curvature, bound * (1 + 1e-6))
        rows.append({"curvature": float(curvature), "eta_bound": bound, "converges_below": below,
                     "converges_above": above})
    write_rows(out / "mu_l_quadratics.csv", list(rows[0]), rows)
    path, mixed = dg.regularization_toy(0.5, 1.0, 0.3, 20)
    return {"quadratics": len(rows), "all_consistent": all(r["converges_below"] and not r["converges_above"]
                                                          for r in rows),
            "toy_first_blend": float(mixed[0]), "toy_final_x": float(path[-1])}


def suite_fisher(seed: int, out: Path, samples: int = 5) -> dict:
    ds = synth_dataset("texture", 40, (3, 16, 16), 10, seed=seed)
    model = models.convnet((3, 16, 16), 10)
    params = models.init_params(model, "default-random", seed=seed)
    rs = [dg.fisher_correlation(model, params, ds.images[i:i + 1], ds.labels[i:i + 1]) for i in range(samples)]
    write_rows(out / "fisher.csv", ["sample", "pearson_r"],
               [{"sample": i, "pearson_r": r} for i, r in enumerate(rs)])
    return {"pearson_mean": float(np.mean(rs)), "pearson_std": float(np.std(rs))}


def suite_uniqueness(seed: int, out: Path, trials: int) -> dict:
    ds = synth_dataset("blobs", 10, (1, 8, 8), 10, seed=seed)
    model = models.mlp((1, 8, 8), 10, hidden=32)
    params = models.init_params(model, "default-random", seed=seed)
    x, y = ds.images[:1], ds.labels[:1]
    live = dg.uniqueness_probe(model, params, x, y, trials=trials, seed=seed)
    zero = params.unflatten(np.zeros(params.size))
    dead = dg.uniqueness_probe(model, zero, x, y, trials=min(trials, 50), seed=seed)
    rows = [{"net": "random", "trials": live.trials, "min_distance": live.min_distance,
             "collisions": live.collisions},
            {"net": "all-zero", "trials": dead.trials, "min_distance": dead.min_distance,
             "collisions": dead.collisions}]
    write_rows(out / "uniqueness.csv", list(rows[0]), rows)
    return {"random_collisions": live.collisions, "zero_net_collisions": dead.collisions}


def suite_theorem3(seed: int, out: Path, trials: int) -> dict:
    rng = rng_for(seed, "theorem3")
    violations = 0
    for _ in range(trials):
        size = int(rng.integers(2, 20))
        values = rng.integers(0, 5, size=size) if rng.random() < 0.5 else rng.normal(size=size)
        violations += not dg.theorem3_check(values).holds
    return {"multisets": trials, "violations": violations}


def run_suites(suite: str, seed: int, out, trials: int = 1000) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    chosen = ["mu-l", "fisher", "uniqueness", "theorem3"] if suite == "all" else [suite]
    results = {}
    for name in chosen:
        if name == "mu-l":
            results[name] = suite_mu_l(seed, out)
        elif name == "fisher":
            results[name] = suite_fisher(seed, out)
        elif name == "uniqueness":
            results[name] = suite_uniqueness(seed, out, trials)
        else:
            results[name] = suite_theorem3(seed, out, trials)
    (out / "diagnostics.json").write_text(json.dumps(results, indent=1, sort_keys=True, default=float) + "\n")
    return results
