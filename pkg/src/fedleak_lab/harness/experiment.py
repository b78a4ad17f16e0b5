"""Experiment orchestration: FL simulation, attacks at chosen rounds, reports, sweeps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import models
from ..attack import ReconTrace, run_attack
from ..fl import FLConfig, PartitionSpec, RoundLog, run_rounds
from ..labels import head_gradient, infer_labels
from ..metrics import evaluate_reconstruction, gradient_distance
from ..seeding import derive_seed
from .config import ConfigError, ExperimentConfig, dumps, resolve_path, set_path
from .data import Dataset, load_idx, load_image_folder, synth_dataset, train_test_split

log = logging.getLogger(__name__)

SUMMARY_FIELDS = ["round", "client", "batch_size", "label_accuracy", "psnr_mean", "ssim_mean",
                  "grad_distance_mean", "final_distance"]


def build_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.source == "idx":
        ds = load_idx(d.images, d.labels, d.classes)
    elif d.source == "images":
        ds = load_image_folder(d.root, d.classes)
    else:
        ds = synth_dataset(d.kind, d.n, tuple(d.shape), d.classes, seed=derive_seed(cfg.seed, "dataset"))
    if d.test_fraction == 0.0:
        return ds, ds.subset([])
    return train_test_split(ds, d.test_fraction, derive_seed(cfg.seed, "split"))


def build_model(cfg: ExperimentConfig, input_shape, num_classes):
    try:
        return models.zoo(cfg.model.name, input_shape, num_classes, **cfg.model.options)
    except TypeError as exc:
        raise ConfigError(f"config.model.options: {exc}") from exc


def build_params(cfg: ExperimentConfig, model):
    i = cfg.init
    return models.init_params(model, i.scheme, seed=derive_seed(cfg.seed, "init"), a=i.a, b=i.b, path=i.path)


def fl_config(cfg: ExperimentConfig) -> FLConfig:
    f = cfg.fl
    p = f.partition
    spec = PartitionSpec(mode=p.mode, clients=f.clients, seed=derive_seed(cfg.seed, "partition"),
                         classes_per_client=p.classes_per_client, sizes=tuple(p.sizes), groups=p.groups,
                         alpha=p.alpha)
    defense = dataclasses.replace(cfg.defense, seed=derive_seed(cfg.seed, "defense"))
    return FLConfig(clients=f.clients, rounds=f.rounds, participants=f.participants, batch_size=f.batch_size,
                    local_steps=f.local_steps, local_epochs=f.local_epochs, lr=f.lr, partition=spec,
                    defense=defense, attack_rounds=tuple(cfg.attack_rounds), seed=derive_seed(cfg.seed, "fl"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hash(cfg: ExperimentConfig, ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(dumps(cfg).encode())
    h.update(np.ascontiguousarray(ds.images).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def attack_round(cfg: ExperimentConfig, model, rlog: RoundLog, client_id: int, full: bool,
                 out_dir: Path | None = None) -> dict:
    """Attack one client's update from a round log; writes trace and metrics when ``out_dir`` is set."""
    if client_id not in rlog.updates:
        raise ConfigError(f"client {client_id} did not participate in round {rlog.round_index}")
    upd = rlog.updates[client_id]
    g_hat = upd.g_hat.flat()
    truth = upd.images
    batch = len(upd.labels)
    if cfg.attack.label_source == "true":
        labels = upd.labels
    else:
        labels = infer_labels(head_gradient(model, upd.g_hat), batch)
    acfg = dataclasses.replace(cfg.attack.config, iterations=cfg.effective_iterations(full),
                               seed=derive_seed(cfg.seed, "attack", rlog.round_index, client_id) % (2 ** 31))
    trace: ReconTrace = run_attack(model, rlog.w_old, g_hat, labels, acfg, ground_truth=truth,
                                   batch_size=batch)

    def sample_grad_distance(t, r):
        _, g_true = models.loss_and_param_grads(model, rlog.w_old, truth[t:t + 1], upd.labels[t:t + 1])
        _, g_rec = models.loss_and_param_grads(model, rlog.w_old, trace.x[r:r + 1], upd.labels[t:t + 1])
        return gradient_distance(g_rec.flat(), g_true.flat(), "l2")

    report = evaluate_reconstruction(trace.x, truth, sample_grad_distance if cfg.metrics.grad_distance else None,
                                     exclusive=cfg.metrics.exclusive)
    label_acc = float(np.mean(np.sort(np.asarray(labels)) == np.sort(upd.labels)))
    report.extra.update({"label_accuracy": label_acc, "final_distance": trace.final_distance,
                         "iterations": acfg.iterations})
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        trace.save(out_dir)
        report.write_csv(out_dir / "metrics.csv")
        report.write_json(out_dir / "metrics.json")
    agg = report.aggregates()
    return {"round": rlog.round_index, "client": client_id, "batch_size": batch,
            "label_accuracy": label_acc, "psnr_mean": agg["psnr_mean"], "ssim_mean": agg["ssim_mean"],
            "grad_distance_mean": agg["grad_distance_mean"], "final_distance": trace.final_distance}


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10g}"
    return "" if v is None else v


def write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in fields])


def _write_manifest(root: Path, cfg: ExperimentConfig, input_hash: str, extra: dict) -> None:
    files = sorted(p for p in root.rglob("*") if p.is_file() and p != root / "manifest.json")
    manifest = {"config": json.loads(dumps(cfg)), "input_sha256": input_hash,
                "files": [{"path": p.relative_to(root).as_posix(), "sha256": sha256_file(p)} for p in files]}
    manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _prepare_out(out) -> tuple[Path, Path]:
    final = Path(out)
    if final.exists() and any(final.iterdir()):
        raise ConfigError(f"output directory {final} exists and is not empty")
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.partial-", dir=final.parent))
    return final, tmp


def _commit(tmp: Path, final: Path) -> Path:
    if final.exists():
        final.rmdir()
    tmp.rename(final)
    return final


def simulate(cfg: ExperimentConfig):
    """FL rounds only; returns (logs, final params, model, train, test)."""
    train, test = build_dataset(cfg)
    model = build_model(cfg, train.image_shape, train.num_classes)
    params = build_params(cfg, model)
    logs, final = run_rounds(model, params, train, fl_config(cfg))
    return logs, final, model, train, test


def run_simulation(cfg: ExperimentConfig, out=None) -> Path:
    final_dir, tmp = _prepare_out(out or cfg.output)
    try:
        logs, final, model, train, test = simulate(cfg)
        for rl in logs:
            rl.save(tmp / "rounds" / f"round_{rl.round_index:04d}")
        final.save(tmp / "final.params")
        acc = models.accuracy(model, final, test.images, test.labels) if len(test) else math.nan
        (tmp / "accuracy.json").write_text(json.dumps({"test_accuracy": acc}, indent=1) + "\n")
        _write_manifest(tmp, cfg, _input_hash(cfg, train), {"kind": "simulate"})
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return _commit(tmp, final_dir)


def run_experiment(cfg: ExperimentConfig, out=None, full: bool = False) -> Path:
    """Simulate, attack every configured (round, client), and write all reports.

    Output is assembled in a temporary sibling directory and moved into place
    only on success.
    """
    final_dir, tmp = _prepare_out(out or cfg.output)
    try:
        logs, final, model, train, test = simulate(cfg)
        rows = []
        for rl in logs:
            rdir = tmp / "rounds" / f"round_{rl.round_index:04d}"
            rl.save(rdir)
            for cid in cfg.attack.clients:
                if cid not in rl.updates:
                    log.warning("client %d skipped round %d", cid, rl.round_index)
                    continue
                adir = tmp / "attacks" / f"round_{rl.round_index:04d}_client_{cid:03d}"
                rows.append(attack_round(cfg, model, rl, cid, full, adir))
        final.save(tmp / "final.params")
        acc = models.accuracy(model, final, test.images, test.labels) if len(test) else math.nan
        write_rows(tmp / "summary.csv", SUMMARY_FIELDS, rows)
        psnrs = [r["psnr_mean"] for r in rows]
        ssims = [r["ssim_mean"] for r in rows]
        summary = {"test_accuracy": acc,
                   "psnr_mean": float(np.mean(psnrs)) if psnrs else None,
                   "ssim_mean": float(np.mean(ssims)) if ssims else None,
                   "attacks": len(rows)}
        (tmp / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        _write_manifest(tmp, cfg, _input_hash(cfg, train), {"kind": "experiment", "full": full})
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return _commit(tmp, final_dir)


# ---------------------------------------------------------------------------
# sweeps

SWEEP_FIELDS = ["value", "accuracy", "psnr", "ssim", "status"]


def _sweep_one(args):
    cfg_json, axis, value, out, full = args
    from .config import parse_config
    cfg = set_path(parse_config(cfg_json), axis, value)
    try:
        path = run_experiment(cfg, out, full)
        s = json.loads((path / "summary.json").read_text())
        return {"value": value, "accuracy": s["test_accuracy"], "psnr": s["psnr_mean"],
                "ssim": s["ssim_mean"], "status": "ok"}
    except Exception as exc:  # one failing point must not sink the sweep
        log.error("sweep point %s=%r failed: %s", axis, value, exc)
        return {"value": value, "accuracy": None, "psnr": None, "ssim": None,
                "status": f"error: {type(exc).__name__}: {exc}"}


def sweep(cfg: ExperimentConfig, axis: str, values, out=None, parallel: int = 1, full: bool = False) -> Path:
    """One sub-experiment per value, then a combined (value, accuracy, psnr, ssim) CSV."""
    resolve_path(cfg, axis)
    values = list(values)
    for v in values:
        set_path(cfg, axis, v)  # validate every point before running any
    root = Path(out or cfg.output)
    if root.exists() and any(root.iterdir()):
        raise ConfigError(f"output directory {root} exists and is not empty")
    root.mkdir(parents=True, exist_ok=True)
    text = dumps(cfg)
    jobs = [(text, axis, v, str(root / f"point_{i:03d}"), full) for i, v in enumerate(values)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    write_rows(root / "sweep.csv", SWEEP_FIELDS, rows)
    train, _ = build_dataset(cfg)
    _write_manifest(root, cfg, _input_hash(cfg, train), {"kind": "sweep", "axis": axis, "values": values,
                                                         "full": full})
    return root / "sweep.csv"
