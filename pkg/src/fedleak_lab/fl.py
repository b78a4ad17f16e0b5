"""Single-process federated learning rounds.

Clients receive the global parameters, run plain SGD on their shard, and
return new parameters. The server averages them and, for rounds chosen for
attack, keeps a :class:`RoundLog` with each client's estimated gradient
``(w_old - w_new) / (lr * steps)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import glt
from .defenses import DefenseConfig, apply_defense
from .harness.data import Dataset, image_tv
from .models import Model, ParameterSet, loss_and_param_grads
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

PARTITION_MODES = ("iid", "label-skew", "quantity-skew", "feature-skew", "dirichlet")


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    clients: int = 10
    seed: int = 0
    classes_per_client: int = 2
    sizes: tuple = ()
    groups: int = 5
    alpha: float = 0.5

    def __post_init__(self):
        if self.mode not in PARTITION_MODES:
            raise ValueError(f"partition mode must be one of {PARTITION_MODES}")
        if self.clients < 1:
            raise ValueError("need at least one client")


@dataclass
class ClientData:
    client_id: int
    indices: np.ndarray
    data: Dataset

    def __len__(self) -> int:
        return len(self.indices)


def _clients_from_lists(ds: Dataset, lists) -> list[ClientData]:
    out = []
    for cid, idx in enumerate(lists):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        out.append(ClientData(cid, idx, ds.subset(idx)))
    return out


def _largest_remainder(weights, total: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    raw = w / w.sum() * total
    sizes = np.floor(raw).astype(np.int64)
    rem = total - sizes.sum()
    order = np.lexsort((np.arange(w.size), -(raw - sizes)))
    sizes[order[:rem]] += 1
    return sizes


def partition(ds: Dataset, spec: PartitionSpec) -> list[ClientData]:
    """Split ``ds`` across ``spec.clients`` clients; every sample goes to exactly one."""
    n, k = len(ds), spec.clients
    if n < k:
        raise ValueError(f"{n} samples cannot cover {k} clients")
    rng = rng_for(spec.seed, "partition", spec.mode)

    if spec.mode == "iid":
        return _clients_from_lists(ds, np.array_split(rng.permutation(n), k))

    if spec.mode == "quantity-skew":
        weights = spec.sizes or tuple(range(1, k + 1))
        if len(weights) != k or min(weights) <= 0:
            raise ValueError("quantity-skew needs one positive weight per client")
        sizes = _largest_remainder(weights, n)
        if sizes.min() < 1:
            raise ValueError("quantity-skew leaves a client empty")
        perm = rng.permutation(n)
        return _clients_from_lists(ds, np.split(perm, np.cumsum(sizes)[:-1]))

    if spec.mode == "label-skew":
        m, classes = spec.classes_per_client, ds.num_classes
        if not 1 <= m <= classes:
            raise ValueError(f"cannot give {m} classes per client with {classes} classes")
        if k * m < classes:
            raise ValueError(f"{k} clients x {m} classes cannot cover {classes} classes")
        owners: dict[int, list[int]] = {c: [] for c in range(classes)}
        for cid in range(k):
            for j in range(m):
                owners[(cid * m + j) % classes].append(cid)
        lists: list[list[int]] = [[] for _ in range(k)]
        for c in range(classes):
            idx = np.flatnonzero(ds.labels == c)
            if idx.size == 0:
                continue
            if idx.size < len(owners[c]):
                raise ValueError(f"class {c} has too few samples for its {len(owners[c])} owners")
            for cid, part in zip(owners[c], np.array_split(rng.permutation(idx), len(owners[c]))):
                lists[cid].extend(part.tolist())
        if any(not lst for lst in lists):
            raise ValueError("label-skew leaves a client empty")
        return _clients_from_lists(ds, lists)

    if spec.mode == "feature-skew":
        groups = spec.groups
        if not 1 <= groups <= k:
            raise ValueError("feature-skew needs 1 <= groups <= clients")
        order = np.argsort(image_tv(ds.images), kind="stable")
        bands = np.array_split(order, groups)
        lists = [None] * k
        for g, band in enumerate(bands):
            members = [c for c in range(k) if c * groups // k == g]
            for cid, part in zip(members, np.array_split(rng.permutation(band), len(members))):
                lists[cid] = part
        if any(len(lst) == 0 for lst in lists):
            raise ValueError("feature-skew leaves a client empty")
        return _clients_from_lists(ds, lists)

    # dirichlet
    if not spec.alpha > 0:
        raise ValueError("dirichlet concentration must be positive")
    for _ in range(1000):
        lists = [[] for _ in range(k)]
        for c in range(ds.num_classes):
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            if idx.size == 0:
                continue
            props = rng.dirichlet(np.full(k, spec.alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for cid, part in enumerate(np.split(idx, cuts)):
                lists[cid].extend(part.tolist())
        if all(lists):
            return _clients_from_lists(ds, lists)
    raise ValueError("dirichlet partition kept leaving clients empty; raise alpha or lower clients")


def steps_for_epochs(epochs: float, client_size: int, batch_size: int) -> int:
    """Local steps for a fractional epoch budget, rounded down (at least one)."""
    return max(1, int(math.floor(epochs * client_size / batch_size + 1e-9)))


def batch_schedule(n: int, steps: int, batch_size: int, seed: int, client_id: int) -> list[np.ndarray]:
    """Sequential mini-batches without replacement, reshuffled every epoch.

    A trailing partial batch is dropped so every step sees ``batch_size`` samples.
    """
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds client dataset size {n}")
    per_epoch = n // batch_size
    out = []
    epoch = 0
    while len(out) < steps:
        perm = rng_for(seed, "shuffle", client_id, epoch).permutation(n)
        for b in range(per_epoch):
            if len(out) == steps:
                break
            out.append(perm[b * batch_size:(b + 1) * batch_size])
        epoch += 1
    return out


def local_train(model: Model, params: ParameterSet, client: ClientData, steps: int, batch_size: int,
                lr: float, defense: DefenseConfig | None = None, seed: int = 0,
                sigma_scale: float = 1.0) -> tuple[ParameterSet, list[np.ndarray]]:
    """Plain SGD on a client shard; returns the new parameters and the index batches used.

    Gaussian DP attached per step clips and noises each step's gradient;
    other defenses (and DP attached per round) act on the outgoing update.
    """
    if len(client) == 0:
        raise ValueError("empty client data")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    batches = batch_schedule(len(client), steps, batch_size, seed, client.client_id)
    w = params.flat().copy()
    step_dp = defense is not None and defense.kind == "gaussian-dp" and defense.attach == "step"
    for s, b in enumerate(batches):
        _, g = loss_and_param_grads(model, params.unflatten(w), client.data.images[b], client.data.labels[b])
        gv = g.flat()
        if step_dp:
            gv = apply_defense(gv, defense, seed=derive_seed(seed, "dp", client.client_id, s),
                               sigma_scale=sigma_scale)
        w = w - lr * gv
    if defense is not None and defense.kind != "none" and not step_dp:
        delta = params.flat() - w
        delta = apply_defense(delta, defense, seed=derive_seed(seed, "dp", client.client_id, "round"),
                              sigma_scale=sigma_scale)
        w = params.flat() - delta
    return params.unflatten(w), batches


def estimate_gradient(w_old, w_new, lr: float, steps: int):
    """Server-side gradient estimate (w_old - w_new) / (lr * steps)."""
    if not lr > 0:
        raise ValueError("lr must be positive")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if isinstance(w_old, ParameterSet):
        if w_old.shapes() != w_new.shapes() or w_old.names() != w_new.names():
            raise ValueError("parameter layouts differ")
        return w_old.unflatten((w_old.flat() - w_new.flat()) / (lr * steps))
    a, b = np.asarray(w_old, dtype=np.float64), np.asarray(w_new, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return (a - b) / (lr * steps)


def aggregate(param_list: Sequence[ParameterSet]) -> ParameterSet:
    """Element-wise mean of client parameters."""
    if not param_list:
        raise ValueError("nothing to aggregate")
    first = param_list[0]
    for p in param_list[1:]:
        if p.names() != first.names() or p.shapes() != first.shapes():
            raise ValueError("parameter layouts differ")
    stacked = np.stack([p.flat() for p in param_list])
    return first.unflatten(stacked.mean(axis=0))


# ---------------------------------------------------------------------------
# rounds


@dataclass(frozen=True)
class FLConfig:
    clients: int = 10
    rounds: int = 1
    participants: int | None = None
    batch_size: int = 8
    local_steps: int = 1
    local_epochs: float | None = None
    lr: float = 0.1
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack_rounds: tuple = (0,)
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.participants is not None and not 1 <= self.participants <= self.clients:
            raise ValueError("participants must lie in [1, clients]")
        if any(not 0 <= r < self.rounds for r in self.attack_rounds):
            raise ValueError("attack rounds must lie within the simulated rounds")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass
class ClientUpdate:
    client_id: int
    w_new: ParameterSet
    g_hat: ParameterSet
    steps: int
    lr: float
    batches: list  # evaluation only: which samples each step used
    images: np.ndarray  # evaluation only: the first step's batch
    labels: np.ndarray


@dataclass
class RoundLog:
    round_index: int
    participants: list
    w_old: ParameterSet
    updates: dict
    aggregated: ParameterSet

    def update(self, client_id: int) -> ClientUpdate:
        return self.updates[client_id]

    def save(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = [d / "w_old.params", d / "aggregated.params"]
        self.w_old.save(written[0])
        self.aggregated.save(written[1])
        clients = []
        for cid in self.participants:
            u = self.updates[cid]
            stem = f"client_{cid:03d}"
            files = {"w_new": f"{stem}_w_new.params", "g_hat": f"{stem}_g_hat.params",
                     "images": f"{stem}_images.glt", "labels": f"{stem}_labels.glt"}
            u.w_new.save(d / files["w_new"])
            u.g_hat.save(d / files["g_hat"])
            glt.save(d / files["images"], u.images)
            glt.save(d / files["labels"], u.labels.astype(np.float64))
            written += [d / f for f in files.values()]
            clients.append({"client_id": int(cid), "steps": int(u.steps), "lr": u.lr, "files": files,
                            "batches": [np.asarray(b).tolist() for b in u.batches]})
        manifest = {"round": self.round_index, "participants": [int(c) for c in self.participants],
                    "clients": clients}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        written.append(d / "manifest.json")
        return written

    @classmethod
    def load(cls, directory) -> "RoundLog":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        updates = {}
        for c in manifest["clients"]:
            f = c["files"]
            updates[c["client_id"]] = ClientUpdate(
                client_id=c["client_id"], w_new=ParameterSet.load(d / f["w_new"]),
                g_hat=ParameterSet.load(d / f["g_hat"]), steps=c["steps"], lr=c["lr"],
                batches=[np.asarray(b, dtype=np.int64) for b in c["batches"]],
                images=glt.load(d / f["images"]),
                labels=glt.load(d / f["labels"]).astype(np.int64))
        return cls(manifest["round"], manifest["participants"], ParameterSet.load(d / "w_old.params"),
                   updates, ParameterSet.load(d / "aggregated.params"))


def run_rounds(model: Model, params: ParameterSet, dataset: Dataset, cfg: FLConfig,
               clients: list[ClientData] | None = None) -> tuple[list[RoundLog], ParameterSet]:
    """Simulate ``cfg.rounds`` rounds; logs are kept only for ``cfg.attack_rounds``."""
    if clients is None:
        clients = partition(dataset, cfg.partition)
    keep = set(cfg.attack_rounds)
    logs = []
    current = params.copy()
    for t in range(cfg.rounds):
        if cfg.participants is None or cfg.participants == cfg.clients:
            chosen = list(range(cfg.clients))
        else:
            chosen = sorted(rng_for(cfg.seed, "participants", t).choice(cfg.clients, cfg.participants,
                                                                        replace=False).tolist())
        sigma_scale = cfg.defense.round_sigma_scale(t) if cfg.defense.kind == "gaussian-dp" else 1.0
        updates = {}
        for cid in chosen:
            client = clients[cid]
            steps = (steps_for_epochs(cfg.local_epochs, len(client), cfg.batch_size)
                     if cfg.local_epochs is not None else cfg.local_steps)
            w_new, batches = local_train(model, current, client, steps, cfg.batch_size, cfg.lr,
                                         cfg.defense, seed=derive_seed(cfg.seed, "round", t),
                                         sigma_scale=sigma_scale)
            first = batches[0]
            updates[cid] = ClientUpdate(cid, w_new, estimate_gradient(current, w_new, cfg.lr, steps),
                                        steps, cfg.lr, batches, client.data.images[first],
                                        client.data.labels[first])
        new_params = aggregate([updates[c].w_new for c in chosen])
        if t in keep:
            logs.append(RoundLog(t, chosen, current, updates, new_params))
        log.debug("round %d: %d clients", t, len(chosen))
        current = new_params
    return logs, current
