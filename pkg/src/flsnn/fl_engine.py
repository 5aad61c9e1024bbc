"""In-process FedAvg simulation with Byzantine injection and Top-k uploads.

One round::

    broadcast W^{r-1} -> benign local steps -> inject attacks (dense)
    -> Top-k each upload -> mean with divisor |C| -> W^r = W^{r-1} + mean
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from . import attacks as atk
from .compression import (CompressionConfig, SparseUpdate, dense_payload_bytes,
                          record_retention, sparse_payload_bytes, topk_compress)
from .data_io import ClientShard, Dataset, encode_input
from .nn_models import (LifParams, MlpTopology, OptimizerState, ParameterVector, ShapeError,
                        loss_and_grad, predict_scores, sgd_step)


def client_stream(seed: int, client_id: int, round_: int, purpose: int = 0) -> np.random.Generator:
    """Independent RNG for (master seed, client, round, purpose)."""
    return np.random.default_rng([seed, client_id, round_, purpose])


@dataclass
class ServerState:
    global_params: ParameterVector
    round: int = 0


@dataclass
class ClientRecord:
    id: int
    is_byzantine: bool
    shard: ClientShard
    optimizer: OptimizerState


@dataclass
class ModelSpec:
    """Everything a client needs to turn a batch into a gradient."""

    topology: MlpTopology
    lif: Optional[LifParams] = None
    encoding: str = "direct"

    @property
    def kind(self) -> str:
        return self.topology.kind

    def encode(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if self.kind == "ann":
            return x
        return encode_input(x, self.lif.timesteps, self.encoding, rng)


@dataclass
class RoundReport:
    round: int
    train_loss: float
    test_acc: Optional[float]
    uplink_bytes: int
    downlink_bytes: int
    update_norms: List[float]
    retained_union: Optional[int] = None

    @property
    def max_update_norm(self) -> float:
        return max(self.update_norms) if self.update_norms else 0.0

    @property
    def mean_update_norm(self) -> float:
        return float(np.mean(self.update_norms)) if self.update_norms else 0.0


def client_local_step(client: ClientRecord, global_params: ParameterVector, model: ModelSpec,
                      train: Dataset, batch_size: int, seed: int, round_: int):
    """One SGD step on one batch; returns (delta W_c - W^{r-1}, batch loss)."""
    if len(client.shard) == 0:
        raise ValueError(f"client {client.id} has an empty shard")
    idx = client.shard.next_batch(batch_size)
    x = model.encode(train.samples[idx], client_stream(seed, client.id, round_, 1))
    loss, grad = loss_and_grad(global_params, model.topology, x, train.labels[idx], model.lif)
    local = sgd_step(global_params, grad, client.optimizer)
    return local.values - global_params.values, loss


def inject_attacks(updates: Sequence[Optional[np.ndarray]], byzantine: Sequence[bool],
                   spec: atk.AttackSpec, seed: int = 0, round_: int = 0) -> List[np.ndarray]:
    """Replace Byzantine slots with crafted vectors; benign slots pass through untouched.

    For ``noise`` every Byzantine slot must already hold that client's own
    update; for the colluding attacks Byzantine slots may be ``None``.
    """
    if spec.kind == "none":
        return list(updates)
    out = list(updates)
    benign = [u for u, b in zip(updates, byzantine) if not b]
    m = sum(byzantine)
    if m == 0:
        return out
    if spec.kind == "noise":
        for c, b in enumerate(byzantine):
            if b:
                if updates[c] is None:
                    raise ValueError("noise attack needs the Byzantine client's own update")
                out[c] = atk.noise_attack(updates[c], spec.sigma, client_stream(seed, c, round_, 2))
        return out
    view = atk.BenignView(np.stack(benign), len(updates), m)
    crafted = atk.craft(spec, view)
    for c, b in enumerate(byzantine):
        if b:
            out[c] = crafted.copy()
    return out


def aggregate_fedavg(updates: Sequence[Union[np.ndarray, SparseUpdate]], num_clients: int,
                     dtype=np.float32) -> np.ndarray:
    """(1/|C|) * sum of updates, summed in the given order in float64.

    Sparse updates contribute zero at unretained coordinates.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    dims = {u.dim if isinstance(u, SparseUpdate) else np.asarray(u).size for u in updates}
    if len(dims) != 1:
        raise ShapeError(f"updates disagree on dimension: {sorted(dims)}")
    acc = np.zeros(dims.pop(), dtype=np.float64)
    for u in updates:
        if isinstance(u, SparseUpdate):
            acc[u.indices] += u.values
        else:
            acc += np.asarray(u, dtype=np.float64)
    return (acc / num_clients).astype(dtype)


def evaluate(params: ParameterVector, model: ModelSpec, test: Dataset, chunk: int = 1024,
             seed: int = 0) -> float:
    """Fraction of argmax-correct predictions (spike counts for SNN, logits for ANN)."""
    if len(test) == 0:
        raise ValueError("empty test set")
    correct = 0
    for start in range(0, len(test), chunk):
        x = test.samples[start:start + chunk]
        rng = np.random.default_rng([seed, start, 0xE7A1]) if model.encoding == "poisson" else None
        scores = predict_scores(params, model.topology, model.encode(x, rng), model.lif)
        correct += int((scores.argmax(axis=1) == test.labels[start:start + chunk]).sum())
    return correct / len(test)


def accuracy_loss(clean: float, attacked: float) -> float:
    return clean - attacked


@dataclass
class Federation:
    """A full simulated FL deployment: server, clients, data and policies."""

    server: ServerState
    clients: List[ClientRecord]
    model: ModelSpec
    train: Dataset
    test: Dataset
    attack: atk.AttackSpec = field(default_factory=atk.AttackSpec)
    compression: Optional[CompressionConfig] = None
    batch_size: int = 32
    seed: int = 0
    workers: int = 1
    retention: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.compression is not None and self.retention is None:
            self.retention = np.zeros(len(self.server.global_params), dtype=np.int64)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def dim(self) -> int:
        return len(self.server.global_params)

    def _trains_locally(self, client: ClientRecord) -> bool:
        # colluding adversaries only need the benign view, noise perturbs an honest update
        return not client.is_byzantine or self.attack.kind in ("none", "noise")

    def local_updates(self, global_params: ParameterVector):
        r = self.server.round + 1
        todo = [c for c in self.clients if self._trains_locally(c)]

        def step(c):
            return client_local_step(c, global_params, self.model, self.train,
                                     self.batch_size, self.seed, r)

        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(step, todo))
        else:
            results = [step(c) for c in todo]
        updates: List[Optional[np.ndarray]] = [None] * self.num_clients
        losses = []
        for c, (delta, loss) in zip(todo, results):
            updates[c.id] = delta
            if not c.is_byzantine:
                losses.append(loss)
        return updates, losses

    def run_round(self, test: Optional[Dataset] = None) -> RoundReport:
        W = self.server.global_params
        r = self.server.round + 1
        updates, losses = self.local_updates(W)
        updates = inject_attacks(updates, [c.is_byzantine for c in self.clients],
                                 self.attack, self.seed, r)
        norms = [float(np.linalg.norm(u.astype(np.float64))) for u in updates]
        if self.compression is None:
            uploads = updates
            uplink = self.num_clients * dense_payload_bytes(self.dim)
            union = None
        else:
            uploads = [topk_compress(u, self.compression) for u in updates]
            for sp in uploads:
                record_retention(sp, self.retention)
            uplink = sum(sparse_payload_bytes(sp.k) for sp in uploads)
            union = int(np.unique(np.concatenate([sp.indices for sp in uploads])).size)
        mean = aggregate_fedavg(uploads, self.num_clients, W.values.dtype)
        self.server.global_params = ParameterVector(W.values + mean, W.layout)
        self.server.round = r
        acc = evaluate(self.server.global_params, self.model, test, seed=self.seed) if test is not None else None
        return RoundReport(
            round=r,
            train_loss=float(np.mean(losses)) if losses else math.nan,
            test_acc=acc,
            uplink_bytes=uplink,
            downlink_bytes=self.num_clients * dense_payload_bytes(self.dim),
            update_norms=norms,
            retained_union=union,
        )
