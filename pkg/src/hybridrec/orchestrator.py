"""Training runs in the four modes, staleness accounting, fault drills,
checkpoints and the learning-rate helper.

Schedule
--------
A run advances in global steps.  In step ``t`` each of the K NN workers
trains on ``b`` samples.  Samples for step ``s`` are dispatched (registered
with an embedding worker, handed to an NN worker, embedding pull issued)
``D`` steps ahead of use, at the start of step ``s - D``:

* ``sync``: ``D = 0``; the pull, dense step and embedding write-back of a
  batch all finish before the next batch is dispatched.
* ``hybrid_raw`` / ``hybrid_opt``: ``D = prefetch_depth``; embedding reads
  run ahead while the dense path keeps its per-step all-reduce barrier.
  ``hybrid_opt`` sends embedding gradients while the all-reduce is in
  flight instead of after it.
* ``async``: ``D = async_depth`` and no dense barrier: each replica applies
  its own gradient, replicas are averaged every ``async_average_every``
  steps.

Link latency is real wall-clock time (``PendingReply``), while which PS
state a read observes is fixed by the schedule, so AUC traces are
reproducible run to run and only throughput depends on the machine.

Staleness
---------
Each PS entry carries an update counter that advances once per global step
that writes it.  A gradient's delay is the counter at write time minus the
counter its embedding read saw.  When ``D`` exceeds ``staleness_cap`` a
gate holds back reads whose IDs will be written more than ``cap`` times
before the sample is trained; held reads are retried every step.
"""
import io
import json
import logging
import os
import shutil
import struct
import tempfile
import time
import zipfile
import zlib
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import dense_nn, wire
from .wire import MsgType
from .config import MODES, FaultSpec, RunConfig
from .data import DataLoader, Dataset, generate_synthetic
from .embedding_ps import EmbeddingPS, PsShard
from .embedding_worker import EmbeddingWorker, PsClient
from .errors import (CheckpointCorruptError, ClockError, ConsistencyError, DivergenceError,
                     InternalConsistencyError, PreconditionError, SyncFailureError, UnrecoverableRunError,
                     WouldBlock)
from .timeline import CostRecorder, Timeline
from .nn_worker import NNWorker, allreduce_mean, average_models, dense_update_and_verify, verify_replicas

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "loss", "auc", "samples_per_sec", "max_staleness", "drops")
CSV_SCHEMA_VERSION = 1


def hybrid_lr(L: float, sigma: float, T: int, tau: float, alpha: float) -> float:
    """Step size ``1 / (L + sqrt(T L) sigma + 4 tau L alpha)``.

    ``L`` is a smoothness estimate, ``sigma`` a gradient-noise estimate,
    ``T`` the step budget, ``tau`` the staleness bound and ``alpha`` the
    largest per-ID sample frequency.
    """
    if not L > 0:
        raise PreconditionError("L must be > 0")
    if int(T) != T or T < 1:
        raise PreconditionError("T must be an integer >= 1")
    for name, v in (("sigma", sigma), ("tau", tau), ("alpha", alpha)):
        if not v >= 0:
            raise PreconditionError(f"{name} must be >= 0")
    return 1.0 / (L + np.sqrt(T * L) * sigma + 4.0 * tau * L * alpha)


class StalenessStats:
    """Histogram of write delays measured in per-ID update counts."""

    def __init__(self, keep_log: bool = False):
        self.hist = np.zeros(0, np.int64)
        self.max = 0
        self.count = 0
        self.log: Optional[list] = [] if keep_log else None

    def record(self, read_version: int, current_version: int):
        self.record_many(np.array([int(current_version) - int(read_version)], np.int64))

    def record_many(self, delays: np.ndarray):
        delays = np.asarray(delays, np.int64)
        if not delays.size:
            return
        if delays.min() < 0:
            raise ClockError(f"negative staleness {int(delays.min())}: read newer than write")
        top = int(delays.max())
        if top >= len(self.hist):
            self.hist = np.concatenate([self.hist, np.zeros(top + 1 - len(self.hist), np.int64)])
        self.hist += np.bincount(delays, minlength=len(self.hist))
        self.max = max(self.max, top)
        self.count += int(delays.size)
        if self.log is not None:
            self.log.extend(delays.tolist())

    def as_dict(self) -> Dict[int, int]:
        return {i: int(c) for i, c in enumerate(self.hist) if c}


def record_staleness(stats: StalenessStats, read_version: int, current_version: int):
    stats.record(read_version, current_version)


class StalenessGate:
    """Admission test for embedding reads under a staleness cap.

    ``add_step`` registers the samples planned for a step; ``advance`` moves
    the read point.  A read for a sample planned at step ``c``, made at step
    ``r``, is admitted when none of its IDs occurs in more than ``cap`` of
    the planned batches ``r .. c-1``.  The bound is exact while the planned
    schedule holds (no dropped samples shifting later ones forward).
    """

    def __init__(self, cap: int):
        self.cap = cap
        self.current = 0
        self._planned: Dict[int, int] = {}
        self._step_samples: Dict[int, list] = {}
        self._step_ids: Dict[int, set] = {}
        self._occ: Dict[int, deque] = defaultdict(deque)
        self.blocked = 0

    def add_step(self, step: int, sample_ids: Sequence[int], features: Sequence):
        ids = set()
        for f in features:
            for grp in f:
                ids.update(grp)
        for s in sample_ids:
            self._planned[int(s)] = step
        self._step_samples[step] = list(sample_ids)
        self._step_ids[step] = ids
        for i in ids:
            self._occ[i].append(step)

    def advance(self, step: int):
        for u in sorted(k for k in self._step_ids if k < step):
            for i in self._step_ids.pop(u):
                dq = self._occ[i]
                dq.popleft()
                if not dq:
                    del self._occ[i]
            for s in self._step_samples.pop(u):
                self._planned.pop(int(s), None)
        self.current = step

    def writes_before(self, feature_id: int, step: int) -> int:
        dq = self._occ.get(feature_id)
        return 0 if dq is None else sum(1 for u in dq if u < step)

    def __call__(self, sample_id: int, features) -> bool:
        c = self._planned.get(int(sample_id), self.current)
        if c <= self.current:
            return True
        for grp in features:
            for i in grp:
                if self.writes_before(i, c) > self.cap:
                    self.blocked += 1
                    return False
        return True


@dataclass
class RunMetrics:
    mode: str
    status: str = "ok"
    reason: str = ""
    steps_planned: int = 0
    steps_run: int = 0
    rows: List[dict] = field(default_factory=list)
    auc_trace: List[tuple] = field(default_factory=list)
    final_auc: Optional[float] = None
    samples_trained: int = 0
    samples_per_sec: float = 0.0  # against the cluster time model
    wall_samples_per_sec: float = 0.0  # single-process wall clock
    simulated_seconds: float = 0.0
    utilization: Dict[str, float] = field(default_factory=dict)
    staleness: Optional[StalenessStats] = None
    registered: int = 0
    trained: int = 0
    dropped: int = 0
    late_drops: int = 0
    nn_discarded: int = 0
    push_failures: int = 0
    blocked_reads: int = 0
    evictions: int = 0
    ps_misses: int = 0
    recoveries: List[dict] = field(default_factory=list)
    phase_seconds: Dict[str, float] = field(default_factory=lambda: defaultdict(float))
    final_digest: str = ""
    config: dict = field(default_factory=dict)

    @property
    def max_staleness(self) -> int:
        return 0 if self.staleness is None else self.staleness.max

    @property
    def loss_trace(self) -> List[float]:
        return [r["loss"] for r in self.rows]

    @property
    def conservation_ok(self) -> bool:
        return self.registered == self.trained + self.dropped

    def to_report(self) -> dict:
        return {
            "csv_schema": CSV_SCHEMA_VERSION,
            "mode": self.mode,
            "status": self.status,
            "reason": self.reason,
            "steps_planned": self.steps_planned,
            "steps_run": self.steps_run,
            "final_auc": self.final_auc,
            "auc_trace": [[s, a] for s, a in self.auc_trace],
            "final_loss": self.rows[-1]["loss"] if self.rows else None,
            "samples_trained": self.samples_trained,
            "staleness_histogram": {str(k): v for k, v in (self.staleness.as_dict() if self.staleness else {}).items()},
            "max_staleness": self.max_staleness,
            "counters": {
                "registered": self.registered, "trained": self.trained, "dropped": self.dropped,
                "late_drops": self.late_drops, "nn_discarded": self.nn_discarded,
                "push_failures": self.push_failures, "blocked_reads": self.blocked_reads,
                "evictions": self.evictions, "ps_misses": self.ps_misses,
            },
            "recoveries": self.recoveries,
            "final_digest": self.final_digest,
            "config": self.config,
            # wall-clock dependent fields live here so reports compare equal without them
            "timing": {"samples_per_sec": self.samples_per_sec,
                       "wall_samples_per_sec": self.wall_samples_per_sec,
                       "simulated_seconds": self.simulated_seconds,
                       "utilization": {k: round(v, 4) for k, v in sorted(self.utilization.items())},
                       "phase_seconds": {k: round(v, 6) for k, v in sorted(self.phase_seconds.items())}},
        }

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(",".join(CSV_COLUMNS) + "\n")
            for r in self.rows:
                f.write(",".join(_fmt(r[c]) for c in CSV_COLUMNS) + "\n")

    def write_report(self, path):
        with open(path, "w") as f:
            json.dump(self.to_report(), f, indent=2, sort_keys=True)
            f.write("\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


class Evaluator:
    """Held-out AUC against the PS without touching its recency order."""

    def __init__(self, ds: Dataset, dim: int, aggregation: str = "mean"):
        ids, seg = ds.flat_ids()
        self.uniq, self.inv = np.unique(ids, return_inverse=True)
        self.seg = seg
        self.n = len(ds)
        self.G = ds.group_count
        self.dim = dim
        counts = np.bincount(seg, minlength=self.n * self.G).astype(np.float32)
        self.scale = np.zeros_like(counts)
        nz = counts > 0
        self.scale[nz] = 1.0 / counts[nz] if aggregation == "mean" else 1.0
        self.non_id = ds.non_id
        self.labels = ds.labels

    def predict(self, model: dense_nn.DenseModel, ps: EmbeddingPS) -> np.ndarray:
        vecs = ps.peek(self.uniq)
        pooled = np.zeros((self.n * self.G, self.dim), np.float32)
        np.add.at(pooled, self.seg, vecs[self.inv])
        pooled *= self.scale[:, None]
        x = np.concatenate([pooled.reshape(self.n, -1), self.non_id], axis=1)
        p, _ = dense_nn.forward(model, x)
        return p

    def auc(self, model, ps) -> float:
        return dense_nn.auc(self.predict(model, ps), self.labels)


# -- dense checkpoints ------------------------------------------------------

DENSE_TRAILER = struct.Struct("<4sI")  # magic, CRC32 of the npz bytes before it
DENSE_MAGIC = b"HRDC"


def dense_checkpoint_bytes(model: dense_nn.DenseModel, optimizer, step: int) -> bytes:
    state = optimizer.state()
    arrays = {f"p{i}": p for i, p in enumerate(model.params())}
    arrays.update({f"m{i}": a for i, a in enumerate(state.get("m", []))})
    arrays.update({f"v{i}": a for i, a in enumerate(state.get("v", []))})
    buf = io.BytesIO()
    np.savez(buf, step=np.int64(step), opt_t=np.int64(state.get("t", 0)), n=np.int64(len(model.params())),
             version=np.int64(model.version), **arrays)
    blob = buf.getvalue()
    return blob + DENSE_TRAILER.pack(DENSE_MAGIC, zlib.crc32(blob))


def save_dense_checkpoint(path, model: dense_nn.DenseModel, optimizer, step: int):
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(dense_checkpoint_bytes(model, optimizer, step))
    os.replace(tmp, path)


def load_dense_checkpoint(path, model: dense_nn.DenseModel, optimizer) -> int:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < DENSE_TRAILER.size:
        raise CheckpointCorruptError("dense checkpoint truncated")
    magic, crc = DENSE_TRAILER.unpack_from(data, len(data) - DENSE_TRAILER.size)
    blob = data[:-DENSE_TRAILER.size]
    if magic != DENSE_MAGIC or zlib.crc32(blob) != crc:
        raise CheckpointCorruptError("dense checkpoint checksum mismatch")
    try:
        with np.load(io.BytesIO(blob)) as z:
            n = int(z["n"])
            params = [z[f"p{i}"] for i in range(n)]
            opt = None
            if "m0" in z:
                opt = {"t": int(z["opt_t"]), "m": [z[f"m{i}"] for i in range(n)],
                       "v": [z[f"v{i}"] for i in range(n)]}
            version, step = int(z["version"]), int(z["step"])
    except (ValueError, KeyError, OSError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointCorruptError(f"dense checkpoint unreadable: {exc}") from None
    if [p.shape for p in params] != [p.shape for p in model.params()]:
        raise CheckpointCorruptError("dense checkpoint shapes do not match the model")
    model.load_params(params)
    model.version = version
    if opt is not None:
        optimizer.load_state(opt)
    return step


# -- cluster ----------------------------------------------------------------

class Cluster:
    """Every process of a run, wired together over in-process or TCP links."""

    def __init__(self, cfg: RunConfig, train: Dataset, staleness: Optional[StalenessStats] = None,
                 gate: Optional[StalenessGate] = None, depth: int = 0):
        c, m, t = cfg.cluster, cfg.model, cfg.train
        self.cfg = cfg
        self._servers = []
        self.costs = CostRecorder()
        self.ps = EmbeddingPS(c.ps_shards, m.ps_capacity, m.embedding_dim, m.emb_optimizer, m.rng_salt)
        self.ps_endpoints = [wire.Endpoint(s.handle_frame, f"ps{k}") for k, s in enumerate(self.ps.shards)]
        G, d, K, E = cfg.data.groups, m.embedding_dim, c.nn_workers, c.embedding_workers
        per_step = K * t.batch_size
        capacity = max(4 * per_step, (depth + 2) * -(-per_step // E))
        self.ews = []
        self.ew_endpoints = []
        for r in range(E):
            client = PsClient([self._link(ep, 0.0) for ep in self.ps_endpoints], d)
            ew = EmbeddingWorker(r, client, G, d, capacity=capacity, lr=t.emb_lr, aggregation=m.aggregation,
                                 compress=t.codec and t.codec_pull, kappa=t.kappa, staleness=staleness, gate=gate)
            self.ews.append(ew)
            self.ew_endpoints.append(wire.Endpoint(self.costs.wrap(r, ew.handle_frame), f"ew{r}"))
        dims = [G * d + cfg.data.non_id_dim, *m.hidden, 1]
        base = dense_nn.DenseModel.init(dims, seed=t.seed)
        # link latency is charged on the Timeline, not slept
        self.nn = []
        for k in range(K):
            links = [self._link(ep, 0.0) for ep in self.ew_endpoints]
            self.nn.append(NNWorker(k, base.copy(), links, G, d, dense_nn.make_optimizer(m.dense_optimizer, t.lr),
                                    compress_push=t.codec and t.codec_push, kappa=t.kappa, shuffle=t.shuffle,
                                    seed=t.seed * 1000 + k))
        self.loader = DataLoader(train, [self._link(ep, 0.0) for ep in self.ew_endpoints], self.nn)

    def _link(self, endpoint, latency):
        if self.cfg.cluster.transport == "tcp":
            server = wire.TcpServer(endpoint, self.cfg.cluster.listen_addr).start()
            self._servers.append(server)
            return wire.TcpTransport(server.address, latency=latency)
        return wire.InProcessTransport(endpoint, latency)

    @property
    def models(self):
        return [w.model for w in self.nn]

    def close(self):
        for s in self._servers:
            s.stop()
        self._servers = []


def inject_failure(cluster: Cluster, target: str, at_step: int, checkpoints: "CheckpointManager",
                   metrics: Optional[RunMetrics] = None):
    """Kill and recover one component, following the per-tier recovery rules."""
    if target == "embedding_worker":
        r = at_step % len(cluster.ews)
        n = cluster.ews[r].drop_buffer()
        cluster.ew_endpoints[r].kill()
        cluster.ew_endpoints[r].revive()
        event = {"target": target, "step": at_step, "rank": r, "dropped": n}
    elif target == "embedding_ps":
        k = at_step % len(cluster.ps.shards)
        if checkpoints.last_step is None:
            raise UnrecoverableRunError(f"PS shard {k} failed at step {at_step} before any checkpoint")
        cluster.ps_endpoints[k].kill()
        restored = PsShard.load_checkpoint(checkpoints.ps_path(k))
        cluster.ps.shards[k].restore_from(restored)
        cluster.ps_endpoints[k].revive()
        event = {"target": target, "step": at_step, "shard": k, "checkpoint_step": checkpoints.last_step}
    elif target == "nn_worker":
        if checkpoints.last_step is None:
            raise UnrecoverableRunError(f"NN worker failed at step {at_step} before any checkpoint")
        checkpoints.restore_dense(cluster)
        event = {"target": target, "step": at_step, "checkpoint_step": checkpoints.last_step}
    else:
        raise PreconditionError(f"unknown failure target {target!r}")
    log.info("recovered from %s", event)
    if metrics is not None:
        metrics.recoveries.append(event)
    return event


class CheckpointManager:
    def __init__(self, directory: Optional[str]):
        self._own = directory is None or directory == ""
        self.dir = tempfile.mkdtemp(prefix="hybridrec-ckpt-") if self._own else directory
        os.makedirs(self.dir, exist_ok=True)
        self.last_step: Optional[int] = None

    def ps_path(self, k: int) -> str:
        return os.path.join(self.dir, f"ps_shard{k}.ckpt")

    @property
    def dense_path(self) -> str:
        return os.path.join(self.dir, "dense.npz")

    def save(self, cluster: Cluster, step: int, averaged_model=None):
        for k, shard in enumerate(cluster.ps.shards):
            shard.save_checkpoint(self.ps_path(k))
        model = averaged_model if averaged_model is not None else cluster.nn[0].model
        save_dense_checkpoint(self.dense_path, model, cluster.nn[0].optimizer, step)
        self.last_step = step

    def restore_dense(self, cluster: Cluster):
        for w in cluster.nn:
            load_dense_checkpoint(self.dense_path, w.model, w.optimizer)
        verify_replicas(cluster.models)

    def cleanup(self):
        if self._own:
            shutil.rmtree(self.dir, ignore_errors=True)


def pipeline_depth(cfg: RunConfig) -> int:
    t = cfg.train
    if t.mode == "sync":
        return 0
    if t.mode == "async":
        return t.async_depth
    return t.prefetch_depth


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.data_file:
        return Dataset.load(cfg.data.data_file)
    return generate_synthetic(cfg.data.synth(cfg.model.embedding_dim), seed=cfg.train.seed)


Hook = Callable[[int, Cluster, str], None]


def run_training(cfg: RunConfig, dataset: Optional[Dataset] = None, hooks: Optional[Hook] = None,
                 keep_staleness_log: bool = False) -> RunMetrics:
    """Run one training job and return its metrics.

    A non-finite loss or gradient ends the run early with status
    ``aborted``.  ``hooks(step, cluster, event)`` is called at step
    boundaries and around checkpoints and recoveries (used by tests).
    """
    t = cfg.train
    if t.mode not in MODES:
        raise PreconditionError(f"unknown mode {t.mode!r}")
    ds = dataset if dataset is not None else load_dataset(cfg)
    train, test = ds.split(cfg.data.test_fraction)
    K, b = cfg.cluster.nn_workers, t.batch_size
    per_step = K * b
    T = t.steps or (len(train) * t.epochs) // per_step
    if T < 1:
        raise PreconditionError(f"{len(train)} training samples cannot fill one step of {per_step}")
    D = min(pipeline_depth(cfg), T)

    stats = StalenessStats(keep_staleness_log)
    # the async baseline runs unbounded; only the hybrid modes enforce the cap
    gate = StalenessGate(t.staleness_cap) if t.mode.startswith("hybrid") and D > t.staleness_cap else None
    cluster = Cluster(cfg, train, stats, gate, D)
    ckpt = CheckpointManager(t.checkpoint_dir or None)
    metrics = RunMetrics(t.mode, steps_planned=T, staleness=stats, config=cfg.to_dict())
    phase = metrics.phase_seconds
    clock = Timeline(K, cfg.cluster.embedding_workers, cfg.cluster.fetch_latency_ms / 1000.0,
                     cfg.cluster.allreduce_latency_ms / 1000.0)
    costs = cluster.costs
    eval_small = Evaluator(test.subset(np.arange(min(t.eval_samples, len(test)))), cfg.model.embedding_dim,
                           cfg.model.aggregation) if t.eval_every and t.eval_samples else None
    faults: Dict[int, List[FaultSpec]] = defaultdict(list)
    for f in cfg.faults:
        faults[f.step].append(f)
    hook = hooks or (lambda *_: None)
    order = np.arange(T * per_step) % len(train)
    pushes = []

    def dispatch(s):
        ta = time.perf_counter()
        costs.clear()
        rows = order[s * per_step:(s + 1) * per_step]
        sids = cluster.loader.dispatch(rows)
        if gate is not None:
            gate.add_step(s, sids, train.batch_features(rows))
        for w in cluster.nn:
            w.flush_pulls()
        elapsed = time.perf_counter() - ta
        reg = costs.take(MsgType.REGISTER_SAMPLE)
        pull = costs.take(MsgType.PULL_EMBEDDING)
        # sync: the next read waits for the previous write-back; otherwise
        # the loader may run D steps ahead of the NN workers
        not_before = clock.step_end.get(s - 1, 0.0) if D == 0 else clock.step_start.get(s - D, 0.0)
        clock.dispatch(s, not_before, elapsed - sum(reg.values()) - sum(pull.values()), reg, pull)
        phase["dispatch"] += elapsed

    def eval_model():
        if t.mode == "async":
            avg = cluster.nn[0].model.copy()
            avg.load_params(allreduce_mean([m.params() for m in cluster.models])[0])
            return avg
        return cluster.nn[0].model

    def emit(k, w, batch, g, step, wait):
        tb = time.perf_counter()
        costs.clear()
        out = w.emit_embedding_grads(batch, g, step)
        elapsed = time.perf_counter() - tb
        ew_cost = costs.take(MsgType.PUSH_GRADIENT)
        phase["push"] += elapsed
        ack = clock.push(k, elapsed - sum(ew_cost.values()), ew_cost, wait)
        return out, elapsed - sum(ew_cost.values()), ack

    trained_samples = 0
    wall = 0.0
    latency = cfg.cluster.allreduce_latency_ms / 1000.0
    try:
        t0 = time.perf_counter()
        for s in range(D):
            dispatch(s)
        wall += time.perf_counter() - t0
        for step in range(T):
            t0 = time.perf_counter()
            hook(step, cluster, "step_start")
            sync_failed = False
            for f in faults.get(step, ()):
                hook(step, cluster, f"fault:{f.target}")
                if f.target == "nn_worker":
                    sync_failed = True  # the replica misses this step's barrier
                else:
                    inject_failure(cluster, f.target, step, ckpt, metrics)
                    hook(step, cluster, f"recovered:{f.target}")
            if gate is not None:
                gate.advance(step)
            if D == 0:
                dispatch(step)
            clock.begin_step(step, step)
            if D and step + D < T:
                dispatch(step + D)

            ta = time.perf_counter()
            batches = []
            for k, w in enumerate(cluster.nn):
                costs.clear()
                w.poll()
                if w.has_blocked():
                    w.flush_pulls()
                batches.append(_fill(w, b))
                retry = costs.take(MsgType.PULL_EMBEDDING)
                if any(retry.values()):
                    clock.retry_pulls(k, retry)
            phase["pull_wait"] += time.perf_counter() - ta

            losses, bundles = [], []
            for k, (w, batch) in enumerate(zip(cluster.nn, batches)):
                ta = time.perf_counter()
                loss, g = w.train_step(batch)
                dt = time.perf_counter() - ta
                clock.compute(k, dt)
                phase["compute"] += dt
                losses.append(loss)
                bundles.append(g)

            step_pushes, acks = [], 0.0
            wait = t.mode == "sync"  # the write-back completes before the next batch's read
            if t.mode == "async":
                for k, (w, batch, g) in enumerate(zip(cluster.nn, batches, bundles)):
                    out, _, ack = emit(k, w, batch, g, step, wait)
                    step_pushes.extend(out)
                    ta = time.perf_counter()
                    w.optimizer.step(w.model, g.dense())
                    dt = time.perf_counter() - ta
                    clock.compute(k, dt)
                    phase["compute"] += dt
                if (step + 1) % t.async_average_every == 0:
                    ta = time.perf_counter()
                    average_models(cluster.models)
                    dt = time.perf_counter() - ta
                    clock.barrier(dt)
                    phase["sync"] += dt
                if sync_failed:
                    inject_failure(cluster, "nn_worker", step, ckpt, metrics)
                    hook(step, cluster, "recovered:nn_worker")
            else:
                grads = [g.dense() for g in bundles]
                if sync_failed:
                    grads[0] = None
                overlap = None
                if t.mode == "hybrid_opt":
                    # embedding traffic goes out while the gradient all-reduce is in flight
                    overlap = []
                    for k, (w, batch, g) in enumerate(zip(cluster.nn, batches, bundles)):
                        out, send, ack = emit(k, w, batch, g, step, False)
                        clock.nn[k] -= send  # charged through the overlap instead
                        overlap.append(send)
                        step_pushes.extend(out)
                ta = time.perf_counter()
                try:
                    averaged = allreduce_mean(grads)
                    verify = bool(t.verify_every) and (step + 1) % t.verify_every == 0
                    dense_update_and_verify(cluster.nn, averaged, verify)
                except SyncFailureError as exc:
                    log.warning("step %d: %s; reloading dense checkpoint", step, exc)
                    inject_failure(cluster, "nn_worker", step, ckpt, metrics)
                    hook(step, cluster, "recovered:nn_worker")
                dt = time.perf_counter() - ta
                clock.barrier(dt, overlap)
                phase["sync"] += dt
                if t.mode != "hybrid_opt":
                    for k, (w, batch, g) in enumerate(zip(cluster.nn, batches, bundles)):
                        out, _, ack = emit(k, w, batch, g, step, wait)
                        step_pushes.extend(out)
                        acks = max(acks, ack)
            clock.end_step(step, acks)

            if wait:
                cluster.nn[0].settle_pushes(step_pushes)
            else:
                pushes.extend(step_pushes)
                pushes = _settle_ready(cluster.nn[0], pushes)

            trained_samples += sum(len(x) for x in batches)
            wall += time.perf_counter() - t0
            span = clock.makespan()
            valid = [x for x in losses if x is not None]
            row = {"step": step, "loss": float(np.mean(valid)) if valid else None, "auc": None,
                   "samples_per_sec": trained_samples / span if span > 0 else 0.0,
                   "max_staleness": stats.max, "drops": sum(e.dropped + e.late_drops for e in cluster.ews)}
            metrics.steps_run = step + 1

            te = time.perf_counter()
            if t.checkpoint_every and (step + 1) % t.checkpoint_every == 0:
                ckpt.save(cluster, step + 1, eval_model() if t.mode == "async" else None)
                hook(step, cluster, "checkpoint")
            if eval_small is not None and ((step + 1) % t.eval_every == 0 or step == T - 1):
                a = eval_small.auc(eval_model(), cluster.ps)
                row["auc"] = a
                metrics.auc_trace.append((step + 1, a))
            phase["eval"] += time.perf_counter() - te
            metrics.rows.append(row)
            hook(step, cluster, "step_end")

        cluster.nn[0].settle_pushes(pushes)
        pushes = []
        te = time.perf_counter()
        metrics.final_auc = Evaluator(test, cfg.model.embedding_dim, cfg.model.aggregation).auc(eval_model(), cluster.ps)
        phase["eval"] += time.perf_counter() - te
        if t.mode != "async":
            metrics.final_digest = verify_replicas(cluster.models)
    except DivergenceError as exc:
        metrics.status = "aborted"
        metrics.reason = f"divergence at step {metrics.steps_run}: {exc}"
        log.error(metrics.reason)
    finally:
        span = clock.makespan()
        metrics.samples_trained = trained_samples
        metrics.samples_per_sec = trained_samples / span if span > 0 else 0.0
        metrics.wall_samples_per_sec = trained_samples / wall if wall > 0 else 0.0
        metrics.simulated_seconds = span
        if span > 0:
            # mean busy fraction of each tier over the simulated run
            tiers = {"loader": cfg.cluster.embedding_workers, "embedding": cfg.cluster.embedding_workers, "nn": K}
            metrics.utilization = {k: clock.busy[k] / (span * n) for k, n in tiers.items()}
        metrics.registered = sum(e.registered for e in cluster.ews)
        metrics.trained = sum(e.applied for e in cluster.ews)
        metrics.dropped = sum(e.dropped for e in cluster.ews)
        metrics.late_drops = sum(e.late_drops for e in cluster.ews)
        metrics.nn_discarded = sum(w.discarded for w in cluster.nn)
        metrics.push_failures = sum(w.push_failures for w in cluster.nn)
        metrics.blocked_reads = sum(w.blocked_reads for w in cluster.nn)
        metrics.evictions = cluster.ps.eviction_count
        metrics.ps_misses = cluster.ps.miss_count
        cluster.close()
        ckpt.cleanup()
    return metrics


def _fill(w: NNWorker, b: int):
    for _ in range(100_000):
        try:
            return w.assemble_minibatch(b)
        except WouldBlock:
            if w.inflight:
                w.poll(wait=True)
            elif w.has_blocked():
                w.flush_pulls()
            else:
                raise InternalConsistencyError(f"NN worker {w.rank} waits on samples nobody will deliver")
    raise InternalConsistencyError(f"NN worker {w.rank} made no progress assembling a batch")


def _settle_ready(worker: NNWorker, pushes):
    done = [p for p in pushes if p[2].ready()]
    if done:
        worker.settle_pushes(done)
    return [p for p in pushes if not p[2].ready()] if done else pushes


@dataclass
class ComparisonReport:
    runs: Dict[str, RunMetrics]
    checks: Dict[str, bool]
    partial: bool = False

    def gap(self, mode: str) -> Optional[float]:
        ref = self.runs.get("sync")
        run = self.runs.get(mode)
        if ref is None or run is None or ref.final_auc is None or run.final_auc is None:
            return None
        return abs(run.final_auc - ref.final_auc)

    def write_csv(self, path):
        sync = self.runs.get("sync")
        base_tp = sync.samples_per_sec if sync else 0.0
        with open(path, "w") as f:
            f.write("kind,mode,auc,auc_gap,samples_per_sec,speedup_vs_sync,max_staleness,status\n")
            for mode, r in self.runs.items():
                speed = r.samples_per_sec / base_tp if base_tp else None
                f.write(",".join(["run", mode, _fmt(r.final_auc), _fmt(self.gap(mode)), _fmt(r.samples_per_sec),
                                  _fmt(speed), str(r.max_staleness), r.status]) + "\n")
            for name, ok in self.checks.items():
                f.write(f"check,{name},,,,,,{'pass' if ok else 'fail'}\n")


def compare_modes(base_cfg: RunConfig, dataset: Optional[Dataset] = None,
                  modes: Sequence[str] = ("sync", "hybrid_opt", "async")) -> ComparisonReport:
    """Run the same job in several modes on identical data and seeds."""
    ds = dataset if dataset is not None else load_dataset(base_cfg)
    runs = {}
    for mode in modes:
        try:
            runs[mode] = run_training(base_cfg.set(train__mode=mode), ds)
        except (UnrecoverableRunError, PreconditionError, InternalConsistencyError, ConsistencyError) as exc:
            log.error("%s run failed: %s", mode, exc)
            runs[mode] = RunMetrics(mode, status="failed", reason=str(exc))
    partial = any(r.status != "ok" for r in runs.values())
    rep = ComparisonReport(runs, {}, partial)
    checks = {}
    if {"sync", "hybrid_opt", "async"} <= set(runs) and not partial:
        gh, ga = rep.gap("hybrid_opt"), rep.gap("async")
        checks["hybrid_gap_le_0.3pct"] = gh <= 0.003
        checks["gap_hybrid_lt_async"] = gh < ga
        tp = {m: runs[m].samples_per_sec for m in runs}
        checks["throughput_async_ge_hybrid"] = tp["async"] >= tp["hybrid_opt"]
        checks["throughput_hybrid_ge_1.5x_sync"] = tp["hybrid_opt"] >= 1.5 * tp["sync"]
    rep.checks = checks
    return rep
