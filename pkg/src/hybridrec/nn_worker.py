"""NN worker: input buffering, embedding pulls, minibatch assembly, dense
training and the gradient all-reduce that keeps replicas identical."""
import logging
import threading
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import codec, dense_nn, wire
from .core import Minibatch, decode_rank
from .embedding_worker import decode_embedding_reply, encode_push
from .errors import (ConsistencyError, DivergenceError, ProtocolError, SyncFailureError, TransportError,
                     WouldBlock)
from .wire import MsgType

log = logging.getLogger(__name__)


class NNWorker:
    """One data-parallel replica of the dense network.

    ``ew_transports[r]`` reaches embedding worker ``r``.  Pulls are batched
    per embedding worker and issued asynchronously; replies are joined with
    the buffered non-ID features as they are polled.
    """

    def __init__(self, rank: int, model: dense_nn.DenseModel, ew_transports: Sequence, group_count: int,
                 dim: int, optimizer=None, compress_push: bool = False, kappa: float = codec.DEFAULT_KAPPA,
                 shuffle: str = "fifo", seed: int = 0, capacity: int = 1 << 20):
        if shuffle not in ("fifo", "random"):
            raise ValueError(f"unknown batch selection policy {shuffle!r}")
        self.rank = rank
        self.model = model
        self.optimizer = optimizer or dense_nn.SGD(0.05)
        self.ew = list(ew_transports)
        self.group_count = group_count
        self.dim = dim
        self.compress_push = compress_push
        self.kappa = kappa
        self.shuffle = shuffle
        self.rng = np.random.default_rng(seed)
        self.capacity = capacity
        self._lock = threading.Lock()
        self._inputs: "OrderedDict[int, tuple]" = OrderedDict()
        self._emb: Dict[int, np.ndarray] = {}
        self._pending: Dict[int, List[int]] = {}
        self._inflight = []
        self.discarded = 0
        self.push_failures = 0
        self.blocked_reads = 0
        self.consumed = 0

    def __len__(self):
        return len(self._inputs)

    # -- input side ------------------------------------------------------

    def buffer_input(self, sample_id: int, non_id, label: float):
        sid = int(sample_id)
        with self._lock:
            if sid in self._inputs:
                raise ProtocolError(f"sample {sid:#x} already buffered on NN worker {self.rank}")
            if len(self._inputs) >= self.capacity:
                raise ProtocolError(f"NN worker {self.rank} input buffer full")
            self._inputs[sid] = (np.asarray(non_id, np.float32), np.float32(label))
            self._pending.setdefault(decode_rank(sid), []).append(sid)

    def flush_pulls(self) -> int:
        """Issue one PullEmbedding per embedding worker with queued samples."""
        with self._lock:
            pending, self._pending = self._pending, {}
        sent = 0
        for r in sorted(pending):
            sids = pending[r]
            if not sids:
                continue
            frame = wire.encode_frame(MsgType.PULL_EMBEDDING, 0, [np.array(sids, np.uint64)])
            self._inflight.append((r, sids, self.ew[r].request_async(frame)))
            sent += len(sids)
        return sent

    @property
    def inflight(self) -> int:
        return len(self._inflight)

    def poll(self, wait: bool = False) -> int:
        """Join arrived replies (all in-flight ones if ``wait``); returns samples joined."""
        joined = 0
        keep = []
        for r, sids, pending in self._inflight:
            if not wait and not pending.ready():
                keep.append((r, sids, pending))
                continue
            try:
                frame = wire.raise_if_error(wire.decode_frame(pending.result()))
            except TransportError as exc:
                log.warning("pull from embedding worker %d failed (%s); will retry", r, exc)
                with self._lock:
                    self._pending.setdefault(r, []).extend(s for s in sids if s in self._inputs)
                continue
            res = decode_embedding_reply(frame)
            with self._lock:
                for i, s in enumerate(res.served):
                    if s in self._inputs:
                        self._emb[s] = res.embeddings[i]
                        joined += 1
                if res.blocked:
                    self.blocked_reads += len(res.blocked)
                    self._pending.setdefault(r, []).extend(res.blocked)
                for s in res.unknown:
                    # the embedding worker lost it; it is already counted there
                    if self._inputs.pop(s, None) is not None:
                        self.discarded += 1
        self._inflight = keep
        return joined

    def has_blocked(self) -> bool:
        return any(self._pending.values())

    def eligible_count(self) -> int:
        return len(self._emb)

    def buffered_ids(self) -> List[int]:
        return list(self._inputs)

    def assemble_minibatch(self, b: int) -> Minibatch:
        """Pop a batch of up to ``b`` samples.

        FIFO takes the oldest ``b`` buffered samples and raises WouldBlock
        until all of them have embeddings.  ``random`` draws ``b`` of the
        samples whose embeddings have arrived.
        """
        with self._lock:
            if self.shuffle == "fifo":
                take = []
                for s in self._inputs:
                    if len(take) == b:
                        break
                    if s not in self._emb:
                        raise WouldBlock(f"sample {s:#x} has no embedding yet")
                    take.append(s)
            else:
                ready = [s for s in self._inputs if s in self._emb]
                if len(ready) < min(b, len(self._inputs)):
                    raise WouldBlock(f"{len(ready)} eligible samples, need {b}")
                pick = self.rng.choice(len(ready), size=min(b, len(ready)), replace=False)
                take = [ready[i] for i in sorted(pick)]
            rows = [self._inputs.pop(s) for s in take]
            embs = [self._emb.pop(s) for s in take]
        self.consumed += len(take)
        n = len(take)
        emb = np.stack(embs) if n else np.zeros((0, self.group_count, self.dim), np.float32)
        nid_dim = self.model.input_dim - self.group_count * self.dim
        x = np.stack([r[0] for r in rows]) if n else np.zeros((0, nid_dim), np.float32)
        y = np.array([r[1] for r in rows], np.float32)
        return Minibatch(np.array(take, np.uint64), emb, x, y)

    def discard_all(self) -> int:
        """Forget every buffered input (replica restart)."""
        with self._lock:
            n = len(self._inputs)
            self._inputs.clear()
            self._emb.clear()
            self._pending.clear()
        self._inflight = []
        return n

    # -- training --------------------------------------------------------

    def train_step(self, batch: Minibatch, model: Optional[dense_nn.DenseModel] = None):
        """Forward + backward on ``batch``; returns ``(loss, GradientBundle)``.

        The batch is processed in ascending sample-ID order so the result does
        not depend on arrival order; embedding gradients come back in the
        caller's order.
        """
        model = self.model if model is None else model
        n = len(batch)
        if n == 0:
            zeros = dense_nn.DenseModel.zeros(model.dims, model.dtype)
            return None, dense_nn.GradientBundle(zeros.weights, zeros.biases,
                                                 np.zeros((0, self.group_count, self.dim), np.float32))
        order = np.argsort(batch.sample_ids, kind="stable")
        sb = batch.take(order)
        p, cache = dense_nn.forward(model, sb)
        loss = dense_nn.bce_loss(p, sb.labels)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss on NN worker {self.rank} at model version {model.version}")
        g = dense_nn.backward(model, sb, cache, sb.labels)
        inv = np.empty_like(order)
        inv[order] = np.arange(n)
        g.embedding = g.embedding[inv]
        g.non_id = g.non_id[inv]
        return loss, g

    def emit_embedding_grads(self, batch: Minibatch, bundle: dense_nn.GradientBundle, step: Optional[int] = None):
        """Send per-sample embedding gradients back to the originating workers.

        One PushGradient per embedding worker; not retried.  Returns the
        pending replies so a caller that wants the write to finish can wait.
        """
        if not len(batch):
            return []
        ranks = (batch.sample_ids >> np.uint64(56)).astype(np.int64)
        out = []
        for r in np.unique(ranks).tolist():
            pos = np.flatnonzero(ranks == r)
            frame = encode_push(batch.sample_ids[pos], bundle.embedding[pos], step, self.compress_push, self.kappa)
            pending = self.ew[r].request_async(frame)
            out.append((r, len(pos), pending))
        return out

    def settle_pushes(self, pushes) -> int:
        """Wait for push acknowledgements; failures are logged and counted."""
        failed = 0
        for r, n, pending in pushes:
            try:
                wire.raise_if_error(wire.decode_frame(pending.result()))
            except (TransportError, ProtocolError) as exc:
                log.warning("gradient push to embedding worker %d lost (%s)", r, exc)
                failed += n
        self.push_failures += failed
        return failed


def _tree_sum(vals: List[np.ndarray]) -> np.ndarray:
    while len(vals) > 1:
        vals = [vals[i] + vals[i + 1] if i + 1 < len(vals) else vals[i] for i in range(0, len(vals), 2)]
    return vals[0]


def allreduce_mean(grads: Sequence[Optional[Sequence[np.ndarray]]]) -> List[List[np.ndarray]]:
    """Elementwise mean of the K workers' dense gradients.

    ``grads[k]`` is worker ``k``'s list of arrays, or None if it failed to
    reach the barrier.  Every contribution is serialized into a frame and
    back (what a real transport would carry), summed in a pairwise tree in
    ascending rank order in float64 and divided by K, then rounded once to
    the gradient dtype.  Each worker receives its own copy of the same bits.
    """
    if not grads:
        raise SyncFailureError("all-reduce with no participants")
    missing = [k for k, g in enumerate(grads) if g is None]
    if missing:
        raise SyncFailureError(f"workers {missing} missing at the gradient barrier")
    like = list(grads[0])
    shapes = [a.shape for a in like]
    flats = []
    for k, g in enumerate(grads):
        if [a.shape for a in g] != shapes:
            raise SyncFailureError(f"worker {k} gradient shapes differ")
        flat = np.concatenate([np.asarray(a).ravel() for a in g]) if g else np.zeros(0, np.float32)
        frame = wire.decode_frame(wire.encode_frame(MsgType.PUSH_GRADIENT, 0, [flat]))
        flats.append(frame.array(0, flat.dtype))
    mean = (_tree_sum([f.astype(np.float64) for f in flats]) / len(flats)).astype(flats[0].dtype)
    return [dense_nn.unflatten_like(mean.copy(), like) for _ in grads]


def average_models(models: Sequence[dense_nn.DenseModel]):
    """Replace every model's parameters by the tree mean of all of them."""
    avg = allreduce_mean([m.params() for m in models])
    for m, p in zip(models, avg):
        m.load_params(p)


def verify_replicas(models: Sequence[dense_nn.DenseModel]) -> str:
    digests = [m.digest() for m in models]
    if len(set(digests)) > 1:
        raise ConsistencyError(f"dense replicas diverged: {digests}")
    return digests[0]


def dense_update_and_verify(workers: Sequence[NNWorker], averaged: Sequence[Sequence[np.ndarray]],
                            verify: bool = True):
    """Apply the averaged gradient on every replica, then check they agree."""
    for w, g in zip(workers, averaged):
        w.optimizer.step(w.model, g)
    if verify:
        return verify_replicas([w.model for w in workers])
    return None
