"""Embedding worker: sample registration, lock-free lookup/aggregation and
gradient fan-out to the parameter server.

The feature buffer lock covers only buffer inserts, reads and removals; all
PS round trips and the aggregation arithmetic run outside it.
"""
import logging
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import codec, wire
from .core import COUNTER_MASK, IdFeatures, ShardRouter, encode_sample_id
from .errors import BackpressureError, PreconditionError, ProtocolError, StaleSampleError
from .wire import FLAG_COMPRESSED, MsgType

log = logging.getLogger(__name__)


class PsClient:
    """Talks to PS shards over transports; same interface as EmbeddingPS."""

    def __init__(self, transports: Sequence, dim: int):
        self.transports = list(transports)
        self.router = ShardRouter(len(self.transports))
        self.dim = dim

    def _split(self, ids):
        route = self.router.route_many(ids)
        for k in range(len(self.transports)):
            pos = np.flatnonzero(route == k)
            if pos.size:
                yield k, pos

    def lookup(self, ids) -> Tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(ids, np.uint64)
        out = np.empty((len(ids), self.dim), np.float32)
        versions = np.empty(len(ids), np.uint64)
        for k, pos in self._split(ids):
            reply = wire.call(self.transports[k], MsgType.PULL_EMBEDDING, 0, [ids[pos]])
            out[pos] = reply.array(3, np.float32).reshape(len(pos), self.dim)
            versions[pos] = reply.array(2, np.uint64)
        return out, versions

    def apply_gradients(self, ids, grads, lr: float, step: Optional[int] = None) -> np.ndarray:
        ids = np.asarray(ids, np.uint64)
        grads = np.asarray(grads, np.float32)
        before = np.empty(len(ids), np.uint64)
        params = struct.pack("<dq", lr, -1 if step is None else step)
        for k, pos in self._split(ids):
            reply = wire.call(self.transports[k], MsgType.PUSH_GRADIENT, 0, [params, ids[pos], grads[pos]])
            before[pos] = reply.array(0, np.uint64)
        return before


@dataclass
class _Buffered:
    features: IdFeatures
    insert_step: int
    read_ids: Optional[np.ndarray] = None
    read_versions: Optional[np.ndarray] = None


@dataclass
class PullResult:
    served: List[int]
    embeddings: np.ndarray  # (len(served), groups, dim)
    blocked: List[int] = field(default_factory=list)
    unknown: List[int] = field(default_factory=list)


class EmbeddingWorker:
    """Buffers ID features keyed by sample ID and serves embedding pulls."""

    def __init__(self, rank: int, ps, group_count: int, dim: int, capacity: int = 4096, lr: float = 0.05,
                 aggregation: str = "mean", compress: bool = False, kappa: float = codec.DEFAULT_KAPPA,
                 staleness=None, gate: Optional[Callable[[int, IdFeatures], bool]] = None, dtype=np.float32):
        if aggregation not in ("mean", "sum"):
            raise PreconditionError(f"unknown aggregation {aggregation!r}")
        self.rank = rank
        self.ps = ps
        self.group_count = group_count
        self.dim = dim
        self.capacity = capacity
        self.lr = lr
        self.aggregation = aggregation
        self.compress = compress
        self.kappa = kappa
        self.staleness = staleness
        self.gate = gate
        self.dtype = np.dtype(dtype)  # float64 only for gradient checks
        self.clock = 0  # logical time stamped on buffer inserts
        self._buffer: Dict[int, _Buffered] = {}
        self._lock = threading.Lock()
        self._counter = 0
        self.registered = 0
        self.applied = 0
        self.dropped = 0
        self.late_drops = 0

    def __len__(self):
        return len(self._buffer)

    # -- registration ----------------------------------------------------

    def register_sample(self, id_features: IdFeatures) -> int:
        return self.register_batch([id_features])[0]

    def register_batch(self, batch: Sequence[IdFeatures]) -> List[int]:
        with self._lock:
            if len(self._buffer) + len(batch) > self.capacity:
                raise BackpressureError(
                    f"embedding worker {self.rank} buffer full ({len(self._buffer)}/{self.capacity})")
            out = []
            for feats in batch:
                if self._counter > COUNTER_MASK:
                    raise PreconditionError("sample counter exhausted")
                sid = encode_sample_id(self.rank, self._counter)
                self._counter += 1
                self._buffer[sid] = _Buffered(tuple(tuple(g) for g in feats), self.clock)
                out.append(sid)
            self.registered += len(out)
            return out

    def features(self, sample_id: int) -> IdFeatures:
        with self._lock:
            entry = self._buffer.get(sample_id)
        if entry is None:
            raise StaleSampleError(f"sample {sample_id:#x} is not buffered on worker {self.rank}")
        return entry.features

    # -- forward ---------------------------------------------------------

    def serve_pull(self, sample_id: int) -> np.ndarray:
        """Aggregated ``(groups, dim)`` embedding for one buffered sample."""
        res = self.serve_pulls([sample_id], use_gate=False)
        if res.unknown:
            raise StaleSampleError(f"sample {sample_id:#x} is not buffered on worker {self.rank}")
        return res.embeddings[0]

    def serve_pulls(self, sample_ids: Sequence[int], use_gate: bool = True) -> PullResult:
        with self._lock:
            entries = [(int(s), self._buffer.get(int(s))) for s in sample_ids]
        unknown = [s for s, e in entries if e is None]
        todo = [(s, e) for s, e in entries if e is not None]
        blocked = []
        if use_gate and self.gate is not None:
            ok = []
            for s, e in todo:
                (ok if self.gate(s, e.features) else blocked).append((s, e))
            todo = ok
        G, d = self.group_count, self.dim
        out = np.zeros((len(todo), G, d), self.dtype)
        if not todo:
            return PullResult([], out, [s for s, _ in blocked], unknown)

        flat_ids, seg = [], []
        seg_len = np.zeros(len(todo) * G, self.dtype)
        for i, (_, e) in enumerate(todo):
            for g, grp in enumerate(e.features):
                flat_ids.extend(grp)
                seg.extend([i * G + g] * len(grp))
                seg_len[i * G + g] = len(grp)
        flat_ids = np.array(flat_ids, np.uint64)
        uniq, inv = np.unique(flat_ids, return_inverse=True)
        vectors, versions = self.ps.lookup(uniq)
        agg = np.zeros((len(todo) * G, d), self.dtype)
        np.add.at(agg, np.array(seg, np.int64), vectors[inv])
        if self.aggregation == "mean":
            nz = seg_len > 0
            agg[nz] /= seg_len[nz, None]
        out = agg.reshape(len(todo), G, d)

        # remember what each sample read, for staleness accounting at write-back
        pos = 0
        with self._lock:
            for i, (s, e) in enumerate(todo):
                n = sum(len(grp) for grp in e.features)
                sample_ids_u = np.unique(inv[pos:pos + n])
                pos += n
                e.read_ids = uniq[sample_ids_u]
                e.read_versions = versions[sample_ids_u]
        return PullResult([s for s, _ in todo], out, [s for s, _ in blocked], unknown)

    # -- backward --------------------------------------------------------

    def apply_backward(self, sample_ids: Sequence[int], grads: np.ndarray, step: Optional[int] = None,
                       lr: Optional[float] = None) -> Tuple[int, int]:
        """Fan per-group activation gradients out to IDs and push them to the PS.

        ``grads`` is ``(n, groups, dim)``.  With mean aggregation each of a
        group's ``k`` IDs receives ``g / k``; repeated IDs accumulate.  Samples
        no longer buffered are dropped and counted.  Returns
        ``(applied, dropped)``.
        """
        grads = np.asarray(grads, self.dtype)
        if grads.shape != (len(sample_ids), self.group_count, self.dim):
            raise ProtocolError(f"gradient shape {grads.shape} does not match "
                                f"({len(sample_ids)}, {self.group_count}, {self.dim})")
        with self._lock:
            entries = []
            dropped = 0
            for i, s in enumerate(sample_ids):
                e = self._buffer.pop(int(s), None)
                if e is None:
                    dropped += 1
                else:
                    entries.append((i, e))
            self.late_drops += dropped
        if not entries:
            return 0, dropped

        flat_ids, rows, scale = [], [], []
        for i, e in entries:
            for g, grp in enumerate(e.features):
                k = len(grp)
                if not k:
                    continue
                flat_ids.extend(grp)
                rows.extend([i * self.group_count + g] * k)
                scale.extend([1.0 / k if self.aggregation == "mean" else 1.0] * k)
        if flat_ids:
            flat = grads.reshape(-1, self.dim)
            contrib = flat[np.array(rows, np.int64)] * np.array(scale, self.dtype)[:, None]
            uniq, inv = np.unique(np.array(flat_ids, np.uint64), return_inverse=True)
            summed = np.zeros((len(uniq), self.dim), self.dtype)
            np.add.at(summed, inv, contrib)
            before = self.ps.apply_gradients(uniq, summed, self.lr if lr is None else lr, step)
            if self.staleness is not None:
                self._record_staleness(entries, uniq, before)
        with self._lock:
            self.applied += len(entries)
        return len(entries), dropped

    def _record_staleness(self, entries, uniq, before):
        delays = []
        for _, e in entries:
            if e.read_ids is None or not len(e.read_ids):
                continue
            idx = np.searchsorted(uniq, e.read_ids)
            delays.append(before[idx].astype(np.int64) - e.read_versions.astype(np.int64))
        if delays:
            self.staleness.record_many(np.concatenate(delays))

    def drop_buffer(self) -> int:
        """Abandon every buffered sample (worker failure); returns how many."""
        with self._lock:
            n = len(self._buffer)
            self._buffer.clear()
            self.dropped += n
        return n

    # -- frame protocol --------------------------------------------------

    def handle_frame(self, data: bytes) -> bytes:
        frame = wire.decode_frame(data)
        if frame.msg_type == MsgType.REGISTER_SAMPLE:
            idx = codec.CompressedIndices.from_bytes(frame.sections[0])
            sids = self.register_batch(codec.decompress_indices(idx))
            return wire.encode_frame(MsgType.ACK, 0, [np.array(sids, np.uint64)])
        if frame.msg_type == MsgType.PULL_EMBEDDING:
            res = self.serve_pulls(frame.array(0, np.uint64).tolist())
            return encode_embedding_reply(res, self.group_count, self.dim, self.compress, self.kappa)
        if frame.msg_type == MsgType.PUSH_GRADIENT:
            (step,) = struct.unpack("<q", frame.sections[1])
            sids, grads = decode_value_sections(frame, 2)
            applied, dropped = self.apply_backward(sids.tolist(), grads, None if step < 0 else step)
            return wire.encode_frame(MsgType.ACK, 0, [np.array([applied, dropped], np.uint64)])
        raise ProtocolError(f"embedding worker cannot handle {frame.msg_type.name}")


def _value_sections(values: np.ndarray, compress: bool, kappa: float):
    n, G, d = values.shape
    if compress:
        scales, payload = codec.compress_blocks(values.reshape(n * G, d), kappa)
        return [scales, payload]
    return [values.astype(np.float32)]


def encode_embedding_reply(res: PullResult, groups: int, dim: int, compress: bool, kappa: float) -> bytes:
    meta = np.array([len(res.served), groups, dim], np.uint32)
    sections = [meta, np.array(res.served, np.uint64), np.array(res.blocked, np.uint64),
                np.array(res.unknown, np.uint64)] + _value_sections(res.embeddings, compress, kappa)
    return wire.encode_frame(MsgType.EMBEDDING_REPLY, FLAG_COMPRESSED if compress else 0, sections)


def decode_embedding_reply(frame: wire.Frame) -> PullResult:
    served, values = decode_value_sections(frame, 1, skip=2)
    return PullResult(served.tolist(), values, frame.array(2, np.uint64).tolist(),
                      frame.array(3, np.uint64).tolist())


def encode_push(sample_ids, grads: np.ndarray, step: Optional[int], compress: bool, kappa: float) -> bytes:
    n, G, d = grads.shape
    sections = [np.array([n, G, d], np.uint32), struct.pack("<q", -1 if step is None else step),
                np.asarray(sample_ids, np.uint64)] + _value_sections(grads, compress, kappa)
    return wire.encode_frame(MsgType.PUSH_GRADIENT, FLAG_COMPRESSED if compress else 0, sections)


def decode_value_sections(frame: wire.Frame, ids_at: int, skip: int = 0):
    """Read ``(ids, values)`` where values follow ``skip`` extra sections after the ids."""
    n, G, d = (int(x) for x in frame.array(0, np.uint32))
    ids = frame.array(ids_at, np.uint64)
    if len(ids) != n:
        raise ProtocolError(f"frame declares {n} samples but carries {len(ids)} ids")
    first = ids_at + 1 + skip
    if frame.compressed:
        scales = frame.array(first, np.float32)
        payload = frame.array(first + 1, np.float16)
        if scales.size != n * G or payload.size != n * G * d:
            raise ProtocolError("compressed value sections have the wrong size")
        values = codec.decompress_blocks(scales, payload.reshape(n * G, d)).reshape(n, G, d)
    else:
        values = frame.array(first, np.float32)
        if values.size != n * G * d:
            raise ProtocolError("value section has the wrong size")
        values = values.reshape(n, G, d)
    return ids, values
