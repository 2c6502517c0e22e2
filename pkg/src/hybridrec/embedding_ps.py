"""Sharded embedding parameter server.

Each shard keeps its embeddings in an LRU cache laid out as parallel arrays:
``prev``/``next`` hold slot *indices* (not references), so the whole cache is
a handful of flat buffers.  A dict maps feature ID to slot.  Evicted slots go
on a free list and are reused, so the arrays stop growing once the cache is
full.  Checkpoints are the raw buffers written back to back.
"""
import struct
import threading
import zlib
from array import array
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import wire
from .core import ShardRouter, mix64, mix64_array
from .errors import CheckpointCorruptError, ConfigError, DivergenceError, PreconditionError
from .wire import MsgType

NIL = -1
ADAGRAD_EPS = 1e-10
OPTIMIZERS = {"sgd": 0, "adagrad": 1}
_OPT_NAMES = {v: k for k, v in OPTIMIZERS.items()}

CKPT_MAGIC = b"HPS1"
CKPT_VERSION = 1
# magic, version, optimizer, reserved, dim, capacity, live, high_water, rng_salt,
# head, tail, free_count, eviction_count, miss_count
CKPT_HEADER = struct.Struct("<4sBBHIQQQQqqQQQ")
CKPT_CRC = struct.Struct("<I")


@dataclass
class EmbeddingEntry:
    vector: np.ndarray
    opt_state: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, EmbeddingEntry) and np.array_equal(self.vector, other.vector)
                and np.array_equal(self.opt_state, other.opt_state))


class LruStore:
    """Least-recently-used map from 64-bit keys to embedding slots."""

    def __init__(self, capacity: int, dim: int, initial_slots: int = 1024):
        if capacity < 1:
            raise ConfigError("LRU capacity must be >= 1")
        if dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        n = min(self.capacity, max(1, initial_slots))
        self.prev = array("q", [NIL]) * n
        self.next = array("q", [NIL]) * n
        self.keys = array("Q", [0]) * n
        self.vectors = np.zeros((n, dim), dtype=np.float32)
        self.opt = np.zeros((n, dim), dtype=np.float32)
        self.index: Dict[int, int] = {}
        self.head = NIL
        self.tail = NIL
        self.free: List[int] = []
        self.high_water = 0
        self.growths = 0

    def __len__(self):
        return len(self.index)

    def __contains__(self, key):
        return key in self.index

    @property
    def allocated(self) -> int:
        return len(self.keys)

    def _grow(self):
        old = len(self.keys)
        new = min(self.capacity, old * 2)
        extra = new - old
        self.prev.extend(array("q", [NIL]) * extra)
        self.next.extend(array("q", [NIL]) * extra)
        self.keys.extend(array("Q", [0]) * extra)
        self.vectors = np.concatenate([self.vectors, np.zeros((extra, self.dim), np.float32)])
        self.opt = np.concatenate([self.opt, np.zeros((extra, self.dim), np.float32)])
        self.growths += 1

    def _unlink(self, s: int):
        p, n = self.prev[s], self.next[s]
        if p == NIL:
            self.head = n
        else:
            self.next[p] = n
        if n == NIL:
            self.tail = p
        else:
            self.prev[n] = p
        self.prev[s] = NIL
        self.next[s] = NIL

    def _push_front(self, s: int):
        self.prev[s] = NIL
        self.next[s] = self.head
        if self.head != NIL:
            self.prev[self.head] = s
        self.head = s
        if self.tail == NIL:
            self.tail = s

    def _alloc(self) -> int:
        if self.free:
            return self.free.pop()
        if self.high_water == len(self.keys):
            self._grow()
        s = self.high_water
        self.high_water += 1
        return s

    def touch(self, key: int) -> int:
        """Slot of ``key`` moved to MRU position, or NIL on a miss."""
        s = self.index.get(key, NIL)
        if s != NIL and s != self.head:
            self._unlink(s)
            self._push_front(s)
        return s

    def slot_of(self, key: int) -> int:
        return self.index.get(key, NIL)

    def insert(self, key: int) -> Tuple[int, Optional[Tuple[int, EmbeddingEntry]]]:
        """Allocate an MRU slot for a new ``key``; evicts the LRU entry if full."""
        evicted = None
        if len(self.index) >= self.capacity:
            victim = self.tail
            vkey = self.keys[victim]
            evicted = (vkey, EmbeddingEntry(self.vectors[victim].copy(), self.opt[victim].copy()))
            self._unlink(victim)
            del self.index[vkey]
            self.free.append(victim)
        s = self._alloc()
        self.keys[s] = key
        self.index[key] = s
        self._push_front(s)
        return s, evicted

    def get(self, key: int) -> Optional[EmbeddingEntry]:
        s = self.touch(key)
        if s == NIL:
            return None
        return EmbeddingEntry(self.vectors[s].copy(), self.opt[s].copy())

    def put(self, key: int, vector, opt_state=None) -> Optional[Tuple[int, EmbeddingEntry]]:
        s = self.touch(key)
        evicted = None
        if s == NIL:
            s, evicted = self.insert(key)
        self.vectors[s] = vector
        self.opt[s] = 0.0 if opt_state is None else opt_state
        return evicted

    def discard(self, key: int) -> bool:
        s = self.index.pop(key, NIL)
        if s == NIL:
            return False
        self._unlink(s)
        self.free.append(s)
        return True

    def order(self) -> List[int]:
        """Keys from most to least recently used."""
        out = []
        s = self.head
        while s != NIL:
            out.append(self.keys[s])
            s = self.next[s]
        return out

    def items(self) -> Iterator[Tuple[int, EmbeddingEntry]]:
        for key in self.order():
            s = self.index[key]
            yield key, EmbeddingEntry(self.vectors[s].copy(), self.opt[s].copy())

    def check_invariants(self):
        """Raise CheckpointCorruptError if links, index and free list disagree."""
        live = len(self.index)
        if live > self.capacity or self.high_water > len(self.keys):
            raise CheckpointCorruptError("slot counts exceed capacity")
        seen = set()
        s, prev, steps = self.head, NIL, 0
        while s != NIL:
            if not 0 <= s < self.high_water or s in seen:
                raise CheckpointCorruptError(f"broken next-chain at slot {s}")
            if self.prev[s] != prev:
                raise CheckpointCorruptError(f"prev link of slot {s} is inconsistent")
            if self.index.get(self.keys[s]) != s:
                raise CheckpointCorruptError(f"index does not map key of slot {s}")
            seen.add(s)
            prev, s = s, self.next[s]
            steps += 1
        if prev != self.tail or steps != live:
            raise CheckpointCorruptError("list does not cover the index")
        free = set(self.free)
        if len(free) != len(self.free) or free & seen:
            raise CheckpointCorruptError("free list overlaps live slots")
        if len(free) + live != self.high_water or any(not 0 <= f < self.high_water for f in free):
            raise CheckpointCorruptError("free and live slots do not partition the arena")


class PsShard:
    """One shard: an LRU store behind a lock, with lazy init and optimizer.

    ``clock`` is the per-ID logical update counter used for staleness
    accounting.  A global step counts as one update however many workers
    write the ID during it.
    """

    def __init__(self, capacity: int, dim: int, optimizer: str = "adagrad", rng_salt: int = 0,
                 initial_slots: int = 1024):
        if optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown embedding optimizer {optimizer!r}")
        self.store = LruStore(capacity, dim, initial_slots)
        self.optimizer = optimizer
        self.rng_salt = int(rng_salt)
        self._salt_mix = mix64(self.rng_salt)
        self.lock = threading.Lock()
        self.clock: Dict[int, List[int]] = {}
        self.eviction_count = 0
        self.miss_count = 0
        self.op_log: Optional[list] = None

    @property
    def dim(self) -> int:
        return self.store.dim

    def init_vectors(self, ids) -> np.ndarray:
        """Deterministic uniform(-1/sqrt(dim), 1/sqrt(dim)) values per ID."""
        ids = np.asarray(ids, dtype=np.uint64)
        seeds = mix64_array(ids ^ np.uint64(self._salt_mix))
        bits = mix64_array(seeds[:, None] + np.arange(self.dim, dtype=np.uint64)[None, :])
        u = ((bits >> np.uint64(40)).astype(np.float64) + 0.5) / float(1 << 24)
        return ((2.0 * u - 1.0) / np.sqrt(self.dim)).astype(np.float32)

    def _log(self, op, ids):
        if self.op_log is not None:
            self.op_log.append((op, tuple(int(i) for i in ids)))

    def _may_evict(self, n: int) -> bool:
        return len(self.store) + n > self.store.capacity

    def _resolve(self, ids: List[int]) -> List[int]:
        """Touch or lazily create every ID.  Only valid when no eviction can
        happen, so the returned slots all stay live."""
        store = self.store
        slots = []
        fresh_pos, fresh_ids = [], []
        for key in ids:
            s = store.touch(key)
            if s == NIL:
                self.miss_count += 1
                s, _ = store.insert(key)
                fresh_pos.append(s)
                fresh_ids.append(key)
            slots.append(s)
        if fresh_ids:
            store.vectors[fresh_pos] = self.init_vectors(fresh_ids)
            store.opt[fresh_pos] = 0.0
        return slots

    def _resolve_one(self, key: int) -> int:
        store = self.store
        s = store.touch(key)
        if s == NIL:
            self.miss_count += 1
            s, ev = store.insert(key)
            if ev is not None:
                self.eviction_count += 1
            store.vectors[s] = self.init_vectors([key])[0]
            store.opt[s] = 0.0
        return s

    def versions(self, ids) -> np.ndarray:
        clock = self.clock
        return np.array([clock[k][0] if k in clock else 0 for k in ids], dtype=np.uint64)

    def lookup(self, ids) -> Tuple[np.ndarray, np.ndarray]:
        """Vectors (copied) and current clock versions for ``ids``."""
        ids = [int(i) for i in ids]
        with self.lock:
            self._log("lookup", ids)
            if self._may_evict(len(ids)):
                out = np.empty((len(ids), self.dim), dtype=np.float32)
                for i, key in enumerate(ids):
                    out[i] = self.store.vectors[self._resolve_one(key)]
            else:
                slots = self._resolve(ids)  # may grow the arrays, so index afterwards
                out = self.store.vectors[slots]
            return out, self.versions(ids)

    def peek(self, ids) -> np.ndarray:
        """Current values without touching recency or creating entries."""
        ids = [int(i) for i in ids]
        with self.lock:
            index = self.store.index
            slots = [index.get(k, NIL) for k in ids]
            out = np.empty((len(ids), self.dim), dtype=np.float32)
            present = [i for i, s in enumerate(slots) if s != NIL]
            if present:
                out[present] = self.store.vectors[[slots[i] for i in present]]
            missing = [i for i, s in enumerate(slots) if s == NIL]
            if missing:
                out[missing] = self.init_vectors([ids[i] for i in missing])
            return out

    def apply_gradients(self, ids, grads, lr: float, step: Optional[int] = None) -> np.ndarray:
        """Optimizer update; returns each ID's clock version before this write.

        Duplicate IDs are summed first.  Non-finite gradients are rejected
        before anything is modified.
        """
        grads = np.asarray(grads, dtype=np.float32)
        ids = [int(i) for i in ids]
        if grads.shape != (len(ids), self.dim):
            raise PreconditionError(f"gradient block shape {grads.shape} != ({len(ids)}, {self.dim})")
        if not np.isfinite(grads).all():
            raise DivergenceError("non-finite embedding gradient")
        if len(set(ids)) != len(ids):
            uniq, inv = np.unique(np.array(ids, dtype=np.uint64), return_inverse=True)
            summed = np.zeros((len(uniq), self.dim), np.float32)
            np.add.at(summed, inv, grads)
            before = self.apply_gradients(uniq, summed, lr, step)
            return before[inv]
        with self.lock:
            self._log("apply", ids)
            if self._may_evict(len(ids)):
                for i, key in enumerate(ids):
                    self._update([self._resolve_one(key)], grads[i:i + 1], lr)
            else:
                self._update(self._resolve(ids), grads, lr)
            return self._tick(ids, step)

    def _update(self, slots, g, lr):
        v = self.store.vectors
        if self.optimizer == "adagrad":
            acc = self.store.opt[slots] + g * g
            self.store.opt[slots] = acc
            v[slots] = v[slots] - np.float32(lr) * g / (np.sqrt(acc) + np.float32(ADAGRAD_EPS))
        else:
            v[slots] = v[slots] - np.float32(lr) * g

    def _tick(self, ids, step) -> np.ndarray:
        before = np.empty(len(ids), dtype=np.uint64)
        clock = self.clock
        for i, key in enumerate(ids):
            entry = clock.get(key)
            if entry is None:
                entry = clock[key] = [0, -1]
            if step is not None and entry[1] == step:
                before[i] = entry[0] - 1
            else:
                before[i] = entry[0]
                entry[0] += 1
                entry[1] = -1 if step is None else step
        return before

    # -- checkpointing ---------------------------------------------------

    def to_bytes(self) -> bytes:
        with self.lock:
            return _serialize(self)

    def save_checkpoint(self, sink) -> int:
        """Write a snapshot to a path or binary file object; returns byte count."""
        data = self.to_bytes()
        if hasattr(sink, "write"):
            sink.write(data)
        else:
            with open(sink, "wb") as fh:
                fh.write(data)
        return len(data)

    @classmethod
    def load_checkpoint(cls, source) -> "PsShard":
        if isinstance(source, (bytes, bytearray, memoryview)):
            data = bytes(source)
        elif hasattr(source, "read"):
            data = source.read()
        else:
            with open(source, "rb") as fh:
                data = fh.read()
        return _deserialize(data)

    def restore_from(self, other: "PsShard"):
        """Replace stored state with ``other``'s, keeping the logical clock."""
        with self.lock:
            self.store = other.store
            self.eviction_count = other.eviction_count
            self.miss_count = other.miss_count

    # -- frame protocol --------------------------------------------------

    def handle_frame(self, data: bytes) -> bytes:
        frame = wire.decode_frame(data)
        if frame.msg_type == MsgType.PULL_EMBEDDING:
            ids = frame.array(0, np.uint64)
            vectors, versions = self.lookup(ids)
            return wire.encode_frame(MsgType.EMBEDDING_REPLY, 0,
                                     [np.array([len(ids), self.dim], np.uint32), ids, versions, vectors])
        if frame.msg_type == MsgType.PUSH_GRADIENT:
            lr, step = struct.unpack("<dq", frame.sections[0])
            ids = frame.array(1, np.uint64)
            grads = frame.array(2, np.float32).reshape(len(ids), self.dim)
            before = self.apply_gradients(ids, grads, lr, None if step < 0 else step)
            return wire.encode_frame(MsgType.ACK, 0, [before])
        raise wire.ProtocolError(f"PS shard cannot handle {frame.msg_type.name}")


def _le(a: array) -> bytes:
    if not np.little_endian:
        a = array(a.typecode, a)
        a.byteswap()
    return a.tobytes()


def _serialize(shard: PsShard) -> bytes:
    st = shard.store
    hw = st.high_water
    live = sorted(st.index.items(), key=lambda kv: kv[1])
    head = CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, OPTIMIZERS[shard.optimizer], 0, st.dim, st.capacity,
                            len(live), hw, shard.rng_salt, st.head, st.tail, len(st.free),
                            shard.eviction_count, shard.miss_count)
    body = [
        head,
        _le(st.prev[:hw]),
        _le(st.next[:hw]),
        _le(st.keys[:hw]),
        st.vectors[:hw].astype("<f4", copy=False).tobytes(),
        st.opt[:hw].astype("<f4", copy=False).tobytes(),
        np.array([k for k, _ in live], dtype="<u8").tobytes(),
        np.array([s for _, s in live], dtype="<i8").tobytes(),
        np.array(st.free, dtype="<i8").tobytes(),
    ]
    blob = b"".join(body)
    return blob + CKPT_CRC.pack(zlib.crc32(blob))


def _deserialize(data: bytes) -> PsShard:
    if len(data) < CKPT_HEADER.size + CKPT_CRC.size:
        raise CheckpointCorruptError("checkpoint truncated before header end")
    (magic, version, opt, _, dim, capacity, live, hw, salt, head, tail, nfree, evictions,
     misses) = CKPT_HEADER.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointCorruptError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointCorruptError(f"unsupported checkpoint format version {version}")
    if opt not in _OPT_NAMES or dim < 1 or capacity < 1 or hw > capacity or live > hw or nfree > hw:
        raise CheckpointCorruptError("checkpoint header fields out of range")
    expected = CKPT_HEADER.size + hw * (8 * 3 + 8 * dim) + live * 16 + nfree * 8 + CKPT_CRC.size
    if len(data) != expected:
        raise CheckpointCorruptError(f"checkpoint length {len(data)} != expected {expected}")
    (crc,) = CKPT_CRC.unpack_from(data, len(data) - CKPT_CRC.size)
    if zlib.crc32(data[:-CKPT_CRC.size]) != crc:
        raise CheckpointCorruptError("checkpoint checksum mismatch")

    shard = PsShard(capacity, dim, _OPT_NAMES[opt], salt, initial_slots=max(hw, 1))
    st = shard.store
    pos = CKPT_HEADER.size

    def take(typecode, n):
        nonlocal pos
        a = array(typecode)
        a.frombytes(data[pos:pos + 8 * n])
        if not np.little_endian:
            a.byteswap()
        pos += 8 * n
        return a

    def take_f32(n):
        nonlocal pos
        out = np.frombuffer(data, dtype="<f4", count=n * dim, offset=pos).astype(np.float32).reshape(n, dim)
        pos += 4 * n * dim
        return out

    prev, nxt, keys = take("q", hw), take("q", hw), take("Q", hw)
    vectors, optst = take_f32(hw), take_f32(hw)
    ikeys, islots, free = take("Q", live), take("q", live), take("q", nfree)
    n = max(hw, 1)
    st.prev = prev if hw else array("q", [NIL]) * n
    st.next = nxt if hw else array("q", [NIL]) * n
    st.keys = keys if hw else array("Q", [0]) * n
    st.vectors = vectors if hw else np.zeros((n, dim), np.float32)
    st.opt = optst if hw else np.zeros((n, dim), np.float32)
    st.index = dict(zip(ikeys, islots))
    if len(st.index) != live:
        raise CheckpointCorruptError("duplicate keys in checkpoint index")
    st.head, st.tail = head, tail
    st.free = list(free)
    st.high_water = hw
    for key, s in st.index.items():
        if not 0 <= s < hw or st.keys[s] != key:
            raise CheckpointCorruptError("index entry disagrees with slot array")
    st.check_invariants()
    shard.eviction_count = evictions
    shard.miss_count = misses
    return shard


class EmbeddingPS:
    """A set of shards addressed through a :class:`ShardRouter`."""

    def __init__(self, shard_count: int, capacity_per_shard: int, dim: int, optimizer: str = "adagrad",
                 rng_salt: int = 0, initial_slots: int = 1024):
        self.router = ShardRouter(shard_count)
        self.dim = dim
        self.shards = [PsShard(capacity_per_shard, dim, optimizer, rng_salt, initial_slots)
                       for _ in range(shard_count)]

    def _split(self, ids):
        ids = np.asarray(ids, dtype=np.uint64)
        route = self.router.route_many(ids)
        for k in range(len(self.shards)):
            pos = np.flatnonzero(route == k)
            if pos.size:
                yield k, pos, ids[pos]

    def lookup(self, ids) -> Tuple[np.ndarray, np.ndarray]:
        out = np.empty((len(ids), self.dim), np.float32)
        versions = np.empty(len(ids), np.uint64)
        for k, pos, part in self._split(ids):
            out[pos], versions[pos] = self.shards[k].lookup(part)
        return out, versions

    def peek(self, ids) -> np.ndarray:
        out = np.empty((len(ids), self.dim), np.float32)
        for k, pos, part in self._split(ids):
            out[pos] = self.shards[k].peek(part)
        return out

    def apply_gradients(self, ids, grads, lr: float, step: Optional[int] = None) -> np.ndarray:
        grads = np.asarray(grads, np.float32)
        before = np.empty(len(ids), np.uint64)
        for k, pos, part in self._split(ids):
            before[pos] = self.shards[k].apply_gradients(part, grads[pos], lr, step)
        return before

    @property
    def eviction_count(self) -> int:
        return sum(s.eviction_count for s in self.shards)

    @property
    def miss_count(self) -> int:
        return sum(s.miss_count for s in self.shards)


def ps_lookup(shard_set: EmbeddingPS, ids) -> Dict[int, np.ndarray]:
    vectors, _ = shard_set.lookup(ids)
    return {int(i): v for i, v in zip(ids, vectors)}


def ps_apply_gradients(shard_set: EmbeddingPS, grads: Dict[int, np.ndarray], lr: float):
    ids = list(grads)
    shard_set.apply_gradients(ids, np.array([grads[i] for i in ids], np.float32).reshape(len(ids), -1), lr)
