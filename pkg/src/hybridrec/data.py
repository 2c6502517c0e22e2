"""Synthetic CTR data with a known teacher, ID-frequency estimation and the
loader that feeds samples to the workers.

Feature IDs are global: group ``g`` owns ``[g * vocab, (g + 1) * vocab)`` and
within a group the ID of popularity rank ``r`` (0 = most popular) is
``g * vocab + r``.  Ranks are drawn from a truncated zipf law with exponent
``zipf``; larger exponents concentrate traffic on the head IDs.

Labels come from a fixed random teacher: every ID has a latent vector of
the embedding width, a group's latent is the mean over its IDs, and the
logit is a random linear map of the concatenated group latents plus a
linear term in the non-ID features.
"""
import hashlib
import struct
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import codec, wire
from .core import IdFeatures
from .errors import BackpressureError, CorruptPayloadError, PreconditionError, UnrecoverableRunError
from .wire import MsgType


@dataclass
class SynthConfig:
    samples: int = 200_000
    groups: int = 5
    vocab: int = 100_000  # per group
    ids_min: int = 1
    ids_max: int = 4
    zipf: float = 1.1
    non_id_dim: int = 8
    latent_dim: int = 8
    label_noise: float = 0.05
    teacher_seed: int = 7
    emb_signal: float = 3.0
    non_id_signal: float = 1.0
    bias: float = -0.5

    def validate(self):
        if self.samples < 1 or self.groups < 1 or self.vocab < 1:
            raise PreconditionError("samples, groups and vocab must all be >= 1")
        if not 0 <= self.ids_min <= self.ids_max:
            raise PreconditionError("need 0 <= ids_min <= ids_max")
        if not 0 <= self.label_noise < 0.5:
            raise PreconditionError("label_noise must lie in [0, 0.5)")
        if self.zipf < 0:
            raise PreconditionError("zipf exponent must be >= 0")
        return self


@dataclass
class Dataset:
    """Column store: per group a CSR (offsets, ids) plus dense features."""

    offsets: List[np.ndarray]  # per group, int64 (n + 1)
    ids: List[np.ndarray]  # per group, uint64
    non_id: np.ndarray  # (n, non_id_dim) float32
    labels: np.ndarray  # (n,) float32
    vocab_total: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def group_count(self) -> int:
        return len(self.offsets)

    def id_features(self, i: int) -> IdFeatures:
        return tuple(tuple(ids[off[i]:off[i + 1]].tolist()) for off, ids in zip(self.offsets, self.ids))

    def batch_features(self, idx: Sequence[int]) -> List[IdFeatures]:
        return [self.id_features(int(i)) for i in idx]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, np.int64)
        offs, ids = [], []
        for off, gids in zip(self.offsets, self.ids):
            lens = off[idx + 1] - off[idx]
            new_off = np.zeros(len(idx) + 1, np.int64)
            np.cumsum(lens, out=new_off[1:])
            starts = np.repeat(off[idx], lens)
            take = starts + np.arange(new_off[-1]) - np.repeat(new_off[:-1], lens)
            offs.append(new_off)
            ids.append(gids[take.astype(np.int64)])
        return Dataset(offs, ids, self.non_id[idx], self.labels[idx], self.vocab_total)

    def split(self, test_fraction: float):
        """Leading samples train, trailing ``test_fraction`` held out (stream order)."""
        n_test = int(round(len(self) * test_fraction))
        n_train = len(self) - n_test
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, len(self)))

    def flat_ids(self):
        """(ids, segment) with segment = sample * groups + group, for vectorised pooling."""
        G = self.group_count
        all_ids, segs = [], []
        for g, (off, gids) in enumerate(zip(self.offsets, self.ids)):
            lens = np.diff(off)
            all_ids.append(gids)
            segs.append(np.repeat(np.arange(len(self), dtype=np.int64) * G + g, lens))
        return np.concatenate(all_ids), np.concatenate(segs)

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.to_bytes())
        return h.hexdigest()

    # flat binary layout, documented in docs/config.md
    _HEAD = struct.Struct("<4sIQIIQ")  # magic, version, n, groups, non_id_dim, vocab_total

    def to_bytes(self) -> bytes:
        parts = [self._HEAD.pack(b"HDS1", 1, len(self), self.group_count, self.non_id.shape[1], self.vocab_total)]
        for off, gids in zip(self.offsets, self.ids):
            parts.append(off.astype("<i8").tobytes())
            parts.append(struct.pack("<Q", len(gids)))
            parts.append(gids.astype("<u8").tobytes())
        parts.append(self.non_id.astype("<f4").tobytes())
        parts.append(self.labels.astype("<f4").tobytes())
        return b"".join(parts)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        head = cls._HEAD
        if len(data) < head.size:
            raise CorruptPayloadError("dataset file truncated", offset=len(data))
        magic, version, n, G, d, vocab = head.unpack_from(data, 0)
        if magic != b"HDS1" or version != 1:
            raise CorruptPayloadError("not a dataset file", offset=0)
        pos = head.size

        def take(dtype, count):
            nonlocal pos
            size = np.dtype(dtype).itemsize * count
            if pos + size > len(data):
                raise CorruptPayloadError("dataset file truncated", offset=pos)
            arr = np.frombuffer(data, dtype, count, pos).copy()
            pos += size
            return arr

        offs, ids = [], []
        for _ in range(G):
            off = take("<i8", n + 1).astype(np.int64)
            (m,) = struct.unpack_from("<Q", data, pos) if pos + 8 <= len(data) else (None,)
            if m is None:
                raise CorruptPayloadError("dataset file truncated", offset=pos)
            pos += 8
            if off[0] != 0 or off[-1] != m or np.any(np.diff(off) < 0):
                raise CorruptPayloadError("bad group offsets", offset=pos)
            offs.append(off)
            ids.append(take("<u8", m).astype(np.uint64))
        non_id = take("<f4", n * d).astype(np.float32).reshape(n, d)
        labels = take("<f4", n).astype(np.float32)
        if pos != len(data):
            raise CorruptPayloadError("trailing bytes in dataset file", offset=pos)
        return cls(offs, ids, non_id, labels, vocab)

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def zipf_cdf(vocab: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, vocab + 1, dtype=np.float64) ** s
    c = np.cumsum(w)
    return c / c[-1]


def _teacher(cfg: SynthConfig):
    rng = np.random.default_rng([cfg.teacher_seed, 0x7EAC])
    # latents are drawn per group once; cheap enough at desk scale
    latents = [rng.standard_normal((cfg.vocab, cfg.latent_dim)).astype(np.float32) for _ in range(cfg.groups)]
    w_emb = rng.standard_normal(cfg.groups * cfg.latent_dim) / np.sqrt(cfg.groups * cfg.latent_dim)
    w_nid = rng.standard_normal(cfg.non_id_dim) / np.sqrt(max(cfg.non_id_dim, 1))
    return latents, w_emb, w_nid


def teacher_logits(cfg: SynthConfig, ds: Dataset) -> np.ndarray:
    latents, w_emb, w_nid = _teacher(cfg)
    n, G, d = len(ds), cfg.groups, cfg.latent_dim
    pooled = np.zeros((n * G, d), np.float64)
    counts = np.zeros(n * G, np.float64)
    for g in range(G):
        off, gids = ds.offsets[g], ds.ids[g]
        lens = np.diff(off)
        seg = np.repeat(np.arange(n, dtype=np.int64) * G + g, lens)
        local = (gids - np.uint64(g * cfg.vocab)).astype(np.int64)
        np.add.at(pooled, seg, latents[g][local])
        counts[np.arange(n) * G + g] = lens
    nz = counts > 0
    pooled[nz] /= counts[nz, None]
    z = cfg.emb_signal * (pooled.reshape(n, G * d) @ w_emb)
    z += cfg.non_id_signal * (ds.non_id.astype(np.float64) @ w_nid)
    return z + cfg.bias


def generate_synthetic(cfg: SynthConfig, seed: int = 0) -> Dataset:
    """Deterministic in ``(cfg, seed)``; the teacher depends only on ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0xDA7A])
    n, G = cfg.samples, cfg.groups
    cdf = zipf_cdf(cfg.vocab, cfg.zipf)
    offsets, ids = [], []
    for g in range(G):
        lens = rng.integers(cfg.ids_min, cfg.ids_max + 1, size=n)
        off = np.zeros(n + 1, np.int64)
        np.cumsum(lens, out=off[1:])
        ranks = np.searchsorted(cdf, rng.random(int(off[-1])), side="right")
        ranks = np.minimum(ranks, cfg.vocab - 1)
        offsets.append(off)
        ids.append((ranks + g * cfg.vocab).astype(np.uint64))
    non_id = rng.standard_normal((n, cfg.non_id_dim)).astype(np.float32)
    ds = Dataset(offsets, ids, non_id, np.zeros(n, np.float32), G * cfg.vocab)
    p = 1.0 / (1.0 + np.exp(-teacher_logits(cfg, ds)))
    y = rng.random(n) < p
    flip = rng.random(n) < cfg.label_noise
    ds.labels = np.where(flip, ~y, y).astype(np.float32)
    return ds


@dataclass
class AlphaEstimate:
    alpha_hat: float
    per_group: List[float] = field(default_factory=list)
    argmax_id: Optional[int] = None


def estimate_alpha(ds: Dataset) -> AlphaEstimate:
    """Largest fraction of samples containing any single ID (counted once per sample)."""
    n = len(ds)
    if n == 0:
        raise PreconditionError("estimate_alpha of an empty dataset")
    per_group, best, best_id = [], 0.0, None
    for off, gids in zip(ds.offsets, ds.ids):
        if not len(gids):
            per_group.append(0.0)
            continue
        owner = np.repeat(np.arange(n, dtype=np.int64), np.diff(off))
        # dedupe (sample, id) pairs so repeats inside one sample count once
        pairs = np.unique(np.stack([gids.astype(np.uint64), owner.astype(np.uint64)]), axis=1)
        uniq, counts = np.unique(pairs[0], return_counts=True)
        k = int(np.argmax(counts))
        frac = counts[k] / n
        per_group.append(float(frac))
        if frac > best:
            best, best_id = float(frac), int(uniq[k])
    # IDs never overlap across groups, so the global max is the max of group maxima
    return AlphaEstimate(best, per_group, best_id)


class DataLoader:
    """Round-robin dispatch of samples: ID features to embedding workers,
    (sample ID, non-ID features, label) to NN workers.

    Sample ``j`` of the stream goes to embedding worker ``j % E`` and NN
    worker ``j % K``; per-worker stream order is preserved.
    """

    def __init__(self, ds: Dataset, ew_transports: Sequence, nn_workers: Sequence, retries: int = 50,
                 retry_delay: float = 0.001):
        self.ds = ds
        self.ew = list(ew_transports)
        self.nn = list(nn_workers)
        self.retries = retries
        self.retry_delay = retry_delay
        self.position = 0
        self.dispatched = 0
        self.log = []  # (stream index, sample id, nn rank), kept when tracing

    def _register(self, rank: int, features: List[IdFeatures]) -> np.ndarray:
        payload = codec.compress_indices(features, self.ds.group_count).to_bytes()
        for attempt in range(self.retries + 1):
            try:
                return wire.call(self.ew[rank], MsgType.REGISTER_SAMPLE, 0, [payload]).array(0, np.uint64)
            except BackpressureError:
                if attempt == self.retries:
                    raise UnrecoverableRunError(f"embedding worker {rank} stayed full")
                time.sleep(self.retry_delay)

    def dispatch(self, idx: Sequence[int], trace: bool = False) -> List[int]:
        """Dispatch dataset rows ``idx``; returns their sample IDs in order."""
        idx = np.asarray(idx, np.int64)
        E, K = len(self.ew), len(self.nn)
        stream = self.position + np.arange(len(idx))
        sids = np.zeros(len(idx), np.uint64)
        for r in range(E):
            pos = np.flatnonzero(stream % E == r)
            if pos.size:
                sids[pos] = self._register(r, self.ds.batch_features(idx[pos]))
        for j, (row, sid) in enumerate(zip(idx.tolist(), sids.tolist())):
            k = int(stream[j] % K)
            self.nn[k].buffer_input(sid, self.ds.non_id[row], self.ds.labels[row])
            if trace:
                self.log.append((int(stream[j]), sid, k))
        self.position += len(idx)
        self.dispatched += len(idx)
        return sids.tolist()


def dispatch(loader: DataLoader, dataset: Dataset, embedding_workers=None, nn_workers=None) -> int:
    """Push the whole dataset through ``loader``; returns the number dispatched."""
    if dataset is not loader.ds:
        loader.ds = dataset
    loader.dispatch(np.arange(len(dataset)))
    return loader.dispatched
