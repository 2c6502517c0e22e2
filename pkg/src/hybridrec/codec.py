"""Compression for worker traffic.

Index codec (lossless): a batch of per-sample ID lists becomes, per feature
group, the sorted unique IDs plus for each ID the uint16 positions of the
samples that contain it.  A sample listing an ID twice appears twice in
that ID's postings, so multiplicities survive the round trip.

Value codec (lossy): each float32 block ``v`` is multiplied by
``kappa / max|v|`` before the cast to binary16, and divided by the same
scale after widening back.  The scaled magnitudes sit in ``[0, kappa]``, so
for ``kappa = 1024`` nothing lands in the binary16 subnormal range and the
absolute error is at most ``max|v| * 2**-11``.
"""
import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import CorruptPayloadError, PreconditionError

MAX_BATCH = 65535
DEFAULT_KAPPA = 1024.0
FP16_MAX = 65504.0

_IDX_HEADER = struct.Struct("<II")  # batch_size, group_count
_GROUP_HEADER = struct.Struct("<QQ")  # unique count, posting count


@dataclass
class GroupPostings:
    unique_ids: np.ndarray  # uint64, ascending
    counts: np.ndarray  # uint32, postings per unique id
    postings: np.ndarray  # uint16, concatenated sample indices

    def as_dict(self):
        out, pos = {}, 0
        for uid, c in zip(self.unique_ids.tolist(), self.counts.tolist()):
            out[uid] = self.postings[pos:pos + c].tolist()
            pos += c
        return out


@dataclass
class CompressedIndices:
    batch_size: int
    groups: List[GroupPostings]

    def to_bytes(self) -> bytes:
        parts = [_IDX_HEADER.pack(self.batch_size, len(self.groups))]
        for g in self.groups:
            parts.append(_GROUP_HEADER.pack(len(g.unique_ids), len(g.postings)))
            parts.append(g.unique_ids.astype("<u8").tobytes())
            parts.append(g.counts.astype("<u4").tobytes())
            parts.append(g.postings.astype("<u2").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedIndices":
        if len(data) < _IDX_HEADER.size:
            raise CorruptPayloadError("index block truncated", offset=len(data))
        batch_size, ngroups = _IDX_HEADER.unpack_from(data, 0)
        pos = _IDX_HEADER.size
        groups = []
        for _ in range(ngroups):
            if pos + _GROUP_HEADER.size > len(data):
                raise CorruptPayloadError("group header truncated", offset=pos)
            nu, npost = _GROUP_HEADER.unpack_from(data, pos)
            pos += _GROUP_HEADER.size
            need = nu * 12 + npost * 2
            if pos + need > len(data):
                raise CorruptPayloadError("group body truncated", offset=pos)
            uids = np.frombuffer(data, "<u8", nu, pos).astype(np.uint64)
            pos += 8 * nu
            counts = np.frombuffer(data, "<u4", nu, pos).astype(np.uint32)
            pos += 4 * nu
            posts = np.frombuffer(data, "<u2", npost, pos).astype(np.uint16)
            pos += 2 * npost
            if int(counts.sum()) != npost:
                raise CorruptPayloadError("posting counts do not add up", offset=pos)
            groups.append(GroupPostings(uids, counts, posts))
        if pos != len(data):
            raise CorruptPayloadError("trailing bytes after index block", offset=pos)
        return cls(batch_size, groups)

    def nbytes(self) -> int:
        return len(self.to_bytes())


def compress_indices(batch: Sequence[Sequence[Sequence[int]]], group_count: int = None) -> CompressedIndices:
    """``batch[i][g]`` is the ID list of sample ``i`` in feature group ``g``."""
    n = len(batch)
    if n > MAX_BATCH:
        raise PreconditionError(f"batch of {n} samples cannot be indexed with uint16")
    if group_count is None:
        group_count = len(batch[0]) if n else 0
    groups = []
    for g in range(group_count):
        ids, owners = [], []
        for i, sample in enumerate(batch):
            grp = sample[g]
            ids.extend(grp)
            owners.extend([i] * len(grp))
        ids = np.array(ids, dtype=np.uint64)
        owners = np.array(owners, dtype=np.uint16)
        order = np.lexsort((owners, ids))
        ids, owners = ids[order], owners[order]
        uniq, counts = np.unique(ids, return_counts=True)
        groups.append(GroupPostings(uniq.astype(np.uint64), counts.astype(np.uint32), owners))
    return CompressedIndices(n, groups)


def decompress_indices(c: CompressedIndices, batch_size: int = None) -> List[Tuple[Tuple[int, ...], ...]]:
    """Inverse of :func:`compress_indices`; each ID list comes back ascending."""
    n = c.batch_size if batch_size is None else batch_size
    out = [[[] for _ in c.groups] for _ in range(n)]
    for g, grp in enumerate(c.groups):
        if len(grp.counts) != len(grp.unique_ids) or int(grp.counts.sum()) != len(grp.postings):
            raise CorruptPayloadError("malformed posting lists")
        if len(grp.postings) and int(grp.postings.max()) >= n:
            raise CorruptPayloadError(f"posting index {int(grp.postings.max())} >= batch size {n}")
        owners = np.repeat(grp.unique_ids, grp.counts.astype(np.int64))
        # postings are grouped by ascending id, so appends keep each list sorted
        for uid, i in zip(owners.tolist(), grp.postings.tolist()):
            out[i][g].append(uid)
    return [tuple(tuple(grp) for grp in sample) for sample in out]


@dataclass
class CompressedBlock:
    scale: np.float32
    payload: np.ndarray  # float16

    @property
    def block_len(self) -> int:
        return len(self.payload)


_F32_MAX = float(np.finfo(np.float32).max)


def _scales(v: np.ndarray, kappa: float) -> np.ndarray:
    peak = np.max(np.abs(v), axis=-1).astype(np.float64)
    scale = np.ones_like(peak, dtype=np.float32)
    nz = peak > 0
    # blocks peaking below kappa / FLT_MAX cannot reach kappa; they keep the largest finite scale
    scale[nz] = np.minimum(kappa / peak[nz], _F32_MAX).astype(np.float32)
    return scale


def compress_blocks(v: np.ndarray, kappa: float = DEFAULT_KAPPA) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise value compression of a ``(n, d)`` array; returns (scales, fp16 payload)."""
    v = np.asarray(v, dtype=np.float32)
    if not 0 < kappa <= 32768:
        raise PreconditionError("kappa must lie in (0, 32768]")
    if not np.isfinite(v).all():
        raise PreconditionError("cannot compress non-finite values")
    if v.shape[-1] == 0:
        return np.ones(v.shape[:-1], np.float32), v.astype(np.float16)
    scale = _scales(v, kappa)
    scaled = v * scale[..., None]
    # float32 rounding of the scale can push the peak a hair above kappa
    np.clip(scaled, -kappa, kappa, out=scaled)
    return scale, scaled.astype(np.float16)


def decompress_blocks(scale: np.ndarray, payload: np.ndarray) -> np.ndarray:
    wide = np.asarray(payload, dtype=np.float16).astype(np.float32)
    if not np.isfinite(wide).all():
        raise CorruptPayloadError("non-finite binary16 payload")
    scale = np.asarray(scale, dtype=np.float32)
    if not (np.isfinite(scale).all() and (scale > 0).all()):
        raise CorruptPayloadError("invalid block scale")
    return wide / scale[..., None]


def compress_values(v, kappa: float = DEFAULT_KAPPA) -> CompressedBlock:
    v = np.asarray(v, dtype=np.float32).reshape(-1)
    scale, payload = compress_blocks(v[None, :], kappa)
    return CompressedBlock(np.float32(scale[0]), payload[0])


def decompress_values(c: CompressedBlock) -> np.ndarray:
    return decompress_blocks(np.array([c.scale], np.float32), c.payload[None, :])[0]
