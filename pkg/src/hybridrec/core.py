"""Shared value types, sample-ID bit packing and shard routing.

A sample ID is a 64-bit integer whose top byte names the embedding worker
that issued it and whose low 56 bits are that worker's monotonic counter.

Shard routing hashes a feature ID with the SplitMix64 finalizer and takes
the result modulo the shard count.  The constants below are part of the
checkpoint and wire compatibility contract (see docs/wire.md).
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import PreconditionError

RANK_BITS = 8
COUNTER_BITS = 56
MAX_RANK = (1 << RANK_BITS) - 1
COUNTER_MASK = (1 << COUNTER_BITS) - 1
MASK64 = (1 << 64) - 1

# SplitMix64 (Steele, Lea & Flood 2014) finalizer constants.
MIX_GAMMA = 0x9E3779B97F4A7C15
MIX_M1 = 0xBF58476D1CE4E5B9
MIX_M2 = 0x94D049BB133111EB

SampleId = int
# One tuple of feature IDs per feature group.
IdFeatures = Tuple[Tuple[int, ...], ...]


def encode_sample_id(rank: int, counter: int) -> SampleId:
    if not 0 <= rank <= MAX_RANK:
        raise PreconditionError(f"rank {rank} outside [0, {MAX_RANK}]")
    if not 0 <= counter <= COUNTER_MASK:
        raise PreconditionError(f"counter {counter} does not fit in {COUNTER_BITS} bits")
    return (rank << COUNTER_BITS) | counter


def decode_rank(sample_id: SampleId) -> int:
    return (int(sample_id) >> COUNTER_BITS) & MAX_RANK


def decode_counter(sample_id: SampleId) -> int:
    return int(sample_id) & COUNTER_MASK


def decode_ranks(sample_ids: np.ndarray) -> np.ndarray:
    return (np.asarray(sample_ids, dtype=np.uint64) >> np.uint64(COUNTER_BITS)).astype(np.int64)


def mix64(x: int) -> int:
    """SplitMix64 avalanche of a 64-bit integer."""
    z = (int(x) + MIX_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * MIX_M1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(x) -> np.ndarray:
    """Vectorised :func:`mix64`; uint64 arithmetic wraps modulo 2**64."""
    z = np.asarray(x, dtype=np.uint64) + np.uint64(MIX_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_M2)
    return z ^ (z >> np.uint64(31))


def route_shard(feature_id: int, shard_count: int) -> int:
    if shard_count < 1:
        raise PreconditionError("shard_count must be >= 1")
    return mix64(feature_id) % shard_count


class ShardRouter:
    """Stateless feature-ID to shard mapping."""

    def __init__(self, shard_count: int):
        if shard_count < 1:
            raise PreconditionError("shard_count must be >= 1")
        self.shard_count = int(shard_count)

    def route(self, feature_id: int) -> int:
        return route_shard(feature_id, self.shard_count)

    def route_many(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.uint64)
        if self.shard_count == 1:
            return np.zeros(ids.shape, dtype=np.int64)
        return (mix64_array(ids) % np.uint64(self.shard_count)).astype(np.int64)

    def __repr__(self):
        return f"ShardRouter(shard_count={self.shard_count})"


def validate_id_features(features: Sequence[Sequence[int]], group_count: int, vocab: int) -> IdFeatures:
    """Check group count and ID bounds, returning the canonical tuple form."""
    if len(features) != group_count:
        raise PreconditionError(f"expected {group_count} feature groups, got {len(features)}")
    out = []
    for group in features:
        ids = tuple(int(i) for i in group)
        for i in ids:
            if not 0 <= i < vocab:
                raise PreconditionError(f"feature id {i} outside vocabulary [0, {vocab})")
        out.append(ids)
    return tuple(out)


@dataclass
class Minibatch:
    """Joined training inputs: ``embeddings`` is ``(b, groups, dim)``."""

    sample_ids: np.ndarray
    embeddings: np.ndarray
    non_id: np.ndarray
    labels: np.ndarray
    read_versions: Optional[list] = None

    def __post_init__(self):
        b = len(self.sample_ids)
        if not (self.embeddings.shape[0] == self.non_id.shape[0] == self.labels.shape[0] == b):
            raise PreconditionError("minibatch fields differ in length")
        if b > 65535:
            raise PreconditionError("minibatch larger than 65535 samples")

    def __len__(self):
        return len(self.sample_ids)

    @property
    def group_count(self) -> int:
        return self.embeddings.shape[1]

    @property
    def embedding_width(self) -> int:
        return self.embeddings.shape[1] * self.embeddings.shape[2]

    def inputs(self) -> np.ndarray:
        n = len(self)
        return np.concatenate([self.embeddings.reshape(n, -1), self.non_id], axis=1)

    def take(self, order) -> "Minibatch":
        rv = None if self.read_versions is None else [self.read_versions[i] for i in order]
        return Minibatch(self.sample_ids[order], self.embeddings[order], self.non_id[order],
                         self.labels[order], rv)
