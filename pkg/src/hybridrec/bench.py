"""Micro-benchmarks behind the ``bench-codec`` and ``bench-lru`` commands."""
import time

import numpy as np

from . import codec
from .embedding_ps import LruStore


def bench_codec(batch_sizes=(64, 256, 1024, 4096), groups=5, ids_per_group=4, vocab=100_000, dim=8,
                kappa=codec.DEFAULT_KAPPA, seed=0, repeats=3):
    """Bytes and timing of both codecs for random zipf-ish batches."""
    rng = np.random.default_rng(seed)
    rows = []
    for b in batch_sizes:
        ranks = np.minimum(rng.zipf(1.1, size=(b, groups, ids_per_group)) - 1, vocab - 1)
        batch = [[tuple(int(x) for x in ranks[i, g]) for g in range(groups)] for i in range(b)]
        raw_idx = sum(len(grp) for s in batch for grp in s) * 8 + b * groups * 4
        t0 = time.perf_counter()
        for _ in range(repeats):
            packed = codec.compress_indices(batch, groups).to_bytes()
        enc = (time.perf_counter() - t0) / repeats
        t0 = time.perf_counter()
        for _ in range(repeats):
            back = codec.decompress_indices(codec.CompressedIndices.from_bytes(packed))
        dec = (time.perf_counter() - t0) / repeats
        exact = all(sorted(a) == sorted(b_) for s1, s2 in zip(batch, back) for a, b_ in zip(s1, s2))

        v = (rng.standard_normal((b * groups, dim)) * rng.lognormal(0, 2, (b * groups, 1))).astype(np.float32)
        t0 = time.perf_counter()
        scales, payload = codec.compress_blocks(v, kappa)
        venc = time.perf_counter() - t0
        rec = codec.decompress_blocks(scales, payload)
        err = float(np.max(np.abs(rec - v).max(axis=1) / np.maximum(np.abs(v).max(axis=1), 1e-30)))
        rows.append({
            "batch": b, "index_raw_bytes": raw_idx, "index_bytes": len(packed),
            "index_ratio": raw_idx / len(packed), "index_encode_ms": enc * 1e3, "index_decode_ms": dec * 1e3,
            "index_exact": exact, "value_raw_bytes": v.nbytes, "value_bytes": scales.nbytes + payload.nbytes,
            "value_ratio": v.nbytes / (scales.nbytes + payload.nbytes), "value_encode_ms": venc * 1e3,
            "value_max_rel_err": err,
        })
    return rows


def bench_lru(ops=100_000, capacity=10_000, key_space=30_000, dim=8, seed=0):
    """Throughput and hit rate of the PS LRU store under a zipf key stream."""
    rng = np.random.default_rng(seed)
    keys = (np.minimum(rng.zipf(1.2, size=ops), key_space) - 1).tolist()
    store = LruStore(capacity, dim, initial_slots=capacity)
    allocated = store.allocated
    hits = evictions = 0
    t0 = time.perf_counter()
    for k in keys:
        if store.touch(k) >= 0:
            hits += 1
        else:
            _, ev = store.insert(k)
            evictions += ev is not None
    dt = time.perf_counter() - t0
    store.check_invariants()
    return [{"ops": ops, "capacity": capacity, "key_space": key_space, "seconds": dt, "ops_per_sec": ops / dt,
             "hit_rate": hits / ops, "evictions": evictions,
             "reallocations": int(store.allocated != allocated)}]
