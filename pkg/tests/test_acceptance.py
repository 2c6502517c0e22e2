"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Slow runs on the default benchmark are shared between criteria through
``default_run``.  Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import io
import os
import time

import numpy as np
import pytest

from hybridrec import codec, dense_nn
from hybridrec.config import FaultSpec, load_config
from hybridrec.dense_nn import DenseModel
from hybridrec.embedding_ps import LruStore, PsShard
from hybridrec.errors import CheckpointCorruptError, PreconditionError
from hybridrec.nn_worker import allreduce_mean
from hybridrec.orchestrator import (dense_checkpoint_bytes, hybrid_lr, load_dataset, load_dense_checkpoint,
                                    run_training, save_dense_checkpoint)

from conftest import ACCEPTANCE_LINES
from lru_reference import ReferenceLru
from oracles import allreduce_reference, end_to_end_gradient_error, random_instance

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT = load_config(os.path.join(ROOT, "configs", "default.conf"))
THROUGHPUT = load_config(os.path.join(ROOT, "configs", "throughput.conf"))
SMOKE = load_config(os.path.join(ROOT, "configs", "smoke.conf"))

_datasets, _runs = {}, {}


def dataset(seed):
    if seed not in _datasets:
        _datasets[seed] = load_dataset(DEFAULT.set(train__seed=seed))
    return _datasets[seed]


def default_run(mode, seed=0, **kw):
    key = (mode, seed, tuple(sorted(kw.items())))
    if key not in _runs:
        _runs[key] = run_training(DEFAULT.set(train__mode=mode, train__seed=seed, **kw), dataset(seed))
    return _runs[key]


def report(n, ok, detail, started):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail} ({time.perf_counter() - started:.0f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_auc_ordering():
    t0 = time.perf_counter()
    parts, ok = [], True
    for seed in range(3):
        runs = {m: default_run(m, seed) for m in ("sync", "hybrid_opt", "async")}
        assert all(r.status == "ok" for r in runs.values())
        gh = abs(runs["hybrid_opt"].final_auc - runs["sync"].final_auc)
        ga = abs(runs["async"].final_auc - runs["sync"].final_auc)
        ok &= gh <= 0.003 and ga > gh
        parts.append(f"seed {seed} sync={runs['sync'].final_auc:.4f} gap hybrid={gh:.5f} async={ga:.5f}")
    report(1, ok, "; ".join(parts), t0)


def test_criterion_2_throughput_ordering():
    t0 = time.perf_counter()
    ds = load_dataset(THROUGHPUT)
    tp = {m: run_training(THROUGHPUT.set(train__mode=m), ds).samples_per_sec
          for m in ("sync", "hybrid_opt", "async")}
    ok = tp["async"] >= tp["hybrid_opt"] >= 1.5 * tp["sync"]
    report(2, ok, "samples/s " + " ".join(f"{m}={v:.0f}" for m, v in tp.items())
           + f" hybrid/sync={tp['hybrid_opt'] / tp['sync']:.2f}x", t0)


def test_criterion_3_bounded_staleness():
    t0 = time.perf_counter()
    capped = [default_run("hybrid_opt", s) for s in range(3)]
    capped += [default_run("hybrid_raw", 0), default_run("hybrid_opt", 0, train__prefetch_depth=10)]
    worst = max(r.max_staleness for r in capped)
    gated = capped[-1]
    sync = default_run("sync", 0)
    zero = default_run("hybrid_raw", 0, train__staleness_cap=0)
    steps_ok = [s for s, _ in sync.auc_trace] == [s for s, _ in zero.auc_trace] and sync.auc_trace
    diff = max(abs(a - b) for (_, a), (_, b) in zip(sync.auc_trace, zero.auc_trace))
    ok = worst <= 5 and gated.blocked_reads > 0 and steps_ok and diff <= 0.001
    report(3, ok, f"cap 5: max staleness {worst} over {len(capped)} runs (depth-10 run held "
                  f"{gated.blocked_reads} reads); cap 0 vs sync: max AUC diff {diff:.2e} over "
                  f"{len(sync.auc_trace)} checkpointed steps", t0)


def test_criterion_4_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    errs = []
    for _ in range(100):
        inst = random_instance(rng, groups=int(rng.integers(1, 4)), dim=int(rng.integers(1, 5)),
                               vocab=int(rng.integers(2, 8)), hidden=(int(rng.integers(2, 7)),))
        errs.append(end_to_end_gradient_error(*inst))
    worst = max(errs)
    report(4, worst <= 1e-4, f"max relative error {worst:.2e} over {len(errs)} instances", t0)


def lru_trace(seed, ops=100_000, capacity=1000, keys=3000):
    """Run one random op sequence on both stores; returns a mismatch description or None."""
    rng = np.random.default_rng(seed)
    kinds = rng.integers(0, 2, ops).tolist()
    ids = rng.integers(0, keys, ops).tolist()
    store, ref = LruStore(capacity, 2, initial_slots=16), ReferenceLru(capacity)
    vec = np.zeros(2, np.float32)
    warm = None
    hits = evictions = 0
    for n, (op, key) in enumerate(zip(kinds, ids)):
        if op == 0:
            got, want = store.get(key), ref.get(key)
            if (got is None) != (want is None):
                return f"seed {seed} op {n}: get({key}) hit mismatch"
            hits += got is not None
        else:
            ev, want = store.put(key, vec), ref.put(key, key)
            if (None if ev is None else ev[0]) != want:
                return f"seed {seed} op {n}: put({key}) evicted {ev and ev[0]} vs {want}"
            evictions += ev is not None
        if warm is None and len(store) == capacity:
            warm = (store.growths, store.vectors)
    if store.order() != ref.order():
        return f"seed {seed}: final LRU order differs"
    store.check_invariants()
    if warm is None or store.growths != warm[0] or store.vectors is not warm[1]:
        return f"seed {seed}: slot arrays reallocated after warm-up"
    return None, hits, evictions


def test_criterion_5_lru_equivalence():
    t0 = time.perf_counter()
    problems, hits, evictions = [], 0, 0
    for seed in range(50):
        out = lru_trace(seed)
        if isinstance(out, str):
            problems.append(out)
        else:
            hits += out[1]
            evictions += out[2]
    ok = not problems
    report(5, ok, f"50 seeds x 1e5 ops: {hits} hits, {evictions} evictions matched, no reallocation"
           if ok else problems[0], t0)


def test_criterion_6_codec_contracts():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    bad_index = 0
    for _ in range(10_000):
        n, G = int(rng.integers(0, 64)), int(rng.integers(1, 4))
        batch = [tuple(tuple(sorted(rng.integers(0, 500, int(rng.integers(0, 4))).tolist())) for _ in range(G))
                 for _ in range(n)]
        blob = codec.compress_indices(batch, G).to_bytes()
        back = codec.decompress_indices(codec.CompressedIndices.from_bytes(blob))
        bad_index += back != batch
    big_ok = len(codec.decompress_indices(codec.compress_indices([((1,),)] * 65535))) == 65535
    try:
        codec.compress_indices([((1,),)] * 65536)
        reject_ok = False
    except PreconditionError:
        reject_ok = True

    worst = 0.0
    for _ in range(10_000):
        d = int(rng.integers(1, 129))
        v = (rng.normal(size=d) * 10.0 ** rng.uniform(-6, 6)).astype(np.float32)
        peak = float(np.abs(v).max())
        err = np.abs(codec.decompress_values(codec.compress_values(v, 1024.0)).astype(np.float64) - v).max()
        worst = max(worst, err / peak if peak else 0.0)

    off = default_run("hybrid_opt", 0)
    on = default_run("hybrid_opt", 0, train__codec=True)
    delta = abs(on.final_auc - off.final_auc)
    ok = bad_index == 0 and big_ok and reject_ok and worst <= 2.0 ** -11 and delta <= 0.002
    report(6, ok, f"index mismatches {bad_index}/10000, 65535 ok={big_ok}, 65536 rejected={reject_ok}; "
                  f"value max err/peak {worst:.2e} (bound {2.0 ** -11:.2e}); codec AUC delta {delta:.5f}", t0)


def test_criterion_7_replica_invariant():
    t0 = time.perf_counter()
    divergent = []
    boundaries = 0

    def hook(step, cluster, event):
        nonlocal boundaries
        if event in ("step_start", "step_end"):
            boundaries += 1
            first = cluster.models[0].flat().tobytes()
            if any(m.flat().tobytes() != first for m in cluster.models[1:]):
                divergent.append((step, event))

    statuses = []
    for mode in ("sync", "hybrid_raw", "hybrid_opt"):
        cfg = SMOKE.set(train__mode=mode, train__steps=500, cluster__nn_workers=4, train__eval_every=100)
        statuses.append(run_training(cfg, hooks=hook).steps_run == 500)

    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        K = int(rng.integers(1, 9))
        shapes = [(int(rng.integers(1, 20)), int(rng.integers(1, 20))), (int(rng.integers(1, 20)),)]
        grads = [[(rng.normal(size=s) * 10.0 ** rng.uniform(-3, 3)).astype(np.float32) for s in shapes]
                 for _ in range(K)]
        got, ref = allreduce_mean(grads)[0], allreduce_reference(grads)
        for g, r in zip(got, ref):
            worst = max(worst, float(np.max(np.abs(g - r) / np.maximum(np.abs(r), 1e-30))))
    ok = all(statuses) and not divergent and worst <= 1e-6
    report(7, ok, f"3 modes x 500 steps, K=4: {boundaries} step boundaries, {len(divergent)} divergent; "
                  f"all-reduce max relative error {worst:.2e}", t0)


def test_criterion_8_fault_drills(tmp_path):
    t0 = time.perf_counter()
    base = default_run("hybrid_opt", 0)
    notes, ok = [], True

    cfg = DEFAULT.set(train__mode="hybrid_opt")
    cfg.faults.append(FaultSpec("embedding_worker", 75))
    m = run_training(cfg, dataset(0))
    gap = abs(m.final_auc - base.final_auc)
    a_ok = m.status == "ok" and m.conservation_ok and m.dropped > 0 and gap <= 0.005
    notes.append(f"(a) {m.registered}={m.trained}+{m.dropped}, AUC gap {gap:.5f}")

    probes = {}

    def ps_hook(step, cluster, event):
        if event == "recovered:embedding_ps":
            k = step % len(cluster.ps.shards)
            saved = PsShard.load_checkpoint(os.path.join(tmp_path / "ps", f"ps_shard{k}.ckpt"))
            ids = np.array(sorted(saved.store.index), np.uint64)
            probes["n"] = len(ids)
            probes["equal"] = np.array_equal(cluster.ps.shards[k].peek(ids), saved.peek(ids))

    cfg = DEFAULT.set(train__mode="hybrid_opt", train__checkpoint_dir=str(tmp_path / "ps"))
    cfg.faults.append(FaultSpec("embedding_ps", 75))
    m = run_training(cfg, dataset(0), hooks=ps_hook)
    b_ok = m.status == "ok" and probes.get("equal", False) and probes["n"] > 0
    notes.append(f"(b) {probes.get('n', 0)} probed entries equal={probes.get('equal')}")

    states = {}

    def nn_hook(step, cluster, event):
        if event == "recovered:nn_worker":
            ref = cluster.models[0].copy()
            load_dense_checkpoint(os.path.join(tmp_path / "nn", "dense.npz"), ref, dense_nn.SGD(0.1))
            states["equal"] = all(np.array_equal(m.flat(), ref.flat()) for m in cluster.models)

    cfg = DEFAULT.set(train__mode="hybrid_opt", train__checkpoint_dir=str(tmp_path / "nn"))
    cfg.faults.append(FaultSpec("nn_worker", 75))
    m = run_training(cfg, dataset(0), hooks=nn_hook)
    c_ok = m.status == "ok" and states.get("equal", False)
    notes.append(f"(c) replicas equal checkpoint={states.get('equal')}")
    ok = a_ok and b_ok and c_ok
    report(8, ok, "; ".join(notes), t0)


def test_criterion_9_checkpoint_bytes():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    shard = PsShard(300, 4, "adagrad", rng_salt=3)
    for _ in range(50):
        ids = rng.integers(0, 1000, 40).astype(np.uint64)
        shard.lookup(ids)
        shard.apply_gradients(ids, rng.normal(size=(40, 4)).astype(np.float32), 0.1)
    first = shard.to_bytes()
    buf = io.BytesIO()
    PsShard.load_checkpoint(first).save_checkpoint(buf)
    ps_stable = buf.getvalue() == first

    model = DenseModel.init([12, 8, 1], seed=1)
    opt = dense_nn.Adam(0.01)
    opt.step(model, [rng.normal(size=p.shape).astype(np.float32) for p in model.params()])
    dense = dense_checkpoint_bytes(model, opt, 7)
    path = os.path.join(ROOT, ".ckpt-check.npz")
    try:
        with open(path, "wb") as f:
            f.write(dense)
        m2, o2 = DenseModel.init([12, 8, 1], seed=5), dense_nn.Adam(0.01)
        load_dense_checkpoint(path, m2, o2)
        save_dense_checkpoint(path, m2, o2, 7)
        with open(path, "rb") as f:
            dense_stable = f.read() == dense

        detected = missed = 0
        for blob, loader in ((first, PsShard.load_checkpoint), (dense, None)):
            for pos in rng.choice(len(blob), 300, replace=False).tolist():
                bad = bytearray(blob)
                bad[pos] ^= 1 << int(rng.integers(8))
                try:
                    if loader is not None:
                        loader(bytes(bad))
                    else:
                        with open(path, "wb") as f:
                            f.write(bad)
                        load_dense_checkpoint(path, DenseModel.init([12, 8, 1]), dense_nn.Adam(0.01))
                    missed += 1
                except CheckpointCorruptError:
                    detected += 1
    finally:
        os.remove(path)
    ok = ps_stable and dense_stable and missed == 0
    report(9, ok, f"PS and dense save-load-save identical={ps_stable and dense_stable}; "
                  f"{detected}/{detected + missed} single-byte corruptions raised CheckpointCorruptError", t0)


def test_criterion_10_hybrid_lr():
    t0 = time.perf_counter()
    unit = all(hybrid_lr(L, 0, T, 0, a) == pytest.approx(1 / L) for L in (0.5, 1, 3) for T in (1, 100)
               for a in (0, 0.5))
    arith = hybrid_lr(1, 1, 100, 5, 0.1) == pytest.approx(1 / 13)
    grid = [(L, s, T, tau, a) for L in (0.5, 2) for s in (0, 0.5, 2) for T in (1, 10, 1000)
            for tau in (0, 1, 5) for a in (0, 0.1, 1)]
    mono = True
    for args in grid:
        base = hybrid_lr(*args)
        for i, bump in enumerate((0.5, 0.5, 7, 1, 0.05)):
            up = list(args)
            up[i] += bump
            step = hybrid_lr(*up)
            # strictly smaller unless the bumped term is multiplied by a zero
            mono &= step < base if _term_live(args, i) else step == base
    report(10, unit and arith and mono, f"sigma=tau=0 gives 1/L: {unit}; (1,1,100,5,0.1)=1/13: {arith}; "
                                        f"monotone over {len(grid)} grid points: {mono}", t0)


def _term_live(args, i):
    L, sigma, T, tau, alpha = args
    return {0: True, 1: T > 0, 2: sigma > 0, 3: alpha > 0, 4: tau > 0}[i]
