import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridrec.config import FaultSpec
from hybridrec.data import generate_synthetic
from hybridrec.errors import ClockError, PreconditionError, UnrecoverableRunError
from hybridrec.orchestrator import (CSV_COLUMNS, CSV_SCHEMA_VERSION, StalenessGate, StalenessStats, compare_modes,
                                    hybrid_lr, pipeline_depth, record_staleness, run_training)

from conftest import small_config

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "metrics_header.csv")


@pytest.fixture(scope="module")
def small_data():
    cfg = small_config()
    return generate_synthetic(cfg.data.synth(cfg.model.embedding_dim), seed=0)


# -- step size ------------------------------------------------------------

def test_hybrid_lr_examples():
    assert hybrid_lr(1, 0, 1, 0, 0) == 1.0
    assert hybrid_lr(1, 1, 1, 0, 0) == 0.5
    assert hybrid_lr(1, 0, 1, 1, 1) == pytest.approx(0.2)
    assert hybrid_lr(4, 1, 100, 0, 0) == pytest.approx(1 / 24)


@pytest.mark.parametrize("args", [(0, 1, 1, 0, 0), (1, -1, 1, 0, 0), (1, 0, 0, 0, 0), (1, 0, 1.5, 0, 0),
                                  (1, 0, 1, -1, 0), (1, 0, 1, 0, -0.1), (float("nan"), 0, 1, 0, 0)])
def test_hybrid_lr_rejects(args):
    with pytest.raises(PreconditionError):
        hybrid_lr(*args)


@given(st.floats(0.01, 100), st.floats(0, 10), st.integers(1, 10**6), st.floats(0, 50), st.floats(0, 1),
       st.floats(0.01, 10))
@settings(max_examples=200, deadline=None)
def test_hybrid_lr_monotone(L, sigma, T, tau, alpha, bump):
    base = hybrid_lr(L, sigma, T, tau, alpha)
    assert 0 < base <= 1 / L
    assert hybrid_lr(L, sigma, T, tau + bump, alpha) <= base
    assert hybrid_lr(L, sigma, T, tau, min(1.0, alpha + bump)) <= base
    assert hybrid_lr(L, sigma + bump, T, tau, alpha) <= base
    assert hybrid_lr(L, sigma, T + 1, tau, alpha) <= base


# -- staleness accounting -------------------------------------------------

def test_staleness_record_examples():
    s = StalenessStats()
    record_staleness(s, 3, 5)
    record_staleness(s, 5, 5)
    assert s.as_dict() == {0: 1, 2: 1} and s.max == 2 and s.count == 2
    with pytest.raises(ClockError):
        record_staleness(s, 6, 5)


@given(st.lists(st.integers(0, 40), max_size=200))
def test_staleness_histogram_counts(delays):
    s = StalenessStats(keep_log=True)
    for d in delays:
        s.record(0, d)
    assert s.count == len(delays) == int(s.hist.sum())
    assert s.max == (max(delays) if delays else 0)


def test_pipeline_depths():
    cfg = small_config()
    assert pipeline_depth(cfg.set(train__mode="sync")) == 0
    assert pipeline_depth(cfg.set(train__mode="hybrid_raw")) == cfg.train.prefetch_depth
    assert pipeline_depth(cfg.set(train__mode="async")) == cfg.train.async_depth


def test_gate_admission():
    gate = StalenessGate(cap=1)
    feats = lambda *ids: [[list(ids)]]
    for step in range(4):
        gate.add_step(step, [100 + step], feats(7) if step < 3 else feats(7, 8))
    gate.advance(0)
    # sample 103 is planned at step 3; ID 7 is written at steps 0, 1, 2 before it
    assert gate.writes_before(7, 3) == 3
    assert not gate(103, [[7]])
    assert gate(103, [[8]])
    assert gate(101, [[7]])  # one write ahead of it
    gate.advance(2)
    assert gate(103, [[7]])
    assert gate.blocked == 1


# -- runs ----------------------------------------------------------------

def test_run_deterministic(small_data):
    cfg = small_config(train__mode="hybrid_opt")
    a, b = run_training(cfg, small_data), run_training(cfg, small_data)
    assert a.status == "ok" and a.auc_trace == b.auc_trace
    assert a.final_digest == b.final_digest and a.loss_trace == b.loss_trace
    assert a.staleness.as_dict() == b.staleness.as_dict()
    rep_a, rep_b = a.to_report(), b.to_report()
    rep_a.pop("timing"), rep_b.pop("timing")
    assert json.dumps(rep_a, sort_keys=True) == json.dumps(rep_b, sort_keys=True)


@pytest.mark.parametrize("mode", ["sync", "hybrid_raw", "hybrid_opt", "async"])
def test_run_conservation(small_data, mode):
    m = run_training(small_config(train__mode=mode), small_data, keep_staleness_log=True)
    assert m.status == "ok" and m.steps_run == m.steps_planned == 25
    assert m.conservation_ok and m.registered == 25 * 64 and m.dropped == 0
    assert m.trained == m.samples_trained
    assert np.array_equal(m.staleness.hist, np.bincount(m.staleness.log, minlength=len(m.staleness.hist)))
    assert 0.5 < m.final_auc <= 1.0
    if mode == "sync":
        assert m.staleness.max == 0 and m.staleness.hist[1:].sum() == 0


def test_hybrid_respects_cap(small_data):
    m = run_training(small_config(train__mode="hybrid_raw", train__staleness_cap=1), small_data)
    assert m.status == "ok" and m.max_staleness <= 1 and m.blocked_reads > 0


def test_csv_header_matches_golden(small_data, tmp_path):
    with open(GOLDEN) as f:
        version_line, header = f.read().splitlines()
    assert version_line == f"schema_version={CSV_SCHEMA_VERSION}"
    assert header == ",".join(CSV_COLUMNS)
    m = run_training(small_config(train__mode="sync"), small_data)
    path = tmp_path / "m.csv"
    m.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == header and len(lines) == 1 + m.steps_run
    assert m.to_report()["csv_schema"] == CSV_SCHEMA_VERSION


def test_embedding_worker_drill(small_data):
    cfg = small_config(train__mode="hybrid_opt")
    cfg.faults.append(FaultSpec("embedding_worker", 5))
    m = run_training(cfg, small_data)
    assert m.status == "ok" and m.recoveries[0]["target"] == "embedding_worker"
    assert m.dropped == m.recoveries[0]["dropped"] > 0
    assert m.conservation_ok and m.final_auc > 0.5


def test_ps_drill_restores_checkpoint(small_data):
    cfg = small_config(train__mode="hybrid_opt")
    cfg.faults.append(FaultSpec("embedding_ps", 15))
    shard = 15 % cfg.cluster.ps_shards
    seen = {}

    def hook(step, cluster, event):
        if event == "checkpoint" and step == 9:
            seen["ckpt"] = cluster.ps.shards[shard].to_bytes()
        if event == "recovered:embedding_ps":
            seen["restored"] = cluster.ps.shards[shard].to_bytes()

    m = run_training(cfg, small_data, hooks=hook)
    assert m.status == "ok" and m.recoveries[0]["checkpoint_step"] == 10
    assert seen["restored"] == seen["ckpt"]


def test_nn_drill_reloads_dense(small_data):
    cfg = small_config(train__mode="hybrid_opt")
    cfg.faults.append(FaultSpec("nn_worker", 15))
    seen = {}

    def hook(step, cluster, event):
        if event == "checkpoint" and step == 9:
            seen["ckpt"] = cluster.models[0].digest()
        if event == "recovered:nn_worker":
            seen["restored"] = [mdl.digest() for mdl in cluster.models]

    m = run_training(cfg, small_data, hooks=hook)
    assert m.status == "ok" and m.recoveries[0]["target"] == "nn_worker"
    assert seen["restored"] == [seen["ckpt"]] * cfg.cluster.nn_workers
    assert m.final_digest


def test_fault_before_checkpoint_is_unrecoverable(small_data):
    for target in ("embedding_ps", "nn_worker"):
        cfg = small_config(train__mode="hybrid_opt")
        cfg.faults.append(FaultSpec(target, 3))
        with pytest.raises(UnrecoverableRunError):
            run_training(cfg, small_data)


def test_divergence_aborts(small_data):
    m = run_training(small_config(train__mode="sync", train__lr=1e30), small_data)
    assert m.status == "aborted" and "divergence" in m.reason
    assert m.steps_run < m.steps_planned


def test_too_few_samples():
    cfg = small_config(data__samples=40)
    with pytest.raises(PreconditionError):
        run_training(cfg)


def test_compare_small(small_data, tmp_path):
    rep = compare_modes(small_config(), small_data)
    assert list(rep.runs) == ["sync", "hybrid_opt", "async"] and not rep.partial
    assert set(rep.checks) == {"hybrid_gap_le_0.3pct", "gap_hybrid_lt_async", "throughput_async_ge_hybrid",
                               "throughput_hybrid_ge_1.5x_sync"}
    rep.write_csv(tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert sum(r.startswith("run,") for r in rows) == 3 and sum(r.startswith("check,") for r in rows) == 4


def test_compare_marks_failed_run(small_data):
    cfg = small_config()
    cfg.faults.append(FaultSpec("embedding_ps", 2))
    rep = compare_modes(cfg, small_data, modes=("sync", "hybrid_opt"))
    assert rep.partial and rep.runs["sync"].status == "failed" and not rep.checks


@pytest.mark.parametrize("pull,push", [(True, True), (True, False), (False, True)])
def test_codec_directions(small_data, pull, push):
    plain = run_training(small_config(), small_data)
    m = run_training(small_config(train__codec=True, train__codec_pull=pull, train__codec_push=push), small_data)
    assert m.status == "ok" and abs(m.final_auc - plain.final_auc) < 0.01
