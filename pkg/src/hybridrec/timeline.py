"""Cluster time model for throughput.

A run executes in one process, so measured wall-clock time is the sum of
every component's work.  On a real cluster the data loader, the embedding
workers and the NN replicas run side by side and only wait on each other
through messages.  ``Timeline`` keeps one clock per component, charges each
the CPU time it was measured to spend, and moves clocks forward along
message dependencies plus the configured link latencies.  The makespan of
that schedule is what throughput is computed from.

Modeling limits: PS work is charged to the embedding worker that called it,
and an embedding worker serves requests in the order the single-threaded
run issued them.  The data loader runs one stream per embedding worker, so
its work is spread over that many lanes.
"""
import time
from collections import defaultdict
from typing import Dict, Sequence

from .wire import MsgType


class CostRecorder:
    """Wraps frame handlers and accumulates their run time per message type."""

    def __init__(self):
        self._costs: Dict[int, Dict[int, float]] = defaultdict(lambda: defaultdict(float))

    def wrap(self, rank: int, handler):
        def timed(frame: bytes) -> bytes:
            t0 = time.perf_counter()
            try:
                return handler(frame)
            finally:
                self._costs[rank][frame[4] if len(frame) > 4 else 0] += time.perf_counter() - t0
        return timed

    def take(self, kind: MsgType = None) -> Dict[int, float]:
        """Per-rank cost of ``kind`` messages since the last take (all kinds if None)."""
        out = {}
        for r, by_kind in self._costs.items():
            if kind is None:
                out[r] = sum(by_kind.values())
                by_kind.clear()
            else:
                out[r] = by_kind.pop(int(kind), 0.0)
        return out

    def clear(self):
        self._costs.clear()


class Timeline:
    def __init__(self, nn_workers: int, embedding_workers: int, fetch_latency: float = 0.0,
                 allreduce_latency: float = 0.0):
        self.nn = [0.0] * nn_workers
        self.ew = [0.0] * embedding_workers
        self.loader = 0.0
        self.loader_lanes = embedding_workers
        self.half = fetch_latency / 2.0
        self.allreduce_latency = allreduce_latency
        self.ready: Dict[int, float] = {}  # dispatch step -> embeddings available at NN workers
        self.step_start: Dict[int, float] = {}
        self.step_end: Dict[int, float] = {}
        self.busy = defaultdict(float)

    def dispatch(self, step: int, not_before: float, loader_cost: float, reg_costs: Dict[int, float],
                 pull_costs: Dict[int, float]):
        start = max(self.loader, not_before)
        self.loader = start + loader_cost / self.loader_lanes
        self.busy["loader"] += loader_cost
        for r, c in reg_costs.items():
            self.ew[r] = max(self.ew[r], start) + c
            self.busy["embedding"] += c
        ready = self.loader
        for r, c in pull_costs.items():
            self.ew[r] = max(self.ew[r], self.loader + self.half) + c
            self.busy["embedding"] += c
            ready = max(ready, self.ew[r] + self.half)
        self.ready[step] = ready

    def retry_pulls(self, k: int, pull_costs: Dict[int, float]):
        """Re-issued reads from NN worker ``k``; it waits for the replies."""
        ready = self.nn[k]
        for r, c in pull_costs.items():
            self.ew[r] = max(self.ew[r], self.nn[k] + self.half) + c
            self.busy["embedding"] += c
            ready = max(ready, self.ew[r] + self.half)
        self.nn[k] = ready

    def begin_step(self, step: int, ready_step: int):
        r = self.ready.get(ready_step, 0.0)
        self.nn = [max(t, r) for t in self.nn]
        self.step_start[step] = min(self.nn)

    def compute(self, k: int, cost: float):
        self.nn[k] += cost
        self.busy["nn"] += cost

    def barrier(self, cost: float = 0.0, overlap: Sequence[float] = None):
        """All-reduce: everyone waits for the slowest, then pays latency + cost.

        ``overlap[k]`` is work worker ``k`` does while its all-reduce is in
        flight; it only adds time when it exceeds the latency.
        """
        if overlap is None:
            done = max(self.nn) + self.allreduce_latency
        else:
            done = max(t + max(self.allreduce_latency, o) for t, o in zip(self.nn, overlap))
        self.nn = [done + cost] * len(self.nn)
        self.busy["nn"] += cost * len(self.nn)

    def push(self, k: int, send_cost: float, ew_costs: Dict[int, float], wait: bool) -> float:
        """Gradient write-back from worker ``k``; returns when the last ack lands."""
        self.nn[k] += send_cost
        self.busy["nn"] += send_cost
        ack = self.nn[k]
        for r, c in ew_costs.items():
            self.ew[r] = max(self.ew[r], self.nn[k] + self.half) + c
            self.busy["embedding"] += c
            ack = max(ack, self.ew[r] + self.half)
        if wait:
            self.nn[k] = ack
        return ack

    def end_step(self, step: int, acks: float = 0.0):
        self.step_end[step] = max(max(self.nn), acks)

    def makespan(self) -> float:
        return max([self.loader, *self.ew, *self.nn])
