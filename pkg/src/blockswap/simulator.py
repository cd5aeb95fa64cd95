"""Discrete-event simulation of pipelined swap-in / execute / swap-out.

Each model owns three lanes: a swap-in lane (assembly included), a compute
lane and a release lane. Release does no storage I/O, so it runs beside the
swap-in lane. A block occupies one of `m` residency slots from the start
of its swap-in until its release finishes. Every lane starts its next
block as early as its dependencies allow. Models never share lanes.
"""
from __future__ import annotations

import bisect
import csv
import heapq
import io
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

from .partitioner import (
    DEFAULT_DELTA,
    DEFAULT_PARALLELISM,
    CandidateCache,
    NoFeasiblePartition,
    PartitionError,
    PartitionScheme,
    adapt_partition_detail,
    pipeline_lower_bound,
    predict_pipeline_latency,
    scheme_delays,
    scheme_peak_memory,
)
from .profiler import DelayEstimate, DeviceProfile
from .registry import LayerSequence

PHASES = ("swap_in", "assemble", "execute", "swap_out")
_PHASE_ORDER = {p: i for i, p in enumerate(PHASES)}


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class SimEvent:
    model: str
    block: int
    phase: str
    start: float
    end: float


@dataclass
class SimConfig:
    model: str
    delays: Sequence[DelayEstimate]
    sizes: Sequence[int] | None = None
    budget: int | None = None
    delta: float = DEFAULT_DELTA
    m: int = DEFAULT_PARALLELISM

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("parallelism m must be >= 1")
        if not self.delays:
            raise ValueError(f"{self.model}: no blocks")
        if self.sizes is not None and len(self.sizes) != len(self.delays):
            raise ValueError(f"{self.model}: {len(self.sizes)} sizes for {len(self.delays)} blocks")
        if self.sizes is not None and self.budget is not None:
            w = min(self.m, len(self.sizes))
            peak = max(sum(self.sizes[i : i + w]) for i in range(len(self.sizes) - w + 1))
            if peak > self.budget * (1 - self.delta):
                raise ValueError(
                    f"{self.model}: scheme peak {peak} B exceeds budget*(1-delta) "
                    f"= {self.budget * (1 - self.delta):.0f} B"
                )


@dataclass
class Timeline:
    events: list[SimEvent]
    makespans: dict[str, float]
    resident_trace: list[tuple[float, str, int, int]]  # (time, model, blocks, bytes)
    configs: dict[str, SimConfig] = field(default_factory=dict, repr=False)

    @property
    def makespan(self) -> float:
        return max(self.makespans.values(), default=0.0)

    def peak_resident_bytes(self, model: str) -> int:
        return max((b for _, m, _, b in self.resident_trace if m == model), default=0)

    def max_resident_blocks(self, model: str) -> int:
        return max((k for _, m, k, _ in self.resident_trace if m == model), default=0)

    def events_for(self, model: str) -> list[SimEvent]:
        return [e for e in self.events if e.model == model]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "block", "phase", "start_ms", "end_ms"])
        for e in self.events:
            writer.writerow([e.model, e.block, e.phase, f"{e.start * 1e3:.6f}", f"{e.end * 1e3:.6f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        models = {}
        for name, cfg in self.configs.items():
            pred = predict_pipeline_latency(cfg.delays)
            sim = self.makespans[name]
            models[name] = {
                "makespan_ms": sim * 1e3,
                "predicted_ms": pred.total * 1e3,
                "lower_bound_ms": pred.lower_bound * 1e3,
                "overhangs_ms": [ov * 1e3 for ov in pred.overhangs],
                "divergence_ms": (sim - pred.total) * 1e3,
                "peak_resident_bytes": self.peak_resident_bytes(name),
                "max_resident_blocks": self.max_resident_blocks(name),
                "blocks": len(cfg.delays),
            }
        return {"global_makespan_ms": self.makespan * 1e3, "models": models}

    def summary_text(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=1) + "\n"


class _Lanes:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.n = len(cfg.delays)
        self.next = {"swap_in": 0, "execute": 0, "swap_out": 0}
        self.busy = {"swap_in": False, "execute": False, "swap_out": False}
        self.loaded = [False] * self.n
        self.executed = [False] * self.n
        self.resident = 0
        self.resident_bytes = 0
        self.started: dict[tuple[int, str], float] = {}
        self.finish = 0.0

    def size(self, i: int) -> int:
        return self.cfg.sizes[i] if self.cfg.sizes is not None else 0

    def duration(self, phase: str, i: int) -> float:
        d = self.cfg.delays[i]
        return {"swap_in": d.t_in, "execute": d.t_ex, "swap_out": d.t_out}[phase]

    def ready(self, phase: str) -> int | None:
        i = self.next[phase]
        if i >= self.n or self.busy[phase]:
            return None
        if phase == "swap_in" and self.resident >= self.cfg.m:
            return None
        if phase == "execute" and not self.loaded[i]:
            return None
        if phase == "swap_out" and not self.executed[i]:
            return None
        return i


def _run(configs: Sequence[SimConfig]) -> Timeline:
    names = [c.model for c in configs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate model names {names}")
    lanes = {c.model: _Lanes(c) for c in configs}
    queue: list[tuple[float, int, str, str, int]] = []
    seq = 0
    events: list[SimEvent] = []
    trace: list[tuple[float, str, int, int]] = []

    def try_start(model: str, now: float):
        nonlocal seq
        st = lanes[model]
        # fixed order per instant: release frees a slot, then execute, then swap-in
        progress = True
        while progress:
            progress = False
            for phase in ("swap_out", "execute", "swap_in"):
                i = st.ready(phase)
                if i is None:
                    continue
                st.busy[phase] = True
                st.next[phase] += 1
                st.started[(i, phase)] = now
                if phase == "swap_in":
                    st.resident += 1
                    st.resident_bytes += st.size(i)
                    trace.append((now, model, st.resident, st.resident_bytes))
                heapq.heappush(queue, (now + st.duration(phase, i), seq, model, phase, i))
                seq += 1
                progress = True

    for c in configs:
        try_start(c.model, 0.0)
    while queue:
        now, _, model, phase, i = heapq.heappop(queue)
        st = lanes[model]
        st.busy[phase] = False
        events.append(SimEvent(model, i, phase, st.started[(i, phase)], now))
        if phase == "swap_in":
            st.loaded[i] = True
        elif phase == "execute":
            st.executed[i] = True
        else:
            st.resident -= 1
            st.resident_bytes -= st.size(i)
            trace.append((now, model, st.resident, st.resident_bytes))
        st.finish = max(st.finish, now)
        try_start(model, now)

    for name, st in lanes.items():
        if st.next["swap_out"] != st.n or st.resident:
            raise SimulationError(f"{name}: pipeline stalled")
    events.sort(key=lambda e: (e.start, e.model, e.block, _PHASE_ORDER[e.phase]))
    return Timeline(
        events,
        {name: st.finish for name, st in lanes.items()},
        trace,
        {c.model: c for c in configs},
    )


def simulate_single(
    delays: Sequence[DelayEstimate],
    m: int = DEFAULT_PARALLELISM,
    model: str = "model",
    sizes: Sequence[int] | None = None,
    budget: int | None = None,
    delta: float = DEFAULT_DELTA,
) -> Timeline:
    return _run([SimConfig(model, list(delays), sizes, budget, delta, m)])


def simulate_multi(configs: Sequence[SimConfig]) -> Timeline:
    """Models run on disjoint lanes; global makespan is the slowest model."""
    if not configs:
        raise ValueError("no models to simulate")
    return _run(list(configs))


# ---------------------------------------------------------------------------
# budget dynamics
# ---------------------------------------------------------------------------


@dataclass
class AdaptationRecord:
    time: float
    budget: int
    old_points: tuple[int, ...] | None
    new_points: tuple[int, ...] | None
    old_n: int | None
    new_n: int | None
    rows_evaluated: int
    elapsed: float  # wall-clock seconds spent re-planning
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class AdaptationRun:
    timeline: Timeline
    records: list[AdaptationRecord]
    rounds: list[tuple[float, float, tuple[int, ...]]]  # (start, makespan, points)
    initial: PartitionScheme | None

    @property
    def adaptations(self) -> list[AdaptationRecord]:
        return [r for r in self.records if not r.failed]

    @property
    def failures(self) -> list[AdaptationRecord]:
        return [r for r in self.records if r.failed]


def simulate_adaptation(
    layers: LayerSequence,
    profile: DeviceProfile,
    budget_trace: Sequence[tuple[float, int]],
    delta: float = DEFAULT_DELTA,
    m: int = DEFAULT_PARALLELISM,
    cache: CandidateCache | None = None,
    max_rounds: int = 10_000,
) -> AdaptationRun:
    """Run inference rounds back to back while the budget follows `budget_trace`.

    Between rounds the current budget is read. If the running scheme no
    longer fits, the model is re-partitioned from its cached layers. When
    no partition fits the model pauses until the next budget change.
    Simulation ends after one full round under the final budget.
    """
    trace = [(float(t), int(b)) for t, b in budget_trace]
    if not trace:
        raise ValueError("empty budget trace")
    if any(b[0] < a[0] for a, b in zip(trace, trace[1:])):
        raise ValueError("budget trace times must be ascending")
    times = [t for t, _ in trace]
    table = layers.table
    cache = cache or CandidateCache()

    def budget_at(t: float) -> int:
        return trace[max(bisect.bisect_right(times, t) - 1, 0)][1]

    def replan(b: int):
        start = time.perf_counter()
        a = adapt_partition_detail(layers, profile, b, delta, m, cache)
        return a, time.perf_counter() - start

    records: list[AdaptationRecord] = []
    rounds = []
    events: list[SimEvent] = []
    trace_out: list[tuple[float, str, int, int]] = []

    scheme: PartitionScheme | None = None
    initial = None
    try:
        scheme = replan(budget_at(0.0))[0].scheme
        initial = scheme
    except PartitionError as exc:
        records.append(AdaptationRecord(0.0, budget_at(0.0), None, None, None, None, 0, 0.0, str(exc)))

    t = 0.0
    last_budget = budget_at(0.0)
    done_final = False
    while len(rounds) < max_rounds:
        b = budget_at(t)
        if b != last_budget:
            last_budget = b
            fits = scheme is not None and scheme_peak_memory(table, scheme, m) <= b * (1 - delta)
            if not fits:
                old = scheme
                try:
                    a, elapsed = replan(b)
                    scheme = a.scheme
                    records.append(
                        AdaptationRecord(
                            t, b,
                            old.points if old else None, scheme.points,
                            old.n if old else None, a.n,
                            a.rows_evaluated, elapsed,
                        )
                    )
                except (NoFeasiblePartition, PartitionError) as exc:
                    scheme = None
                    records.append(
                        AdaptationRecord(
                            t, b, old.points if old else None, None,
                            old.n if old else None, None, 0, 0.0, str(exc),
                        )
                    )
        if done_final:
            break
        upcoming = [x for x in times if x > t]
        if scheme is None:
            if not upcoming:
                break
            t = upcoming[0]
            continue
        delays = scheme_delays(table, scheme.points, profile)
        tl = simulate_single(delays, m, table.name)
        for e in tl.events:
            events.append(SimEvent(e.model, e.block, e.phase, e.start + t, e.end + t))
        trace_out.extend((tt + t, mm, k, by) for tt, mm, k, by in tl.resident_trace)
        rounds.append((t, tl.makespan, scheme.points))
        if tl.makespan <= 0:
            if not upcoming:
                break
            t = upcoming[0]
            continue
        if not upcoming:
            done_final = True
        t += tl.makespan

    finish = max((e.end for e in events), default=0.0)
    timeline = Timeline(events, {table.name: finish}, trace_out)
    return AdaptationRun(timeline, records, rounds, initial)
