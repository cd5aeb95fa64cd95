"""Choose where to cut a model into blocks under a per-model memory budget.

Block count comes from ``n = ceil(m * s / b)``. For that n every feasible
cut combination is scored once (peak resident memory and predicted
pipelined latency) and kept in a lookup table. Under a given budget the
rows whose adjacent blocks exceed ``b * (1 - delta)`` are pruned and the
fastest survivor wins.

Latency prediction follows the overhang recurrence

    ov_1 = max(in_2 - ex_1, 0)
    ov_i = (out_{i-1} + in_{i+1}) - (ex_i + max(ov_{i-1}, 0))     i >= 2
    total = in_1 + sum(ex) + sum(max(ov_i, 0)) + out_n

with in_{n+1} = 0. Carried overhang is clamped at zero: idle time on the
swap-in channel cannot be banked for a later stage.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

from .profiler import DelayEstimate, DeviceProfile, estimate_delays
from .registry import MB, LayerSequence, ModelInfoTable, block_ranges, check_points

DEFAULT_DELTA = 0.05
DEFAULT_PARALLELISM = 2
MAX_EXHAUSTIVE_BLOCKS = 5


class PartitionError(Exception):
    pass


class NoFeasiblePartition(PartitionError):
    pass


class CapabilityError(PartitionError):
    pass


@dataclass(frozen=True)
class PartitionScheme:
    model: str
    points: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.points) + 1


@dataclass(frozen=True)
class PipelinePrediction:
    delays: tuple[DelayEstimate, ...]
    overhangs: tuple[float, ...]
    total: float

    @property
    def lower_bound(self) -> float:
        return pipeline_lower_bound(self.delays)


def block_count(s: int, b: int, m: int = DEFAULT_PARALLELISM) -> int:
    if s <= 0 or b <= 0 or m < 1:
        raise ValueError("need s > 0, b > 0, m >= 1")
    if isinstance(s, int) and isinstance(b, int):
        return max(1, -(-m * s // b))
    return max(1, math.ceil(m * s / b))


def plan_block_count(s: int, b: int, delta: float = DEFAULT_DELTA, m: int = DEFAULT_PARALLELISM) -> int:
    """Block count used for planning: 1 when the whole model already fits."""
    if s <= b * (1 - delta):
        return 1
    return block_count(s, b, m)


def pipeline_lower_bound(delays: Sequence[DelayEstimate]) -> float:
    total = delays[0].t_in
    for d in delays:
        total += d.t_ex
    return total + delays[-1].t_out


def _overhang_total(t_in: Sequence[float], t_ex: Sequence[float], t_out: Sequence[float]):
    n = len(t_in)
    overhangs = []
    total = t_in[0]
    carry = 0.0
    for i in range(n):
        nxt = t_in[i + 1] if i + 1 < n else 0.0
        if i == 0:
            ov = max(nxt - t_ex[0], 0.0) if n > 1 else 0.0
        else:
            ov = (t_out[i - 1] + nxt) - (t_ex[i] + carry)
        overhangs.append(ov)
        carry = max(ov, 0.0)
        total += t_ex[i]
        total += carry
    return overhangs, total + t_out[-1]


def predict_pipeline_latency(delays: Sequence[DelayEstimate]) -> PipelinePrediction:
    if not delays:
        raise ValueError("no blocks to predict")
    overhangs, total = _overhang_total(
        [d.t_in for d in delays], [d.t_ex for d in delays], [d.t_out for d in delays]
    )
    return PipelinePrediction(tuple(delays), tuple(overhangs), total)


def _window_peak(sizes: Sequence[int], m: int) -> int:
    w = min(m, len(sizes))
    return max(sum(sizes[i : i + w]) for i in range(len(sizes) - w + 1))


def scheme_peak_memory(
    table: ModelInfoTable, scheme: PartitionScheme | Sequence[int], m: int = DEFAULT_PARALLELISM
) -> int:
    """Largest footprint of m consecutive blocks (adjacent pairs for m=2)."""
    points = scheme.points if isinstance(scheme, PartitionScheme) else tuple(scheme)
    check_points(table, points)
    sizes = [
        sum(l.size for l in table.layers[a:b]) for a, b in block_ranges(len(table), points)
    ]
    return _window_peak(sizes, m)


def scheme_delays(
    table: ModelInfoTable, points: Sequence[int], profile: DeviceProfile
) -> list[DelayEstimate]:
    out = []
    for a, b in block_ranges(len(table), points):
        layers = table.layers[a:b]
        out.append(
            estimate_delays(
                profile,
                sum(l.size for l in layers),
                sum(l.depth for l in layers),
                sum(l.flops for l in layers),
            )
        )
    return out


@dataclass(frozen=True)
class LookupRow:
    points: tuple[int, ...]
    peak: int
    latency: float
    feasible: bool

    @property
    def peak_memory(self) -> int | None:
        return self.peak if self.feasible else None

    @property
    def predicted_latency(self) -> float | None:
        return self.latency if self.feasible else None


@dataclass
class LookupTable:
    model: str
    n: int
    budget: int
    delta: float
    rows: list[LookupRow] = field(default_factory=list)
    m: int = DEFAULT_PARALLELISM

    @property
    def limit(self) -> float:
        return self.budget * (1 - self.delta)

    def feasible_rows(self) -> list[LookupRow]:
        return [r for r in self.rows if r.feasible]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["points", "peak_memory_mb", "predicted_latency_ms"])
        for r in self.rows:
            if r.feasible:
                writer.writerow(
                    [",".join(map(str, r.points)), f"{r.peak / MB:.3f}", f"{r.latency * 1e3:.3f}"]
                )
            else:
                writer.writerow([",".join(map(str, r.points)), "exceed", "null"])
        return buf.getvalue()


@dataclass
class CandidateSet:
    """Budget-independent scores of every feasible n-block scheme."""

    model: str
    n: int
    m: int
    points: list[tuple[int, ...]]
    peaks: list[int]
    latencies: list[float]

    def prune(self, budget: int, delta: float) -> LookupTable:
        limit = budget * (1 - delta)
        rows = [
            LookupRow(p, peak, lat, peak <= limit)
            for p, peak, lat in zip(self.points, self.peaks, self.latencies)
        ]
        return LookupTable(self.model, self.n, budget, delta, rows, self.m)


def enumerate_candidates(
    table: ModelInfoTable,
    profile: DeviceProfile,
    n: int,
    m: int = DEFAULT_PARALLELISM,
    allow_large: bool = False,
) -> CandidateSet:
    if n < 1:
        raise ValueError("block count must be >= 1")
    if n > MAX_EXHAUSTIVE_BLOCKS and not allow_large:
        raise CapabilityError(
            f"exhaustive enumeration supports n <= {MAX_EXHAUSTIVE_BLOCKS}, got n={n}"
        )
    cuts = table.feasible_cuts()
    if n - 1 > len(cuts):
        raise NoFeasiblePartition(
            f"model {table.name!r} has {len(cuts)} feasible cut points, cannot form {n} blocks"
        )
    L = len(table)
    size_ps = list(itertools.accumulate((l.size for l in table.layers), initial=0))
    depth_ps = list(itertools.accumulate((l.depth for l in table.layers), initial=0))
    flops_ps = list(itertools.accumulate((l.flops for l in table.layers), initial=0))

    all_points, peaks, lats = [], [], []
    for points in itertools.combinations(cuts, n - 1):
        bounds = (0, *points, L)
        sizes, t_in, t_ex, t_out = [], [], [], []
        for a, b in zip(bounds[:-1], bounds[1:]):
            s = size_ps[b] - size_ps[a]
            d = depth_ps[b] - depth_ps[a]
            est = estimate_delays(profile, s, d, flops_ps[b] - flops_ps[a])
            sizes.append(s)
            t_in.append(est.t_in)
            t_ex.append(est.t_ex)
            t_out.append(est.t_out)
        all_points.append(points)
        peaks.append(_window_peak(sizes, m))
        lats.append(_overhang_total(t_in, t_ex, t_out)[1])
    return CandidateSet(table.name, n, m, all_points, peaks, lats)


def build_lookup_table(
    table: ModelInfoTable,
    profile: DeviceProfile,
    n: int,
    b: int,
    delta: float = DEFAULT_DELTA,
    m: int = DEFAULT_PARALLELISM,
    allow_large: bool = False,
) -> LookupTable:
    """Score every feasible n-block scheme; over-budget rows become exceed/null."""
    return enumerate_candidates(table, profile, n, m, allow_large).prune(b, delta)


def _row_key(row: LookupRow):
    return (row.latency, row.peak, row.points)


def select_best(table: LookupTable) -> PartitionScheme:
    if not table.rows:
        raise ValueError("empty lookup table")
    feasible = table.feasible_rows()
    if not feasible:
        raise NoFeasiblePartition(
            f"model {table.model!r}: no {table.n}-block scheme fits "
            f"{table.budget / MB:.2f} MB with delta={table.delta}"
        )
    return PartitionScheme(table.model, min(feasible, key=_row_key).points)


@dataclass
class Adaptation:
    scheme: PartitionScheme
    n: int
    table: LookupTable
    rows_evaluated: int


class CandidateCache:
    """Per-(n, profile, m) candidate sets, computed once and re-pruned."""

    def __init__(self):
        self._sets: dict[tuple, CandidateSet] = {}
        self.builds = 0

    def get(self, table, profile, n, m, allow_large=False) -> CandidateSet:
        key = (table.name, n, profile, m)
        cs = self._sets.get(key)
        if cs is None:
            cs = enumerate_candidates(table, profile, n, m, allow_large)
            self._sets[key] = cs
            self.builds += 1
        return cs


def adapt_partition_detail(
    layers: LayerSequence,
    profile: DeviceProfile,
    new_b: int,
    delta: float = DEFAULT_DELTA,
    m: int = DEFAULT_PARALLELISM,
    cache: CandidateCache | None = None,
) -> Adaptation:
    table = layers.table
    n = plan_block_count(table.total_size, new_b, delta, m)
    if cache is None:
        cache = CandidateCache()
    cs = cache.get(table, profile, n, m)
    lookup = cs.prune(new_b, delta)
    return Adaptation(select_best(lookup), n, lookup, len(lookup.rows))


def adapt_partition(
    layers: LayerSequence,
    profile: DeviceProfile,
    new_b: int,
    delta: float = DEFAULT_DELTA,
    m: int = DEFAULT_PARALLELISM,
    cache: CandidateCache | None = None,
) -> tuple[PartitionScheme, int]:
    """Re-plan from already-extracted layers; no payload access, no re-extraction."""
    a = adapt_partition_detail(layers, profile, new_b, delta, m, cache)
    return a.scheme, a.n


def plan_model(
    table: ModelInfoTable,
    profile: DeviceProfile,
    b: int,
    delta: float = DEFAULT_DELTA,
    m: int = DEFAULT_PARALLELISM,
) -> tuple[PartitionScheme, LookupTable]:
    n = plan_block_count(table.total_size, b, delta, m)
    lookup = build_lookup_table(table, profile, n, b, delta, m)
    return select_best(lookup), lookup
