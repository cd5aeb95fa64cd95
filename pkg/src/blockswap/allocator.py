"""Split one memory budget across several models.

When every model fits, each gets its full demand. Otherwise a (1 - 1/n)
share of the budget is handed out in proportion to demand and the
remaining 1/n in proportion to the performance score
``u * latency / memory``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .registry import MB


class AllocationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BudgetRequest:
    model: str
    demand: int  # bytes
    baseline_latency: float  # seconds, un-swapped
    baseline_memory: int  # bytes
    urgency: float = 1.0

    def __post_init__(self):
        if self.demand <= 0 or self.baseline_latency <= 0 or self.baseline_memory <= 0:
            raise ValueError(f"{self.model}: demand, latency and memory must be positive")
        if self.urgency <= 0:
            raise ValueError(f"{self.model}: urgency must be positive")


@dataclass
class Allocation:
    budgets: dict[str, int]
    total: int
    oversubscribed: bool
    warnings: list[str] = field(default_factory=list)

    def __getitem__(self, model: str) -> int:
        return self.budgets[model]


def performance_score(req: BudgetRequest) -> float:
    """u * latency / memory, with memory in MB (so the unit is s/MB)."""
    return req.urgency * req.baseline_latency / (req.baseline_memory / MB)


def _eq1_shares(requests: Sequence[BudgetRequest], total: float) -> list[float]:
    n = len(requests)
    demand = sum(r.demand for r in requests)
    scores = [performance_score(r) for r in requests]
    ps_sum = sum(scores)
    return [
        r.demand / demand * (1 - 1 / n) * total + ps / ps_sum * (1 / n) * total
        for r, ps in zip(requests, scores)
    ]


def _round_to_total(models: Sequence[BudgetRequest], shares: Sequence[float], total: int) -> dict[str, int]:
    budgets = {r.model: int(s) for r, s in zip(models, shares)}
    residual = total - sum(budgets.values())
    if models:
        biggest = max(models, key=lambda r: r.demand).model
        budgets[biggest] += residual
    return budgets


def allocate_budgets(
    requests: Sequence[BudgetRequest],
    total: int,
    min_budget_floor: int | Mapping[str, int] | None = None,
) -> Allocation:
    if not requests:
        raise ValueError("no budget requests")
    if total <= 0:
        raise ValueError("total budget must be positive")
    names = [r.model for r in requests]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate model names in {names}")

    if sum(r.demand for r in requests) <= total:
        return Allocation({r.model: r.demand for r in requests}, total, False)

    if min_budget_floor is None:
        floors = {}
    elif isinstance(min_budget_floor, Mapping):
        floors = dict(min_budget_floor)
    else:
        floors = {r.model: int(min_budget_floor) for r in requests}
    if sum(floors.values()) > total:
        raise ValueError(
            f"budget floors sum to {sum(floors.values())} bytes, above the total {total}"
        )

    # pin models that fall below their floor, redistribute the rest, repeat
    pinned: dict[str, int] = {}
    while True:
        free = [r for r in requests if r.model not in pinned]
        remaining = total - sum(pinned.values())
        shares = _eq1_shares(free, remaining) if free else []
        low = [
            r.model for r, s in zip(free, shares) if s < floors.get(r.model, 0)
        ]
        if not low:
            break
        for m in low:
            pinned[m] = floors[m]

    budgets = _round_to_total(free, shares, remaining) if free else {}
    budgets.update(pinned)
    if not free:
        # every model pinned; hand leftover bytes to the largest demand
        biggest = max(requests, key=lambda r: r.demand).model
        budgets[biggest] += total - sum(budgets.values())
    alloc = Allocation({m: budgets[m] for m in names}, total, True)
    for r in requests:
        if alloc.budgets[r.model] > r.demand:
            msg = f"{r.model}: allocated {alloc.budgets[r.model]} bytes exceeds demand {r.demand}"
            alloc.warnings.append(msg)
            warnings.warn(msg, AllocationWarning, stacklevel=2)
    return alloc


def load_requests(path: str | Path) -> list[BudgetRequest]:
    out = []
    with open(path, newline="") as f:
        for row_no, row in enumerate(csv.DictReader(f), start=2):
            try:
                out.append(
                    BudgetRequest(
                        model=row["model"].strip(),
                        demand=int(round(float(row["demand_mb"]) * MB)),
                        baseline_latency=float(row["latency_s"]),
                        baseline_memory=int(round(float(row["memory_mb"]) * MB)),
                        urgency=float(row["urgency"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: malformed request row {row_no}: {exc}") from exc
    return out


def allocation_csv(alloc: Allocation) -> str:
    lines = ["model,budget_mb"]
    for model, b in alloc.budgets.items():
        lines.append(f"{model},{b / MB:.6f}")
    return "\n".join(lines) + "\n"
