import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockswap.allocator import (
    AllocationWarning,
    BudgetRequest,
    allocate_budgets,
    allocation_csv,
    load_requests,
    performance_score,
)
from blockswap.registry import MB


def req(name, demand_mb, latency=1.0, memory_mb=None, u=1.0):
    return BudgetRequest(name, int(demand_mb * MB), latency, int((memory_mb or demand_mb) * MB), u)


def req_ps(name, demand_mb, ps):
    # PS = u * latency / memory_MB, with latency 1 s and memory 1 MB -> PS = u
    return BudgetRequest(name, int(demand_mb * MB), 1.0, MB, ps)


def test_performance_score_substitution():
    assert performance_score(req("a", 100, latency=0.5)) == pytest.approx(0.005)


def test_performance_score_linear_in_urgency():
    assert performance_score(req("a", 100, 0.5, u=2.0)) == 2 * performance_score(req("a", 100, 0.5))


def test_performance_score_symmetry():
    assert performance_score(req("a", 100, 0.5)) == performance_score(req("b", 100, 0.5))


def test_single_model_gets_everything():
    alloc = allocate_budgets([req("a", 600)], 400 * MB)
    assert alloc["a"] == 400 * MB


def test_symmetric_pair():
    alloc = allocate_budgets([req("a", 800), req("b", 800)], 1000 * MB)
    assert alloc["a"] == alloc["b"] == 500 * MB


def test_worked_example():
    # first term 75/25 MB, second 25/75 MB
    alloc = allocate_budgets([req_ps("a", 300, 1.0), req_ps("b", 100, 3.0)], 200 * MB)
    assert alloc["a"] == 100 * MB
    assert alloc["b"] == 100 * MB


def test_undersubscribed_gets_demand():
    alloc = allocate_budgets([req("a", 100), req("b", 50)], 400 * MB)
    assert alloc.budgets == {"a": 100 * MB, "b": 50 * MB}
    assert not alloc.oversubscribed


def test_empty_requests():
    with pytest.raises(ValueError):
        allocate_budgets([], 100)


def test_over_demand_warns():
    with pytest.warns(AllocationWarning):
        alloc = allocate_budgets([req_ps("a", 10, 1000.0), req_ps("b", 1000, 0.001)], 500 * MB)
    assert alloc["a"] > 10 * MB
    assert alloc.warnings


def test_min_budget_floor():
    reqs = [req_ps("a", 300, 1.0), req_ps("b", 100, 3.0), req_ps("c", 600, 0.1)]
    base = allocate_budgets(reqs, 300 * MB)
    floor = {"b": base["b"] + 20 * MB}
    # the floor pushes b past its 100 MB demand, which is reported
    with pytest.warns(AllocationWarning, match="exceeds demand"):
        alloc = allocate_budgets(reqs, 300 * MB, min_budget_floor=floor)
    assert alloc["b"] == floor["b"]
    assert sum(alloc.budgets.values()) == 300 * MB
    with pytest.raises(ValueError):
        allocate_budgets(reqs, 300 * MB, min_budget_floor=200 * MB)


def test_requests_csv(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("model,demand_mb,latency_s,memory_mb,urgency\nresnet,170,0.45,170,1\nyolo,236,0.6,236,2\n")
    reqs = load_requests(p)
    alloc = allocate_budgets(reqs, 300 * MB)
    text = allocation_csv(alloc)
    assert text.splitlines()[0] == "model,budget_mb"
    assert len(text.splitlines()) == 3


request_lists = st.lists(
    st.tuples(st.integers(1, 2000), st.floats(0.01, 10), st.floats(0.1, 10)),
    min_size=1,
    max_size=6,
)


def build(specs):
    return [
        BudgetRequest(f"m{i}", d * MB, lat, d * MB, u) for i, (d, lat, u) in enumerate(specs)
    ]


@pytest.mark.filterwarnings("ignore::blockswap.allocator.AllocationWarning")
@given(request_lists, st.integers(1, 4000))
@settings(max_examples=150)
def test_conservation_and_nonnegativity(specs, total_mb):
    reqs = build(specs)
    alloc = allocate_budgets(reqs, total_mb * MB)
    demand = sum(r.demand for r in reqs)
    if demand > total_mb * MB:
        assert abs(sum(alloc.budgets.values()) - total_mb * MB) <= 1
    else:
        assert sum(alloc.budgets.values()) == demand
    assert all(v >= 0 for v in alloc.budgets.values())


@pytest.mark.filterwarnings("ignore::blockswap.allocator.AllocationWarning")
@given(request_lists.filter(lambda s: len(s) >= 2), st.integers(1, 4000), st.floats(1.01, 50))
@settings(max_examples=150)
def test_monotone_in_own_score(specs, total_mb, factor):
    reqs = build(specs)
    before = allocate_budgets(reqs, total_mb * MB)
    r0 = reqs[0]
    bumped = [BudgetRequest(r0.model, r0.demand, r0.baseline_latency, r0.baseline_memory, r0.urgency * factor)] + reqs[1:]
    after = allocate_budgets(bumped, total_mb * MB)
    assert after["m0"] >= before["m0"]


@pytest.mark.filterwarnings("ignore::blockswap.allocator.AllocationWarning")
@given(request_lists, st.integers(1, 4000), st.sampled_from([0.5, 2.0, 4.0, 8.0]))
@settings(max_examples=150)
def test_common_score_scaling_invariant(specs, total_mb, k):
    reqs = build(specs)
    scaled = [BudgetRequest(r.model, r.demand, r.baseline_latency, r.baseline_memory, r.urgency * k) for r in reqs]
    assert allocate_budgets(reqs, total_mb * MB).budgets == allocate_budgets(scaled, total_mb * MB).budgets
