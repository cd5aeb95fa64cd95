import json
import struct
from collections import Counter

import pytest

from blockswap.cli import EXIT_INFEASIBLE, EXIT_OK, main
from blockswap.registry import MB, load_model_table


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def toy(tmp_path):
    d = tmp_path / "toy"
    assert run("gen-toy", "--out", d, "--seed", 5, "--layers", 14) == EXIT_OK
    return d


def model_bytes(d):
    return load_model_table(d / "table.csv").total_size


def write_workload(path, total_mb, models, **extra):
    path.write_text(json.dumps({"total_mb": total_mb, "models": models, **extra}))
    return path


# ---- register --------------------------------------------------------------


def test_register_creates_skeleton_idempotently(toy):
    assert run("register", "--model", toy) == EXIT_OK
    first = (toy / "skeleton.json").read_bytes()
    assert (toy / "layers.json").exists()
    assert run("register", "--model", toy) == EXIT_OK
    assert (toy / "skeleton.json").read_bytes() == first


def test_register_corrupt_header_names_offset(toy, capsys):
    raw = bytearray((toy / "params.swpb").read_bytes())
    struct.pack_into("<I", raw, 8, 10**6)  # entry count far beyond the header
    (toy / "params.swpb").write_bytes(bytes(raw))
    assert run("register", "--model", toy) != EXIT_OK
    err = capsys.readouterr().err
    assert "offset" in err and "params.swpb" in err


def test_register_missing_table(tmp_path, capsys):
    assert run("register", "--model", tmp_path) != EXIT_OK
    assert "table.csv" in capsys.readouterr().err


# ---- plan ------------------------------------------------------------------


def test_plan_undersubscribed_single_block(tmp_path):
    dirs = []
    for i in range(2):
        d = tmp_path / f"m{i}"
        run("gen-toy", "--out", d, "--seed", i)
        dirs.append(d)
    total = sum(model_bytes(d) for d in dirs) * 3 / MB
    wl = write_workload(tmp_path / "wl.json", total, [{"name": d.name, "dir": d.name} for d in dirs])
    assert run("plan", "--workload", wl, "--out", tmp_path / "plan.json") == EXIT_OK
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert not plan["oversubscribed"]
    assert [m["n"] for m in plan["models"]] == [1, 1]
    assert (tmp_path / "lookup_m0.csv").exists()


def test_plan_uav_shaped_three_blocks(tmp_path):
    d = tmp_path / "resnet101"
    assert run("gen-toy", "--resnet101", "--out", d) == EXIT_OK
    wl = write_workload(tmp_path / "uav.json", 136, [{"name": "resnet101", "dir": "resnet101"}])
    assert run("plan", "--workload", wl, "--out", tmp_path / "plan.json") == EXIT_OK
    plan = json.loads((tmp_path / "plan.json").read_text())
    (m,) = plan["models"]
    assert m["budget"] == 136 * MB
    assert m["n"] == 3
    assert m["peak_memory"] <= 136 * MB * 0.95


def test_plan_symmetric_two_models(tmp_path):
    for name in ("a", "b"):
        run("gen-toy", "--out", tmp_path / name, "--seed", 9)
    size = model_bytes(tmp_path / "a")
    wl = write_workload(
        tmp_path / "wl.json", size * 1.5 / MB, [{"name": "a", "dir": "a"}, {"name": "b", "dir": "b"}]
    )
    assert run("plan", "--workload", wl, "--out", tmp_path / "plan.json") == EXIT_OK
    plan = json.loads((tmp_path / "plan.json").read_text())
    a, b = plan["models"]
    assert plan["oversubscribed"]
    assert a["budget"] == b["budget"]
    assert a["points"] == b["points"] and a["n"] == b["n"] >= 2


def test_plan_infeasible_lists_offender(tmp_path, capsys):
    d = tmp_path / "resnet101"
    run("gen-toy", "--resnet101", "--out", d)
    wl = write_workload(tmp_path / "wl.json", 60, [{"name": "resnet101", "dir": "resnet101"}])
    assert run("plan", "--workload", wl) == EXIT_INFEASIBLE
    assert "resnet101" in capsys.readouterr().err


def test_plan_missing_model_file(tmp_path, capsys):
    wl = write_workload(tmp_path / "wl.json", 10, [{"name": "ghost", "dir": "ghost"}])
    assert run("plan", "--workload", wl) != EXIT_OK
    assert "ghost" in capsys.readouterr().err


# ---- simulate / run / adapt --------------------------------------------------


@pytest.fixture
def toy_plan(tmp_path, toy):
    wl = write_workload(
        tmp_path / "wl.json", model_bytes(toy) * 0.9 / MB, [{"name": "toy", "dir": "toy"}]
    )
    assert run("plan", "--workload", wl, "--out", tmp_path / "plan.json") == EXIT_OK
    plan = tmp_path / "plan.json"
    assert json.loads(plan.read_text())["models"][0]["n"] >= 2
    return plan


def test_simulate_and_run_agree_structurally(tmp_path, toy_plan):
    assert run("simulate", "--plan", toy_plan, "--out", tmp_path / "sim") == EXIT_OK
    assert run("run", "--plan", toy_plan, "--out", tmp_path / "run.json", "--timeline", tmp_path / "run.csv") == EXIT_OK
    sim_rows = (tmp_path / "sim" / "timeline.csv").read_text().splitlines()[1:]
    run_rows = (tmp_path / "run.csv").read_text().splitlines()[1:]
    sim = Counter(r.split(",")[2] for r in sim_rows)
    got = Counter(r.split(",")[2] for r in run_rows)
    n = json.loads(toy_plan.read_text())["models"][0]["n"]
    assert sim == Counter({"swap_in": n, "execute": n, "swap_out": n})
    # the runtime additionally reports assembly as its own span
    assert got == Counter({"swap_in": n, "assemble": n, "execute": n, "swap_out": n})
    assert {r.split(",")[1] for r in sim_rows} == {r.split(",")[1] for r in run_rows}
    summary = json.loads((tmp_path / "sim" / "summary.json").read_text())
    assert summary["models"]["toy"]["blocks"] == n


def test_resimulating_plan_is_byte_identical(tmp_path, toy_plan):
    run("simulate", "--plan", toy_plan, "--out", tmp_path / "s1")
    run("simulate", "--plan", toy_plan, "--out", tmp_path / "s2")
    for f in ("timeline.csv", "summary.json"):
        assert (tmp_path / "s1" / f).read_bytes() == (tmp_path / "s2" / f).read_bytes()


def test_run_monolithic_digest_matches(tmp_path, toy):
    size = model_bytes(toy)
    assert run("run", "--model", toy, "--monolithic", "--out", tmp_path / "mono.json") == EXIT_OK
    assert run("partition", "--model", toy, "--budget-mb", size * 2 / MB) == EXIT_OK
    cuts = load_model_table(toy / "table.csv").feasible_cuts()
    pts = f"{cuts[len(cuts) // 2]}"
    assert run("run", "--model", toy, "--points", pts, "--budget-mb", size * 2 / MB, "--out", tmp_path / "sw.json") == EXIT_OK
    mono = json.loads((tmp_path / "mono.json").read_text())
    sw = json.loads((tmp_path / "sw.json").read_text())
    assert mono["digest"] == sw["digest"]
    assert sw["counters"]["allocations"] == 2 and sw["counters"]["staging_copies"] == 0


def test_run_over_budget_exit_code(tmp_path, toy, capsys):
    size = model_bytes(toy)
    assert run("run", "--model", toy, "--budget-mb", size * 0.5 / MB) == EXIT_INFEASIBLE
    assert "budget" in capsys.readouterr().err


def test_adapt_constant_trace_has_no_records(tmp_path):
    d = tmp_path / "resnet101"
    run("gen-toy", "--resnet101", "--out", d)
    assert run("adapt", "--model", d, "--trace", "0:136", "--out", tmp_path / "a.json") == EXIT_OK
    res = json.loads((tmp_path / "a.json").read_text())
    assert res["adaptations"] == []
    assert len(res["initial_points"]) == 2


def test_adapt_budget_drops(tmp_path):
    d = tmp_path / "resnet101"
    run("gen-toy", "--resnet101", "--out", d)
    assert run("adapt", "--model", d, "--trace", "0:136,1:120,2:102", "--out", tmp_path / "a.json") == EXIT_OK
    res = json.loads((tmp_path / "a.json").read_text())
    assert [r["new_n"] for r in res["adaptations"]] == [3, 4]


def test_profile_synthesize_and_fit(tmp_path, toy):
    samples = tmp_path / "s.csv"
    assert run("profile", "--samples", samples, "--synthesize", 200, "--out", tmp_path / "p.json") == EXIT_OK
    fit = json.loads((tmp_path / "p.json").read_text())
    assert set(fit["profile"]) == {"alpha", "beta", "gamma", "eta"}
    # the fit report is itself a usable --profile file
    assert run("partition", "--model", toy, "--budget-mb", 1, "--profile", tmp_path / "p.json") == EXIT_OK


def test_allocate_csv(tmp_path):
    req = tmp_path / "r.csv"
    req.write_text("model,demand_mb,latency_s,memory_mb,urgency\na,300,1,300,1\nb,100,1,100,1\n")
    assert run("allocate", "--total-mb", 200, "--requests", req, "--out", tmp_path / "a.csv") == EXIT_OK
    text = (tmp_path / "a.csv").read_text()
    assert text.startswith("model")
    assert len(text.splitlines()) == 3
