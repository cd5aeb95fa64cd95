"""Command-line entry point.

A model directory holds ``table.csv`` (info table), optionally
``params.swpb`` (parameter file) and ``input.npy``. ``register`` adds
``skeleton.json`` and ``layers.json`` next to them.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import allocator, partitioner, profiler, registry, runtime, simulator, toy
from .partitioner import PartitionError
from .profiler import DelayEstimate, DeviceProfile
from .registry import MB, RegistryError

log = logging.getLogger("blockswap")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 3
EXIT_CONTRACT = 4


class CLIError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _mb(x: float) -> int:
    return int(round(x * MB))


def _load_table(model_dir: Path) -> registry.ModelInfoTable:
    path = model_dir / "table.csv"
    if not path.exists():
        raise CLIError(f"{path}: model info table not found")
    return registry.load_model_table(path, name=model_dir.name)


def _load_params(model_dir: Path) -> registry.ParameterFile:
    path = model_dir / "params.swpb"
    if not path.exists():
        raise CLIError(f"{path}: parameter file not found")
    return registry.read_parameter_index(path)


def _load_profile(path: str | None) -> DeviceProfile:
    if not path:
        return toy.EDGE_PROFILE
    try:
        return DeviceProfile.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CLIError(f"{path}: cannot read device profile: {exc}") from exc


def _input_for(model_dir: Path, skeleton: registry.Skeleton, seed: int) -> np.ndarray:
    path = model_dir / "input.npy"
    if path.exists():
        return np.load(path).astype("<f4")
    first = next((l.kind for l in skeleton.layers if isinstance(l.kind, registry.Dense)), None)
    if first is None:
        raise CLIError(f"{model_dir}: no input.npy and no dense layer to infer input width")
    return np.random.default_rng(seed).standard_normal(first.in_dim).astype("<f4")


# ---------------------------------------------------------------------------
# register / gen-toy / profile / allocate
# ---------------------------------------------------------------------------


def cmd_register(args) -> int:
    model_dir = Path(args.model)
    try:
        table = _load_table(model_dir)
        params = _load_params(model_dir)
        layers = registry.get_layers(table, params)
        skeleton = registry.extract_skeleton(table, params)
    except RegistryError as exc:
        raise CLIError(f"register {model_dir}: {exc}") from exc
    (model_dir / "skeleton.json").write_text(skeleton.serialize())
    cache = [
        {"index": l.record.index, "params": [l.params.start, l.params.stop]}
        for l in layers.layers
    ]
    (model_dir / "layers.json").write_text(_dump({"model": table.name, "layers": cache}))
    print(f"registered {table.name}: {len(table)} layers, {skeleton.slot_count} slots")
    return EXIT_OK


def cmd_gen_toy(args) -> int:
    out = Path(args.out)
    if args.resnet101:
        out.mkdir(parents=True, exist_ok=True)
        registry.save_model_table(toy.resnet101_table(seed=args.seed), out / "table.csv")
    else:
        toy.write_toy_model(out, args.seed, args.layers, args.width)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_profile(args) -> int:
    if args.synthesize:
        samples = profiler.synthesize_samples(toy.EDGE_PROFILE, args.synthesize, args.noise, args.seed)
        profiler.save_samples(samples, args.samples)
    samples = profiler.load_samples(args.samples)
    try:
        fit = profiler.fit_profile_report(samples)
    except profiler.FitError as exc:
        raise CLIError(f"{args.samples}: {exc}") from exc
    _write(fit.to_json(), args.out)
    return EXIT_OK


def cmd_allocate(args) -> int:
    requests = allocator.load_requests(args.requests)
    alloc = allocator.allocate_budgets(requests, _mb(args.total_mb))
    _write(allocator.allocation_csv(alloc), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# partition / plan
# ---------------------------------------------------------------------------


def cmd_partition(args) -> int:
    table = _load_table(Path(args.model))
    profile = _load_profile(args.profile)
    b = _mb(args.budget_mb)
    n = args.blocks or partitioner.plan_block_count(table.total_size, b, args.delta, args.parallelism)
    lookup = partitioner.build_lookup_table(table, profile, n, b, args.delta, args.parallelism)
    if args.out:
        _write(lookup.to_csv(), args.out)
    best = partitioner.select_best(lookup)
    print(f"{table.name}: n={n} points={','.join(map(str, best.points))}")
    return EXIT_OK


@dataclass
class ModelRef:
    name: str
    dir: Path
    urgency: float = 1.0


@dataclass
class WorkloadSpec:
    models: list[ModelRef]
    total: int
    delta: float
    m: int
    profile: str | None

    @classmethod
    def load(cls, path: str | Path) -> "WorkloadSpec":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise CLIError(f"{path}: cannot read workload: {exc}") from exc
        base = path.parent
        models = []
        for m in d["models"]:
            mdir = (base / m["dir"]).resolve()
            if not (mdir / "table.csv").exists():
                raise CLIError(f"{path}: model {m.get('name', m['dir'])}: {mdir / 'table.csv'} missing")
            models.append(ModelRef(m.get("name", mdir.name), mdir, float(m.get("urgency", 1.0))))
        if d["total_mb"] <= 0:
            raise CLIError(f"{path}: total_mb must be positive")
        prof = d.get("profile")
        if prof is not None:
            prof = str((base / prof).resolve())
        return cls(models, _mb(d["total_mb"]), float(d.get("delta", 0.05)), int(d.get("m", 2)), prof)


def _block_entries(table, points, profile) -> list[dict]:
    out = []
    for a, b in registry.block_ranges(len(table), points):
        s, d, f = profiler.block_metrics(table, a, b)
        est = profiler.estimate_delays(profile, s, d, f)
        out.append({"start": a, "end": b, "size": s, "depth": d, "flops": f, **asdict(est)})
    return out


def make_plan(spec: WorkloadSpec, out_dir: Path | None = None) -> dict:
    profile = _load_profile(spec.profile)
    tables = {ref.name: registry.load_model_table(ref.dir / "table.csv", name=ref.name) for ref in spec.models}
    requests = []
    for ref in spec.models:
        t = tables[ref.name]
        requests.append(
            allocator.BudgetRequest(
                ref.name,
                # ask for the reserve too, so a fully granted demand fits b*(1-delta)
                demand=math.ceil(t.total_size / (1 - spec.delta)),
                baseline_latency=max(profile.gamma * t.total_flops, 1e-12),
                baseline_memory=t.total_size,
                urgency=ref.urgency,
            )
        )
    alloc = allocator.allocate_budgets(requests, spec.total)
    entries = []
    offenders = []
    for ref in spec.models:
        table = tables[ref.name]
        b = alloc[ref.name]
        try:
            scheme, lookup = partitioner.plan_model(table, profile, b, spec.delta, spec.m)
        except PartitionError as exc:
            offenders.append(f"{ref.name} ({b / MB:.2f} MB): {exc}")
            continue
        lookup_file = None
        if out_dir is not None:
            lookup_file = f"lookup_{ref.name}.csv"
            (out_dir / lookup_file).write_text(lookup.to_csv())
        blocks = _block_entries(table, scheme.points, profile)
        delays = [DelayEstimate(e["t_in"], e["t_ex"], e["t_out"]) for e in blocks]
        entries.append(
            {
                "name": ref.name,
                "dir": str(ref.dir),
                "budget": b,
                "n": scheme.n,
                "points": list(scheme.points),
                "predicted_latency": partitioner.predict_pipeline_latency(delays).total,
                "peak_memory": partitioner.scheme_peak_memory(table, scheme, spec.m),
                "blocks": blocks,
                "lookup": lookup_file,
            }
        )
    if offenders:
        raise PartitionError("no feasible partition for: " + "; ".join(offenders))
    return {
        "delta": spec.delta,
        "m": spec.m,
        "total_budget": spec.total,
        "oversubscribed": alloc.oversubscribed,
        "profile": asdict(profile),
        "models": entries,
    }


def cmd_plan(args) -> int:
    spec = WorkloadSpec.load(args.workload)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
    plan = make_plan(spec, out.parent if out else None)
    _write(_dump(plan), args.out)
    return EXIT_OK


def _load_plan(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CLIError(f"{path}: cannot read plan: {exc}") from exc


# ---------------------------------------------------------------------------
# simulate / run / adapt
# ---------------------------------------------------------------------------


def simulate_plan(plan: dict) -> simulator.Timeline:
    configs = []
    for e in plan["models"]:
        delays = [DelayEstimate(b["t_in"], b["t_ex"], b["t_out"]) for b in e["blocks"]]
        sizes = [b["size"] for b in e["blocks"]]
        configs.append(simulator.SimConfig(e["name"], delays, sizes, e["budget"], plan["delta"], plan["m"]))
    return simulator.simulate_multi(configs)


def cmd_simulate(args) -> int:
    timeline = simulate_plan(_load_plan(args.plan))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "timeline.csv").write_text(timeline.to_csv())
        (out / "summary.json").write_text(timeline.summary_text())
    else:
        sys.stdout.write(timeline.summary_text())
    return EXIT_OK


def _run_one(model_dir: Path, points, budget, delta, m, monolithic, seed, profile=None):
    table = _load_table(model_dir)
    params = _load_params(model_dir)
    skeleton = registry.extract_skeleton(table, params)
    x = _input_for(model_dir, skeleton, seed)
    if monolithic:
        y = runtime.run_model_monolithic(skeleton, params, x)
        return {"model": table.name, "monolithic": True, "digest": runtime.digest(y)}, None
    report = runtime.run_model_swapped(
        skeleton, params, points, x, budget, delta, m, profile=profile, table=table
    )
    return report.to_dict(), report


def cmd_run(args) -> int:
    runs = []
    if args.plan:
        plan = _load_plan(args.plan)
        for e in plan["models"]:
            runs.append((Path(e["dir"]), e["points"], e["budget"], plan["delta"], plan["m"]))
    else:
        if not args.model or (args.budget_mb is None and not args.monolithic):
            raise CLIError("run needs --plan, or --model with --budget-mb (or --monolithic)")
        points = [int(p) for p in args.points.split(",") if p.strip()] if args.points else []
        budget = _mb(args.budget_mb) if args.budget_mb is not None else None
        runs.append((Path(args.model), points, budget, args.delta, args.parallelism))
    profile = _load_profile(args.profile) if args.profile else None
    reports = []
    timelines = []
    for model_dir, points, budget, delta, m in runs:
        d, report = _run_one(model_dir, points, budget, delta, m, args.monolithic, args.seed, profile)
        reports.append(d)
        if report is not None:
            timelines.append(report.timeline_csv())
    _write(_dump(reports if len(reports) > 1 else reports[0]), args.out)
    if args.timeline and timelines:
        header = timelines[0].splitlines()[0]
        body = [line for t in timelines for line in t.splitlines()[1:]]
        Path(args.timeline).write_text("\n".join([header, *body]) + "\n")
    return EXIT_OK


def _parse_trace(text: str) -> list[tuple[float, int]]:
    out = []
    for item in text.split(","):
        t, b = item.split(":")
        out.append((float(t), _mb(float(b))))
    return out


def cmd_adapt(args) -> int:
    if args.plan:
        plan = _load_plan(args.plan)
        model_dir = Path(plan["models"][0]["dir"])
        delta, m = plan["delta"], plan["m"]
        profile = DeviceProfile(**plan["profile"])
    else:
        model_dir = Path(args.model)
        delta, m = args.delta, args.parallelism
        profile = _load_profile(args.profile)
    table = _load_table(model_dir)
    params_path = model_dir / "params.swpb"
    params = registry.read_parameter_index(params_path) if params_path.exists() else toy.opaque_parameter_index(table)
    layers = registry.get_layers(table, params)
    run = simulator.simulate_adaptation(layers, profile, _parse_trace(args.trace), delta, m)
    records = [
        {
            "time_ms": r.time * 1e3,
            "budget_mb": r.budget / MB,
            "old_points": list(r.old_points) if r.old_points else None,
            "new_points": list(r.new_points) if r.new_points else None,
            "old_n": r.old_n,
            "new_n": r.new_n,
            "rows_evaluated": r.rows_evaluated,
            "error": r.error,
        }
        for r in run.records
    ]
    result = {
        "model": table.name,
        "initial_points": list(run.initial.points) if run.initial else None,
        "adaptations": records,
        "rounds": [{"start_ms": s * 1e3, "makespan_ms": mk * 1e3, "points": list(p)} for s, mk, p in run.rounds],
    }
    _write(_dump(result), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--budget-mb", type=float, default=None)
    common.add_argument("--delta", type=float, default=partitioner.DEFAULT_DELTA)
    common.add_argument("--parallelism", type=int, default=partitioner.DEFAULT_PARALLELISM)
    common.add_argument("--profile", default=None, help="device profile JSON")
    common.add_argument("--out", default=None)
    common.add_argument("--seed", type=int, default=0)

    p = argparse.ArgumentParser(prog="blockswap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("register", parents=[common], help="extract skeleton and layer cache")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("gen-toy", parents=[common], help="write a seeded random model")
    s.add_argument("--layers", type=int, default=16)
    s.add_argument("--width", type=int, default=8)
    s.add_argument("--resnet101", action="store_true", help="ResNet-101-shaped info table only")
    s.set_defaults(func=cmd_gen_toy)

    s = sub.add_parser("profile", parents=[common], help="fit delay coefficients from samples")
    s.add_argument("--samples", required=True)
    s.add_argument("--synthesize", type=int, default=0, metavar="N",
                   help="first write N synthetic samples to --samples")
    s.add_argument("--noise", type=float, default=0.0)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("allocate", parents=[common], help="split a budget across models")
    s.add_argument("--total-mb", type=float, required=True)
    s.add_argument("--requests", required=True)
    s.set_defaults(func=cmd_allocate)

    s = sub.add_parser("partition", parents=[common], help="build a lookup table for one model")
    s.add_argument("--model", required=True)
    s.add_argument("--blocks", type=int, default=None)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("plan", parents=[common], help="allocate and partition a workload")
    s.add_argument("--workload", required=True)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", parents=[common], help="simulate a plan")
    s.add_argument("--plan", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("run", parents=[common], help="execute a model under swapping")
    s.add_argument("--model")
    s.add_argument("--plan")
    s.add_argument("--points", default="")
    s.add_argument("--monolithic", action="store_true")
    s.add_argument("--timeline", default=None, help="per-phase CSV output")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("adapt", parents=[common], help="simulate re-partitioning under a budget trace")
    s.add_argument("--model")
    s.add_argument("--plan")
    s.add_argument("--trace", required=True, help="time_s:budget_mb,... e.g. 0:136,2:120,4:102")
    s.set_defaults(func=cmd_adapt)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (runtime.BudgetInfeasible, partitioner.NoFeasiblePartition) as exc:
        print(f"error: infeasible budget: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PartitionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE if "no feasible partition" in str(exc) else EXIT_ERROR
    except runtime.RuntimeContractError as exc:
        print(f"error: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (CLIError, RegistryError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
