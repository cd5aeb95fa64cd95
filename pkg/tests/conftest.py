import pytest

from blockswap import registry
from blockswap.toy import write_toy_model

_acceptance: list[tuple[str, str, float]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if item.get_closest_marker("acceptance") is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        label = item.get_closest_marker("acceptance").args[0]
        _acceptance.append((label, rep.outcome.upper(), rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome, dur in _acceptance:
        verdict = "PASS" if outcome == "PASSED" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {label}  ({dur:.2f} s)")


@pytest.fixture
def toy_dir(tmp_path):
    return write_toy_model(tmp_path / "toy", seed=7, n_layers=16, width=8)


@pytest.fixture
def toy_model(toy_dir):
    table = registry.load_model_table(toy_dir / "table.csv", name="toy")
    params = registry.read_parameter_index(toy_dir / "params.swpb")
    return table, params
