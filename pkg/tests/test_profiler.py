import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockswap.profiler import (
    ClampWarning,
    DeviceProfile,
    FitError,
    ProfileSample,
    block_metrics,
    estimate_delays,
    fit_profile,
    fit_profile_report,
    load_samples,
    save_samples,
    synthesize_samples,
)
from blockswap.registry import MB, LayerRecord, ModelInfoTable, Opaque, load_model_table

TRUE = DeviceProfile(alpha=2e-9, beta=5e-5, gamma=1e-10, eta=1e-5)


def rel(a, b):
    return abs(a - b) / abs(b)


def test_noiseless_exact_recovery():
    fit = fit_profile(synthesize_samples(TRUE, 300, noise=0.0, seed=1))
    for name in ("alpha", "beta", "gamma", "eta"):
        assert rel(getattr(fit, name), getattr(TRUE, name)) < 1e-12


def test_execution_closed_form():
    samples = [
        ProfileSample("input", s=100, d=1, observed=1.0),
        ProfileSample("input", s=10, d=5, observed=1.0),
        ProfileSample("execution", f=10**9, observed=0.1),
        ProfileSample("execution", f=2 * 10**9, observed=0.2),
        ProfileSample("output", d=1, observed=0.1),
    ]
    # sum(f*t)/sum(f^2) = (1e8 + 4e8) / 5e18
    assert fit_profile(samples).gamma == pytest.approx(1e-10, rel=1e-15)


def test_all_zero_samples_rank_deficient():
    samples = [ProfileSample("input", observed=0.0)] * 3 + [
        ProfileSample("execution", observed=0.0),
        ProfileSample("output", observed=0.0),
    ]
    with pytest.raises(FitError):
        fit_profile(samples)


def test_collinear_inputs_rank_deficient():
    samples = [ProfileSample("input", s=100 * k, d=2 * k, observed=k * 1.0) for k in range(1, 5)]
    samples += [ProfileSample("execution", f=1, observed=1.0), ProfileSample("output", d=1, observed=1.0)]
    with pytest.raises(FitError, match="rank"):
        fit_profile(samples)


def test_too_few_samples():
    with pytest.raises(FitError):
        fit_profile([ProfileSample("input", s=1, d=1, observed=1.0)])


def test_negative_coefficient_clamped_with_warning():
    # t_in decreases with d at fixed s -> negative beta
    samples = [
        ProfileSample("input", s=1000, d=1, observed=1.0),
        ProfileSample("input", s=1000, d=10, observed=0.5),
        ProfileSample("input", s=2000, d=1, observed=2.0),
        ProfileSample("execution", f=1, observed=1.0),
        ProfileSample("output", d=1, observed=1.0),
    ]
    with pytest.warns(ClampWarning):
        rep = fit_profile_report(samples)
    assert rep.profile.beta == 0.0
    assert rep.clamped == ["beta"]


def test_noisy_recovery_within_5_percent():
    fit = fit_profile(synthesize_samples(TRUE, 1000, noise=0.01, seed=42))
    for name in ("alpha", "beta", "gamma", "eta"):
        assert rel(getattr(fit, name), getattr(TRUE, name)) < 0.05, name


def test_sample_csv_round_trip(tmp_path):
    samples = synthesize_samples(TRUE, 30, noise=0.01, seed=3)
    save_samples(samples, tmp_path / "s.csv")
    assert load_samples(tmp_path / "s.csv") == samples


def test_sample_kind_fields_validated():
    with pytest.raises(ValueError):
        ProfileSample("execution", s=5, f=1, observed=1.0)
    with pytest.raises(ValueError):
        ProfileSample("output", d=1, observed=-1.0)


# --- block metrics ----------------------------------------------------------


def sized_table(sizes_mb):
    return ModelInfoTable(
        "t", tuple(LayerRecord(i, Opaque(), int(s * MB), 1, 10) for i, s in enumerate(sizes_mb))
    )


def test_block_metrics_sum():
    t = sized_table([1, 2, 3])
    assert block_metrics(t, 0, 2)[0] == 3 * 2**20
    assert block_metrics(t, 0, 3)[0] == t.total_size


def test_block_metrics_empty_range():
    with pytest.raises(ValueError):
        block_metrics(sized_table([1, 2]), 1, 1)


def test_block_metrics_table2_rows(tmp_path):
    p = tmp_path / "t2.csv"
    p.write_text(
        "layer_index,kind,size,depth,flops,skip_from\n"
        "0,opaque,0.38 MB,1,26.2 M,\n"
        "1,opaque,1.49 MB,5,0.8 K,\n"
        "2,opaque,1.12 MB,1,123.9 M,\n"
        "3,opaque,5.93MB,5,4.2 K,\n"
    )
    s, d, f = block_metrics(load_model_table(p), 0, 3)
    assert abs(s - (0.38 + 1.49 + 1.12) * 2**20) < 1.5  # per-row byte rounding
    assert d == 7
    assert f == 26_200_000 + 800 + 123_900_000


# --- delay estimates --------------------------------------------------------


def test_estimate_substitution():
    prof = DeviceProfile(alpha=1e-3 / MB, beta=0.05e-3, gamma=0.0, eta=0.0)
    est = estimate_delays(prof, 100 * MB, 10, 0)
    assert est.t_in == pytest.approx(100.5e-3, rel=1e-12)


def test_estimate_zero():
    est = estimate_delays(TRUE, 0, 0, 0)
    assert (est.t_in, est.t_ex, est.t_out) == (0.0, 0.0, 0.0)


def test_assembly_cost_per_reference():
    prof = DeviceProfile(alpha=0.0, beta=52e-6, gamma=0.0, eta=0.0)
    assert estimate_delays(prof, 0, 5, 0).t_in == pytest.approx(260e-6, rel=1e-12)


nonneg = st.floats(0, 1e9, allow_nan=False)


@given(nonneg, nonneg, nonneg, st.floats(0, 1e3))
@settings(max_examples=100)
def test_homogeneity(s, d, f, k):
    a = estimate_delays(TRUE, k * s, k * d, k * f)
    b = estimate_delays(TRUE, s, d, f)
    assert a.t_in == pytest.approx(k * b.t_in, rel=1e-9, abs=1e-300)
    assert a.t_ex == pytest.approx(k * b.t_ex, rel=1e-9, abs=1e-300)
    assert a.t_out == pytest.approx(k * b.t_out, rel=1e-9, abs=1e-300)


@given(st.lists(st.integers(0, 10**8), min_size=3, max_size=12), st.data())
@settings(max_examples=60)
def test_additivity_over_split(sizes, data):
    t = ModelInfoTable(
        "t", tuple(LayerRecord(i, Opaque(), s // 4 * 4, i % 4, s) for i, s in enumerate(sizes))
    )
    cut = data.draw(st.integers(1, len(sizes) - 1))
    whole = estimate_delays(TRUE, *block_metrics(t, 0, len(t)))
    left = estimate_delays(TRUE, *block_metrics(t, 0, cut))
    right = estimate_delays(TRUE, *block_metrics(t, cut, len(t)))
    assert whole.t_in == pytest.approx(left.t_in + right.t_in, rel=1e-12)
    assert whole.t_ex == pytest.approx(left.t_ex + right.t_ex, rel=1e-12)
    assert whole.t_out == pytest.approx(left.t_out + right.t_out, rel=1e-12)
