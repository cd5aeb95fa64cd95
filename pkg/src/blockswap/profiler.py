"""Linear delay models for swap-in, execution and swap-out, and their fitting.

    t_in  = alpha * s + beta * d     (read bytes, then bind d references)
    t_ex  = gamma * f
    t_out = eta * d                  (reset d references, free the buffer)

There are no intercepts. A fixed per-block cost (e.g. allocator release
latency) has to be folded into eta through the samples.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .registry import ModelInfoTable

SAMPLE_HEADER = ["kind", "s_bytes", "d_entries", "flops", "observed_seconds"]
SAMPLE_KINDS = ("input", "execution", "output")


class FitError(ValueError):
    pass


class ClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    alpha: float  # s / byte
    beta: float  # s / parameter entry (assembly)
    gamma: float  # s / FLOP
    eta: float  # s / parameter entry (release)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "eta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def scaled(self, k: float) -> "DeviceProfile":
        return DeviceProfile(self.alpha * k, self.beta * k, self.gamma * k, self.eta * k)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DeviceProfile":
        d = json.loads(text)
        d = d.get("profile", d)
        return cls(d["alpha"], d["beta"], d["gamma"], d["eta"])

    @classmethod
    def load(cls, path: str | Path) -> "DeviceProfile":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class ProfileSample:
    kind: str
    s: int = 0
    d: int = 0
    f: int = 0
    observed: float = 0.0

    def __post_init__(self):
        if self.kind not in SAMPLE_KINDS:
            raise ValueError(f"unknown sample kind {self.kind!r}")
        if self.observed < 0:
            raise ValueError("observed delay must be >= 0")
        irrelevant = {
            "input": self.f,
            "execution": self.s or self.d,
            "output": self.s or self.f,
        }[self.kind]
        if irrelevant:
            raise ValueError(f"{self.kind} sample has nonzero fields it does not use")


@dataclass(frozen=True)
class DelayEstimate:
    t_in: float
    t_ex: float
    t_out: float


@dataclass
class ProfileFit:
    profile: DeviceProfile
    residuals: dict[str, float]  # RMS residual per delay component
    clamped: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"profile": asdict(self.profile), "residuals": self.residuals, "clamped": self.clamped},
            sort_keys=True,
            indent=1,
        ) + "\n"


def _rms(r: np.ndarray) -> float:
    return float(np.sqrt(np.mean(r**2))) if r.size else 0.0


def fit_profile_report(samples: Iterable[ProfileSample]) -> ProfileFit:
    samples = list(samples)
    by_kind = {k: [s for s in samples if s.kind == k] for k in SAMPLE_KINDS}
    if len(by_kind["input"]) < 2 or not by_kind["execution"] or not by_kind["output"]:
        raise FitError("need >= 2 input, >= 1 execution and >= 1 output samples")

    inp = by_kind["input"]
    X = np.array([[s.s, s.d] for s in inp], dtype=float)
    y = np.array([s.observed for s in inp])
    # column scaling keeps the rank test meaningful when bytes dwarf entry counts
    scale = np.abs(X).max(axis=0)
    if np.any(scale == 0) or np.linalg.matrix_rank(X / scale) < 2:
        raise FitError("input samples are rank deficient in (s, d)")
    coef, *_ = np.linalg.lstsq(X / scale, y, rcond=None)
    alpha, beta = coef / scale

    def through_origin(xs: np.ndarray, ys: np.ndarray, what: str) -> float:
        denom = float(xs @ xs)
        if denom == 0:
            raise FitError(f"{what} samples are all zero")
        return float(xs @ ys) / denom

    ex = by_kind["execution"]
    fx = np.array([s.f for s in ex], dtype=float)
    fy = np.array([s.observed for s in ex])
    gamma = through_origin(fx, fy, "execution")

    out = by_kind["output"]
    ox = np.array([s.d for s in out], dtype=float)
    oy = np.array([s.observed for s in out])
    eta = through_origin(ox, oy, "output")

    raw = {"alpha": float(alpha), "beta": float(beta), "gamma": gamma, "eta": eta}
    clamped = [k for k, v in raw.items() if v < 0]
    if clamped:
        warnings.warn(f"negative coefficients clamped to 0: {clamped}", ClampWarning, stacklevel=3)
    profile = DeviceProfile(**{k: max(v, 0.0) for k, v in raw.items()})
    residuals = {
        "input": _rms(y - X @ np.array([profile.alpha, profile.beta])),
        "execution": _rms(fy - profile.gamma * fx),
        "output": _rms(oy - profile.eta * ox),
    }
    return ProfileFit(profile, residuals, clamped)


def fit_profile(samples: Iterable[ProfileSample]) -> DeviceProfile:
    """Least-squares fit of the four coefficients; negatives clamp to 0."""
    return fit_profile_report(samples).profile


def load_samples(path: str | Path) -> list[ProfileSample]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row_no, row in enumerate(reader, start=2):
            try:
                out.append(
                    ProfileSample(
                        row["kind"].strip(),
                        int(float(row["s_bytes"] or 0)),
                        int(float(row["d_entries"] or 0)),
                        int(float(row["flops"] or 0)),
                        float(row["observed_seconds"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: malformed sample row {row_no}: {exc}") from exc
    return out


def save_samples(samples: Sequence[ProfileSample], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SAMPLE_HEADER)
        for s in samples:
            writer.writerow([s.kind, s.s, s.d, s.f, repr(s.observed)])


def block_metrics(table: ModelInfoTable, start: int, end: int) -> tuple[int, int, int]:
    """Exact (bytes, entries, FLOPs) over layers [start, end)."""
    if not 0 <= start < end <= len(table):
        raise ValueError(f"bad layer range [{start}, {end}) for {len(table)} layers")
    layers = table.layers[start:end]
    return (
        sum(l.size for l in layers),
        sum(l.depth for l in layers),
        sum(l.flops for l in layers),
    )


def estimate_delays(profile: DeviceProfile, s: float, d: float, f: float) -> DelayEstimate:
    return DelayEstimate(
        t_in=profile.alpha * s + profile.beta * d,
        t_ex=profile.gamma * f,
        t_out=profile.eta * d,
    )


def synthesize_samples(
    profile: DeviceProfile,
    n: int = 1000,
    noise: float = 0.0,
    seed: int = 0,
) -> list[ProfileSample]:
    """Generate samples from a known profile with multiplicative noise.

    Input samples draw s and d so both terms of t_in are of similar weight.
    """
    rng = np.random.default_rng(seed)
    s_max = 256 << 20
    if profile.alpha > 0 and profile.beta > 0:
        s_max = int(min(max(profile.beta * 400 / profile.alpha, 1 << 17), 1 << 34))
    n_in = n - 2 * (n // 3)
    out = []
    for i in range(n):
        kind = "input" if i < n_in else ("execution" if i < n_in + n // 3 else "output")
        eps = 1.0 + noise * rng.standard_normal() if noise else 1.0
        if kind == "input":
            s = int(rng.integers(1 << 16, s_max))
            d = int(rng.integers(1, 400))
            t = profile.alpha * s + profile.beta * d
            out.append(ProfileSample(kind, s=s, d=d, observed=max(t * eps, 0.0)))
        elif kind == "execution":
            f = int(rng.integers(10**6, 10**10))
            out.append(ProfileSample(kind, f=f, observed=max(profile.gamma * f * eps, 0.0)))
        else:
            d = int(rng.integers(1, 400))
            out.append(ProfileSample(kind, d=d, observed=max(profile.eta * d * eps, 0.0)))
    return out
