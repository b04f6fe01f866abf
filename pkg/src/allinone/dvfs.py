"""Frequency levels, an affine latency model and latency-variance analysis.

Latency of a model with ``m`` M-MACs at clock ``f`` MHz is modelled as
``t0 + kappa * m / f`` milliseconds.
"""
import csv
import json
import math
import statistics
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import ArityError, CalibrationError, ConfigError, RangeError, StateError


@dataclass(frozen=True)
class FrequencyLevel:
    clock_mhz: float
    voltage: tuple = None       # carried as metadata only


@dataclass
class FrequencyProfile:
    levels: list
    t0: float = None
    kappa: float = None

    def __post_init__(self):
        clocks = [lv.clock_mhz for lv in self.levels]
        if any(b <= a for a, b in zip(clocks, clocks[1:])):
            raise ConfigError(f"clock levels must be strictly ascending: {clocks}")

    @property
    def clocks(self):
        return [lv.clock_mhz for lv in self.levels]

    @property
    def calibrated(self):
        return self.t0 is not None and self.kappa is not None

    def latency(self, mmacs, clock):
        """Modelled latency in ms for ``mmacs`` million MACs at ``clock`` MHz."""
        if not self.calibrated:
            raise StateError("latency model is not calibrated")
        return self.t0 + self.kappa * mmacs / clock

    def with_model(self, t0, kappa):
        return replace(self, t0=t0, kappa=kappa)


def default_levels():
    raw = json.loads(resources.files("allinone.fixtures").joinpath("frequency_levels.json").read_text("utf-8"))
    return [FrequencyLevel(lv["clock_mhz"], tuple(lv["voltage_v"])) for lv in raw["levels"]]


def default_profile():
    return FrequencyProfile(default_levels())


def calibrate(observations, profile=None):
    """Least-squares fit of ``(t0, kappa)`` from ``(mmacs, clock_mhz, ms)`` triples."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != 3 or len(obs) < 2:
        raise CalibrationError("need at least two (mmacs, clock, ms) observations")
    a = np.column_stack([np.ones(len(obs)), obs[:, 0] / obs[:, 1]])
    if np.linalg.matrix_rank(a) < 2:
        raise CalibrationError("observations do not determine both parameters (singular system)")
    (t0, kappa), *_ = np.linalg.lstsq(a, obs[:, 2], rcond=None)
    profile = profile or default_profile()
    return profile.with_model(float(t0), float(kappa))


def residuals(profile, observations):
    return [ms - profile.latency(m, f) for m, f, ms in observations]


def sample_variance(values):
    """Sample variance with the n-1 denominator."""
    values = list(values)
    if len(values) < 2:
        raise ArityError(f"need at least two values, got {len(values)}")
    return statistics.variance(values)


def reduction_rate(baseline_variance, policy_variance):
    if policy_variance == 0:
        return math.inf
    return baseline_variance / policy_variance


def format_rate(rate):
    """Integer multiples from 100 up, one decimal below."""
    if math.isinf(rate):
        return "inf"
    if rate >= 100:
        return f"{math.floor(rate + 0.5)}x"
    return f"{rate:.1f}x"


# policies and simulation -----------------------------------------------------

@dataclass
class SwitchPolicy:
    """Which model (in M-MACs) runs at each clock level.

    A single fixed model maps every clock to the same MACs. All-in-One maps
    lower clocks to sparser switches, so MACs never increase as the clock
    drops.
    """

    name: str
    mapping: dict                 # clock_mhz -> mmacs

    def __post_init__(self):
        clocks = sorted(self.mapping)
        macs = [self.mapping[c] for c in clocks]
        if any(b < a for a, b in zip(macs, macs[1:])):
            raise ConfigError(f"policy {self.name!r}: MACs must not increase as the clock drops")

    @classmethod
    def fixed(cls, mmacs, clocks, name=None):
        return cls(name or f"single {mmacs:g}M", {c: mmacs for c in clocks})

    @classmethod
    def all_in_one(cls, switch_mmacs, clocks, name="all-in-one"):
        """Pair the densest switch with the highest clock, the sparsest with the lowest."""
        if len(switch_mmacs) != len(clocks):
            raise ConfigError("need one switch per clock level")
        dense_first = sorted(switch_mmacs, reverse=True)
        high_first = sorted(clocks, reverse=True)
        return cls(name, dict(zip(high_first, dense_first)))

    def mmacs(self, clock):
        if clock not in self.mapping:
            raise RangeError(f"policy {self.name!r} has no model for {clock} MHz")
        return self.mapping[clock]


@dataclass
class LatencyTable:
    policy: str
    events: list = field(default_factory=list)       # (timestamp_ms, clock_mhz, mmacs, latency_ms)

    @property
    def latencies(self):
        return [e[3] for e in self.events]

    @property
    def variance(self):
        return sample_variance(self.latencies) if len(self.events) > 1 else 0.0

    def per_clock(self):
        out = {}
        for _, clock, _, ms in self.events:
            out.setdefault(clock, ms)
        return out


def simulate(policy, profile, trace, backend="model", measured=None, reference_clock=None):
    """Latency of every trace event under ``policy``.

    ``backend="model"`` uses the calibrated affine model. ``backend="measured"``
    takes ``measured[mmacs]`` (ms at ``reference_clock``) and scales it by the
    clock ratio.
    """
    table = LatencyTable(policy.name)
    clocks = set(profile.clocks)
    for ts, clock in trace:
        if clock not in clocks:
            raise RangeError(f"trace clock {clock} MHz is not a level of the profile")
        m = policy.mmacs(clock)
        if backend == "model":
            ms = profile.latency(m, clock)
        elif backend == "measured":
            if measured is None or m not in measured or reference_clock is None:
                raise ConfigError("measured backend needs timings for every model and a reference clock")
            ms = measured[m] * reference_clock / clock
        else:
            raise ConfigError(f"unknown latency backend {backend!r}")
        table.events.append((ts, clock, m, ms))
    return table


def sweep_trace(clocks, period_ms=1000.0):
    """One event per clock level."""
    return [(i * period_ms, c) for i, c in enumerate(clocks)]


def battery_trace(clocks, events_per_level=10, period_ms=1000.0):
    """Highest clock first, stepping down as the battery drains."""
    trace = []
    for c in sorted(clocks, reverse=True):
        for _ in range(events_per_level):
            trace.append((len(trace) * period_ms, c))
    return trace


def uniform_trace(clocks, length, seed=0, period_ms=1000.0):
    rng = np.random.default_rng(seed)
    picks = rng.choice(np.asarray(clocks), size=length)
    return [(i * period_ms, float(c) if not float(c).is_integer() else int(c)) for i, c in enumerate(picks)]


def read_trace(path):
    """Parse ``timestamp_ms,clock_mhz`` lines; blank lines and ``#`` comments are skipped."""
    trace = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 'timestamp_ms,clock_mhz'")
            try:
                ts, clock = float(parts[0]), float(parts[1])
            except ValueError:
                if lineno == 1:
                    continue                            # header row
                raise ConfigError(f"{path}:{lineno}: non-numeric field") from None
            trace.append((ts, int(clock) if clock.is_integer() else clock))
    return trace


def write_trace(trace, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("timestamp_ms,clock_mhz\n")
        for ts, clock in trace:
            fh.write(f"{ts:g},{clock:g}\n")


# bundled latency tables ------------------------------------------------------

def latency_tables():
    """Bundled measured latency rows (two and three frequency levels)."""
    return json.loads(resources.files("allinone.fixtures").joinpath("latency_tables.json").read_text("utf-8"))


def analyze_table(table):
    """Recompute variance and reduction rate for every row of a latency table.

    Rates compare each single model with the All-in-One row of the same
    scheme, using the variances as printed (two decimals).
    """
    rows = []
    aio = {r["scheme"]: r["variance"] for r in table["rows"] if r["method"] == "all-in-one"}
    for r in table["rows"]:
        var = sample_variance(r["latency_ms"])
        rate = None
        if r["method"] == "single":
            rate = reduction_rate(r["variance"], aio[r["scheme"]])
        elif r["method"] == "all-in-one":
            rate = 1.0
        rows.append(dict(r, computed_variance=var, computed_rate=rate))
    return rows


def table_csv_rows(table):
    clocks = table["clocks_mhz"]
    out = []
    for r in analyze_table(table):
        row = {"method": r["method"], "scheme": r["scheme"] or "",
               "mmacs": "/".join(f"{m:g}" for m in r["mmacs"])}
        for c, ms in zip(clocks, r["latency_ms"]):
            row[f"latency_{c}mhz"] = ms
        row["variance"] = round(r["computed_variance"], 4)
        row["reduction_rate"] = "" if r["computed_rate"] is None else format_rate(r["computed_rate"])
        out.append(row)
    return out


def write_csv(rows, path):
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def policy_comparison(profile, switch_mmacs, clocks, dense_mmacs=None):
    """Modelled variance of All-in-One against every fixed single model on a sweep trace."""
    trace = sweep_trace(clocks)
    policies = [SwitchPolicy.all_in_one(switch_mmacs, clocks)]
    singles = sorted(set(switch_mmacs) | ({dense_mmacs} if dense_mmacs else set()), reverse=True)
    policies += [SwitchPolicy.fixed(m, clocks) for m in singles]
    return {p.name: simulate(p, profile, trace) for p in policies}
