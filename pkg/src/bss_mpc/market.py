"""Hourly electricity prices and swap-demand series: CSV ingestion, synthesis,
and horizon windowing.

Prices live in $/MWh in files and are converted once to $/kWh at load so the
reward arithmetic (pack kW x hours) never mixes units. Demand series are
integer swap counts per hour, capped by the station slot count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Malformed CSV row; the message names the offending line."""


class GapError(ValueError):
    """Hour indices are not consecutive from the first row."""


class OutOfRange(IndexError):
    """A window extends past the end of a series."""


@dataclass(frozen=True)
class PriceSeries:
    """Hourly prices in $/kWh, hour-aligned starting at t0."""

    rho: np.ndarray
    t0: int = 0

    def __len__(self):
        return self.rho.shape[0]


@dataclass(frozen=True)
class DemandSeries:
    """Hourly swap counts (non-negative ints, at most the slot count)."""

    S: np.ndarray
    t0: int = 0

    def __len__(self):
        return self.S.shape[0]


@dataclass(frozen=True)
class ScenarioConfig:
    days: int
    seed: int
    slots: int = 21
    # demand shape: mean swaps per hour by regime
    day_level: float = 3.2
    night_level: float = 0.35
    day_start: int = 8
    day_end: int = 20
    # price shape ($/MWh)
    price_base: float = 38.0
    price_amplitude: float = 22.0
    price_peak_hour: float = 17.0
    price_noise: float = 3.0
    spike_prob: float = 0.02
    spike_magnitude: float = 4.0

    def __post_init__(self):
        if self.days < 1 or self.slots < 1:
            raise ValueError("days and slots must be positive")
        if not 0 <= self.day_start < self.day_end <= 24:
            raise ValueError("daytime window must satisfy 0 <= start < end <= 24")


def load_price_csv(path: str | Path) -> PriceSeries:
    hours, vals = _read_two_column(path, "hour", "price_usd_per_mwh", float)
    return PriceSeries(rho=np.asarray(vals) / 1000.0, t0=hours[0] if hours else 0)


def load_demand_csv(path: str | Path, slots: int = 21) -> DemandSeries:
    def parse_count(text: str) -> int:
        v = float(text)
        if v != int(v):
            raise ValueError("swap count must be an integer")
        return int(v)

    hours, vals = _read_two_column(path, "hour", "swaps", parse_count)
    for line_no, v in enumerate(vals, start=2):
        if not 0 <= v <= slots:
            raise ParseError(f"{path}: line {line_no}: swaps={v} outside [0, {slots}]")
    return DemandSeries(S=np.asarray(vals, dtype=int), t0=hours[0] if hours else 0)


def _read_two_column(path, hour_col, value_col, convert):
    path = Path(path)
    hours, vals = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != [hour_col, value_col]:
            raise ParseError(
                f"{path}: expected header '{hour_col},{value_col}', got {reader.fieldnames}"
            )
        for line_no, row in enumerate(reader, start=2):
            try:
                h = int(row[hour_col])
                v = convert(row[value_col])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}: line {line_no}: {exc}") from exc
            if not math.isfinite(float(v)):
                raise ParseError(f"{path}: line {line_no}: non-finite value")
            hours.append(h)
            vals.append(v)
    for k in range(1, len(hours)):
        if hours[k] != hours[0] + k:
            raise GapError(f"{path}: missing hour {hours[0] + k} (found {hours[k]})")
    return hours, vals


def write_price_csv(series: PriceSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hour", "price_usd_per_mwh"])
        for k, rho in enumerate(series.rho):
            w.writerow([series.t0 + k, repr(float(rho) * 1000.0)])


def write_demand_csv(series: DemandSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hour", "swaps"])
        for k, s in enumerate(series.S):
            w.writerow([series.t0 + k, int(s)])


def synth_generate(cfg: ScenarioConfig) -> tuple[PriceSeries, DemandSeries]:
    """Deterministic synthetic scenario.

    Demand: Poisson counts around a day/night level profile, higher during
    the configured daytime hours, clamped to the slot count. Prices: diurnal
    shape peaking in the late afternoon, small noise, plus rare multiplicative
    spikes.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.days * 24
    hours = np.arange(n) % 24

    lam = np.where(
        (hours >= cfg.day_start) & (hours < cfg.day_end), cfg.day_level, cfg.night_level
    )
    demand = np.minimum(rng.poisson(lam), cfg.slots).astype(int)

    shape = np.cos((hours - cfg.price_peak_hour) / 24.0 * 2.0 * np.pi)
    rho = cfg.price_base + cfg.price_amplitude * shape
    rho = rho + rng.normal(0.0, cfg.price_noise, size=n)
    spikes = rng.uniform(size=n) < cfg.spike_prob
    rho = np.where(spikes, rho * cfg.spike_magnitude, rho)
    rho = np.maximum(rho, 1.0)  # day-ahead floors: keep prices positive
    return PriceSeries(rho=rho / 1000.0), DemandSeries(S=demand)


def window(values: np.ndarray, t: int, n: int) -> np.ndarray:
    """Entries t .. t+n-1 of an hourly array (series-local indexing)."""
    if t < 0 or n < 0 or t + n > values.shape[0]:
        raise OutOfRange(f"window [{t}, {t + n}) outside series of length {values.shape[0]}")
    return values[t : t + n]
