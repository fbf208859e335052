"""Synthetic cities with planted temporal profiles and a linear indicator.

Each region is a mixture of a few named activity profiles (weekly templates
of hourly inbound/outbound trip counts), and the planted indicator is linear
in the mixture weights. A probe that recovers the mixture structure from the
series therefore has a known ceiling, which makes end-to-end recovery tests
meaningful at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..ingest import INBOUND, OUTBOUND, MobilitySeries
from ..probe import TargetTable

WEEK_HOURS = 168
WEEKDAYS = (0, 1, 2, 3, 4)
WEEKEND = (5, 6)


@dataclass(frozen=True)
class CityProfile:
    """One activity archetype: weekly inbound/outbound templates (trips/hour)."""

    name: str
    inbound_template: np.ndarray
    outbound_template: np.ndarray

    def __post_init__(self):
        for arr in (self.inbound_template, self.outbound_template):
            if arr.shape != (WEEK_HOURS,):
                raise ValueError("templates must cover one week of hours")
            if np.any(arr < 0):
                raise ValueError("templates must be non-negative")


def _daily_curve(bumps: list[tuple[float, float, float]], base: float) -> np.ndarray:
    hours = np.arange(24, dtype=np.float64)
    curve = np.full(24, base, dtype=np.float64)
    for center, width, height in bumps:
        curve += height * np.exp(-0.5 * ((hours - center) / width) ** 2)
    return curve


def _weekly(weekday: np.ndarray, weekend: np.ndarray, volume: float = 1.0) -> np.ndarray:
    days = [weekday if d in WEEKDAYS else weekend for d in range(7)]
    return np.rint(volume * np.concatenate(days)).clip(min=0)


def default_profiles() -> tuple[CityProfile, ...]:
    """Residential, commercial, and entertainment archetypes.

    Residential regions empty out in the morning and fill in the evening;
    commercial regions do the opposite; entertainment regions peak on
    weekend evenings. Trip volumes deliberately span an order of magnitude
    (quiet neighborhoods vs a nightlife hub), which is what makes per-region
    normalization shape-dominated and the recovery task non-trivial for a
    purely linear readout of the raw series. Templates are integer-valued so
    that noise-free generation reproduces them exactly.
    """
    residential = CityProfile(
        name="residential",
        outbound_template=_weekly(
            _daily_curve([(8.0, 1.5, 40.0), (19.0, 3.0, 8.0)], base=3.0),
            _daily_curve([(13.0, 4.0, 12.0)], base=3.0),
            volume=0.3,
        ),
        inbound_template=_weekly(
            _daily_curve([(18.0, 2.0, 36.0), (7.0, 2.0, 6.0)], base=3.0),
            _daily_curve([(13.0, 4.0, 12.0)], base=3.0),
            volume=0.3,
        ),
    )
    commercial = CityProfile(
        name="commercial",
        inbound_template=_weekly(
            _daily_curve([(9.0, 1.5, 45.0), (13.0, 3.0, 10.0)], base=2.0),
            _daily_curve([(13.0, 3.0, 6.0)], base=1.0),
        ),
        outbound_template=_weekly(
            _daily_curve([(18.0, 1.5, 42.0), (13.0, 3.0, 8.0)], base=2.0),
            _daily_curve([(13.0, 3.0, 6.0)], base=1.0),
        ),
    )
    entertainment = CityProfile(
        name="entertainment",
        inbound_template=_weekly(
            _daily_curve([(20.0, 2.0, 12.0)], base=2.0),
            _daily_curve([(21.0, 3.0, 45.0), (14.0, 3.0, 15.0)], base=4.0),
            volume=4.0,
        ),
        outbound_template=_weekly(
            _daily_curve([(22.5, 2.0, 10.0)], base=2.0),
            _daily_curve([(23.0, 2.5, 40.0), (15.0, 3.0, 10.0)], base=4.0),
            volume=4.0,
        ),
    )
    return (residential, commercial, entertainment)


@dataclass
class SynthCity:
    """Generated city: series, mixture weights, and the planted indicator."""

    name: str
    series: MobilitySeries
    weights: np.ndarray          # (N, K) rows on the simplex
    beta: np.ndarray             # (K,) indicator coefficients
    indicator: np.ndarray        # (N,) y = weights @ beta + noise
    seed: int
    profile_names: tuple[str, ...]

    def target_table(self, name: str = "indicator") -> TargetTable:
        return TargetTable(
            region_ids=self.series.region_ids,
            values=self.indicator.copy(),
            name=name,
        )


def _tile_to(template: np.ndarray, horizon: int) -> np.ndarray:
    reps = int(np.ceil(horizon / template.shape[0]))
    return np.tile(template, reps)[:horizon]


def gen_city(
    n_regions: int,
    horizon: int = 336,
    noise_level: float = 1.0,
    seed: int = 0,
    profiles: tuple[CityProfile, ...] | None = None,
    weights: np.ndarray | None = None,
    name: str = "synth",
) -> SynthCity:
    """Generate a synthetic city, fully determined by the seed.

    Counts are mixture-of-template means perturbed by truncated-at-zero
    Gaussian noise with a Poisson-like scale (std proportional to
    sqrt(mean + 1)); the indicator adds Gaussian noise at 0.1 * noise_level
    of the signal's spread.
    """
    if n_regions < 8:
        raise ValueError("need at least 8 regions")
    if horizon < 24 or horizon % 24 != 0:
        raise ValueError("horizon must be a positive multiple of 24 hours")
    if not 0.0 <= noise_level:
        raise ValueError("noise_level must be non-negative")
    profiles = tuple(profiles) if profiles is not None else default_profiles()
    k = len(profiles)
    rng = np.random.default_rng(seed)

    if weights is None:
        weights = rng.dirichlet(np.full(k, 0.4), size=n_regions)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n_regions, k):
            raise ValueError(f"weights must be ({n_regions}, {k})")
        if np.any(weights < 0) or not np.allclose(weights.sum(axis=1), 1.0):
            raise ValueError("weight rows must lie on the simplex")

    beta = rng.normal(0.0, 1.0, size=k)

    inbound = np.stack([_tile_to(p.inbound_template, horizon) for p in profiles])
    outbound = np.stack([_tile_to(p.outbound_template, horizon) for p in profiles])
    base = np.zeros((n_regions, horizon, 2))
    base[:, :, INBOUND] = weights @ inbound
    base[:, :, OUTBOUND] = weights @ outbound

    noise = rng.normal(size=base.shape) * noise_level * np.sqrt(base + 1.0)
    counts = np.rint(np.clip(base + noise, 0.0, None)).astype(np.int64)

    signal = weights @ beta
    spread = signal.std()
    indicator_noise = rng.normal(size=n_regions) * 0.1 * noise_level * (spread if spread > 0 else 1.0)
    indicator = signal + indicator_noise

    region_ids = tuple(f"{name}-{i:03d}" for i in range(n_regions))
    series = MobilitySeries(counts=counts, region_ids=region_ids, time_origin=0.0)
    return SynthCity(
        name=name,
        series=series,
        weights=weights,
        beta=beta,
        indicator=indicator,
        seed=seed,
        profile_names=tuple(p.name for p in profiles),
    )


def export_city(city: SynthCity, out_dir: str | Path, config_hash: str = "") -> dict[str, str]:
    """Write the city in the standard pipeline formats; returns the paths."""
    from ..ingest import save_series
    from ..probe import write_targets_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series_path = out / f"{city.name}_series.npz"
    target_path = out / f"{city.name}_indicator.csv"
    weights_path = out / f"{city.name}_truth.npz"
    save_series(series_path, city.series, config_hash=config_hash)
    write_targets_csv(target_path, city.target_table())
    np.savez(weights_path, weights=city.weights, beta=city.beta,
             indicator=city.indicator, seed=np.int64(city.seed),
             profile_names=np.array(city.profile_names, dtype=np.str_))
    return {
        "series": str(series_path),
        "indicator": str(target_path),
        "truth": str(weights_path),
    }
