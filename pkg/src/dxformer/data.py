"""SCADA ingestion, synthetic farms, filling, normalization, splitting and windowing.

Arrays follow one layout throughout: time first, then turbine, then channel.
Power is kept in kW on every object; normalized copies live alongside it so
window targets never pass through a normalize/denormalize round trip.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import ContractError, DataError

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86_400
DEFAULT_CADENCE_S = 600


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for long-format SCADA files (one row per turbine per timestamp).

    Either ``timestamp`` names a parseable date-time column, or ``day`` and
    ``time_of_day`` give a day counter plus ``HH:MM`` clock; the latter is
    anchored at ``epoch`` (the calendar date of day ``day_origin``).
    """

    turbine: str = "turbine"
    power: str = "power"
    exo: tuple[str, ...] = ("wind_speed", "temperature")
    timestamp: str | None = "timestamp"
    day: str | None = None
    time_of_day: str | None = None
    epoch: str = "2020-01-01"
    day_origin: int = 1
    missing_sentinel: str | None = None

    def __post_init__(self):
        if self.timestamp is None and (self.day is None or self.time_of_day is None):
            raise ContractError("schema needs a timestamp column or both day and time_of_day")


# Spatial Dynamic Wind Power Forecasting dataset layout: 13 columns, 9 exogenous.
SDWPF_SCHEMA = CsvSchema(
    turbine="TurbID",
    power="Patv",
    exo=("Wspd", "Wdir", "Etmp", "Itmp", "Ndir", "Pab1", "Pab2", "Pab3", "Prtv"),
    timestamp=None,
    day="Day",
    time_of_day="Tmstamp",
)


@dataclass(frozen=True)
class NormStats:
    """Training-split z-score statistics (population variance).

    Columns whose variance is zero get ``std = 1``; their names are listed in
    ``flagged``.
    """

    power_mean: float
    power_std: float
    exo_mean: np.ndarray
    exo_std: np.ndarray
    flagged: tuple[str, ...] = ()

    def normalize_power(self, kw):
        return (np.asarray(kw) - self.power_mean) / self.power_std

    def denormalize_power(self, z):
        return np.asarray(z) * self.power_std + self.power_mean

    def normalize_exo(self, x):
        return (np.asarray(x) - self.exo_mean) / self.exo_std

    def denormalize_exo(self, z):
        return np.asarray(z) * self.exo_std + self.exo_mean

    def to_dict(self) -> dict:
        return {
            "power_mean": float(self.power_mean),
            "power_std": float(self.power_std),
            "exo_mean": [float(v) for v in self.exo_mean],
            "exo_std": [float(v) for v in self.exo_std],
            "flagged": list(self.flagged),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            power_mean=float(d["power_mean"]),
            power_std=float(d["power_std"]),
            exo_mean=np.asarray(d["exo_mean"], dtype=np.float64),
            exo_std=np.asarray(d["exo_std"], dtype=np.float64),
            flagged=tuple(d.get("flagged", ())),
        )


@dataclass
class FarmSeries:
    """Aligned per-turbine series on one shared timestamp axis.

    ``missing_mask[..., 0]`` tracks power, ``missing_mask[..., 1:]`` the
    exogenous columns; missing cells hold NaN until :func:`fill_missing`.
    """

    turbine_ids: list[str]
    timestamps: np.ndarray  # datetime64[s], [T]
    power: np.ndarray  # [T, N] kW
    exo: np.ndarray  # [T, N, C]
    exo_names: tuple[str, ...]
    missing_mask: np.ndarray  # [T, N, C + 1]
    cadence_s: int = DEFAULT_CADENCE_S
    power_z: np.ndarray | None = None
    exo_z: np.ndarray | None = None
    stats: NormStats | None = None
    flags: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.power.shape[0]

    @property
    def N(self) -> int:
        return self.power.shape[1]

    @property
    def C(self) -> int:
        return self.exo.shape[2]

    def segment(self, lo: int, hi: int) -> "FarmSeries":
        def cut(a):
            return None if a is None else a[lo:hi]

        return replace(
            self,
            timestamps=self.timestamps[lo:hi],
            power=self.power[lo:hi],
            exo=self.exo[lo:hi],
            missing_mask=self.missing_mask[lo:hi],
            power_z=cut(self.power_z),
            exo_z=cut(self.exo_z),
            flags=dict(self.flags),
        )

    def to_frame(self) -> pd.DataFrame:
        """Long-format frame in the default :class:`CsvSchema` layout."""
        T, N, C = self.T, self.N, self.C
        frame = pd.DataFrame(
            {
                "turbine": np.tile(np.asarray(self.turbine_ids, dtype=object), T),
                "timestamp": np.repeat(pd.to_datetime(self.timestamps), N),
            }
        )
        for c, name in enumerate(self.exo_names):
            frame[name] = self.exo[:, :, c].reshape(T * N)
        frame["power"] = self.power.reshape(T * N)
        return frame


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def _timestamps_from_days(days, clock, epoch: str, day_origin: int) -> pd.DatetimeIndex:
    base = pd.Timestamp(epoch)
    offsets = pd.to_timedelta(np.asarray(days, dtype=np.int64) - day_origin, unit="D")
    clock = pd.to_timedelta(pd.Series(clock, dtype=str).str.strip().map(_clock_to_hms))
    return pd.DatetimeIndex(base + offsets + clock.to_numpy())


def _clock_to_hms(text: str) -> str:
    parts = text.split(":")
    if len(parts) == 2:
        return f"{parts[0]}:{parts[1]}:00"
    return text


def parse_csv(path, schema: CsvSchema = CsvSchema(), cadence_s: int = DEFAULT_CADENCE_S) -> FarmSeries:
    """Read a long-format SCADA CSV into a :class:`FarmSeries`.

    Turbines are indexed in order of first appearance. The time axis is the
    full regular grid between the first and last timestamp, so any timestamp
    a turbine lacks shows up as missing.
    """
    na_values = [schema.missing_sentinel] if schema.missing_sentinel is not None else None
    try:
        df = pd.read_csv(path, na_values=na_values, dtype={schema.turbine: str}, encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc

    needed = [schema.turbine, schema.power, *schema.exo]
    needed += [schema.timestamp] if schema.timestamp else [schema.day, schema.time_of_day]
    unknown = [c for c in needed if c not in df.columns]
    if unknown:
        raise DataError(f"columns not found in {path}: {', '.join(unknown)}")

    if schema.timestamp:
        stamps = pd.DatetimeIndex(pd.to_datetime(df[schema.timestamp]))
    else:
        stamps = _timestamps_from_days(df[schema.day], df[schema.time_of_day], schema.epoch, schema.day_origin)
    df = df.assign(_ts=stamps.values.astype("datetime64[s]"))

    dup = df.duplicated(subset=[schema.turbine, "_ts"], keep="last")
    if dup.any():
        warnings.warn(f"{int(dup.sum())} duplicate (turbine, timestamp) rows; keeping the last of each")
        df = df[~dup]

    turbines = list(pd.unique(df[schema.turbine]))
    ts = df["_ts"].to_numpy(dtype="datetime64[s]")
    t0, t1 = ts.min(), ts.max()
    step = np.timedelta64(cadence_s, "s")
    off_grid = (ts - t0) % step != np.timedelta64(0, "s")
    if off_grid.any():
        bad = df.loc[off_grid, "_ts"].iloc[0]
        raise DataError(f"timestamp {bad} is not on the {cadence_s}s grid starting at {t0}")
    grid = np.arange(t0, t1 + step, step).astype("datetime64[s]")

    T, N, C = len(grid), len(turbines), len(schema.exo)
    t_idx = ((ts - t0) // step).astype(np.int64)
    n_idx = pd.Categorical(df[schema.turbine], categories=turbines).codes.astype(np.int64)
    values = df[[schema.power, *schema.exo]].apply(pd.to_numeric, errors="coerce").to_numpy(np.float64)
    cube = np.full((T, N, C + 1), np.nan)
    cube[t_idx, n_idx] = values

    return FarmSeries(
        turbine_ids=[str(t) for t in turbines],
        timestamps=grid,
        power=cube[:, :, 0].copy(),
        exo=cube[:, :, 1:].copy(),
        exo_names=tuple(schema.exo),
        missing_mask=np.isnan(cube),
        cadence_s=cadence_s,
    )


def write_csv(fs: FarmSeries, path) -> None:
    """Write in the default schema; missing cells become empty fields."""
    fs.to_frame().to_csv(path, index=False, date_format="%Y-%m-%d %H:%M:%S", float_format="%.10g")


# ---------------------------------------------------------------------------
# cleaning and normalization
# ---------------------------------------------------------------------------


def fill_missing(fs: FarmSeries) -> FarmSeries:
    """Forward fill each turbine-column, then backward fill any leading gap."""
    T, N, C = fs.T, fs.N, fs.C
    cube = np.concatenate([fs.power[:, :, None], fs.exo], axis=2).reshape(T, N * (C + 1))
    empty = np.isnan(cube).all(axis=0)
    if empty.any():
        names = ("power",) + fs.exo_names
        where = [f"{fs.turbine_ids[j // (C + 1)]}/{names[j % (C + 1)]}" for j in np.flatnonzero(empty)]
        raise DataError(f"no observed values for turbine/column: {', '.join(where)}")
    filled = pd.DataFrame(cube).ffill().bfill().to_numpy().reshape(T, N, C + 1)
    return replace(
        fs,
        power=filled[:, :, 0].copy(),
        exo=filled[:, :, 1:].copy(),
        missing_mask=np.zeros_like(fs.missing_mask),
        flags={**fs.flags, "imputed_cells": int(fs.missing_mask.sum()) + fs.flags.get("imputed_cells", 0)},
    )


def split_7_2_1(fs: FarmSeries, lookback: int, horizon: int):
    """Chronological 70/20/10 split at ``floor(0.7 T)`` and ``floor(0.9 T)``."""
    T = fs.T
    a, b = 7 * T // 10, 9 * T // 10
    need = lookback + horizon
    for name, length in (("train", a), ("val", b - a), ("test", T - b)):
        if length < need:
            raise DataError(
                f"{name} split has {length} steps, fewer than lookback+horizon={need} (T={T})"
            )
    return fs.segment(0, a), fs.segment(a, b), fs.segment(b, T)


def fit_zscore(train: FarmSeries) -> NormStats:
    flagged = []
    power = train.power.reshape(-1)
    p_mean = float(np.nanmean(power))
    p_std = float(np.nanstd(power))
    if not p_std > 0:
        p_std = 1.0
        flagged.append("power")
    exo = train.exo.reshape(-1, train.C)
    e_mean = np.nanmean(exo, axis=0)
    e_std = np.nanstd(exo, axis=0)
    for c, name in enumerate(train.exo_names):
        if not e_std[c] > 0:
            e_std[c] = 1.0
            flagged.append(name)
    if flagged:
        logger.warning("zero-variance columns normalized with std=1: %s", ", ".join(flagged))
    return NormStats(p_mean, p_std, e_mean, e_std, tuple(flagged))


def apply_zscore(fs: FarmSeries, stats: NormStats) -> FarmSeries:
    if len(stats.exo_mean) != fs.C:
        raise DataError(f"stats cover {len(stats.exo_mean)} exogenous columns, series has {fs.C}")
    return replace(
        fs,
        power_z=stats.normalize_power(fs.power),
        exo_z=stats.normalize_exo(fs.exo),
        stats=stats,
    )


# ---------------------------------------------------------------------------
# calendar features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TemporalIndex:
    slot_of_day: np.ndarray
    month: np.ndarray
    day_of_year: np.ndarray

    def stack(self) -> np.ndarray:
        """``[T, 3]`` integer array in (slot, month, day-of-year) column order."""
        return np.stack([self.slot_of_day, self.month, self.day_of_year], axis=-1).astype(np.int64)


def temporal_indices(timestamps, cadence_s: int = DEFAULT_CADENCE_S) -> TemporalIndex:
    """Slot within the day, zero-based month and zero-based day of year.

    Day of year counts from Jan 1 = 0, so Feb 29 is 59 and later days in a
    leap year sit one above their non-leap counterparts (Dec 31 -> 365).
    """
    if SECONDS_PER_DAY % cadence_s:
        raise ContractError(f"cadence {cadence_s}s does not divide a day")
    idx = pd.DatetimeIndex(pd.to_datetime(np.asarray(timestamps)))
    secs = idx.hour * 3600 + idx.minute * 60 + idx.second
    off = np.asarray(secs % cadence_s) != 0
    if off.any() or (idx.microsecond != 0).any() or (idx.nanosecond != 0).any():
        bad = idx[np.flatnonzero(off)[0]] if off.any() else idx[0]
        raise DataError(f"timestamp {bad} does not fall on the {cadence_s}s cadence")
    return TemporalIndex(
        slot_of_day=np.asarray(secs // cadence_s, dtype=np.int64),
        month=np.asarray(idx.month - 1, dtype=np.int64),
        day_of_year=np.asarray(idx.dayofyear - 1, dtype=np.int64),
    )


def slots_per_day(cadence_s: int = DEFAULT_CADENCE_S) -> int:
    return SECONDS_PER_DAY // cadence_s


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass
class WindowBatch:
    X: np.ndarray  # [B, H, N, 1] normalized power
    Z_s: np.ndarray  # [B, H, N, C] normalized exogenous statics
    T_idx: np.ndarray  # [B, H', 3] int
    Y: np.ndarray  # [B, P, N, 1] kW
    starts: np.ndarray  # [B] window start rows within the segment

    @property
    def size(self) -> int:
        return self.X.shape[0]


class WindowSet(Sequence):
    """All sliding windows of a normalized segment, materialized per batch.

    Window ``k`` starts at row ``k * stride``; its lookback covers ``H`` rows
    and its targets the following ``P`` rows. Temporal indices span the
    lookback, or lookback plus horizon when ``future_time`` is set.
    """

    def __init__(self, fs: FarmSeries, lookback: int, horizon: int, stride: int = 1, future_time: bool = False):
        if lookback <= 0 or horizon <= 0 or stride <= 0:
            raise ContractError(f"lookback, horizon and stride must be positive: {lookback}, {horizon}, {stride}")
        if fs.power_z is None or fs.exo_z is None:
            raise ContractError("make_windows needs a z-scored series (apply_zscore first)")
        if fs.missing_mask.any():
            raise ContractError("series still has missing cells (fill_missing first)")
        if fs.T < lookback + horizon:
            raise DataError(f"segment of {fs.T} steps is shorter than lookback+horizon={lookback + horizon}")
        self.series = fs
        self.lookback = lookback
        self.horizon = horizon
        self.stride = stride
        self.future_time = future_time
        self._tidx = temporal_indices(fs.timestamps, fs.cadence_s).stack()
        self.starts = np.arange(0, fs.T - lookback - horizon + 1, stride)

    @property
    def dyn_len(self) -> int:
        return self.lookback + (self.horizon if self.future_time else 0)

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.batch(np.arange(len(self))[i])
        return self.batch([i])

    def batch(self, indices) -> WindowBatch:
        starts = self.starts[np.asarray(indices, dtype=np.int64)]
        H, P = self.lookback, self.horizon
        look = starts[:, None] + np.arange(H)
        ahead = starts[:, None] + H + np.arange(P)
        dyn = starts[:, None] + np.arange(self.dyn_len)
        fs = self.series
        return WindowBatch(
            X=fs.power_z[look][..., None],
            Z_s=fs.exo_z[look],
            T_idx=self._tidx[dyn],
            Y=fs.power[ahead][..., None],
            starts=starts,
        )

    def last_power(self, indices=None) -> np.ndarray:
        """Last observed power (kW) of each window's lookback, ``[B, N]``."""
        starts = self.starts if indices is None else self.starts[np.asarray(indices)]
        return self.series.power[starts + self.lookback - 1]

    def iter_batches(self, batch_size: int, order=None) -> Iterator[tuple[np.ndarray, WindowBatch]]:
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            yield idx, self.batch(idx)


def make_windows(fs: FarmSeries, H: int, P: int, stride: int = 1, future_time: bool = False) -> WindowSet:
    return WindowSet(fs, H, P, stride=stride, future_time=future_time)


# ---------------------------------------------------------------------------
# synthetic farms
# ---------------------------------------------------------------------------

_EXTRA_EXO = ("wind_direction", "pressure", "humidity", "nacelle_direction", "pitch", "reactive_power", "rotor_speed")


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float, shape=()) -> np.ndarray:
    """Stationary AR(1) paths with marginal std ``sigma`` along axis 0."""
    innov = rng.normal(scale=sigma * np.sqrt(1 - phi**2), size=(n, *shape))
    out = np.empty((n, *shape))
    out[0] = rng.normal(scale=sigma, size=shape)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + innov[t]
    return out


def power_curve(speed, rated_kw: float = 1500.0, cut_in: float = 3.0, rated_speed: float = 12.0):
    """Cubic rise between cut-in and rated speed, flat at rated power above."""
    frac = np.clip((np.asarray(speed) - cut_in) / (rated_speed - cut_in), 0.0, 1.0)
    return rated_kw * frac**3


def generate_synthetic(
    N: int = 8,
    T: int = 20_000,
    C: int = 2,
    seed: int = 0,
    cadence_s: int = DEFAULT_CADENCE_S,
    start: str = "2020-01-01",
    rated_kw: float = 1500.0,
    missing_frac: float = 0.01,
    gust_lag_steps: int = 2,
    turbulence_std: float = 1.8,
    gust_std: float = 1.5,
    gust_hours: float = 4.0,
) -> FarmSeries:
    """A seeded toy wind farm.

    Wind at each turbine is a seasonal and diurnal mean plus a farm-wide gust
    process that reaches turbines with a per-turbine delay, plus local
    turbulence. Turbines are delayed by multiples of ``gust_lag_steps``
    samples, so upstream machines lead the rest of the farm. Power follows a saturating cubic curve scaled by air density.
    Reported wind speed carries sensor noise. ``missing_frac`` of all cells
    are blanked to exercise filling.
    """
    if N < 2 or T < 2000:
        raise ContractError(f"generate_synthetic needs N >= 2 and T >= 2000, got N={N}, T={T}")
    if C < 2:
        raise ContractError("synthetic farms carry at least wind speed and temperature (C >= 2)")
    rng = np.random.default_rng(seed)
    steps_per_hour = 3600 / cadence_s
    stamps = (np.datetime64(start, "s") + np.arange(T) * np.timedelta64(cadence_s, "s")).astype("datetime64[s]")
    ti = temporal_indices(stamps, cadence_s)
    hour = ti.slot_of_day * cadence_s / 3600.0
    doy = ti.day_of_year.astype(np.float64)

    season = np.cos(2 * np.pi * (doy - 15) / 365.25)
    diurnal = np.sin(2 * np.pi * (hour - 9) / 24)
    mean_wind = 7.0 + 1.0 * season + 3.5 * diurnal

    # Delay in steps for the farm-wide gust front to reach each turbine.
    lag = rng.permutation(np.arange(N)) * gust_lag_steps
    pad = int(lag.max())
    gust = _ar1(rng, T + pad, phi=np.exp(-1 / (gust_hours * steps_per_hour)), sigma=gust_std)
    farm_gust = np.stack([gust[pad - lag[i] : pad - lag[i] + T] for i in range(N)], axis=1)
    # Turbulence decorrelates within about one sample.
    local = _ar1(rng, T, phi=np.exp(-1 / (0.1 * steps_per_hour)), sigma=turbulence_std, shape=(N,))
    site_bias = rng.normal(scale=0.3, size=N)
    wind = np.clip(mean_wind[:, None] + site_bias + farm_gust + local, 0.0, 30.0)

    temp = (
        10.0
        - 8.0 * season[:, None]
        + 4.0 * diurnal[:, None]
        + _ar1(rng, T, phi=np.exp(-1 / (6.0 * steps_per_hour)), sigma=1.5)[:, None]
        + rng.normal(scale=0.2, size=(T, N))
    )
    density = 288.15 / (273.15 + temp)
    power = np.clip(power_curve(wind, rated_kw) * density, 0.0, rated_kw)

    columns = [np.clip(wind + rng.normal(scale=0.4, size=(T, N)), 0.0, None), temp]
    for k in range(C - 2):
        base = _ar1(rng, T, phi=np.exp(-1 / ((2.0 + k) * steps_per_hour)), sigma=1.0)
        columns.append(base[:, None] + 0.3 * local + rng.normal(scale=0.3, size=(T, N)))
    exo = np.stack(columns, axis=2)
    names = ("wind_speed", "temperature") + tuple(
        _EXTRA_EXO[k] if k < len(_EXTRA_EXO) else f"exo_{k + 2}" for k in range(C - 2)
    )

    mask = rng.random((T, N, C + 1)) < missing_frac
    power = np.where(mask[:, :, 0], np.nan, power)
    exo = np.where(mask[:, :, 1:], np.nan, exo)
    return FarmSeries(
        turbine_ids=[f"T{i + 1:02d}" for i in range(N)],
        timestamps=stamps,
        power=power,
        exo=exo,
        exo_names=names,
        missing_mask=mask,
        cadence_s=cadence_s,
        flags={"rated_kw": rated_kw},
    )


def prepare_splits(fs: FarmSeries, lookback: int, horizon: int):
    """Fill, split, fit statistics on train only, normalize all three splits."""
    filled = fill_missing(fs)
    train, val, test = split_7_2_1(filled, lookback, horizon)
    stats = fit_zscore(train)
    return tuple(apply_zscore(s, stats) for s in (train, val, test)), stats
