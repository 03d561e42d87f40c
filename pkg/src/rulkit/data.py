"""Fleet datasets: ingestion, normalization, and a synthetic degradation fleet.

A fleet is a collection of run-to-failure unit histories. Each unit carries a
time index, a feature matrix (one row per step), and the remaining useful life
at every step. Files on disk are plain comma-delimited tables, one per unit,
with header ``unit_id,t,f_1..f_m,rul``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .params import RngStream

__all__ = [
    "DataFormatError",
    "NormalizationStats",
    "UnitSeries",
    "FleetDataset",
    "SplitSpec",
    "load_fleet",
    "save_fleet",
    "normalize",
    "stack_rows",
    "synth_fleet",
]

STD_FLOOR = 1e-8
NUM_CONDITIONS = 3

_ID_PATTERN = re.compile(r"[A-Za-z0-9._-]+")


class DataFormatError(ValueError):
    """An ingested fleet table violates the expected format or invariants."""


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature z-scoring statistics, computed from training units only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if mean.ndim != 1 or std.ndim != 1 or mean.shape != std.shape:
            raise ValueError("mean and std must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("normalization stats must be finite")
        if np.any(std <= 0.0):
            raise ValueError("std entries must be positive (floored upstream)")

    def apply(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.mean.size:
            raise ValueError(
                f"feature dimension {features.shape[-1]} does not match "
                f"stats dimension {self.mean.size}"
            )
        return (features - self.mean) / self.std


@dataclass(frozen=True)
class UnitSeries:
    """One unit's run-to-failure history."""

    unit_id: str
    time: np.ndarray
    features: np.ndarray
    rul: np.ndarray

    def __post_init__(self):
        if not isinstance(self.unit_id, str) or not _ID_PATTERN.fullmatch(self.unit_id):
            raise DataFormatError(
                f"unit_id must match {_ID_PATTERN.pattern!r}, got {self.unit_id!r}"
            )
        time = np.asarray(self.time, dtype=np.float64)
        features = np.asarray(self.features, dtype=np.float64)
        rul = np.asarray(self.rul, dtype=np.float64)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "rul", rul)
        uid = self.unit_id
        if time.ndim != 1 or rul.ndim != 1 or features.ndim != 2:
            raise DataFormatError(f"unit {uid}: time/rul must be 1-D, features 2-D")
        n = time.size
        if features.shape[0] != n or rul.size != n:
            raise DataFormatError(f"unit {uid}: time, features, rul lengths disagree")
        if n < 2:
            raise DataFormatError(f"unit {uid}: needs at least 2 rows, got {n}")
        for name, arr in (("time", time), ("features", features), ("rul", rul)):
            if not np.all(np.isfinite(arr)):
                raise DataFormatError(f"unit {uid}: non-finite value in {name}")
        if np.any(np.diff(time) <= 0.0):
            row = int(np.argmax(np.diff(time) <= 0.0)) + 1
            raise DataFormatError(f"unit {uid}: time not increasing at row {row}")
        if np.any(np.diff(rul) > 0.0):
            row = int(np.argmax(np.diff(rul) > 0.0)) + 1
            raise DataFormatError(f"unit {uid}: rul increases at row {row}")
        if rul[-1] < 0.0:
            raise DataFormatError(f"unit {uid}: final rul is negative ({rul[-1]})")

    @property
    def num_rows(self) -> int:
        return self.time.size

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class FleetDataset:
    """A fleet of units with a shared feature layout.

    ``stats`` records the normalization already applied to the feature
    columns; None means the features are raw.
    """

    units: tuple
    stats: Optional[NormalizationStats] = None

    def __post_init__(self):
        units = tuple(self.units)
        object.__setattr__(self, "units", units)
        if not units:
            raise DataFormatError("a fleet needs at least one unit")
        ids = [u.unit_id for u in units]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataFormatError(f"duplicate unit ids: {', '.join(dup)}")
        dims = {u.feature_dim for u in units}
        if len(dims) > 1:
            raise DataFormatError(
                f"inconsistent feature dimension across units: {sorted(dims)}"
            )
        if self.stats is not None and self.stats.mean.size != self.feature_dim:
            raise DataFormatError("normalization stats do not match feature_dim")

    @property
    def feature_dim(self) -> int:
        return self.units[0].feature_dim

    @property
    def unit_ids(self) -> list[str]:
        return [u.unit_id for u in self.units]

    @property
    def num_rows(self) -> int:
        return sum(u.num_rows for u in self.units)

    def unit(self, unit_id: str) -> UnitSeries:
        for u in self.units:
            if u.unit_id == unit_id:
                return u
        raise KeyError(f"no unit {unit_id!r} in fleet (have {self.unit_ids})")

    def subset(self, unit_ids: Sequence[str]) -> "FleetDataset":
        return FleetDataset(tuple(self.unit(i) for i in unit_ids), self.stats)


@dataclass(frozen=True)
class SplitSpec:
    """Unit-wise train/test split; validation is a temporal tail of each
    training unit, never a random row subset (random rows leak trajectory
    shape between train and validation)."""

    train_ids: tuple
    test_ids: tuple
    val_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "train_ids", tuple(self.train_ids))
        object.__setattr__(self, "test_ids", tuple(self.test_ids))
        if not self.train_ids:
            raise ValueError("train_ids must be nonempty")
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValueError(f"train/test unit ids overlap: {sorted(overlap)}")
        if len(set(self.train_ids)) != len(self.train_ids):
            raise ValueError("duplicate ids in train_ids")
        if len(set(self.test_ids)) != len(self.test_ids):
            raise ValueError("duplicate ids in test_ids")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    def check_against(self, data: FleetDataset):
        known = set(data.unit_ids)
        missing = [i for i in self.train_ids + self.test_ids if i not in known]
        if missing:
            raise ValueError(f"split references unknown units: {missing}")


# -- ingestion -------------------------------------------------------------------


def _parse_cell(text: str, path: Path, lineno: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(
            f"{path.name} line {lineno}: cannot parse column {column!r} "
            f"from {text!r}"
        ) from None


def _load_unit_file(path: Path, expect_header: Optional[list]) -> UnitSeries:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError(f"{path.name}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    if len(header) < 4 or header[0] != "unit_id" or header[1] != "t" or header[-1] != "rul":
        raise DataFormatError(
            f"{path.name} line 1: header must be unit_id,t,<features...>,rul, "
            f"got {','.join(header)}"
        )
    if expect_header is not None and header != expect_header:
        raise DataFormatError(
            f"{path.name}: header ({len(header) - 3} features) does not match "
            f"the fleet's first file ({len(expect_header) - 3} features)"
        )
    unit_id = None
    time, rows, rul = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(header):
            raise DataFormatError(
                f"{path.name} line {lineno}: expected {len(header)} columns, "
                f"got {len(cells)}"
            )
        if unit_id is None:
            unit_id = cells[0]
        elif cells[0] != unit_id:
            raise DataFormatError(
                f"{path.name} line {lineno}: unit_id changes from "
                f"{unit_id!r} to {cells[0]!r} within one file"
            )
        time.append(_parse_cell(cells[1], path, lineno, "t"))
        rows.append(
            [_parse_cell(c, path, lineno, name) for name, c in zip(header[2:-1], cells[2:-1])]
        )
        rul.append(_parse_cell(cells[-1], path, lineno, "rul"))
    if unit_id is None:
        raise DataFormatError(f"{path.name}: no data rows")
    r = np.asarray(rul)
    if np.any(np.diff(r) > 0.0):
        # report in file coordinates: +1 for header, +1 for the offending row
        row = int(np.argmax(np.diff(r) > 0.0)) + 1
        raise DataFormatError(f"{path.name} line {row + 2}: rul increases at row {row}")
    return UnitSeries(unit_id, np.asarray(time), np.asarray(rows), r)


def load_fleet(path) -> FleetDataset:
    """Load a directory of per-unit csv tables; see the module docstring."""
    root = Path(path)
    if not root.is_dir():
        raise DataFormatError(f"{root} is not a directory")
    files = sorted(root.glob("*.csv"))
    if not files:
        raise DataFormatError(f"no *.csv unit files under {root}")
    header = [c.strip() for c in files[0].read_text().splitlines()[0].split(",")]
    units = [_load_unit_file(f, header if i else None) for i, f in enumerate(files)]
    return FleetDataset(tuple(units))


def save_fleet(data: FleetDataset, path):
    """Write one ``<unit_id>.csv`` per unit; floats keep full precision."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = [f"f_{j + 1}" for j in range(data.feature_dim)]
    header = ",".join(["unit_id", "t"] + names + ["rul"])
    for u in data.units:
        lines = [header]
        for t, x, r in zip(u.time, u.features, u.rul):
            cells = [u.unit_id, repr(float(t))]
            cells += [repr(float(v)) for v in x]
            cells.append(repr(float(r)))
            lines.append(",".join(cells))
        (root / f"{u.unit_id}.csv").write_text("\n".join(lines) + "\n")


# -- normalization ----------------------------------------------------------------


def normalize(data: FleetDataset, stats_from: Sequence[str]):
    """Z-score features with statistics from ``stats_from`` units only.

    Targets stay in natural units. Returns (normalized fleet, stats).
    """
    if data.stats is not None:
        raise ValueError("fleet is already normalized")
    ids = list(stats_from)
    if not ids:
        raise ValueError("stats_from must name at least one unit")
    pooled = np.concatenate([data.unit(i).features for i in ids], axis=0)
    stats = NormalizationStats(
        pooled.mean(axis=0), np.maximum(pooled.std(axis=0), STD_FLOOR)
    )
    units = tuple(
        UnitSeries(u.unit_id, u.time, stats.apply(u.features), u.rul)
        for u in data.units
    )
    return FleetDataset(units, stats), stats


def stack_rows(data: FleetDataset, unit_ids: Optional[Sequence[str]] = None):
    """Flatten units to row arrays: (X, y, unit_id per row, t per row)."""
    units = data.units if unit_ids is None else [data.unit(i) for i in unit_ids]
    X = np.concatenate([u.features for u in units], axis=0)
    y = np.concatenate([u.rul for u in units])
    uid = np.concatenate([np.repeat(u.unit_id, u.num_rows) for u in units])
    t = np.concatenate([u.time for u in units])
    return X, y, uid, t


# -- synthetic degradation fleet ---------------------------------------------------


@dataclass(frozen=True)
class _ResponseMap:
    """Smooth random feature maps, one coefficient set per failure mode."""

    lin: np.ndarray    # (2, m_r)
    quad: np.ndarray   # (2, m_r)
    amp: np.ndarray    # (2, m_r)
    freq: np.ndarray   # (2, m_r)
    phase: np.ndarray  # (2, m_r)
    cond: np.ndarray   # (2, m_r, NUM_CONDITIONS)

    def eval(self, mode: int, h: np.ndarray, c: np.ndarray) -> np.ndarray:
        hcol = h[:, None]
        out = self.lin[mode] * hcol + self.quad[mode] * hcol**2
        out = out + self.amp[mode] * np.sin(np.pi * self.freq[mode] * hcol + self.phase[mode])
        return out + c @ self.cond[mode].T


def _draw_response_map(rng: RngStream, num_response: int) -> _ResponseMap:
    shape = (2, num_response)
    return _ResponseMap(
        lin=rng.normal(shape),
        quad=0.5 * rng.normal(shape),
        amp=0.3 * rng.normal(shape),
        freq=rng.uniform(0.5, 2.5, shape),
        phase=rng.uniform(0.0, 2.0 * np.pi, shape),
        cond=0.4 * rng.normal(shape + (NUM_CONDITIONS,)),
    )


def _simulate_health(rng: RngStream, drift: float, noise: float, max_steps: int):
    """Random walk with drift from h=1 down to the failure threshold h<=0.

    Returns the recorded (pre-failure) health values h_0..h_{T-1}, all > 0;
    the unit fails right after its last recorded step.
    """
    h = [1.0]
    steps = noise * drift * rng.normal(max_steps)
    for t in range(max_steps):
        nxt = h[-1] - drift + steps[t]
        if nxt <= 0.0 or t == max_steps - 1:
            break
        h.append(nxt)
    return np.asarray(h)


def _synth_unit(
    unit_id: str,
    rng: RngStream,
    response: _ResponseMap,
    steps: int,
    noise: float,
    mode_mix: float,
    regime_center: np.ndarray,
    drift_spread: float,
) -> UnitSeries:
    mode = int(rng.bernoulli(mode_mix, ())) if mode_mix > 0.0 else 0
    for attempt in range(100):
        walk = rng.derive(attempt)
        drift = (1.0 + drift_spread * float(walk.uniform(-1.0, 1.0))) / steps
        h = _simulate_health(walk, drift, noise, max_steps=6 * steps)
        if h.size >= 2:
            break
    else:
        raise ValueError(f"unit {unit_id}: could not draw a lifetime of >= 2 steps")
    n = h.size
    cond = regime_center + 0.25 * walk.normal((n, NUM_CONDITIONS))
    resp = response.eval(mode, h, cond)
    if noise > 0.0:
        resp = resp + noise * walk.normal(resp.shape)
    features = np.concatenate([cond, resp], axis=1)
    rul = np.arange(n - 1, -1, -1, dtype=np.float64)
    return UnitSeries(unit_id, np.arange(n, dtype=np.float64), features, rul)


def synth_fleet(
    units: int,
    steps: int,
    noise: float = 0.05,
    mode_mix: float = 0.5,
    seed: int = 0,
    *,
    feature_dim: int = 8,
    shifted_units: int = 0,
    shift: float = 3.0,
    drift_spread: float = 0.25,
    regime_spread: float = 0.5,
) -> FleetDataset:
    """Generate a run-to-failure fleet with a latent health state.

    Each unit's health decays from 1 by a random walk with drift; the unit
    fails when health crosses 0, and rul counts the steps remaining until
    that crossing, so it is exactly linear per unit. The first
    ``NUM_CONDITIONS`` feature columns are observable operating-condition
    settings (per-unit regime center plus per-step variation); the rest
    respond smoothly to (health, conditions) through one of two random
    mode-specific maps. ``shifted_units`` extra units (ids ``s001``...)
    operate at condition regimes displaced by ``shift``, far from the rest
    of the fleet.

    ``noise`` scales both the health-walk roughness and the sensor noise on
    the response columns; at ``noise=0`` the features are an exact function
    of (health, conditions) and every lifetime equals
    ``steps / (1 + drift_spread * u)`` for a per-unit u ~ U(-1, 1).
    """
    if units < 2:
        raise ValueError(f"need at least 2 units, got {units}")
    if steps < 2:
        raise ValueError(f"steps per unit must be >= 2, got {steps}")
    if noise < 0.0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    if not 0.0 <= mode_mix <= 1.0:
        raise ValueError(f"mode_mix must be in [0, 1], got {mode_mix}")
    if feature_dim < NUM_CONDITIONS + 1:
        raise ValueError(
            f"feature_dim must be > {NUM_CONDITIONS} (condition columns), "
            f"got {feature_dim}"
        )
    if shifted_units < 0:
        raise ValueError("shifted_units must be >= 0")
    if not 0.0 <= drift_spread < 1.0:
        raise ValueError(f"drift_spread must be in [0, 1), got {drift_spread}")
    if regime_spread < 0.0:
        raise ValueError(f"regime_spread must be >= 0, got {regime_spread}")

    rng = RngStream(seed)
    response = _draw_response_map(rng.derive(0), feature_dim - NUM_CONDITIONS)
    out = []
    for i in range(units + shifted_units):
        shifted = i >= units
        unit_rng = rng.derive(1, i)
        center = regime_spread * unit_rng.normal(NUM_CONDITIONS)
        if shifted:
            center = center + shift
        name = f"s{i - units + 1:03d}" if shifted else f"u{i + 1:03d}"
        out.append(
            _synth_unit(
                name, unit_rng.derive(0), response, steps, noise, mode_mix,
                center, drift_spread,
            )
        )
    return FleetDataset(tuple(out))
