"""Run-to-failure data: ingestion, normalization, synthetic trajectories.

Two on-disk formats are understood: the classic turbofan layout (26
whitespace-separated columns: unit, cycle, 3 operational settings, 21
sensors) and a generic CSV with a `unit,cycle,<features...>` header where
`setting<k>` columns are recognized by name. Cycle indices must be
contiguous from 1 within each unit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import DataError

__all__ = [
    "TimeSeriesInstance",
    "Normalizer",
    "SyntheticTruth",
    "SyntheticConfig",
    "parse_cmapss",
    "format_cmapss",
    "parse_csv",
    "format_csv",
    "fit_normalizer",
    "apply_normalizer",
    "generate_synthetic",
    "format_truth_csv",
    "parse_truth_csv",
]

CMAPSS_SETTINGS = 3
CMAPSS_SENSORS = 21
CMAPSS_COLUMNS = 2 + CMAPSS_SETTINGS + CMAPSS_SENSORS

STD_FLOOR = 1e-8
GLOBAL_KEY = "global"
CONDITION_DECIMALS = 1


@dataclass(frozen=True)
class TimeSeriesInstance:
    """One unit's run-to-failure record; row t is cycle t+1 (cycles run 1..T)."""

    unit_id: int
    sensors: np.ndarray  # T x d_raw
    op_settings: np.ndarray  # T x k

    def __post_init__(self):
        sensors = np.asarray(self.sensors, dtype=np.float64)
        settings = np.asarray(self.op_settings, dtype=np.float64)
        if sensors.ndim != 2 or sensors.shape[0] < 1:
            raise DataError(f"unit {self.unit_id}: sensors must be a nonempty T x d matrix")
        if settings.ndim != 2 or settings.shape[0] != sensors.shape[0]:
            raise DataError(f"unit {self.unit_id}: op_settings rows must match sensors rows")
        if not (np.all(np.isfinite(sensors)) and np.all(np.isfinite(settings))):
            raise DataError(f"unit {self.unit_id}: non-finite values")
        sensors.setflags(write=False)
        settings.setflags(write=False)
        object.__setattr__(self, "unit_id", int(self.unit_id))
        object.__setattr__(self, "sensors", sensors)
        object.__setattr__(self, "op_settings", settings)

    @property
    def cycles(self) -> int:
        """Number of observed cycles T."""
        return self.sensors.shape[0]


def _parse_int(token: str, what: str, line_no: int) -> int:
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"line {line_no}: {what} {token!r} is not numeric") from None
    if value != int(value):
        raise DataError(f"line {line_no}: {what} {token!r} is not an integer")
    return int(value)


def _finish_unit(unit_id, settings_rows, sensor_rows, seen, out):
    if unit_id is None:
        return
    if unit_id in seen:
        raise DataError(f"unit {unit_id} appears in more than one block")
    seen.add(unit_id)
    out.append(
        TimeSeriesInstance(
            unit_id=unit_id,
            sensors=np.asarray(sensor_rows, dtype=np.float64),
            op_settings=np.asarray(settings_rows, dtype=np.float64),
        )
    )


def parse_cmapss(lines: Iterable[str]) -> list:
    """Parse turbofan-format text into one instance per unit."""
    out: list = []
    seen: set = set()
    current = None
    settings_rows: list = []
    sensor_rows: list = []
    for line_no, raw in enumerate(lines, start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) != CMAPSS_COLUMNS:
            raise DataError(
                f"line {line_no}: expected {CMAPSS_COLUMNS} columns, got {len(tokens)}"
            )
        unit = _parse_int(tokens[0], "unit id", line_no)
        cycle = _parse_int(tokens[1], "cycle", line_no)
        try:
            values = [float(t) for t in tokens[2:]]
        except ValueError:
            raise DataError(f"line {line_no}: non-numeric field") from None
        if unit != current:
            _finish_unit(current, settings_rows, sensor_rows, seen, out)
            current = unit
            settings_rows, sensor_rows = [], []
        expected = len(sensor_rows) + 1
        if cycle != expected:
            raise DataError(
                f"unit {unit}: cycles not contiguous (expected {expected}, got {cycle} "
                f"at line {line_no})"
            )
        settings_rows.append(values[:CMAPSS_SETTINGS])
        sensor_rows.append(values[CMAPSS_SETTINGS:])
    _finish_unit(current, settings_rows, sensor_rows, seen, out)
    return out


def format_cmapss(instances) -> str:
    """Inverse of parse_cmapss; floats use repr for exact round-trips."""
    lines = []
    for inst in instances:
        if inst.sensors.shape[1] != CMAPSS_SENSORS or inst.op_settings.shape[1] != CMAPSS_SETTINGS:
            raise DataError(
                f"unit {inst.unit_id}: turbofan format needs {CMAPSS_SENSORS} sensors "
                f"and {CMAPSS_SETTINGS} settings"
            )
        for t in range(inst.cycles):
            fields = [str(inst.unit_id), str(t + 1)]
            fields += [repr(float(v)) for v in inst.op_settings[t]]
            fields += [repr(float(v)) for v in inst.sensors[t]]
            lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_csv(lines: Iterable[str]) -> list:
    """Parse generic `unit,cycle,...` CSV; `setting*` columns become op_settings."""
    it = iter(lines)
    try:
        header = next(it)
    except StopIteration:
        return []
    names = [c.strip() for c in header.strip().split(",")]
    if len(names) < 2 or names[0] != "unit" or names[1] != "cycle":
        raise DataError("CSV header must start with 'unit,cycle'")
    setting_cols = [i for i, n in enumerate(names) if n.startswith("setting")]
    feature_cols = [i for i in range(2, len(names)) if i not in setting_cols]
    if not feature_cols:
        raise DataError("CSV has no feature columns")

    out: list = []
    seen: set = set()
    current = None
    settings_rows: list = []
    sensor_rows: list = []

    def finish(unit_id):
        nonlocal settings_rows, sensor_rows
        if unit_id is None:
            return
        if unit_id in seen:
            raise DataError(f"unit {unit_id} appears in more than one block")
        seen.add(unit_id)
        out.append(
            TimeSeriesInstance(
                unit_id=unit_id,
                sensors=np.asarray(sensor_rows, dtype=np.float64),
                op_settings=np.asarray(settings_rows, dtype=np.float64).reshape(
                    len(sensor_rows), len(setting_cols)
                ),
            )
        )
        settings_rows, sensor_rows = [], []

    for line_no, raw in enumerate(it, start=2):
        if not raw.strip():
            continue
        tokens = raw.strip().split(",")
        if len(tokens) != len(names):
            raise DataError(f"line {line_no}: expected {len(names)} columns, got {len(tokens)}")
        unit = _parse_int(tokens[0], "unit id", line_no)
        cycle = _parse_int(tokens[1], "cycle", line_no)
        try:
            settings_row = [float(tokens[i]) for i in setting_cols]
            sensor_row = [float(tokens[i]) for i in feature_cols]
        except ValueError:
            raise DataError(f"line {line_no}: non-numeric field") from None
        if unit != current:
            finish(current)
            current = unit
        expected = len(sensor_rows) + 1
        if cycle != expected:
            raise DataError(
                f"unit {unit}: cycles not contiguous (expected {expected}, got {cycle} "
                f"at line {line_no})"
            )
        settings_rows.append(settings_row)
        sensor_rows.append(sensor_row)
    finish(current)
    return out


def format_csv(instances, feature_names: Optional[list] = None) -> str:
    """Generic CSV writer; setting columns are emitted when instances have them."""
    if not instances:
        return "unit,cycle\n"
    d = instances[0].sensors.shape[1]
    k = instances[0].op_settings.shape[1]
    if feature_names is None:
        feature_names = [f"s{j + 1}" for j in range(d)]
    if len(feature_names) != d:
        raise DataError(f"expected {d} feature names, got {len(feature_names)}")
    header = ["unit", "cycle"] + [f"setting{j + 1}" for j in range(k)] + list(feature_names)
    lines = [",".join(header)]
    for inst in instances:
        if inst.sensors.shape[1] != d or inst.op_settings.shape[1] != k:
            raise DataError("instances have inconsistent column counts")
        for t in range(inst.cycles):
            fields = [str(inst.unit_id), str(t + 1)]
            fields += [repr(float(v)) for v in inst.op_settings[t]]
            fields += [repr(float(v)) for v in inst.sensors[t]]
            lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


# --- normalization ---------------------------------------------------------


def condition_key(settings_row, decimals: int = CONDITION_DECIMALS) -> str:
    """Group key for an operating-condition row: settings rounded to 1 decimal."""
    parts = []
    for v in np.asarray(settings_row, dtype=np.float64):
        r = round(float(v), decimals) + 0.0  # fold -0.0 into 0.0
        parts.append(f"{r:.{decimals}f}")
    return "|".join(parts)


@dataclass(frozen=True)
class Normalizer:
    """Per-feature z-scoring statistics, optionally grouped by condition.

    `groups` maps a condition key (or GLOBAL_KEY) to (mean, std) arrays over
    the retained features only; every stored std is >= 1e-8 by construction.
    """

    mode: str
    feature_mask: tuple
    groups: dict

    def __post_init__(self):
        if self.mode not in ("global", "per_condition"):
            raise ValueError(f"unknown normalizer mode {self.mode!r}")
        if not self.feature_mask:
            raise DataError("feature_mask is empty: all features were masked")
        for key, (mean, std) in self.groups.items():
            if np.any(std < STD_FLOOR):
                raise DataError(f"group {key}: stored std below {STD_FLOOR}")
        object.__setattr__(self, "feature_mask", tuple(int(i) for i in self.feature_mask))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "feature_mask": list(self.feature_mask),
            "condition_decimals": CONDITION_DECIMALS,
            "groups": {
                key: {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}
                for key, (mean, std) in self.groups.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalizer":
        try:
            groups = {
                key: (
                    np.asarray(g["mean"], dtype=np.float64),
                    np.asarray(g["std"], dtype=np.float64),
                )
                for key, g in doc["groups"].items()
            }
            return cls(
                mode=doc["mode"],
                feature_mask=tuple(doc["feature_mask"]),
                groups=groups,
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"invalid normalizer document: {exc}") from exc


def _healthy_rows(instances, healthy_fraction: float):
    sensor_blocks, setting_blocks = [], []
    for inst in instances:
        rows = int(healthy_fraction * inst.cycles)
        sensor_blocks.append(inst.sensors[:rows])
        setting_blocks.append(inst.op_settings[:rows])
    return np.concatenate(sensor_blocks), np.concatenate(setting_blocks)


def fit_normalizer(instances, healthy_fraction: float = 0.5, mode: str = "global") -> Normalizer:
    """Fit z-scoring statistics on the assumed-healthy prefix of each unit.

    Only the first floor(healthy_fraction * T) cycles of each instance
    contribute, so the statistics do not depend on any change-point
    hypothesis. Features whose std (in any group) falls below 1e-8 are
    masked out entirely.
    """
    instances = list(instances)
    if not instances:
        raise ValueError("need at least one instance")
    if not 0 < healthy_fraction <= 1:
        raise ValueError(f"healthy_fraction must lie in (0, 1], got {healthy_fraction}")
    min_t = min(inst.cycles for inst in instances)
    if healthy_fraction * min_t < 2:
        raise ValueError(
            f"healthy_fraction * min(T) = {healthy_fraction * min_t:.3g} < 2: "
            "not enough healthy rows to fit statistics"
        )
    sensors, settings = _healthy_rows(instances, healthy_fraction)

    if mode == "global":
        raw_groups = {GLOBAL_KEY: sensors}
    elif mode == "per_condition":
        keys = [condition_key(row) for row in settings]
        raw_groups = {}
        for key in sorted(set(keys)):
            idx = [i for i, k in enumerate(keys) if k == key]
            if len(idx) < 2:
                raise DataError(f"condition group {key}: only {len(idx)} healthy row(s)")
            raw_groups[key] = sensors[idx]
        if not raw_groups:
            raise DataError("no healthy rows to group by condition")
    else:
        raise ValueError(f"unknown normalizer mode {mode!r}")

    d = sensors.shape[1]
    stds = {key: rows.std(axis=0) for key, rows in raw_groups.items()}  # population, ddof=0
    mask = [j for j in range(d) if all(s[j] >= STD_FLOOR for s in stds.values())]
    if not mask:
        raise DataError("all features masked: every feature is constant in some group")
    groups = {
        key: (rows[:, mask].mean(axis=0), stds[key][mask]) for key, rows in raw_groups.items()
    }
    return Normalizer(mode=mode, feature_mask=tuple(mask), groups=groups)


def apply_normalizer(normalizer: Normalizer, instance: TimeSeriesInstance) -> np.ndarray:
    """Return the T x |mask| z-scored feature matrix for one instance."""
    mask = list(normalizer.feature_mask)
    if instance.sensors.shape[1] <= max(mask):
        raise ValueError(
            f"unit {instance.unit_id}: instance has {instance.sensors.shape[1]} features, "
            f"normalizer expects index {max(mask)}"
        )
    raw = instance.sensors[:, mask]
    if normalizer.mode == "global":
        mean, std = normalizer.groups[GLOBAL_KEY]
        return (raw - mean) / std
    out = np.empty_like(raw)
    keys = [condition_key(row) for row in instance.op_settings]
    for key in set(keys):
        group = normalizer.groups.get(key)
        if group is None:
            raise DataError(f"unit {instance.unit_id}: unseen condition group {key}")
        mean, std = group
        idx = [i for i, k in enumerate(keys) if k == key]
        out[idx] = (raw[idx] - mean) / std
    return out


# --- synthetic trajectories ------------------------------------------------


@dataclass(frozen=True)
class SyntheticTruth:
    unit_id: int
    true_change_cycle: int
    cycles: int
    drift_magnitude: float
    drift_direction: np.ndarray


@dataclass(frozen=True)
class SyntheticConfig:
    """Degradation generator: healthy noise, then a polynomial mean drift.

    Units draw T uniformly from `cycles_range` and a change point at
    round(rho * T) with rho uniform in `rho_range`; after the change the
    mean moves along a random unit direction with magnitude
    drift_magnitude * ((t - c) / (T - c)) ** ramp_shape.
    """

    num_units: int = 20
    dim: int = 5
    cycles_range: tuple = (150, 350)
    rho_range: tuple = (0.55, 0.85)
    drift_magnitude: float = 6.0
    ramp_shape: float = 2.0
    noise_std: float = 1.0

    def __post_init__(self):
        if self.num_units < 1:
            raise ValueError("num_units must be positive")
        if self.dim < 1:
            raise ValueError("dim must be at least 1")
        t_lo, t_hi = self.cycles_range
        if not (20 <= t_lo <= t_hi <= 10000):
            raise ValueError(f"cycles_range must lie within [20, 10000], got {self.cycles_range}")
        r_lo, r_hi = self.rho_range
        if not (0.0 < r_lo <= r_hi < 1.0):
            raise ValueError(f"rho_range must lie inside (0, 1), got {self.rho_range}")
        if self.drift_magnitude < 0:
            raise ValueError("drift_magnitude must be nonnegative")
        if self.ramp_shape < 0:
            raise ValueError("ramp_shape must be nonnegative")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")


def generate_synthetic(config: SyntheticConfig, seed) -> tuple:
    """Deterministically generate (instances, truths) for the given seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    t_lo, t_hi = config.cycles_range
    r_lo, r_hi = config.rho_range
    instances, truths = [], []
    for unit in range(1, config.num_units + 1):
        cycles = int(rng.integers(t_lo, t_hi + 1))
        rho = float(rng.uniform(r_lo, r_hi))
        change = int(np.clip(int(np.floor(rho * cycles + 0.5)), 1, cycles - 1))
        direction = rng.normal(size=config.dim)
        norm = float(np.linalg.norm(direction))
        while norm == 0.0:  # essentially unreachable; keeps the contract total
            direction = rng.normal(size=config.dim)
            norm = float(np.linalg.norm(direction))
        direction /= norm
        x = rng.normal(size=(cycles, config.dim)) * config.noise_std
        t = np.arange(change + 1, cycles + 1)
        ramp = ((t - change) / (cycles - change)) ** config.ramp_shape
        x[change:] += config.drift_magnitude * ramp[:, None] * direction
        instances.append(
            TimeSeriesInstance(
                unit_id=unit,
                sensors=x,
                op_settings=np.zeros((cycles, CMAPSS_SETTINGS)),
            )
        )
        truths.append(
            SyntheticTruth(
                unit_id=unit,
                true_change_cycle=change,
                cycles=cycles,
                drift_magnitude=config.drift_magnitude,
                drift_direction=direction,
            )
        )
    return instances, truths


def format_truth_csv(truths) -> str:
    lines = ["unit,true_change_cycle,T"]
    for tr in truths:
        lines.append(f"{tr.unit_id},{tr.true_change_cycle},{tr.cycles}")
    return "\n".join(lines) + "\n"


def parse_truth_csv(lines: Iterable[str]) -> dict:
    """Read a truth file back as {unit: (true_change_cycle, T)}."""
    it = iter(lines)
    try:
        header = next(it)
    except StopIteration:
        raise DataError("truth file is empty") from None
    if [c.strip() for c in header.strip().split(",")] != ["unit", "true_change_cycle", "T"]:
        raise DataError("truth file header must be 'unit,true_change_cycle,T'")
    out = {}
    for line_no, raw in enumerate(it, start=2):
        if not raw.strip():
            continue
        tokens = raw.strip().split(",")
        if len(tokens) != 3:
            raise DataError(f"line {line_no}: expected 3 columns")
        unit = _parse_int(tokens[0], "unit id", line_no)
        change = _parse_int(tokens[1], "true_change_cycle", line_no)
        cycles = _parse_int(tokens[2], "T", line_no)
        if not 0 < change < cycles:
            raise DataError(f"line {line_no}: change cycle {change} not inside (0, {cycles})")
        out[unit] = (change, cycles)
    return out
