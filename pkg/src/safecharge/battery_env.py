"""Reduced-order lithium-ion cell simulator.

State of charge follows coulomb counting, the terminal voltage is an
open-circuit-voltage lookup plus an ohmic drop, and the cell temperature is a
lumped thermal ODE integrated with explicit Euler:

    m c_P dT/dt = (T_amb - T) / R_th + Q
    Q = I (OCV - V) - I T dOCV/dT

Charging current is negative. The agent sees a normalized 3-vector
(temperature, voltage, SoC).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


# 35 degC, the safe-temperature line.
T_SAFE_K = 308.15
V_SAFE_V = 4.2
STEP_PENALTY = -0.1
V_PENALTY = 100.0
T_PENALTY = 5.0

DEFAULT_OCV_TABLE: tuple[tuple[float, float], ...] = (
    (0.0, 2.2),
    (0.1, 3.0),
    (0.5, 3.6),
    (0.8, 3.9),
    (1.0, 4.25),
)


class ConfigError(ValueError):
    """Raised for invalid or unparsable battery configurations."""

    def __init__(self, message: str, field_name: str | None = None, line: int | None = None):
        self.field_name = field_name
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field '{field_name}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class BatteryConfig:
    """Physical and safety parameters of one cell configuration."""

    capacity_ah: float = 1.5
    mass_kg: float = 0.045
    specific_heat: float = 1000.0
    thermal_resistance: float = 5.0
    ambient_temp_k: float = 298.15
    internal_resistance_ohm: float = 0.05
    entropy_coeff_v_per_k: float = -1e-4
    ocv_table: tuple[tuple[float, float], ...] = DEFAULT_OCV_TABLE
    v_min: float = 2.0
    v_max: float = 4.4
    v_safe: float = V_SAFE_V
    t_safe_k: float = T_SAFE_K
    i_max_a: float = 4.2
    initial_voltage_v: float = 2.5
    initial_temp_k: float = 298.15
    dt_s: float = 10.0
    soc_target: float = 0.8
    max_steps: int = 180
    name: str = field(default="default", compare=False)

    def __post_init__(self) -> None:
        table = tuple((float(s), float(v)) for s, v in self.ocv_table)
        object.__setattr__(self, "ocv_table", table)
        self.validate()

    def validate(self) -> None:
        for key in ("capacity_ah", "mass_kg", "specific_heat", "thermal_resistance", "dt_s", "i_max_a"):
            value = getattr(self, key)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"must be positive and finite, got {value!r}", key)
        for key in ("ambient_temp_k", "initial_temp_k", "t_safe_k"):
            value = getattr(self, key)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"must be a positive temperature in kelvin, got {value!r}", key)
        if self.internal_resistance_ohm < 0:
            raise ConfigError("must be non-negative", "internal_resistance_ohm")
        if not math.isfinite(self.entropy_coeff_v_per_k):
            raise ConfigError("must be finite", "entropy_coeff_v_per_k")

        table = self.ocv_table
        if len(table) < 2:
            raise ConfigError("needs at least two (soc, voltage) knots", "ocv_table")
        socs = [s for s, _ in table]
        volts = [v for _, v in table]
        if socs[0] != 0.0 or socs[-1] != 1.0:
            raise ConfigError("first SoC knot must be 0 and last must be 1", "ocv_table")
        if any(b <= a for a, b in zip(socs, socs[1:])) or any(b <= a for a, b in zip(volts, volts[1:])):
            raise ConfigError("must be strictly increasing in SoC and voltage", "ocv_table")

        if not self.v_min <= self.initial_voltage_v <= self.v_safe <= self.v_max:
            raise ConfigError(
                "require v_min <= initial_voltage_v <= v_safe <= v_max "
                f"(got {self.v_min}, {self.initial_voltage_v}, {self.v_safe}, {self.v_max})",
                "initial_voltage_v",
            )
        if not volts[0] <= self.initial_voltage_v <= volts[-1]:
            raise ConfigError("outside the OCV table's voltage range", "initial_voltage_v")
        if not 0.0 < self.soc_target <= 1.0:
            raise ConfigError("must lie in (0, 1]", "soc_target")
        if int(self.max_steps) != self.max_steps or self.max_steps <= 0:
            raise ConfigError("must be a positive integer", "max_steps")

    @property
    def thermal_time_constant_s(self) -> float:
        return self.mass_kg * self.specific_heat * self.thermal_resistance

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["ocv_table"] = [list(p) for p in self.ocv_table]
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any], name: str | None = None) -> "BatteryConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError("unknown field", unknown[0])
        missing = sorted(k for k in known if k != "name" and k not in data)
        if missing:
            raise ConfigError("missing required field", missing[0])
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key == "ocv_table":
                try:
                    value = tuple((float(s), float(v)) for s, v in value)
                except (TypeError, ValueError):
                    raise ConfigError("must be a list of [soc, voltage] pairs", key) from None
            elif key == "max_steps":
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError("must be an integer", key)
            elif key == "name":
                value = str(value)
            else:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"must be a number, got {value!r}", key)
                value = float(value)
            kwargs[key] = value
        if name is not None and "name" not in kwargs:
            kwargs["name"] = name
        return cls(**kwargs)


def load_config(path: str | Path) -> BatteryConfig:
    """Read one battery configuration from a TOML file.

    Every BatteryConfig field except ``name`` must be present; ``name``
    defaults to the file stem.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc), line=getattr(exc, "lineno", None) or _lineno_from_message(str(exc))) from None
    try:
        return BatteryConfig.from_dict(data, name=path.stem)
    except ConfigError as exc:
        if exc.field_name is not None and exc.line is None:
            line = _field_line(text, exc.field_name)
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.field_name, line) from None
        raise


def dump_config(config: BatteryConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if key == "ocv_table":
            pairs = ", ".join(f"[{s!r}, {v!r}]" for s, v in value)
            lines.append(f"{key} = [{pairs}]")
        elif isinstance(value, str):
            lines.append(f'{key} = "{value}"')
        else:
            lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"


def _field_line(text: str, key: str) -> int | None:
    for i, line in enumerate(text.splitlines(), start=1):
        if line.split("=", 1)[0].strip() == key:
            return i
    return None


def _lineno_from_message(message: str) -> int | None:
    marker = "line "
    if marker in message:
        digits = message.split(marker, 1)[1].split()[0].strip("),")
        if digits.isdigit():
            return int(digits)
    return None


@dataclass(frozen=True)
class BatteryState:
    soc: float
    temp_k: float
    voltage_v: float
    step_count: int = 0
    time_s: float = 0.0


@dataclass(frozen=True)
class StepOutcome:
    next_observation: np.ndarray
    reward: float
    done: bool
    t_violation: float
    v_violation: float
    unsafe: bool
    # soc_target reached; `done` without `terminal` is a time-limit cut.
    terminal: bool = False


# ---------------------------------------------------------------------------
# Cell physics
# ---------------------------------------------------------------------------


def ocv(soc: float, config: BatteryConfig) -> float:
    """Open-circuit voltage by piecewise-linear interpolation (SoC clamped to [0, 1])."""
    soc = min(max(soc, 0.0), 1.0)
    table = config.ocv_table
    for (s0, v0), (s1, v1) in zip(table, table[1:]):
        if soc <= s1:
            return v0 + (v1 - v0) * (soc - s0) / (s1 - s0)
    return table[-1][1]


def inverse_ocv(voltage: float, config: BatteryConfig) -> float:
    table = config.ocv_table
    if not table[0][1] <= voltage <= table[-1][1]:
        raise ConfigError(f"voltage {voltage} outside OCV table range", "initial_voltage_v")
    for (s0, v0), (s1, v1) in zip(table, table[1:]):
        if voltage <= v1:
            return s0 + (s1 - s0) * (voltage - v0) / (v1 - v0)
    return 1.0


def terminal_voltage(soc: float, current_a: float, config: BatteryConfig) -> float:
    return ocv(soc, config) - current_a * config.internal_resistance_ohm


def heat_generation(current_a: float, state: BatteryState, config: BatteryConfig) -> float:
    """Heat generation rate in watts: irreversible term plus reversible entropic term."""
    open_circuit = ocv(state.soc, config)
    v_loaded = terminal_voltage(state.soc, current_a, config)
    return current_a * (open_circuit - v_loaded) - current_a * state.temp_k * config.entropy_coeff_v_per_k


def violations(temp_k: float, voltage_v: float, config: BatteryConfig) -> tuple[float, float]:
    return max(0.0, temp_k - config.t_safe_k), max(0.0, voltage_v - config.v_safe)


def is_unsafe(temp_k: float, voltage_v: float, config: BatteryConfig) -> bool:
    # The boundary itself counts as unsafe.
    return temp_k >= config.t_safe_k or voltage_v >= config.v_safe


def reward_from_violations(t_violation: float, v_violation: float) -> float:
    return -V_PENALTY * v_violation - T_PENALTY * t_violation + STEP_PENALTY


def observe(state: BatteryState) -> np.ndarray:
    """Fixed normalization keeping network inputs O(1)."""
    return np.array([(state.temp_k - 273.15) / 50.0, state.voltage_v / 5.0, state.soc])


def reset(config: BatteryConfig) -> BatteryState:
    soc = inverse_ocv(config.initial_voltage_v, config)
    return BatteryState(soc=soc, temp_k=config.initial_temp_k, voltage_v=config.initial_voltage_v)


def step(state: BatteryState, current_a: float, config: BatteryConfig) -> tuple[BatteryState, StepOutcome]:
    current_a = float(current_a)
    if not (-config.i_max_a <= current_a <= 0.0):
        raise ValueError(f"current {current_a} A outside [-{config.i_max_a}, 0]")
    dt = config.dt_s

    soc = state.soc - current_a * dt / (3600.0 * config.capacity_ah)
    soc = min(max(soc, 0.0), 1.0)

    q_dot = heat_generation(current_a, state, config)
    heat_flow = (config.ambient_temp_k - state.temp_k) / config.thermal_resistance + q_dot
    temp = state.temp_k + dt / (config.mass_kg * config.specific_heat) * heat_flow

    voltage = terminal_voltage(soc, current_a, config)
    steps = state.step_count + 1
    new_state = BatteryState(soc=soc, temp_k=temp, voltage_v=voltage, step_count=steps, time_s=steps * dt)

    t_viol, v_viol = violations(temp, voltage, config)
    terminal = soc >= config.soc_target
    outcome = StepOutcome(
        next_observation=observe(new_state),
        reward=reward_from_violations(t_viol, v_viol),
        done=terminal or steps >= config.max_steps,
        t_violation=t_viol,
        v_violation=v_viol,
        unsafe=is_unsafe(temp, voltage, config),
        terminal=terminal,
    )
    return new_state, outcome


class BatteryEnv:
    """Stateful wrapper around :func:`reset` / :func:`step`."""

    def __init__(self, config: BatteryConfig):
        self.config = config
        self.state = reset(config)

    def reset(self) -> np.ndarray:
        self.state = reset(self.config)
        return observe(self.state)

    def step(self, current_a: float) -> StepOutcome:
        self.state, outcome = step(self.state, current_a, self.config)
        return outcome
