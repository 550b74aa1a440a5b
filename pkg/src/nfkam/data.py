import math
from typing import Any, Literal, TypedDict

import numpy as np
import pydantic

type StageStatus = Literal["pass", "fail", "skipped"]


def finite(value: float | None) -> float | None:
    """Non-finite floats are stored as null."""
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def jsonable(value: Any) -> pydantic.JsonValue:
    """Plain JSON tree for diagnostic payloads that may hold numpy values."""
    match value:
        case bool() | str() | None:
            return value
        case int() | np.integer():
            return int(value)
        case float() | np.floating():
            return finite(float(value))
        case complex() | np.complexfloating():
            return [finite(value.real), finite(value.imag)]
        case np.ndarray():
            return jsonable(value.tolist())
        case dict():
            return {str(k): jsonable(v) for k, v in value.items()}
        case list() | tuple():
            return [jsonable(v) for v in value]
        case _:
            return str(value)


class SeriesTerm(TypedDict):
    k: list[int]
    j: list[int]
    coef: str
    egrade: int | str
    basis: Literal["cos", "sin"]


SeriesTermTA = pydantic.TypeAdapter(list[SeriesTerm])


class FrameRecord(pydantic.BaseModel):
    d: int
    m0: int
    generators: list[list[int]]
    K0: list[int]
    flipped_column: int | None = None


class ReductionRecord(pydantic.BaseModel):
    frame: FrameRecord | None = None
    y0: list[float] = pydantic.Field(default_factory=list)
    omega_star: list[float] = pydantic.Field(default_factory=list)
    gamma: list[list[float]] = pydantic.Field(default_factory=list)
    delta: float
    epsilon: float
    terms: int


class ScheduleRecord(pydantic.BaseModel):
    nu: int
    r: float
    s: float
    gamma: float
    mu: float
    K_plus: int
    flags: list[str] = pydantic.Field(default_factory=list)


class StepRecord(pydantic.BaseModel):
    nu: int
    schedule: ScheduleRecord
    generator: list[SeriesTerm]
    shift: list[float]
    t: float | None = None
    pre_norm: float | None
    post_norm: float | None
    tail_norm: float | None
    minimal_divisor: float | None
    homological_residual: float | None
    shift_residual: float | None
    drift: list[float]
    drift_constant: float | None
    lie_order: int
    lie_remainder: float | None
    conditions: dict[str, bool] = pydantic.Field(default_factory=dict)
    flags: list[str] = pydantic.Field(default_factory=list)


class ConditionEntryRecord(pydantic.BaseModel):
    name: str
    holds: bool
    witness: dict[str, pydantic.JsonValue] = pydantic.Field(default_factory=dict)


class MeasureRecord(pydantic.BaseModel):
    gammas: list[float]
    fractions: list[float]
    stderrs: list[float]
    slope: float | None
    slope_halfwidth: float | None
    censored: bool
    samples: int
    seed: int


class CriticalPointRecord(pydantic.BaseModel):
    u: list[float]
    gradient_residual: float
    morse_index: int
    kind: str | None
    eigenvalues: list[list[float | None]] = pydantic.Field(default_factory=list)
    flags: list[str] = pydantic.Field(default_factory=list)


class DegeneracyRecord(pydantic.BaseModel):
    critical_points: list[CriticalPointRecord] = pydantic.Field(default_factory=list)
    euler_sum: int = 0
    euler_ok: bool = True
    count_ok: bool = True
    order: int | None = None
    sigma_bar: float | None = None
    slope: float | None = None
    residual: float | None = None
    samples: list[tuple[float, float]] = pydantic.Field(default_factory=list)
    error: str | None = None


class TorusRecord(pydantic.BaseModel):
    u_star: list[float]
    predicted_frequency: list[float]
    residual: float | None = None
    per_probe: list[float | None] = pydantic.Field(default_factory=list)
    period: float | None = None
    measured_frequency: list[float] = pydantic.Field(default_factory=list)
    energy_drift: float | None = None
    energy_oscillation: float | None = None


class CheckRecord(pydantic.BaseModel):
    label: str
    expected: float | None
    actual: float | None
    tolerance: float
    passed: bool


class RegressionStageRecord(pydantic.BaseModel):
    name: str
    passed: bool
    checks: list[CheckRecord] = pydantic.Field(default_factory=list)
    detail: dict[str, pydantic.JsonValue] = pydantic.Field(default_factory=dict)
    error: str | None = None


class RegressionRecord(pydantic.BaseModel):
    model: str
    passed: bool
    stages: list[RegressionStageRecord]


class StageRecord(pydantic.BaseModel):
    name: str
    status: StageStatus
    message: str = ""
    gate_failures: list[str] = pydantic.Field(default_factory=list)


class DeterministicSection(pydantic.BaseModel):
    """Outputs that must reproduce bit-for-bit from the config snapshot and seed."""

    stages: list[StageRecord] = pydantic.Field(default_factory=list)
    reduction: ReductionRecord | None = None
    conditions: list[ConditionEntryRecord] = pydantic.Field(default_factory=list)
    measure: MeasureRecord | None = None
    steps: list[StepRecord] = pydantic.Field(default_factory=list)
    degeneracy: DegeneracyRecord | None = None
    tori: list[TorusRecord] = pydantic.Field(default_factory=list)
    regression: RegressionRecord | None = None


class RunArtifact(pydantic.BaseModel):
    tool_version: str
    subcommand: str
    strict: bool = False
    config: dict[str, pydantic.JsonValue]
    deterministic: DeterministicSection = pydantic.Field(default_factory=DeterministicSection)
    timing: dict[str, float] = pydantic.Field(default_factory=dict)

    @property
    def gate_failures(self) -> list[str]:
        return [f"{s.name}: {g}" for s in self.deterministic.stages for g in s.gate_failures]

    @property
    def failed(self) -> bool:
        return any(s.status == "fail" for s in self.deterministic.stages)


RunArtifactTA = pydantic.TypeAdapter(RunArtifact)
DeterministicSectionTA = pydantic.TypeAdapter(DeterministicSection)
