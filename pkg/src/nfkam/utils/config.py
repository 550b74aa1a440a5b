import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import Literal

import pydantic

from nfkam.core.degeneracy import DEFAULT_DELTA_GRID, DEFAULT_ORDER_CAP, SEEDS_PER_ANGLE
from nfkam.core.ftalgebra import (
    Basis,
    FTSeries,
    PhaseSignature,
    Truncation,
    VarKind,
)
from nfkam.core.kamengine import KamSchedule, Profile
from nfkam.core.lattice import H0Model, PolynomialH0, QuadraticH0, SeriesH0

logger = logging.getLogger(__name__)

EXAMPLES_DIR = Path(__file__).resolve().parents[3] / "config_examples"
BUILTIN_MODELS = ("appendix-a", "appendix-b-i0", "appendix-b-i1", "convex-2dof-resonant")

type BasisName = Literal["cos", "sin"]
type Grade = int | str


def _grade(value: Grade) -> Fraction:
    return Fraction(str(value))


class SignatureSection(pydantic.BaseModel):
    m: int  = pydantic.Field(default=1, ge=1)
    m0: int = pydantic.Field(default=1, ge=0)

    def build(self) -> PhaseSignature:
        return PhaseSignature(self.m, self.m0)


class TruncationSection(pydantic.BaseModel):
    fourier_cutoff: int       = pydantic.Field(default=12, ge=1)
    degree_cutoff: int        = pydantic.Field(default=6, ge=1)
    grade_horizon: str | None = pydantic.Field(default="4")
    prune: float              = pydantic.Field(default=1e-16, ge=0.0)

    def build(self) -> Truncation:
        return Truncation(self.fourier_cutoff, self.degree_cutoff, self.grade_horizon, self.prune)


class LiteralTerm(pydantic.BaseModel):
    k: list[int]
    j: list[int]
    coef: str
    egrade: Grade     = pydantic.Field(default=0)
    basis: BasisName  = pydantic.Field(default="cos")


class HarmonicFactor(pydantic.BaseModel):
    k: list[int]
    basis: BasisName = pydantic.Field(default="cos")


class ExpFactor(pydantic.BaseModel):
    var: Literal["y", "u", "v"] = pydantic.Field(default="y")
    index: int                  = pydantic.Field(default=0, ge=0)
    scale: str                  = pydantic.Field(default="1")


class ProductTerm(pydantic.BaseModel):
    """coef * delta^egrade * prod(harmonics) * prod(exp(scale * w)) * w^j."""

    coef: str                        = pydantic.Field(default="1")
    egrade: Grade                    = pydantic.Field(default=0)
    harmonics: list[HarmonicFactor]  = pydantic.Field(default_factory=list)
    exps: list[ExpFactor]            = pydantic.Field(default_factory=list)
    j: list[int] | None              = pydantic.Field(default=None)


class SeriesSpec(pydantic.BaseModel):
    terms: list[LiteralTerm]    = pydantic.Field(default_factory=list)
    products: list[ProductTerm] = pydantic.Field(default_factory=list)

    def check_dimensions(self, signature: PhaseSignature, where: str) -> None:
        for i, t in enumerate(self.terms):
            if len(t.k) != signature.n_angles or len(t.j) != signature.n_vars:
                raise ConfigValidationError(f"{where}.terms[{i}]: k/j lengths do not match {signature}")
        for i, p in enumerate(self.products):
            for h in p.harmonics:
                if len(h.k) != signature.n_angles:
                    raise ConfigValidationError(f"{where}.products[{i}]: harmonic k={h.k} does not match {signature}")
            if p.j is not None and len(p.j) != signature.n_vars:
                raise ConfigValidationError(f"{where}.products[{i}]: j={p.j} does not match {signature}")

    def build(self, signature: PhaseSignature, truncation: Truncation) -> FTSeries:
        out = FTSeries.from_literal(signature, truncation, [t.model_dump() for t in self.terms])
        for p in self.products:
            factor = FTSeries.constant(signature, truncation, float(p.coef))
            for h in p.harmonics:
                factor = factor.mul(FTSeries.harmonic(signature, truncation, h.k, _basis(h.basis)))
            for e in p.exps:
                factor = factor.mul(FTSeries.exp_taylor(signature, truncation, VarKind(e.var), e.index, float(e.scale)))
            if p.j is not None:
                factor = factor.mul(FTSeries.monomial(signature, truncation, p.j))
            out = out + factor.shift_grade(_grade(p.egrade))
        return out


def _basis(name: BasisName) -> Basis:
    return Basis.SIN if name == "sin" else Basis.COS


class PolynomialTerm(pydantic.BaseModel):
    coef: str
    exponents: list[int]


class H0Spec(pydantic.BaseModel):
    kind: Literal["quadratic", "polynomial", "series"] = pydantic.Field(default="quadratic")
    matrix: list[list[str]]        = pydantic.Field(default_factory=list)
    linear: list[str]              = pydantic.Field(default_factory=list)
    terms: list[PolynomialTerm]    = pydantic.Field(default_factory=list)
    series: SeriesSpec | None      = pydantic.Field(default=None)

    def build(self, d: int, truncation: Truncation) -> H0Model:
        match self.kind:
            case "quadratic":
                a = [[float(v) for v in row] for row in self.matrix]
                b = [float(v) for v in self.linear] if self.linear else None
                return QuadraticH0(a, b)
            case "polynomial":
                return PolynomialH0([(float(t.coef), t.exponents) for t in self.terms])
            case "series":
                assert self.series is not None
                return SeriesH0(self.series.build(PhaseSignature(d, 0), truncation))


class HamiltonianSection(pydantic.BaseModel):
    kind: Literal["reduced", "resonant"]    = pydantic.Field(default="reduced")
    series: SeriesSpec | None               = pydantic.Field(default=None)
    h0: H0Spec | None                       = pydantic.Field(default=None)
    perturbation: SeriesSpec | None         = pydantic.Field(default=None)
    generators: list[list[int]]             = pydantic.Field(default_factory=list)
    base_point: list[str] | None            = pydantic.Field(default=None)
    surface_box: list[list[str]] | None     = pydantic.Field(default=None)

    def box(self) -> tuple[list[float], list[float]]:
        assert self.surface_box is not None
        lo, hi = self.surface_box
        return [float(v) for v in lo], [float(v) for v in hi]


class ScheduleSection(pydantic.BaseModel):
    profile: Literal["paper", "analytic", "practical"] = pydantic.Field(default="practical")
    r0: float            = pydantic.Field(default=1.0, gt=0.0)
    s0: float            = pydantic.Field(default=1.0, gt=0.0, le=1.0)
    gamma0: float        = pydantic.Field(default=1e-2, gt=0.0)
    mu0: float           = pydantic.Field(default=1e-3, gt=0.0)
    tau: float | None    = pydantic.Field(default=None)
    lambda0: float       = pydantic.Field(default=0.5, gt=0.0, lt=1.0)
    sigma: str           = pydantic.Field(default="1/12")
    c0: float            = pydantic.Field(default=1.0, gt=0.0)

    @pydantic.field_validator("profile")
    @classmethod
    def _profile_alias(cls, value: str) -> str:
        return "paper" if value == "analytic" else value

    def build(self, signature: PhaseSignature) -> KamSchedule:
        return KamSchedule.initial(
            signature,
            Profile(self.profile),
            r0=self.r0,
            s0=self.s0,
            gamma0=self.gamma0,
            mu0=self.mu0,
            tau=self.tau,
            lambda0=self.lambda0,
            sigma=Fraction(self.sigma),
            c0=self.c0,
        )


class EngineSection(pydantic.BaseModel):
    steps: int                                              = pydantic.Field(default=2, ge=0)
    mode: Literal["plain", "partial", "isoenergetic"]       = pydantic.Field(default="plain")
    isoenergetic_variant: Literal["full-rank", "degenerate"] = pydantic.Field(default="full-rank")
    shape: Literal["full", "quadratic"]                     = pydantic.Field(default="full")
    lie_order: int                                          = pydantic.Field(default=6, ge=1)
    energy: str | None                                      = pydantic.Field(default=None)
    strict: bool                                            = pydantic.Field(default=False)


class DegeneracySection(pydantic.BaseModel):
    delta_grid: list[float]  = pydantic.Field(default_factory=lambda: list(DEFAULT_DELTA_GRID))
    order_cap: int           = pydantic.Field(default=DEFAULT_ORDER_CAP, ge=1)
    seeds_per_angle: int     = pydantic.Field(default=SEEDS_PER_ANGLE, ge=2)


class VerifySection(pydantic.BaseModel):
    T: float                = pydantic.Field(default=100.0, gt=0.0)
    dt: float               = pydantic.Field(default=0.02, gt=0.0)
    probes: int             = pydantic.Field(default=8, ge=1)


class ConditionsSection(pydantic.BaseModel):
    which: list[str]                    = pydantic.Field(default_factory=list)
    samples: int                        = pydantic.Field(default=8, ge=1)
    measure_box: list[list[float]] | None = pydantic.Field(default=None)
    measure_tau: float                  = pydantic.Field(default=3.0, gt=0.0)
    measure_cutoff: int                 = pydantic.Field(default=30, ge=1)
    measure_samples: int                = pydantic.Field(default=10_000, ge=10_000)
    gammas: list[float]                 = pydantic.Field(default_factory=lambda: [1e-2, 3e-3, 1e-3, 3e-4, 1e-4])


class GoldenCoefficient(pydantic.BaseModel):
    stage: str
    k: list[int]
    j: list[int]
    coef: str
    egrade: Grade      = pydantic.Field(default=0)
    basis: BasisName   = pydantic.Field(default="cos")

    def grade(self) -> Fraction:
        return _grade(self.egrade)

    def label(self) -> str:
        return f"{self.basis} k={self.k} j={self.j} grade {self.egrade}"


class GoldenSection(pydantic.BaseModel):
    tolerance: float                      = pydantic.Field(default=1e-10, gt=0.0)
    coefficients: list[GoldenCoefficient] = pydantic.Field(default_factory=list)
    min_oscillating_grade: int | None     = pydantic.Field(default=None)
    critical_points: list[float]          = pydantic.Field(default_factory=list)
    critical_types: list[Literal["elliptic", "hyperbolic", "mixed", "degenerate"]] = pydantic.Field(default_factory=list)
    noncritical: list[float]              = pydantic.Field(default_factory=list)
    noncritical_coef: str                 = pydantic.Field(default="0")
    noncritical_egrade: Grade             = pydantic.Field(default=2)

    def noncritical_scale(self, delta: float) -> float:
        """Reference gradient size coef * delta^egrade for the non-critical probes."""
        return float(self.noncritical_coef) * delta ** float(_grade(self.noncritical_egrade))


class ModelConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra="forbid", populate_by_name=True)

    schema_ref: str | None           = pydantic.Field(default=None, alias="$schema")
    name: str                        = pydantic.Field(default="custom")
    description: str                 = pydantic.Field(default="")
    signature: SignatureSection      = pydantic.Field(default_factory=SignatureSection)
    truncation: TruncationSection    = pydantic.Field(default_factory=TruncationSection)
    hamiltonian: HamiltonianSection  = pydantic.Field(default_factory=HamiltonianSection)
    epsilon: str                     = pydantic.Field(default="1e-3")
    schedule: ScheduleSection        = pydantic.Field(default_factory=ScheduleSection)
    engine: EngineSection            = pydantic.Field(default_factory=EngineSection)
    degeneracy: DegeneracySection    = pydantic.Field(default_factory=DegeneracySection)
    verify: VerifySection            = pydantic.Field(default_factory=VerifySection)
    conditions: ConditionsSection    = pydantic.Field(default_factory=ConditionsSection)
    seed: int                        = pydantic.Field(default=0, ge=0)
    golden: GoldenSection            = pydantic.Field(default_factory=GoldenSection)

    @property
    def epsilon_value(self) -> float:
        return float(self.epsilon)


ModelConfigTA = pydantic.TypeAdapter(ModelConfig)


class ConfigValidationError(Exception):
    pass


def _format_validation_error(e: pydantic.ValidationError) -> str:
    lines = []
    for err in e.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "; ".join(lines)


def validate_config(config: dict[str, object] | ModelConfig) -> ModelConfig:
    """Validates the configuration and applies the cross-field checks."""
    if isinstance(config, ModelConfig):
        cfg = config
    else:
        try:
            cfg = ModelConfigTA.validate_python(config)
        except pydantic.ValidationError as e:
            raise ConfigValidationError(_format_validation_error(e)) from e

    sig = cfg.signature.build()
    ham = cfg.hamiltonian
    if float(cfg.epsilon) <= 0.0:
        raise ConfigValidationError(f"epsilon must be positive, got {cfg.epsilon}")
    match ham.kind:
        case "reduced":
            if ham.series is None:
                raise ConfigValidationError("hamiltonian.series is required for kind 'reduced'")
            ham.series.check_dimensions(sig, "hamiltonian.series")
        case "resonant":
            d = sig.m + sig.m0
            if ham.h0 is None or ham.perturbation is None:
                raise ConfigValidationError("hamiltonian.h0 and hamiltonian.perturbation are required for kind 'resonant'")
            if len(ham.generators) != sig.m0:
                raise ConfigValidationError(f"expected {sig.m0} resonance generators, got {len(ham.generators)}")
            for i, g in enumerate(ham.generators):
                if len(g) != d:
                    raise ConfigValidationError(f"hamiltonian.generators[{i}] has length {len(g)}, expected d = {d}")
            ham.perturbation.check_dimensions(PhaseSignature(d, 0), "hamiltonian.perturbation")
            if ham.h0.kind == "quadratic" and len(ham.h0.matrix) != d:
                raise ConfigValidationError(f"hamiltonian.h0.matrix must be {d} x {d}")
            if ham.base_point is None and ham.surface_box is None:
                raise ConfigValidationError("kind 'resonant' needs either hamiltonian.base_point or hamiltonian.surface_box")
            if ham.base_point is not None and len(ham.base_point) != d:
                raise ConfigValidationError(f"hamiltonian.base_point must have length {d}")
            if ham.surface_box is not None and (len(ham.surface_box) != 2 or any(len(r) != d for r in ham.surface_box)):
                raise ConfigValidationError(f"hamiltonian.surface_box must be [lo, hi] with {d} entries each")

    grid = sorted(cfg.degeneracy.delta_grid)
    if len(grid) < 4 or grid[0] <= 0.0:
        raise ConfigValidationError("degeneracy.delta_grid needs at least 4 positive values")
    if cfg.engine.mode == "partial" and sig.m0 == 0 and sig.m < 2:
        raise ConfigValidationError("partial mode needs more than one frequency component")
    if cfg.conditions.measure_box is not None and len(cfg.conditions.measure_box) != 2:
        raise ConfigValidationError("conditions.measure_box must be [lo, hi]")
    for i, g in enumerate(cfg.golden.coefficients):
        if len(g.k) != sig.n_angles or len(g.j) != sig.n_vars:
            raise ConfigValidationError(f"golden.coefficients[{i}]: k/j lengths do not match {sig}")
    return cfg


def resolve_config_path(config: str | Path) -> Path:
    """A built-in model name resolves to its file in config_examples/."""
    if isinstance(config, str) and config in BUILTIN_MODELS:
        return EXAMPLES_DIR / f"{config}.json"
    return Path(config)


def load_config(config: str | Path | None = None) -> ModelConfig:
    """
    Load and validate a model configuration from a JSON file or a built-in model name.
    Without an argument, config.json in the working directory is used.
    """
    path = Path.cwd() / "config.json" if config is None else resolve_config_path(config)
    if not path.exists():
        raise ConfigValidationError(f"Config file not found at: {path}")
    logger.debug("loading config from %s", path.absolute())
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigValidationError(f"Invalid JSON in config file {path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    return validate_config(raw)


def dump_config(cfg: ModelConfig) -> str:
    return ModelConfigTA.dump_json(cfg, indent=4, by_alias=True).decode()


def apply_overrides(
    cfg: ModelConfig,
    *,
    steps: int | None = None,
    mode: str | None = None,
    profile: str | None = None,
    strict: bool = False,
    seed: int | None = None,
    delta_grid: list[float] | None = None,
    order_cap: int | None = None,
) -> ModelConfig:
    """Command-line overrides, revalidated as a whole so a bad flag reports like a bad file."""
    raw = cfg.model_dump(mode="json", by_alias=True)
    if steps is not None:
        raw["engine"]["steps"] = steps
    if mode is not None:
        raw["engine"]["mode"] = mode
    if strict:
        raw["engine"]["strict"] = True
    if profile is not None:
        raw["schedule"]["profile"] = profile
    if seed is not None:
        raw["seed"] = seed
    if delta_grid is not None:
        raw["degeneracy"]["delta_grid"] = delta_grid
    if order_cap is not None:
        raw["degeneracy"]["order_cap"] = order_cap
    return validate_config(raw)
