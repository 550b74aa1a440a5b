"""
Truncated Fourier-Taylor series on T^m x R^m x R^{2 m0}.

A series is a sparse map from (grade, basis, k, j) to a real coefficient:

    c * delta^(grade / grade_unit) * {cos|sin}(<k, (x, u)>) * y^j_y u^j_u v^j_v

The wavevector k has m fast components (x) followed by m0 slow components (u), and the
exponent vector j runs over the m + 2*m0 polynomial variables (y, u, v). The slow angle u
doubles as a polynomial variable so a potential can be localized at one of its critical points.
Stored wavevectors are canonical (first nonzero component positive), which makes every
stored series real-valued by construction.
"""

import itertools
import logging
import math
from collections import defaultdict
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from enum import IntEnum, StrEnum
from fractions import Fraction
from functools import cached_property
from typing import Any, NamedTuple, Self

import numpy as np
import numpy.typing as npt
from attrs import field, frozen, validators

from nfkam.core.errors import SignatureMismatch

logger = logging.getLogger(__name__)

PRUNE_THRESHOLD = 1e-16
DEFAULT_FOURIER_CUTOFF = 12
DEFAULT_DEGREE_CUTOFF = 6

type FloatArray = npt.NDArray[np.float64]
type IntVector = tuple[int, ...]


class Basis(IntEnum):
    COS = 0
    SIN = 1


class VarKind(StrEnum):
    X = "x"
    Y = "y"
    U = "u"
    V = "v"


class TruncationShape(StrEnum):
    FULL = "full"
    QUADRATIC = "quadratic"


class HarmonicScope(StrEnum):
    ALL = "all"
    FAST = "fast"


type TermKey = tuple[int, Basis, IntVector, IntVector]


class Term(NamedTuple):
    grade: int
    basis: Basis
    k: IntVector
    j: IntVector
    coef: float


@frozen
class PhaseSignature:
    m: int = field(validator=validators.ge(1))
    m0: int = field(default=0, validator=validators.ge(0))

    @property
    def n_angles(self) -> int:
        return self.m + self.m0

    @property
    def n_vars(self) -> int:
        return self.m + 2 * self.m0

    @property
    def dim(self) -> int:
        """Phase-space dimension; states are ordered (x, y, u, v)."""
        return 2 * (self.m + self.m0)

    def var_index(self, kind: VarKind, index: int = 0) -> int:
        match kind:
            case VarKind.Y:
                return index
            case VarKind.U:
                return self.m + index
            case VarKind.V:
                return self.m + self.m0 + index
            case VarKind.X:
                raise ValueError("x is not a polynomial variable")

    def angle_index(self, kind: VarKind, index: int = 0) -> int:
        match kind:
            case VarKind.X:
                return index
            case VarKind.U:
                return self.m + index
            case _:
                raise ValueError(f"{kind} is not an angle")

    def state_index(self, kind: VarKind, index: int = 0) -> int:
        match kind:
            case VarKind.X:
                return index
            case VarKind.Y:
                return self.m + index
            case VarKind.U:
                return 2 * self.m + index
            case VarKind.V:
                return 2 * self.m + self.m0 + index

    def split_state(self, point: Sequence[float] | FloatArray) -> tuple[FloatArray, FloatArray]:
        """Split a state (x, y, u, v) into (angles (x, u), polynomial variables (y, u, v))."""
        state = np.asarray(point, dtype=float)
        if state.shape[-1] != self.dim:
            raise SignatureMismatch(f"state of length {state.shape[-1]} for signature with dimension {self.dim}")
        m, m0 = self.m, self.m0
        x = state[..., :m]
        y = state[..., m:2 * m]
        u = state[..., 2 * m:2 * m + m0]
        v = state[..., 2 * m + m0:]
        return np.concatenate([x, u], axis=-1), np.concatenate([y, u, v], axis=-1)


def _to_fraction(value: Fraction | int | str | None) -> Fraction | None:
    if value is None:
        return None
    return Fraction(value)


@frozen
class Truncation:
    fourier_cutoff: int = field(default=DEFAULT_FOURIER_CUTOFF, validator=validators.ge(0))
    degree_cutoff: int = field(default=DEFAULT_DEGREE_CUTOFF, validator=validators.ge(0))
    grade_horizon: Fraction | None = field(default=None, converter=_to_fraction)
    prune: float = PRUNE_THRESHOLD

    def meet(self, other: "Truncation") -> "Truncation":
        if self == other:
            return self
        horizons = [h for h in (self.grade_horizon, other.grade_horizon) if h is not None]
        return Truncation(
            fourier_cutoff=min(self.fourier_cutoff, other.fourier_cutoff),
            degree_cutoff=min(self.degree_cutoff, other.degree_cutoff),
            grade_horizon=min(horizons) if horizons else None,
            prune=max(self.prune, other.prune),
        )


@frozen
class DomainParams:
    r: float = field(validator=[validators.ge(0.0), validators.le(1.0)])
    s: float = field(validator=[validators.gt(0.0), validators.le(1.0)])


def _canonical(basis: Basis, k: IntVector, coef: float) -> tuple[IntVector, float] | None:
    for c in k:
        if c > 0:
            return k, coef
        if c < 0:
            return tuple(-c for c in k), (-coef if basis is Basis.SIN else coef)
    if basis is Basis.SIN:
        return None
    return k, coef


class _Accumulator:
    """Collects terms into canonical keys, enforcing cutoffs."""

    def __init__(self, signature: PhaseSignature, truncation: Truncation, grade_unit: int):
        self.signature: PhaseSignature = signature
        self.truncation: Truncation = truncation
        self.grade_unit: int = grade_unit
        self.terms: defaultdict[TermKey, float] = defaultdict(float)
        self.dropped: int = 0
        horizon = truncation.grade_horizon
        self.max_grade: int | None = None if horizon is None else math.floor(horizon * grade_unit)

    def add(self, grade: int, basis: Basis, k: IntVector, j: IntVector, coef: float) -> None:
        if coef == 0.0:
            return
        canon = _canonical(basis, k, coef)
        if canon is None:
            return
        k, coef = canon
        trunc = self.truncation
        if (
            sum(abs(c) for c in k) > trunc.fourier_cutoff
            or sum(j) > trunc.degree_cutoff
            or (self.max_grade is not None and grade > self.max_grade)
        ):
            self.dropped += 1
            return
        self.terms[(grade, basis, k, j)] += coef

    def finish(self) -> "FTSeries":
        prune = self.truncation.prune
        kept = {key: c for key, c in self.terms.items() if abs(c) >= prune}
        return FTSeries(self.signature, self.truncation, kept, self.grade_unit)


@frozen
class _Arrays:
    exponent: FloatArray
    sine: npt.NDArray[np.bool_]
    k: npt.NDArray[np.int64]
    j: npt.NDArray[np.int64]
    coef: FloatArray


@frozen
class FTSeries:
    signature: PhaseSignature
    truncation: Truncation = field(factory=Truncation)
    terms: Mapping[TermKey, float] = field(factory=dict)
    grade_unit: int = field(default=1, validator=validators.ge(1))

    # ---- construction ------------------------------------------------------------------

    @classmethod
    def zero(cls, signature: PhaseSignature, truncation: Truncation | None = None, grade_unit: int = 1) -> Self:
        return cls(signature, truncation or Truncation(), {}, grade_unit)

    @classmethod
    def from_terms(
        cls,
        signature: PhaseSignature,
        truncation: Truncation,
        items: Iterable[tuple[int, Basis, Sequence[int], Sequence[int], float]],
        grade_unit: int = 1,
    ) -> "FTSeries":
        acc = _Accumulator(signature, truncation, grade_unit)
        for grade, basis, k, j, coef in items:
            k, j = tuple(int(c) for c in k), tuple(int(c) for c in j)
            if len(k) != signature.n_angles or len(j) != signature.n_vars:
                raise SignatureMismatch(f"term with k={k}, j={j} does not match {signature}")
            acc.add(int(grade), Basis(basis), k, j, float(coef))
        return acc.finish()

    @classmethod
    def constant(cls, signature: PhaseSignature, truncation: Truncation, value: float, grade: int = 0) -> "FTSeries":
        return cls.from_terms(signature, truncation, [(grade, Basis.COS, (0,) * signature.n_angles, (0,) * signature.n_vars, value)])

    @classmethod
    def monomial(
        cls, signature: PhaseSignature, truncation: Truncation, j: Sequence[int], coef: float = 1.0, grade: int = 0
    ) -> "FTSeries":
        return cls.from_terms(signature, truncation, [(grade, Basis.COS, (0,) * signature.n_angles, j, coef)])

    @classmethod
    def harmonic(
        cls,
        signature: PhaseSignature,
        truncation: Truncation,
        k: Sequence[int],
        basis: Basis = Basis.COS,
        coef: float = 1.0,
        grade: int = 0,
    ) -> "FTSeries":
        return cls.from_terms(signature, truncation, [(grade, basis, k, (0,) * signature.n_vars, coef)])

    @classmethod
    def exp_taylor(
        cls,
        signature: PhaseSignature,
        truncation: Truncation,
        kind: VarKind,
        index: int = 0,
        scale: float = 1.0,
        coef: float = 1.0,
        grade: int = 0,
    ) -> "FTSeries":
        """Taylor expansion of coef * exp(scale * w) up to the degree cutoff."""
        p = signature.var_index(kind, index)
        items: list[tuple[int, Basis, Sequence[int], Sequence[int], float]] = []
        for n in range(truncation.degree_cutoff + 1):
            j = [0] * signature.n_vars
            j[p] = n
            items.append((grade, Basis.COS, (0,) * signature.n_angles, j, coef * scale**n / math.factorial(n)))
        return cls.from_terms(signature, truncation, items)

    def like(self, terms: Mapping[TermKey, float]) -> "FTSeries":
        return FTSeries(self.signature, self.truncation, dict(terms), self.grade_unit)

    def builder(self, truncation: Truncation | None = None, grade_unit: int | None = None) -> _Accumulator:
        return _Accumulator(self.signature, truncation or self.truncation, grade_unit or self.grade_unit)

    def with_truncation(self, truncation: Truncation) -> "FTSeries":
        acc = self.builder(truncation)
        for (g, b, k, j), c in self.terms.items():
            acc.add(g, b, k, j, c)
        return acc.finish()

    def with_grade_unit(self, unit: int) -> "FTSeries":
        if unit % self.grade_unit:
            raise ValueError(f"grade unit {unit} is not a multiple of {self.grade_unit}")
        factor = unit // self.grade_unit
        return FTSeries(
            self.signature,
            self.truncation,
            {(g * factor, b, k, j): c for (g, b, k, j), c in self.terms.items()},
            unit,
        )

    def normalized_unit(self) -> "FTSeries":
        """Reduce the grade unit by the gcd of all stored grades."""
        common = self.grade_unit
        for g, *_ in self.terms:
            common = math.gcd(common, g)
        if common <= 1:
            return self
        return FTSeries(
            self.signature,
            self.truncation,
            {(g // common, b, k, j): c for (g, b, k, j), c in self.terms.items()},
            self.grade_unit // common,
        )

    # ---- inspection --------------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def iter_terms(self) -> Iterator[Term]:
        for (g, b, k, j), c in self.terms.items():
            yield Term(g, b, k, j, c)

    def grade_of(self, grade: int) -> Fraction:
        return Fraction(grade, self.grade_unit)

    def grades(self) -> list[Fraction]:
        return sorted({Fraction(g, self.grade_unit) for g, *_ in self.terms})

    def min_grade(self) -> Fraction | None:
        grades = self.grades()
        return grades[0] if grades else None

    def max_abs_coefficient(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def coefficient(
        self, k: Sequence[int], j: Sequence[int], basis: Basis = Basis.COS, grade: Fraction | int = 0
    ) -> float:
        """Coefficient of a single basis function; k may be given in either orientation."""
        scaled = Fraction(grade) * self.grade_unit
        if scaled.denominator != 1:
            return 0.0
        canon = _canonical(basis, tuple(k), 1.0)
        if canon is None:
            return 0.0
        kk, sign = canon
        return sign * self.terms.get((int(scaled), basis, kk, tuple(j)), 0.0)

    def select(self, predicate: Callable[[Term], bool]) -> "FTSeries":
        return self.like({(t.grade, t.basis, t.k, t.j): t.coef for t in self.iter_terms() if predicate(t)})

    def grade_slice(self, lo: Fraction | int | None = None, hi: Fraction | int | None = None) -> "FTSeries":
        unit = self.grade_unit

        def keep(t: Term) -> bool:
            g = Fraction(t.grade, unit)
            return (lo is None or g >= lo) and (hi is None or g <= hi)

        return self.select(keep)

    # ---- arithmetic --------------------------------------------------------------------

    def _aligned(self, other: "FTSeries") -> tuple["FTSeries", "FTSeries"]:
        if self.signature != other.signature:
            raise SignatureMismatch(f"{self.signature} vs {other.signature}")
        if self.grade_unit == other.grade_unit:
            return self, other
        unit = math.lcm(self.grade_unit, other.grade_unit)
        return self.with_grade_unit(unit), other.with_grade_unit(unit)

    def _combine(self, other: "FTSeries", sign: float) -> "FTSeries":
        a, b = self._aligned(other)
        acc = a.builder(a.truncation.meet(b.truncation))
        for (g, bs, k, j), c in a.terms.items():
            acc.add(g, bs, k, j, c)
        for (g, bs, k, j), c in b.terms.items():
            acc.add(g, bs, k, j, sign * c)
        return acc.finish()

    def __add__(self, other: "FTSeries") -> "FTSeries":
        return self._combine(other, 1.0)

    def __sub__(self, other: "FTSeries") -> "FTSeries":
        return self._combine(other, -1.0)

    def __neg__(self) -> "FTSeries":
        return self.scale(-1.0)

    def scale(self, factor: float) -> "FTSeries":
        acc = self.builder()
        for (g, b, k, j), c in self.terms.items():
            acc.add(g, b, k, j, factor * c)
        return acc.finish()

    def __mul__(self, other: "FTSeries | float | int") -> "FTSeries":
        if isinstance(other, FTSeries):
            return self.mul(other)
        return self.scale(float(other))

    def __rmul__(self, other: float | int) -> "FTSeries":
        return self.scale(float(other))

    def shift_grade(self, by: Fraction | int) -> "FTSeries":
        """Multiply by delta^by."""
        scaled = Fraction(by) * self.grade_unit
        series = self
        if scaled.denominator != 1:
            series = self.with_grade_unit(self.grade_unit * scaled.denominator)
            scaled = Fraction(by) * series.grade_unit
        acc = series.builder()
        for (g, b, k, j), c in series.terms.items():
            acc.add(g + int(scaled), b, k, j, c)
        return acc.finish()

    def mul(self, other: "FTSeries") -> "FTSeries":
        """True product with all terms beyond the cutoffs dropped."""
        a, b = self._aligned(other)
        trunc = a.truncation.meet(b.truncation)
        acc = a.builder(trunc)
        max_degree = trunc.degree_cutoff
        horizon = None if trunc.grade_horizon is None else trunc.grade_horizon * a.grade_unit
        right = list(b.terms.items())
        for (ga, ba, ka, ja), ca in a.terms.items():
            da = sum(ja)
            for (gb, bb, kb, jb), cb in right:
                g = ga + gb
                if horizon is not None and g > horizon:
                    continue
                if da + sum(jb) > max_degree:
                    continue
                j = tuple(p + q for p, q in zip(ja, jb))
                half = 0.5 * ca * cb
                ksum = tuple(p + q for p, q in zip(ka, kb))
                kdiff = tuple(p - q for p, q in zip(ka, kb))
                if ba is Basis.COS and bb is Basis.COS:
                    acc.add(g, Basis.COS, ksum, j, half)
                    acc.add(g, Basis.COS, kdiff, j, half)
                elif ba is Basis.SIN and bb is Basis.SIN:
                    acc.add(g, Basis.COS, kdiff, j, half)
                    acc.add(g, Basis.COS, ksum, j, -half)
                elif ba is Basis.SIN:
                    acc.add(g, Basis.SIN, ksum, j, half)
                    acc.add(g, Basis.SIN, kdiff, j, half)
                else:
                    acc.add(g, Basis.SIN, ksum, j, half)
                    acc.add(g, Basis.SIN, kdiff, j, -half)
        return acc.finish()

    def power(self, n: int) -> "FTSeries":
        result = FTSeries.constant(self.signature, self.truncation, 1.0).with_grade_unit(self.grade_unit)
        for _ in range(n):
            result = result.mul(self)
        return result

    # ---- numerics ----------------------------------------------------------------------

    @cached_property
    def arrays(self) -> _Arrays:
        sig = self.signature
        n = len(self.terms)
        exponent = np.empty(n)
        sine = np.empty(n, dtype=bool)
        ks = np.zeros((n, sig.n_angles), dtype=np.int64)
        js = np.zeros((n, sig.n_vars), dtype=np.int64)
        coef = np.empty(n)
        for i, ((g, b, k, j), c) in enumerate(self.terms.items()):
            exponent[i] = g / self.grade_unit
            sine[i] = b is Basis.SIN
            ks[i] = k
            js[i] = j
            coef[i] = c
        return _Arrays(exponent, sine, ks, js, coef)

    def weights(self, eps: float) -> FloatArray:
        arr = self.arrays
        if eps == 1.0:
            return arr.coef
        return arr.coef * np.power(eps, arr.exponent)

    def evaluate(self, point: Sequence[float] | FloatArray, eps: float = 1.0) -> float:
        """Value of the truncated function at a state (x, y, u, v), with delta = eps."""
        angles, poly = self.signature.split_state(point)
        arr = self.arrays
        if not len(arr.coef):
            return 0.0
        phase = arr.k @ angles
        trig = np.where(arr.sine, np.sin(phase), np.cos(phase))
        mono = np.prod(np.power(poly, arr.j), axis=1)
        return float(np.sum(self.weights(eps) * trig * mono))

    def evaluate_many(self, points: FloatArray, eps: float = 1.0) -> FloatArray:
        angles, poly = self.signature.split_state(points)
        arr = self.arrays
        if not len(arr.coef):
            return np.zeros(points.shape[0])
        phase = angles @ arr.k.T
        trig = np.where(arr.sine, np.sin(phase), np.cos(phase))
        mono = np.prod(np.power(poly[:, None, :], arr.j[None, :, :]), axis=2)
        return (trig * mono) @ self.weights(eps)

    def gradient(self, point: Sequence[float] | FloatArray, eps: float = 1.0) -> FloatArray:
        """State gradient (d/dx, d/dy, d/du, d/dv) evaluated in one vectorized pass."""
        sig = self.signature
        grad = np.zeros(sig.dim)
        arr = self.arrays
        if not len(arr.coef):
            return grad
        angles, poly = sig.split_state(point)
        phase = arr.k @ angles
        sin, cos = np.sin(phase), np.cos(phase)
        trig = np.where(arr.sine, sin, cos)
        dtrig = np.where(arr.sine, cos, -sin)
        powers = np.power(poly, arr.j)
        mono = np.prod(powers, axis=1)
        w = self.weights(eps)
        angle_grad = (w * dtrig * mono) @ arr.k
        poly_grad = np.empty(sig.n_vars)
        lowered = np.where(arr.j > 0, arr.j * np.power(poly, np.maximum(arr.j - 1, 0)), 0.0)
        for i in range(sig.n_vars):
            others = np.prod(np.delete(powers, i, axis=1), axis=1)
            poly_grad[i] = np.sum(w * trig * lowered[:, i] * others)
        m, m0 = sig.m, sig.m0
        grad[:m] = angle_grad[:m]
        grad[m:2 * m] = poly_grad[:m]
        grad[2 * m:2 * m + m0] = angle_grad[m:] + poly_grad[m:m + m0]
        grad[2 * m + m0:] = poly_grad[m + m0:]
        return grad

    def at_scale(self, eps: float) -> "FTSeries":
        """Substitute a numeric delta, collapsing every grade to zero."""
        acc = self.builder(grade_unit=1)
        for (g, b, k, j), c in self.terms.items():
            acc.add(0, b, k, j, c * eps ** (g / self.grade_unit))
        return acc.finish()

    # ---- literal form ------------------------------------------------------------------

    def to_literal(self) -> list[dict[str, object]]:
        records: list[tuple[tuple[object, ...], dict[str, object]]] = []
        for t in self.iter_terms():
            grade = Fraction(t.grade, self.grade_unit)
            egrade: int | str = int(grade) if grade.denominator == 1 else str(grade)
            record: dict[str, object] = {
                "k": list(t.k),
                "j": list(t.j),
                "coef": repr(t.coef),
                "egrade": egrade,
                "basis": "sin" if t.basis is Basis.SIN else "cos",
            }
            order = (grade, sum(abs(c) for c in t.k), t.k, int(t.basis), t.j)
            records.append((order, record))
        records.sort(key=lambda item: item[0])
        return [record for _, record in records]

    @classmethod
    def from_literal(
        cls, signature: PhaseSignature, truncation: Truncation, records: Iterable[Mapping[str, Any]]
    ) -> "FTSeries":
        parsed: list[tuple[Fraction, Basis, Sequence[int], Sequence[int], float]] = []
        for record in records:
            grade = Fraction(str(record.get("egrade", 0)))
            basis = Basis.SIN if str(record.get("basis", "cos")) == "sin" else Basis.COS
            k = [int(c) for c in record["k"]]
            j = [int(c) for c in record["j"]]
            parsed.append((grade, basis, k, j, float(str(record["coef"]))))
        unit = 1
        for grade, *_ in parsed:
            unit = math.lcm(unit, grade.denominator)
        return cls.from_terms(
            signature,
            truncation,
            ((int(g * unit), b, k, j, c) for g, b, k, j, c in parsed),
            grade_unit=unit,
        )


# ---- module-level operations -----------------------------------------------------------


class ArithOp(StrEnum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    SCALE = "scale"


def arith(a: FTSeries, b: FTSeries | float, op: ArithOp) -> FTSeries:
    """
    Raises:
        TypeError: a series where SCALE expects a number, or a number where the others expect a series
        SignatureMismatch: the operands live on different phase spaces
    """
    if not isinstance(a, FTSeries):
        raise TypeError(f"left operand must be a series, got {type(a).__name__}")
    op = ArithOp(op)
    if op is ArithOp.SCALE:
        if isinstance(b, FTSeries):
            raise TypeError("scale takes a number, got a series")
        return a.scale(float(b))
    if not isinstance(b, FTSeries):
        raise TypeError(f"{op} takes two series, got {type(b).__name__}")
    match op:
        case ArithOp.ADD:
            return a + b
        case ArithOp.SUB:
            return a - b
        case ArithOp.MUL:
            return a.mul(b)


def partial(series: FTSeries, kind: VarKind, index: int = 0) -> FTSeries:
    """Exact termwise derivative. For u both the angle and the polynomial dependence contribute."""
    sig = series.signature
    acc = series.builder()
    angle = sig.angle_index(kind, index) if kind in (VarKind.X, VarKind.U) else None
    var = sig.var_index(kind, index) if kind is not VarKind.X else None
    for (g, b, k, j), c in series.terms.items():
        if angle is not None and k[angle]:
            if b is Basis.COS:
                acc.add(g, Basis.SIN, k, j, -k[angle] * c)
            else:
                acc.add(g, Basis.COS, k, j, k[angle] * c)
        if var is not None and j[var]:
            lowered = j[:var] + (j[var] - 1,) + j[var + 1:]
            acc.add(g, b, k, lowered, j[var] * c)
    return acc.finish()


def poisson_bracket(f: FTSeries, g: FTSeries) -> FTSeries:
    """{f, g} = sum f_x g_y - f_y g_x + sum f_u g_v - f_v g_u."""
    if f.signature != g.signature:
        raise SignatureMismatch(f"{f.signature} vs {g.signature}")
    sig = f.signature
    out = FTSeries.zero(sig, f.truncation.meet(g.truncation), math.lcm(f.grade_unit, g.grade_unit))
    if f.is_zero or g.is_zero:
        return out
    pairs = [(VarKind.X, VarKind.Y, i) for i in range(sig.m)] + [(VarKind.U, VarKind.V, i) for i in range(sig.m0)]
    for q, p, i in pairs:
        out = out + partial(f, q, i).mul(partial(g, p, i)) - partial(f, p, i).mul(partial(g, q, i))
    return out


def average(series: FTSeries) -> FTSeries:
    """Mean over the fast angles x (the k_x = 0 slice)."""
    m = series.signature.m
    return series.select(lambda t: not any(t.k[:m]))


def oscillating(series: FTSeries) -> FTSeries:
    m = series.signature.m
    return series.select(lambda t: any(t.k[:m]))


def split_slow_harmonics(series: FTSeries) -> tuple[FTSeries, FTSeries]:
    """Split into (no u-harmonics, with u-harmonics)."""
    m = series.signature.m
    free = series.select(lambda t: not any(t.k[m:]))
    return free, series - free


def weighted_norm(series: FTSeries, dom: DomainParams, eps: float = 1.0) -> float:
    """Majorant norm sum |c| eps^grade e^{|k| r} s^{|j|}; bounds sup |F| on D(r, s)."""
    arr = series.arrays
    if not len(arr.coef):
        return 0.0
    kabs = np.abs(arr.k).sum(axis=1)
    jabs = arr.j.sum(axis=1)
    return float(np.sum(np.abs(series.weights(eps)) * np.exp(kabs * dom.r) * dom.s**jabs))


def truncate(
    series: FTSeries,
    fourier_cutoff: int,
    degree_cutoff: int,
    shape: TruncationShape = TruncationShape.FULL,
    scope: HarmonicScope = HarmonicScope.ALL,
) -> tuple[FTSeries, FTSeries]:
    """Partition into (head, tail) with head + tail == series exactly."""
    trunc = series.truncation
    if fourier_cutoff > trunc.fourier_cutoff or degree_cutoff > trunc.degree_cutoff:
        raise ValueError(
            f"truncate({fourier_cutoff}, {degree_cutoff}) exceeds series cutoffs "
            + f"({trunc.fourier_cutoff}, {trunc.degree_cutoff})"
        )
    m = series.signature.m
    max_degree = min(degree_cutoff, 2) if shape is TruncationShape.QUADRATIC else degree_cutoff

    def in_head(t: Term) -> bool:
        k = t.k[:m] if scope is HarmonicScope.FAST else t.k
        return sum(abs(c) for c in k) <= fourier_cutoff and sum(t.j) <= max_degree

    head = series.select(in_head)
    tail = series.select(lambda t: not in_head(t))
    return head, tail


def evaluate(series: FTSeries, point: Sequence[float] | FloatArray, eps: float = 1.0) -> float:
    return series.evaluate(point, eps)


def translate(
    series: FTSeries,
    y: Sequence[float] | FloatArray | None = None,
    u: Sequence[float] | FloatArray | None = None,
    v: Sequence[float] | FloatArray | None = None,
) -> FTSeries:
    """G(x, y, u, v) = F(x, y + y0, u + u0, v + v0); u0 shifts both the phase and the polynomial part."""
    sig = series.signature
    shift = np.zeros(sig.n_vars)
    phase = np.zeros(sig.m0)
    if y is not None:
        shift[: sig.m] = y
    if u is not None:
        shift[sig.m:sig.m + sig.m0] = u
        phase[:] = u
    if v is not None:
        shift[sig.m + sig.m0:] = v
    acc = series.builder()
    m = sig.m
    for (g, b, k, j), c in series.terms.items():
        alpha = float(np.dot(k[m:], phase)) if sig.m0 else 0.0
        if alpha:
            ca, sa = math.cos(alpha), math.sin(alpha)
            if b is Basis.COS:
                pieces = [(Basis.COS, c * ca), (Basis.SIN, -c * sa)]
            else:
                pieces = [(Basis.SIN, c * ca), (Basis.COS, c * sa)]
        else:
            pieces = [(b, c)]
        expansions: list[list[tuple[int, float]]] = []
        for i, ji in enumerate(j):
            if ji and shift[i]:
                expansions.append([(l, math.comb(ji, l) * shift[i] ** (ji - l)) for l in range(ji + 1)])
            else:
                expansions.append([(ji, 1.0)])
        for combo in itertools.product(*expansions):
            jj = tuple(l for l, _ in combo)
            factor = math.prod(f for _, f in combo)
            for basis, coef in pieces:
                acc.add(g, basis, k, jj, coef * factor)
    return acc.finish()


def _slow_taylor(signature: PhaseSignature, truncation: Truncation, k_slow: IntVector) -> tuple[FTSeries, FTSeries]:
    """Taylor polynomials of cos(<k, u>) and sin(<k, u>) in the polynomial u variables."""
    items = []
    for i, c in enumerate(k_slow):
        if c:
            j = [0] * signature.n_vars
            j[signature.var_index(VarKind.U, i)] = 1
            items.append((0, Basis.COS, (0,) * signature.n_angles, j, float(c)))
    linear = FTSeries.from_terms(signature, truncation, items)
    cos_part = FTSeries.zero(signature, truncation)
    sin_part = FTSeries.zero(signature, truncation)
    power = FTSeries.constant(signature, truncation, 1.0)
    for n in range(truncation.degree_cutoff + 1):
        term = power.scale(1.0 / math.factorial(n))
        sign = -1.0 if (n // 2) % 2 else 1.0
        if n % 2 == 0:
            cos_part = cos_part + term.scale(sign)
        else:
            sin_part = sin_part + term.scale(sign)
        power = power.mul(linear)
    return cos_part, sin_part


def localize_angles(series: FTSeries) -> FTSeries:
    """Replace every u-harmonic by its Taylor polynomial in u about u = 0."""
    sig = series.signature
    trunc = series.truncation
    m = sig.m
    free, harmonic = split_slow_harmonics(series)
    out = free
    cache: dict[IntVector, tuple[FTSeries, FTSeries]] = {}
    for t in harmonic.iter_terms():
        k_fast, k_slow = t.k[:m], t.k[m:]
        if k_slow not in cache:
            cache[k_slow] = _slow_taylor(sig, trunc, k_slow)
        cos_u, sin_u = cache[k_slow]
        kx = k_fast + (0,) * sig.m0
        cos_x = FTSeries.harmonic(sig, trunc, kx, Basis.COS)
        sin_x = FTSeries.harmonic(sig, trunc, kx, Basis.SIN)
        if t.basis is Basis.COS:
            angular = cos_x.mul(cos_u) - sin_x.mul(sin_u)
        else:
            angular = sin_x.mul(cos_u) + cos_x.mul(sin_u)
        mono = FTSeries.from_terms(sig, trunc, [(t.grade, Basis.COS, (0,) * sig.n_angles, t.j, t.coef)], series.grade_unit)
        out = out + angular.mul(mono)
    return out


def linear_form(signature: PhaseSignature, truncation: Truncation, coefficients: Sequence[float]) -> FTSeries:
    """Polynomial series sum_i c_i w_i over the (y, u, v) variables."""
    items = []
    for i, c in enumerate(coefficients):
        if c:
            j = [0] * signature.n_vars
            j[i] = 1
            items.append((0, Basis.COS, (0,) * signature.n_angles, j, float(c)))
    return FTSeries.from_terms(signature, truncation, items)


def quadratic_form(signature: PhaseSignature, truncation: Truncation, matrix: FloatArray, grade: int = 0) -> FTSeries:
    """Polynomial series (1/2) <w, A w> over the (y, u, v) variables."""
    n = signature.n_vars
    items = []
    for a in range(n):
        for b in range(a, n):
            coef = 0.5 * matrix[a, a] if a == b else 0.5 * (matrix[a, b] + matrix[b, a])
            if coef:
                j = [0] * n
                j[a] += 1
                j[b] += 1
                items.append((grade, Basis.COS, (0,) * signature.n_angles, j, float(coef)))
    return FTSeries.from_terms(signature, truncation, items)


def polynomial_degree_parts(series: FTSeries) -> dict[int, FTSeries]:
    parts: dict[int, dict[TermKey, float]] = defaultdict(dict)
    for (g, b, k, j), c in series.terms.items():
        parts[sum(j)][(g, b, k, j)] = c
    return {d: series.like(terms) for d, terms in sorted(parts.items())}
