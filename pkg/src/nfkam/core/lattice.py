"""
Resonance reduction: unimodular completion of a resonance subgroup, sampling of the
resonant surface, and the change of variables that splits fast and slow angles.
"""

import itertools
import logging
import math
from collections.abc import Sequence
from fractions import Fraction
from typing import Protocol

import numpy as np
from attrs import field, frozen

from nfkam.core.errors import CompletionError, DependentGenerators, OffSurfaceError
from nfkam.data import FrameRecord
from nfkam.core.ftalgebra import (
    Basis,
    FloatArray,
    FTSeries,
    PhaseSignature,
    Truncation,
    VarKind,
    average,
    linear_form,
    partial,
    translate,
)
from nfkam.utils.parallel import ordered_map

logger = logging.getLogger(__name__)

SURFACE_SEEDS_PER_DIM = 16
SURFACE_MAX_SEEDS = 4096
SURFACE_TOLERANCE = 1e-12
SURFACE_ACCEPT = 1e-10
SURFACE_MAX_ITER = 50
OFF_SURFACE_TOLERANCE = 1e-8

type IntMatrix = list[list[int]]


# ---- exact integer helpers -------------------------------------------------------------


def xgcd(a: int, b: int) -> tuple[int, int, int]:
    """Return (x, y, g) with x*a + y*b == g == gcd(a, b) up to sign."""
    x, next_x = 1, 0
    y, next_y = 0, 1
    g, next_g = a, b
    while next_g:
        q = g // next_g
        x, next_x = next_x, x - q * next_x
        y, next_y = next_y, y - q * next_y
        g, next_g = next_g, g - q * next_g
    if g < 0:
        x, y, g = -x, -y, -g
    return x, y, g


def integer_det(matrix: Sequence[Sequence[int]]) -> int:
    """Fraction-free (Bareiss) determinant."""
    a = [list(row) for row in matrix]
    n = len(a)
    if n == 0:
        return 1
    sign = 1
    prev = 1
    for i in range(n - 1):
        if a[i][i] == 0:
            swap = next((r for r in range(i + 1, n) if a[r][i] != 0), None)
            if swap is None:
                return 0
            a[i], a[swap] = a[swap], a[i]
            sign = -sign
        for r in range(i + 1, n):
            for c in range(i + 1, n):
                a[r][c] = (a[r][c] * a[i][i] - a[r][i] * a[i][c]) // prev
        prev = a[i][i]
    return sign * a[n - 1][n - 1]


def exact_inverse(matrix: Sequence[Sequence[int]]) -> list[list[Fraction]]:
    n = len(matrix)
    a = [[Fraction(v) for v in row] + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(matrix)]
    for col in range(n):
        pivot = next((r for r in range(col, n) if a[r][col] != 0), None)
        if pivot is None:
            raise ZeroDivisionError("singular integer matrix")
        a[col], a[pivot] = a[pivot], a[col]
        p = a[col][col]
        a[col] = [v / p for v in a[col]]
        for r in range(n):
            if r != col and a[r][col] != 0:
                f = a[r][col]
                a[r] = [v - f * w for v, w in zip(a[r], a[col])]
    return [row[n:] for row in a]


def determinantal_divisors(columns: Sequence[Sequence[int]]) -> list[int]:
    """d_k = gcd of all k x k minors of the d x m0 matrix whose columns are given."""
    d, m0 = len(columns[0]), len(columns)
    out: list[int] = []
    for size in range(1, m0 + 1):
        g = 0
        for rows in itertools.combinations(range(d), size):
            for cols in itertools.combinations(range(m0), size):
                g = math.gcd(g, integer_det([[columns[c][r] for c in cols] for r in rows]))
        out.append(g)
    return out


def invariant_factors(columns: Sequence[Sequence[int]]) -> list[int]:
    divisors = determinantal_divisors(columns)
    factors: list[int] = []
    prev = 1
    for dk in divisors:
        if dk == 0:
            factors.append(0)
            continue
        factors.append(dk // prev)
        prev = dk
    return factors


# ---- resonance frame -------------------------------------------------------------------


def _int_rows(rows: Sequence[Sequence[int]]) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(int(v) for v in row) for row in rows)


@frozen
class ResonanceFrame:
    d: int
    m0: int
    generators: tuple[tuple[int, ...], ...] = field(converter=_int_rows)
    k0: tuple[tuple[int, ...], ...] = field(converter=_int_rows)
    flipped_column: int | None = None

    @property
    def m(self) -> int:
        return self.d - self.m0

    @property
    def signature(self) -> PhaseSignature:
        return PhaseSignature(self.m, self.m0)

    def matrix(self) -> np.ndarray:
        return np.array(self.k0, dtype=np.int64).reshape(self.d, self.d)

    @property
    def k_star(self) -> np.ndarray:
        return self.matrix()[:, : self.m]

    @property
    def k_prime(self) -> np.ndarray:
        return self.matrix()[:, self.m:]

    def inverse(self) -> IntMatrix:
        inv = exact_inverse(self.k0)
        return [[int(v) for v in row] for row in inv]

    def determinant(self) -> int:
        return integer_det(self.k0)

    def to_record(self) -> FrameRecord:
        return FrameRecord(
            d=self.d,
            m0=self.m0,
            generators=[list(g) for g in self.generators],
            K0=[v for row in self.k0 for v in row],
            flipped_column=self.flipped_column,
        )

    @classmethod
    def from_record(cls, record: FrameRecord) -> "ResonanceFrame":
        d = record.d
        return cls(
            d=d,
            m0=record.m0,
            generators=record.generators,
            k0=[record.K0[i * d:(i + 1) * d] for i in range(d)],
            flipped_column=record.flipped_column,
        )


def _hermite_rows(columns: Sequence[Sequence[int]]) -> tuple[IntMatrix, IntMatrix]:
    """Unimodular row reduction V*G = [H; 0] with H upper triangular; returns (H-part rows, V)."""
    d, m0 = len(columns[0]), len(columns)
    a = [[columns[c][r] for c in range(m0)] for r in range(d)]
    v = [[int(i == j) for j in range(d)] for i in range(d)]
    pivot = 0
    for col in range(m0):
        for r in range(pivot + 1, d):
            if a[r][col] == 0:
                continue
            p, q = a[pivot][col], a[r][col]
            if p == 0:
                a[pivot], a[r] = a[r], a[pivot]
                v[pivot], v[r] = v[r], v[pivot]
                continue
            if q % p == 0:
                f = q // p
                a[r] = [y - f * x for x, y in zip(a[pivot], a[r])]
                v[r] = [y - f * x for x, y in zip(v[pivot], v[r])]
                continue
            x, y, g = xgcd(p, q)
            pg, mqg = p // g, -q // g
            a[pivot], a[r] = [x * s + y * t for s, t in zip(a[pivot], a[r])], [mqg * s + pg * t for s, t in zip(a[pivot], a[r])]
            v[pivot], v[r] = [x * s + y * t for s, t in zip(v[pivot], v[r])], [mqg * s + pg * t for s, t in zip(v[pivot], v[r])]
        if a[pivot][col] < 0:
            a[pivot] = [-x for x in a[pivot]]
            v[pivot] = [-x for x in v[pivot]]
        pivot += 1
    return a, v


def _standard_completion(columns: Sequence[Sequence[int]]) -> list[list[int]] | None:
    """Try to complete with standard basis vectors; lexicographically first choice wins."""
    d, m0 = len(columns[0]), len(columns)
    m = d - m0
    for chosen in itertools.combinations(range(d), m):
        star = [[int(i == c) for i in range(d)] for c in chosen]
        if abs(integer_det([[col[r] for col in star + list(columns)] for r in range(d)])) == 1:
            return star
    return None


def unimodular_completion(generators: Sequence[Sequence[int]]) -> ResonanceFrame:
    """
    Complete resonance generators to a unimodular frame K0 = (K_star | K_prime), det K0 = +1.

    Args:
        generators: m0 integer vectors of length d spanning the resonance subgroup.

    Returns:
        ResonanceFrame with K_prime equal to the generators (one generator sign may be flipped
        when m = 0, recorded in flipped_column).
    """
    columns = [[int(v) for v in g] for g in generators]
    if not columns:
        raise DependentGenerators("at least one generator is required")
    d, m0 = len(columns[0]), len(columns)
    if any(len(c) != d for c in columns):
        raise DependentGenerators("generators have mismatched lengths")
    if m0 > d:
        raise DependentGenerators(f"{m0} generators cannot be independent in Z^{d}")

    factors = invariant_factors(columns)
    if 0 in factors:
        raise DependentGenerators(f"generators {columns} are linearly dependent over Q")
    bad = [f for f in factors if abs(f) != 1]
    if bad:
        raise CompletionError(
            f"generators {columns} admit no unimodular completion: invariant factor {bad[-1]}", factors
        )

    m = d - m0
    star = _standard_completion(columns)
    if star is None:
        reduced, v = _hermite_rows(columns)
        if any(abs(reduced[i][i]) != 1 for i in range(m0)):
            raise CompletionError(f"pivot check failed for {columns}", factors)
        k = exact_inverse(v)
        star = [[int(k[r][c]) for r in range(d)] for c in range(m0, d)]

    k0_columns = star + columns
    k0 = [[k0_columns[c][r] for c in range(d)] for r in range(d)]
    flipped: int | None = None
    if integer_det(k0) == -1:
        flipped = 0 if m > 0 else d - 1
        for r in range(d):
            k0[r][flipped] = -k0[r][flipped]
    frame = ResonanceFrame(d=d, m0=m0, generators=columns, k0=k0, flipped_column=flipped)
    assert frame.determinant() == 1
    logger.debug("completed %s to K0 = %s", columns, k0)
    return frame


@frozen
class SymplecticFrameCheck:
    ok: bool
    determinant: int
    symplectic_defect: list[list[Fraction]]
    integrality_defect: list[list[Fraction]]


def check_symplectic_frame(frame: ResonanceFrame | Sequence[Sequence[int]]) -> SymplecticFrameCheck:
    """Exact check that blockdiag((K0^T)^-1, K0) is an integral symplectic change of variables."""
    k0 = [list(row) for row in (frame.k0 if isinstance(frame, ResonanceFrame) else frame)]
    d = len(k0)
    det = integer_det(k0)
    if det == 0:
        nan = [[Fraction(0)] * (2 * d) for _ in range(2 * d)]
        return SymplecticFrameCheck(False, det, nan, [[Fraction(1)] * d for _ in range(d)])
    inv = exact_inverse(k0)
    inv_t = [[inv[c][r] for c in range(d)] for r in range(d)]
    big = [[Fraction(0)] * (2 * d) for _ in range(2 * d)]
    for r in range(d):
        for c in range(d):
            big[r][c] = inv_t[r][c]
            big[d + r][d + c] = Fraction(k0[r][c])
    omega = [[Fraction(0)] * (2 * d) for _ in range(2 * d)]
    for i in range(d):
        omega[i][d + i] = Fraction(1)
        omega[d + i][i] = Fraction(-1)
    left = [[sum((big[k][r] * omega[k][c] for k in range(2 * d)), Fraction(0)) for c in range(2 * d)] for r in range(2 * d)]
    prod = [[sum((left[r][k] * big[k][c] for k in range(2 * d)), Fraction(0)) for c in range(2 * d)] for r in range(2 * d)]
    defect = [[prod[r][c] - omega[r][c] for c in range(2 * d)] for r in range(2 * d)]
    integrality = [[v - math.floor(v) for v in row] for row in inv]
    ok = det == 1 and all(v == 0 for row in defect for v in row) and all(v == 0 for row in integrality for v in row)
    return SymplecticFrameCheck(ok, det, defect, integrality)


# ---- unperturbed Hamiltonians ----------------------------------------------------------


class H0Model(Protocol):
    d: int

    def gradient(self, y: FloatArray) -> FloatArray: ...

    def hessian(self, y: FloatArray) -> FloatArray: ...

    def to_series(self, truncation: Truncation) -> FTSeries: ...


@frozen
class QuadraticH0:
    """H0(y) = (1/2) y^T A y + b^T y."""

    a: FloatArray = field(converter=lambda v: np.atleast_2d(np.asarray(v, dtype=float)))
    b: FloatArray | None = field(default=None)

    @property
    def d(self) -> int:
        return self.a.shape[0]

    def _b(self) -> FloatArray:
        return np.zeros(self.d) if self.b is None else np.asarray(self.b, dtype=float)

    def gradient(self, y: FloatArray) -> FloatArray:
        return self.a @ y + self._b()

    def hessian(self, y: FloatArray) -> FloatArray:
        return 0.5 * (self.a + self.a.T)

    def to_series(self, truncation: Truncation) -> FTSeries:
        sig = PhaseSignature(self.d, 0)
        series = linear_form(sig, truncation, list(self._b()))
        items = []
        for i in range(self.d):
            for k in range(i, self.d):
                coef = 0.5 * self.a[i, i] if i == k else 0.5 * (self.a[i, k] + self.a[k, i])
                j = [0] * self.d
                j[i] += 1
                j[k] += 1
                items.append((0, Basis.COS, (0,) * self.d, j, coef))
        return series + FTSeries.from_terms(sig, truncation, items)


@frozen
class PolynomialH0:
    """H0(y) = sum c * y^e over a list of (coefficient, exponent vector) pairs."""

    terms: tuple[tuple[float, tuple[int, ...]], ...] = field(
        converter=lambda ts: tuple((float(c), tuple(int(v) for v in e)) for c, e in ts)
    )

    @property
    def d(self) -> int:
        return len(self.terms[0][1])

    def gradient(self, y: FloatArray) -> FloatArray:
        g = np.zeros(self.d)
        for c, e in self.terms:
            for i, ei in enumerate(e):
                if ei:
                    lowered = list(e)
                    lowered[i] -= 1
                    g[i] += c * ei * float(np.prod(np.power(y, lowered)))
        return g

    def hessian(self, y: FloatArray) -> FloatArray:
        h = np.zeros((self.d, self.d))
        for c, e in self.terms:
            for i in range(self.d):
                for k in range(self.d):
                    lowered = list(e)
                    f = lowered[i]
                    lowered[i] -= 1
                    f *= lowered[k]
                    lowered[k] -= 1
                    if f:
                        h[i, k] += c * f * float(np.prod(np.power(y, lowered)))
        return h

    def to_series(self, truncation: Truncation) -> FTSeries:
        sig = PhaseSignature(self.d, 0)
        return FTSeries.from_terms(sig, truncation, [(0, Basis.COS, (0,) * self.d, e, c) for c, e in self.terms])


@frozen
class SeriesH0:
    """H0 given by the x-independent grade-0 part of a series literal."""

    series: FTSeries = field(converter=lambda s: average(s).grade_slice(0, 0))

    @property
    def d(self) -> int:
        return self.series.signature.m

    def _state(self, y: FloatArray) -> FloatArray:
        return np.concatenate([np.zeros(self.d), np.asarray(y, dtype=float)])

    def gradient(self, y: FloatArray) -> FloatArray:
        return self.series.gradient(self._state(y))[self.d:]

    def hessian(self, y: FloatArray) -> FloatArray:
        h = np.zeros((self.d, self.d))
        for i in range(self.d):
            di = partial(self.series, VarKind.Y, i)
            h[i] = di.gradient(self._state(y))[self.d:]
        return 0.5 * (h + h.T)

    def to_series(self, truncation: Truncation) -> FTSeries:
        return self.series.with_truncation(truncation)


# ---- resonant surface ------------------------------------------------------------------


def _seed_grid(lo: FloatArray, hi: FloatArray) -> FloatArray:
    d = len(lo)
    per_dim = SURFACE_SEEDS_PER_DIM
    while per_dim > 2 and per_dim**d > SURFACE_MAX_SEEDS:
        per_dim -= 1
    axes = [np.linspace(lo[i], hi[i], per_dim) for i in range(d)]
    return np.array(list(itertools.product(*axes)))


def _surface_newton(h0: H0Model, taus: FloatArray, seed: FloatArray) -> FloatArray | None:
    y = seed.copy()
    for _ in range(SURFACE_MAX_ITER):
        c = taus @ h0.gradient(y)
        if np.max(np.abs(c)) <= SURFACE_TOLERANCE:
            return y
        jac = taus @ h0.hessian(y)
        y = y - np.linalg.pinv(jac) @ c
        if not np.all(np.isfinite(y)):
            return None
    c = taus @ h0.gradient(y)
    return y if np.max(np.abs(c)) <= SURFACE_ACCEPT else None


def resonant_surface_sample(
    h0: H0Model,
    frame: ResonanceFrame,
    box: tuple[Sequence[float], Sequence[float]],
    count: int,
) -> list[FloatArray]:
    """Points y in the box with |<tau_i, omega(y)>| <= 1e-10, found by Newton from a seed grid."""
    lo, hi = np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float)
    taus = np.array(frame.generators, dtype=float)
    seeds = _seed_grid(lo, hi)
    results = ordered_map(lambda s: _surface_newton(h0, taus, s), list(seeds))
    found: list[FloatArray] = []
    for y in results:
        if y is None or np.any(y < lo - 1e-12) or np.any(y > hi + 1e-12):
            continue
        if any(np.max(np.abs(y - f)) <= 1e-8 for f in found):
            continue
        found.append(y)
    found.sort(key=lambda p: tuple(p))
    if not found:
        logger.warning("no point of the resonant surface for %s found in box %s", frame.generators, box)
    return found[:count]


# ---- reduction -------------------------------------------------------------------------


def _reduced_grade(grade: int, degree: int) -> int:
    return 4 * grade + degree - 1


@frozen
class ReducedHamiltonian:
    y0: FloatArray
    omega_star: FloatArray
    gamma: FloatArray
    series: FTSeries
    frame: ResonanceFrame
    delta: float
    epsilon: float
    h0_value: float

    def to_original(self, state: Sequence[float] | FloatArray) -> FloatArray:
        """Map a reduced state (x, y, u, v) to the original (x, y) coordinates."""
        sig = self.series.signature
        m, m0, d = sig.m, sig.m0, self.frame.d
        s = np.asarray(state, dtype=float)
        phi = np.concatenate([s[:m], s[2 * m:2 * m + m0]])
        q = np.concatenate([s[m:2 * m], s[2 * m + m0:]])
        k0 = self.frame.matrix().astype(float)
        x = np.linalg.solve(k0.T, phi)
        y = self.y0 + self.delta * (k0 @ q)
        return np.concatenate([x[:d], y])

    def original_energy(self, reduced_value: float) -> float:
        """Energy of the original Hamiltonian corresponding to a reduced-series value."""
        return self.h0_value + self.delta * reduced_value


def reduce_at_resonance(
    h: FTSeries,
    y0: Sequence[float] | FloatArray,
    frame: ResonanceFrame,
    epsilon: float,
    truncation: Truncation | None = None,
) -> ReducedHamiltonian:
    """
    Expand H = H0 + eps*P (grades 0 and 1, signature (d, 0)) at a resonant point, change to
    the frame coordinates and rescale by eps^{1/4}, relabelled as the new formal delta.
    """
    d = frame.d
    if h.signature != PhaseSignature(d, 0):
        raise ValueError(f"expected a series in (x, y) with d = {d}, got {h.signature}")
    trunc = truncation or h.truncation
    base = np.asarray(y0, dtype=float)
    h0 = SeriesH0(h)
    omega = h0.gradient(base)
    defect = float(np.max(np.abs(np.array(frame.generators, dtype=float) @ omega)))
    if defect > OFF_SURFACE_TOLERANCE:
        raise OffSurfaceError(f"base point {base} is off the resonant surface (|<tau, omega>| = {defect:.3e})", defect)

    shifted = translate(h, y=base)
    sig = frame.signature
    k0 = frame.matrix()
    k0_inv = np.array(frame.inverse(), dtype=np.int64)
    q_index = [sig.var_index(VarKind.Y, i) for i in range(sig.m)] + [sig.var_index(VarKind.V, i) for i in range(sig.m0)]
    horizon_free = Truncation(trunc.fourier_cutoff, trunc.degree_cutoff, None, trunc.prune)

    substitutions: list[FTSeries] = []
    for i in range(d):
        coefficients = [0.0] * sig.n_vars
        for col in range(d):
            coefficients[q_index[col]] = float(k0[i, col])
        substitutions.append(linear_form(sig, horizon_free, coefficients))
    powers: dict[tuple[int, int], FTSeries] = {}

    def power(i: int, n: int) -> FTSeries:
        if (i, n) not in powers:
            powers[(i, n)] = substitutions[i].power(n)
        return powers[(i, n)]

    out = FTSeries.zero(sig, horizon_free)
    h0_value = 0.0
    dropped_linear = 0.0
    for t in shifted.iter_terms():
        degree = sum(t.j)
        if t.grade == 0 and degree == 0 and not any(t.k):
            h0_value += t.coef
            continue
        new_k = tuple(int(v) for v in k0_inv @ np.array(t.k, dtype=np.int64))
        mono = FTSeries.harmonic(sig, horizon_free, new_k, t.basis, t.coef)
        for i, ji in enumerate(t.j):
            if ji:
                mono = mono.mul(power(i, ji))
        grade = _reduced_grade(t.grade, degree)
        if t.grade == 0 and degree == 1:
            linear_v = mono.select(lambda s: any(s.j[sig.m + sig.m0:]))
            dropped_linear = max(dropped_linear, linear_v.max_abs_coefficient())
            mono = mono - linear_v
        out = out + mono.shift_grade(grade)
    if dropped_linear:
        logger.debug("dropped on-surface linear v terms of size %.3e", dropped_linear)

    hess = h0.hessian(base)
    gamma = k0.T.astype(float) @ hess @ k0.astype(float)
    omega_star = frame.k_star.T.astype(float) @ omega
    delta = epsilon**0.25
    series = out.with_truncation(trunc)
    logger.info("reduced at y0=%s: omega_star=%s, %d terms", base, omega_star, len(series))
    return ReducedHamiltonian(
        y0=base,
        omega_star=omega_star,
        gamma=0.5 * (gamma + gamma.T),
        series=series,
        frame=frame,
        delta=delta,
        epsilon=epsilon,
        h0_value=h0_value,
    )
