"""
One quasilinear KAM cycle and the finite iteration built from it.

A Hamiltonian is held as a single FTSeries and split on demand:

    H = N + P,   N = core + potential,   P = oscillating part (k_x != 0)

where ``core`` is the x-average without u-harmonics (energy, frequency, the quadratic
matrix M and the higher-order part h) and ``potential`` is the x-average carrying
u-harmonics, i.e. the accumulated averaged potential.
"""

import logging
import math
from collections.abc import Sequence
from enum import StrEnum
from fractions import Fraction
from functools import cached_property

import attrs
import numpy as np
import scipy.linalg
import scipy.special
from attrs import frozen

from nfkam.core.conditions import check_diophantine, numerical_rank
from nfkam.core.errors import NfkamError, RankConditionError, ShiftConvergenceError, SingularBorderedMatrix, SmallDivisor
from nfkam.core.ftalgebra import (
    Basis,
    DomainParams,
    FloatArray,
    FTSeries,
    HarmonicScope,
    PhaseSignature,
    Truncation,
    TruncationShape,
    VarKind,
    average,
    oscillating,
    partial,
    poisson_bracket,
    polynomial_degree_parts,
    quadratic_form,
    split_slow_harmonics,
    translate,
    truncate,
    weighted_norm,
)

logger = logging.getLogger(__name__)

NEWTON_MAX_ITER = 50
SHIFT_TOLERANCE = 1e-13
ISOENERGETIC_TOLERANCE = 1e-12
RANK_THRESHOLD = 1e-8
HOMOLOGICAL_MAX_SWEEPS = 256
LIE_ORDER_DEFAULT = 6
LIE_ORDER_CAP = 64


class StepMode(StrEnum):
    PLAIN = "plain"
    PARTIAL = "partial"
    ISOENERGETIC = "isoenergetic"


class IsoVariant(StrEnum):
    FULL_RANK = "full-rank"
    DEGENERATE = "degenerate"


class Profile(StrEnum):
    PAPER = "paper"
    PRACTICAL = "practical"


# ---- normal form -----------------------------------------------------------------------


def _state_of(signature: PhaseSignature, w: FloatArray) -> FloatArray:
    return np.concatenate([np.zeros(signature.m), np.asarray(w, dtype=float)])


@frozen
class NormalForm:
    """N = <omega, y> + (delta/2) <w, M w> + h + e, plus the averaged potential."""

    core: FTSeries
    potential: FTSeries
    delta: float

    @classmethod
    def from_series(cls, series: FTSeries, delta: float) -> "NormalForm":
        core, potential = split_slow_harmonics(average(series))
        return cls(core, potential, delta)

    @classmethod
    def build(
        cls,
        signature: PhaseSignature,
        truncation: Truncation,
        omega: Sequence[float],
        matrix: FloatArray,
        delta: float,
        e: float = 0.0,
        h: FTSeries | None = None,
        potential: FTSeries | None = None,
    ) -> "NormalForm":
        """Core with omega at grade 0 and M at grade 1, so the numeric quadratic part is (delta/2)<w, M w>."""
        linear = [float(c) for c in omega] + [0.0] * (2 * signature.m0)
        items = []
        for i, c in enumerate(linear):
            if c:
                j = [0] * signature.n_vars
                j[i] = 1
                items.append((0, Basis.COS, (0,) * signature.n_angles, j, c))
        core = FTSeries.from_terms(signature, truncation, items)
        core = core + quadratic_form(signature, truncation, np.asarray(matrix, dtype=float), grade=1)
        if e:
            core = core + FTSeries.constant(signature, truncation, e)
        if h is not None:
            core = core + h
        return cls(core, potential or FTSeries.zero(signature, truncation), delta)

    @property
    def signature(self) -> PhaseSignature:
        return self.core.signature

    def series(self) -> FTSeries:
        return self.core + self.potential

    @cached_property
    def _numeric_core(self) -> FTSeries:
        return self.core.at_scale(self.delta)

    @cached_property
    def _degree_parts(self) -> dict[int, FTSeries]:
        return polynomial_degree_parts(self._numeric_core)

    def _linear(self) -> FloatArray:
        out = np.zeros(self.signature.n_vars)
        for t in self._degree_parts.get(1, FTSeries.zero(self.signature)).iter_terms():
            out[t.j.index(1)] += t.coef
        return out

    @property
    def e(self) -> float:
        return sum((t.coef for t in self._degree_parts.get(0, FTSeries.zero(self.signature)).iter_terms()), 0.0)

    @property
    def omega(self) -> FloatArray:
        """Numeric frequency: every linear y coefficient at the numeric delta."""
        return self._linear()[: self.signature.m]

    @property
    def linear_z(self) -> FloatArray:
        return self._linear()[self.signature.m:]

    @property
    def base_omega(self) -> FloatArray:
        """Grade-zero frequency used as the homological divisor."""
        out = np.zeros(self.signature.m)
        for t in self.core.iter_terms():
            if t.grade == 0 and sum(t.j) == 1 and not any(t.k):
                idx = t.j.index(1)
                if idx < self.signature.m:
                    out[idx] += t.coef
        return out

    @cached_property
    def hessian(self) -> FloatArray:
        n = self.signature.n_vars
        out = np.zeros((n, n))
        for t in self._degree_parts.get(2, FTSeries.zero(self.signature)).iter_terms():
            idx = [i for i, p in enumerate(t.j) if p]
            if len(idx) == 1:
                out[idx[0], idx[0]] += 2.0 * t.coef
            else:
                out[idx[0], idx[1]] += t.coef
                out[idx[1], idx[0]] += t.coef
        return out

    @property
    def M(self) -> FloatArray:  # noqa: N802
        return self.hessian / self.delta

    @property
    def h(self) -> FTSeries:
        """Part of the core of degree >= 3 in (y, z), with formal grades."""
        return self.core.select(lambda t: sum(t.j) >= 3)

    @cached_property
    def _h_derivatives(self) -> list[FTSeries]:
        sig = self.signature
        h = self.h
        kinds = [VarKind.Y] * sig.m + [VarKind.U] * sig.m0 + [VarKind.V] * sig.m0
        index = list(range(sig.m)) + list(range(sig.m0)) + list(range(sig.m0))
        return [partial(h, kind, i) for kind, i in zip(kinds, index)]

    def h_value(self, w: FloatArray) -> float:
        return self.h.evaluate(_state_of(self.signature, w), self.delta)

    def h_gradient(self, w: FloatArray) -> FloatArray:
        return self.h.gradient(_state_of(self.signature, w), self.delta)[self.signature.m:]

    def h_hessian(self, w: FloatArray) -> FloatArray:
        state = _state_of(self.signature, w)
        rows = [d.gradient(state, self.delta)[self.signature.m:] for d in self._h_derivatives]
        hess = np.array(rows) if rows else np.zeros((0, 0))
        return 0.5 * (hess + hess.T)


# ---- schedule --------------------------------------------------------------------------


def _smallest_eta(sigma: Fraction) -> int:
    eta = 1
    while (1 + sigma) ** eta <= 2:
        eta += 1
    return eta


def _k_plus(mu: float, eta: int) -> int:
    return (max(0, math.floor(math.log(1.0 / mu))) + 1) ** (3 * eta)


@frozen
class KamSchedule:
    nu: int
    r: float
    s: float
    gamma: float
    mu: float
    K_plus: int  # noqa: N815
    r0: float
    gamma0: float
    tau: float
    sigma: Fraction
    eta: int
    lambda0: float
    b: float
    l0: int
    c0: float
    m: int
    profile: Profile = Profile.PRACTICAL
    flags: tuple[str, ...] = ()

    @property
    def alpha(self) -> float:
        return self.mu ** (1.0 / 3.0)

    @property
    def chi(self) -> float:
        return (self.b + 2) * self.tau + 5 * self.l0 + 10

    @property
    def r_next(self) -> float:
        return self.r - self.r0 / 2 ** (self.nu + 2)

    @property
    def gamma_next(self) -> float:
        return self.gamma - self.gamma0 / 2 ** (self.nu + 2)

    def effective_cutoff(self, fourier_cutoff: int) -> int:
        return min(self.K_plus, fourier_cutoff)

    def domain(self) -> DomainParams:
        return DomainParams(min(self.r, 1.0), min(self.s, 1.0))

    @classmethod
    def initial(
        cls,
        signature: PhaseSignature,
        profile: Profile = Profile.PRACTICAL,
        r0: float = 1.0,
        s0: float = 1.0,
        gamma0: float = 1e-2,
        mu0: float = 1e-3,
        tau: float | None = None,
        lambda0: float = 0.5,
        sigma: Fraction = Fraction(1, 12),
        c0: float = 1.0,
    ) -> "KamSchedule":
        m, m0 = signature.m, signature.m0
        l0 = m + m0
        if profile is Profile.PAPER:
            b = float((2 * l0**2 + 3) * (m + 2 * m0) ** 2)
        else:
            b = 1.0
        eta = _smallest_eta(sigma)
        return cls(
            nu=0,
            r=r0,
            s=s0,
            gamma=gamma0,
            mu=mu0,
            K_plus=_k_plus(mu0, eta),
            r0=r0,
            gamma0=gamma0,
            tau=float(m + 1) if tau is None else tau,
            sigma=sigma,
            eta=eta,
            lambda0=lambda0,
            b=b,
            l0=l0,
            c0=c0,
            m=m,
            profile=profile,
        )


def schedule_next(sched: KamSchedule) -> KamSchedule:
    """
    Advance (r, s, gamma, mu, K_+) by one cycle.

    Under the practical profile K_+ never decreases: a non-contracting mu is monitored and
    flagged, but it does not narrow the harmonics the next step solves for.
    """
    mu_next = (64 * sched.c0) ** (1.0 / (1.0 - sched.lambda0)) * sched.mu ** (1 + float(sched.sigma))
    flags: list[str] = []
    if mu_next >= sched.mu:
        flags.append("non-contracting")
        logger.warning("schedule step %d: mu does not contract (%.3e -> %.3e)", sched.nu, sched.mu, mu_next)
    k_plus = _k_plus(mu_next, sched.eta)
    if sched.profile is Profile.PRACTICAL:
        k_plus = max(k_plus, sched.K_plus)
    return attrs.evolve(
        sched,
        nu=sched.nu + 1,
        r=sched.r_next,
        s=sched.alpha * sched.s / 8,
        gamma=sched.gamma_next,
        mu=mu_next,
        K_plus=k_plus,
        flags=tuple(flags),
    )


def compressor(sched: KamSchedule, cutoff: int) -> float:
    """Gamma(r - r_+) = sum_{0 < |k| <= K} |k|^chi e^{-|k| (r - r_+)/8} over Z^m."""
    width = sched.r - sched.r_next
    total = 0.0
    m = sched.m
    for n in range(1, cutoff + 1):
        count = sum(2**i * math.comb(m, i) * math.comb(n - 1, i - 1) for i in range(1, min(m, n) + 1))
        log_term = math.log(count) + sched.chi * math.log(n) - n * width / 8
        if log_term > 700:
            return math.inf
        total += math.exp(log_term)
    return total


# ---- records ---------------------------------------------------------------------------


@frozen
class TruncationChecks:
    h1: bool
    h2: bool
    tail_norm: float
    effective_cutoff: int


@frozen
class HomologicalSolution:
    generator: FTSeries
    minimal_divisor: float
    sweeps: int


@frozen
class LieResult:
    series: FTSeries
    order: int
    remainder_bound: float


@frozen
class ShiftSolution:
    w: FloatArray
    residual: float
    iterations: int

    def blocks(self, signature: PhaseSignature) -> tuple[FloatArray, FloatArray]:
        return self.w[: signature.m], self.w[signature.m:]


@frozen
class PartialShift:
    w: FloatArray
    preserved: tuple[int, ...]
    n: int
    row_exchange: np.ndarray
    elimination: FloatArray
    drift: FloatArray
    residual: float


@frozen
class IsoShift:
    w: FloatArray
    t: float
    residual: float
    energy_residual: float
    preserved: tuple[int, ...]


@frozen
class TransformRecord:
    generator: FTSeries
    shift: FloatArray
    row_exchange: np.ndarray | None = None
    elimination: FloatArray | None = None
    t: float | None = None


@frozen
class StepReport:
    nu: int
    pre_norm: float
    post_norm: float
    tail_norm: float
    minimal_divisor: float
    homological_residual: float
    shift_residual: float
    drift: FloatArray
    drift_constant: float
    conditions: dict[str, bool]
    lie_order: int
    lie_remainder: float
    flags: tuple[str, ...] = ()


@frozen
class StepResult:
    series: FTSeries
    record: TransformRecord
    report: StepReport
    potential_increment: FTSeries
    schedule: KamSchedule


# ---- truncation and homological equation -----------------------------------------------


def build_truncation(
    perturbation: FTSeries,
    sched: KamSchedule,
    shape: TruncationShape = TruncationShape.FULL,
    delta: float = 1.0,
) -> tuple[FTSeries, FTSeries, TruncationChecks]:
    """Split P into the solvable head R (|k_x| <= K_+) and the tail, with the H1/H2 checks."""
    trunc = perturbation.truncation
    cutoff = sched.effective_cutoff(trunc.fourier_cutoff)
    head, tail = truncate(perturbation, cutoff, trunc.degree_cutoff, shape, HarmonicScope.FAST)
    width = sched.r - sched.r_next
    n = sched.m + sched.l0
    h1 = sched.K_plus >= 8 * n / width
    a = width / 8
    try:
        tail_integral = float(scipy.special.gammaincc(n + 1, a * sched.K_plus) * math.gamma(n + 1) / a ** (n + 1))
    except OverflowError:
        tail_integral = 0.0
    h2 = tail_integral <= sched.mu
    dom = DomainParams(min(sched.r, 1.0), min(sched.alpha * sched.s, 1.0))
    tail_norm = weighted_norm(tail, dom, delta)
    return head, tail, TruncationChecks(h1, h2, tail_norm, cutoff)


def _divisor_table(series: FTSeries, omega: FloatArray, sched: KamSchedule | None) -> dict[tuple[int, ...], float]:
    m = series.signature.m
    table: dict[tuple[int, ...], float] = {}
    for t in series.iter_terms():
        kx = t.k[:m]
        if kx in table:
            continue
        div = float(np.dot(kx, omega))
        if sched is not None:
            norm = sum(abs(c) for c in kx)
            bound = sched.gamma / norm**sched.tau
            if abs(div) <= bound:
                raise SmallDivisor(kx, abs(div), bound)
        elif div == 0.0:
            raise SmallDivisor(kx, 0.0, 0.0)
        table[kx] = div
    return table


def _invert_rotation(series: FTSeries, divisors: dict[tuple[int, ...], float]) -> FTSeries:
    """Solve <omega, d_x> F = G for oscillating G."""
    m = series.signature.m
    items = []
    for t in series.iter_terms():
        div = divisors[t.k[:m]]
        if t.basis is Basis.COS:
            items.append((t.grade, Basis.SIN, t.k, t.j, t.coef / div))
        else:
            items.append((t.grade, Basis.COS, t.k, t.j, -t.coef / div))
    return FTSeries.from_terms(series.signature, series.truncation, items, series.grade_unit)


def _frequency_correction(nf: NormalForm) -> list[FTSeries]:
    """d_y(core) minus its grade-zero constant part, one series per y component."""
    sig = nf.signature
    out = []
    for i in range(sig.m):
        dy = partial(nf.core, VarKind.Y, i)
        out.append(dy.select(lambda t: not (t.grade == 0 and sum(t.j) == 0)))
    return out


def solve_homological(nf: NormalForm, r: FTSeries, sched: KamSchedule | None = None) -> HomologicalSolution:
    """
    Solve (omega + Delta) . d_x F = R - [R] by graded back-substitution.

    Delta = d_y(core) - omega raises the (y, z)-degree or the grade of every term it
    multiplies, so the corrections terminate at the truncation.
    """
    sig = nf.signature
    rhs = oscillating(r)
    zero = FTSeries.zero(sig, r.truncation, r.grade_unit)
    if rhs.is_zero:
        return HomologicalSolution(zero, math.inf, 0)
    omega = nf.base_omega
    divisors = _divisor_table(rhs, omega, sched)
    correction = [c for c in _frequency_correction(nf) if not c.is_zero]

    piece = _invert_rotation(rhs, divisors)
    generator = piece
    sweeps = 1
    while correction and not piece.is_zero:
        if sweeps >= HOMOLOGICAL_MAX_SWEEPS:
            raise NfkamError(f"homological back-substitution did not terminate in {sweeps} sweeps")
        coupling = zero
        for i, delta_i in enumerate(correction):
            coupling = coupling + delta_i.mul(partial(piece, VarKind.X, i))
        coupling = oscillating(coupling)
        if coupling.is_zero:
            break
        divisors.update(_divisor_table(coupling, omega, sched))
        piece = -_invert_rotation(coupling, divisors)
        generator = generator + piece
        sweeps += 1
    minimal = min(abs(d) for d in divisors.values())
    logger.debug("homological solve: %d terms, %d sweeps, min divisor %.3e", len(generator), sweeps, minimal)
    return HomologicalSolution(generator, minimal, sweeps)


def correction_term(nf: NormalForm, generator: FTSeries) -> FTSeries:
    """R' = N_u F_v - N_v F_u - sum_i d_{y_i}(potential) d_{x_i} F."""
    sig = nf.signature
    n = nf.series()
    out = FTSeries.zero(sig, generator.truncation, generator.grade_unit)
    for i in range(sig.m0):
        out = out + partial(n, VarKind.U, i).mul(partial(generator, VarKind.V, i))
        out = out - partial(n, VarKind.V, i).mul(partial(generator, VarKind.U, i))
    for i in range(sig.m):
        dpot = partial(nf.potential, VarKind.Y, i)
        if not dpot.is_zero:
            out = out - dpot.mul(partial(generator, VarKind.X, i))
    return out


def homological_residual(nf: NormalForm, r: FTSeries, generator: FTSeries) -> FTSeries:
    """{N, F} + R - [R] - R'; vanishes to rounding for an exact solve."""
    return poisson_bracket(nf.series(), generator) + oscillating(r) - correction_term(nf, generator)


# ---- Lie transform ---------------------------------------------------------------------


def _lie_order(h: FTSeries, generator: FTSeries, order: int) -> int:
    horizon = generator.truncation.grade_horizon
    g_min = generator.min_grade()
    h_min = h.min_grade()
    if horizon is None or not g_min or h_min is None:
        return order
    needed = math.ceil((horizon - h_min) / g_min)
    return min(max(order, needed), LIE_ORDER_CAP)


def lie_transform(h: FTSeries, generator: FTSeries, order: int = LIE_ORDER_DEFAULT, delta: float = 1.0) -> LieResult:
    """H o phi_F^1 = sum_j ad_F^j H / j!, with ad_F H = {H, F}."""
    if generator.is_zero:
        return LieResult(h, 0, 0.0)
    order = _lie_order(h, generator, order)
    result = h
    term = h
    used = 0
    for j in range(1, order + 1):
        term = poisson_bracket(term, generator).scale(1.0 / j)
        used = j
        if term.is_zero:
            break
        result = result + term
    remainder = 0.0
    if not term.is_zero:
        nxt = poisson_bracket(term, generator).scale(1.0 / (order + 1))
        remainder = weighted_norm(nxt, DomainParams(0.0, 1.0), delta)
    return LieResult(result, used, remainder)


# ---- frequency shifts ------------------------------------------------------------------


def _newton(
    residual_fn,  # noqa: ANN001
    jacobian_fn,  # noqa: ANN001
    x0: FloatArray,
    tolerance: float,
    what: str,
) -> tuple[FloatArray, float, int]:
    x = np.array(x0, dtype=float)
    trace: list[float] = []
    for it in range(NEWTON_MAX_ITER):
        res = residual_fn(x)
        norm = float(np.max(np.abs(res))) if len(res) else 0.0
        trace.append(norm)
        if norm <= tolerance:
            return x, norm, it
        x = x - np.linalg.solve(jacobian_fn(x), res)
    res = residual_fn(x)
    norm = float(np.max(np.abs(res))) if len(res) else 0.0
    if norm <= tolerance:
        return x, norm, NEWTON_MAX_ITER
    raise ShiftConvergenceError(f"{what}: Newton did not converge in {NEWTON_MAX_ITER} iterations", trace + [norm])


def _is_singular(matrix: FloatArray) -> bool:
    if matrix.size == 0:
        return False
    return numerical_rank(matrix, RANK_THRESHOLD) < matrix.shape[0]


def frequency_shift_full(nf: NormalForm, p010: Sequence[float], p001: Sequence[float]) -> ShiftSolution:
    """Translation w0 = (y0, z0) solving delta M w0 + grad h(w0) = -(p010, p001)."""
    p = np.concatenate([np.asarray(p010, dtype=float), np.asarray(p001, dtype=float)])
    dm = nf.hessian
    if _is_singular(dm):
        raise RankConditionError("M is singular; use the partial-rank shift", block="M")
    if not np.any(p):
        return ShiftSolution(np.zeros_like(p), 0.0, 0)

    def residual(w: FloatArray) -> FloatArray:
        return dm @ w + nf.h_gradient(w) + p

    def jacobian(w: FloatArray) -> FloatArray:
        return dm + nf.h_hessian(w)

    w, res, iterations = _newton(residual, jacobian, -np.linalg.solve(dm, p), SHIFT_TOLERANCE, "frequency shift")
    return ShiftSolution(w, res, iterations)


def pivot_rows(matrix: FloatArray, m: int) -> tuple[tuple[int, ...], int]:
    """
    Preserved rows for the partial-rank shift: every z-row plus the y-rows chosen by
    column-pivoted QR of the y-block projected off the z-row space.

    Returns:
        (sorted preserved row indices, n = number of preserved y-rows)
    """
    size = matrix.shape[0]
    z_rows = list(range(m, size))
    z_block = matrix[z_rows, :]
    if z_rows and numerical_rank(z_block, RANK_THRESHOLD) < len(z_rows):
        sv = np.linalg.svd(z_block, compute_uv=False)
        raise RankConditionError("rank (M21, M22) < 2 m0", block="(M21, M22)", singular_values=list(sv))
    projector = np.eye(size)
    if z_rows:
        projector = projector - np.linalg.pinv(z_block) @ z_block
    y_block = matrix[:m, :] @ projector
    _, r, piv = scipy.linalg.qr(y_block.T, pivoting=True, mode="economic")
    diag = np.abs(np.diag(r))
    lead = diag[0] if len(diag) else 0.0
    n = int(np.sum(diag > RANK_THRESHOLD * lead)) if lead > 0 else 0
    chosen = sorted(int(i) for i in piv[:n])
    total = numerical_rank(matrix, RANK_THRESHOLD)
    if total != n + len(z_rows):
        raise RankConditionError(f"rank M = {total} != n + 2 m0 = {n + len(z_rows)}", block="M")
    return tuple(chosen + z_rows), n


def frequency_shift_partial(nf: NormalForm, p010: Sequence[float], p001: Sequence[float]) -> PartialShift:
    """Restore the preserved frequency components; the others drift by the recorded amount."""
    sig = nf.signature
    p = np.concatenate([np.asarray(p010, dtype=float), np.asarray(p001, dtype=float)])
    dm = nf.hessian
    size = len(p)
    preserved, n = pivot_rows(dm, sig.m)
    rest = tuple(i for i in range(size) if i not in preserved)
    order = list(preserved) + list(rest)
    exchange = np.eye(size, dtype=np.int64)[order]
    sub = np.ix_(preserved, preserved)
    d1 = dm[np.ix_(rest, preserved)] @ np.linalg.inv(dm[sub]) if rest else np.zeros((0, len(preserved)))
    elimination = np.eye(size)
    elimination[len(preserved):, : len(preserved)] = -d1
    idx = list(preserved)

    def full(wp: FloatArray) -> FloatArray:
        w = np.zeros(size)
        w[idx] = wp
        return w

    def residual(wp: FloatArray) -> FloatArray:
        w = full(wp)
        return (dm @ w + nf.h_gradient(w) + p)[idx]

    def jacobian(wp: FloatArray) -> FloatArray:
        w = full(wp)
        return (dm + nf.h_hessian(w))[sub]

    if np.any(p[idx]):
        wp, res, _ = _newton(residual, jacobian, -np.linalg.solve(dm[sub], p[idx]), SHIFT_TOLERANCE, "partial shift")
    else:
        wp, res = np.zeros(len(idx)), 0.0
    w = full(wp)
    drift = np.zeros(size)
    if rest:
        drift[list(rest)] = (dm @ w + nf.h_gradient(w) + p)[list(rest)]
    return PartialShift(w, preserved, n, exchange, elimination, drift, res)


def frequency_shift_isoenergetic(
    nf: NormalForm,
    p010: Sequence[float],
    p001: Sequence[float],
    energy: float,
    variant: IsoVariant = IsoVariant.FULL_RANK,
    target_omega: Sequence[float] | None = None,
) -> IsoShift:
    """
    Solve grad N_+(w) = (1 + t)(omega, 0) and N_+(w) = energy on the bordered system.

    N_+ is the core with linear part (omega + p010, p001); omega defaults to the current
    numeric frequency minus p010.
    """
    sig = nf.signature
    p = np.concatenate([np.asarray(p010, dtype=float), np.asarray(p001, dtype=float)])
    size = len(p)
    omega = np.asarray(target_omega, dtype=float) if target_omega is not None else nf.omega - p[: sig.m]
    omega_bar = np.concatenate([omega, np.zeros(2 * sig.m0)])
    dm = nf.hessian
    e0 = nf.e
    if variant is IsoVariant.DEGENERATE:
        preserved, _ = pivot_rows(dm, sig.m)
    else:
        preserved = tuple(range(size))
    idx = list(preserved)
    k = len(idx)

    bordered = np.zeros((k + 1, k + 1))
    bordered[:k, :k] = dm[np.ix_(idx, idx)]
    bordered[:k, k] = -omega_bar[idx]
    bordered[k, :k] = omega_bar[idx]
    if numerical_rank(bordered, RANK_THRESHOLD) < k + 1:
        raise SingularBorderedMatrix(f"bordered matrix of size {k + 1} is numerically singular")

    def full(unknowns: FloatArray) -> FloatArray:
        w = np.zeros(size)
        w[idx] = unknowns[:k]
        return w

    def residual(unknowns: FloatArray) -> FloatArray:
        w, t = full(unknowns), unknowns[k]
        grad = dm @ w + nf.h_gradient(w) + p - t * omega_bar
        value = e0 + float(np.dot(omega_bar + p, w)) + 0.5 * float(w @ dm @ w) + nf.h_value(w)
        return np.concatenate([grad[idx], [value - energy]])

    def jacobian(unknowns: FloatArray) -> FloatArray:
        w, t = full(unknowns), unknowns[k]
        jac = np.zeros((k + 1, k + 1))
        jac[:k, :k] = (dm + nf.h_hessian(w))[np.ix_(idx, idx)]
        jac[:k, k] = -omega_bar[idx]
        slope = omega_bar + p + dm @ w + nf.h_gradient(w)
        jac[k, :k] = slope[idx]
        return jac

    start = np.zeros(k + 1)
    solution, res, _ = _newton(residual, jacobian, start, ISOENERGETIC_TOLERANCE, "isoenergetic shift")
    w = full(solution)
    value = e0 + float(np.dot(omega_bar + p, w)) + 0.5 * float(w @ dm @ w) + nf.h_value(w)
    return IsoShift(w, float(solution[k]), res, abs(value - energy), preserved)


# ---- one cycle and the iteration --------------------------------------------------------


def _condition_monitor(
    sched: KamSchedule,
    checks: TruncationChecks,
    h_drift: float,
    mu0: float,
) -> dict[str, bool]:
    width = sched.r - sched.r_next
    cutoff = checks.effective_cutoff
    gamma_sum = compressor(sched, cutoff)
    mu_sigma = sched.mu ** float(sched.sigma)
    ratio = sched.gamma_next / sched.gamma if sched.gamma else 0.0
    return {
        "H1": checks.h1,
        "H2": checks.h2,
        "H3": h_drift <= math.sqrt(mu0),
        "H4": sched.s * cutoff**sched.tau <= sched.gamma,
        "H5": sched.c0 * mu_sigma * gamma_sum < width / 8,
        "H6": sched.c0 * mu_sigma * gamma_sum < sched.alpha / 8,
        "H7": mu_sigma * gamma_sum**3 <= ratio**sched.b,
    }


def _identity_step(series: FTSeries, sched: KamSchedule, delta: float) -> StepResult:
    sig = series.signature
    nxt = schedule_next(sched)
    zero = FTSeries.zero(sig, series.truncation, series.grade_unit)
    report = StepReport(
        nu=sched.nu,
        pre_norm=0.0,
        post_norm=0.0,
        tail_norm=0.0,
        minimal_divisor=math.inf,
        homological_residual=0.0,
        shift_residual=0.0,
        drift=np.zeros(sig.m),
        drift_constant=0.0,
        conditions={},
        lie_order=0,
        lie_remainder=0.0,
        flags=("identity",) + nxt.flags,
    )
    return StepResult(series, TransformRecord(zero, np.zeros(sig.n_vars)), report, zero, nxt)


def kam_step(
    series: FTSeries,
    sched: KamSchedule,
    delta: float,
    mode: StepMode = StepMode.PLAIN,
    *,
    shape: TruncationShape = TruncationShape.FULL,
    iso_variant: IsoVariant = IsoVariant.FULL_RANK,
    energy: float | None = None,
    lie_order: int = LIE_ORDER_DEFAULT,
    reference_h: FTSeries | None = None,
    mu0: float | None = None,
) -> StepResult:
    """
    One KAM cycle: truncate, solve the homological equation, apply the Lie transform, then
    translate (y, z) so the frequency is restored in the requested mode.

    Raises:
        SmallDivisor: the frequency fails the Diophantine test up to the effective cutoff
        RankConditionError: partial mode without the required rank structure
        ShiftConvergenceError: a frequency-shift Newton solve diverged
    """
    sig = series.signature
    nf = NormalForm.from_series(series, delta)
    perturbation = oscillating(series)
    if perturbation.is_zero:
        return _identity_step(series, sched, delta)

    cutoff = sched.effective_cutoff(series.truncation.fourier_cutoff)
    diophantine = check_diophantine(nf.base_omega, sched.gamma, sched.tau, cutoff)
    if not diophantine.passed:
        assert diophantine.worst_k is not None
        raise SmallDivisor(diophantine.worst_k, diophantine.worst_divisor, diophantine.worst_bound)

    head, _, checks = build_truncation(perturbation, sched, shape, delta)
    solution = solve_homological(nf, head, sched)
    generator = solution.generator
    residual = homological_residual(nf, head, generator)
    head_norm = weighted_norm(head.at_scale(delta), sched.domain())
    residual_norm = weighted_norm(residual.at_scale(delta), sched.domain())
    relative_residual = residual_norm / head_norm if head_norm else residual_norm

    lie = lie_transform(series, generator, lie_order, delta)
    transformed = lie.series
    after = NormalForm.from_series(transformed, delta)
    target = nf.omega
    p010 = after.omega - target
    p001 = after.linear_z

    flags: list[str] = []
    shift = np.zeros(sig.n_vars)
    shift_residual = 0.0
    exchange: np.ndarray | None = None
    elimination: FloatArray | None = None
    t_value: float | None = None
    match mode:
        case StepMode.PLAIN:
            try:
                full = frequency_shift_full(after, p010, p001)
                shift, shift_residual = full.w, full.residual
            except RankConditionError:
                flags.append("singular-M")
                logger.info("step %d: M is singular, frequency left to drift", sched.nu)
        case StepMode.PARTIAL:
            part = frequency_shift_partial(after, p010, p001)
            shift, shift_residual = part.w, part.residual
            exchange, elimination = part.row_exchange, part.elimination
        case StepMode.ISOENERGETIC:
            target_energy = nf.e if energy is None else energy
            iso = frequency_shift_isoenergetic(after, p010, p001, target_energy, iso_variant, target)
            shift, shift_residual, t_value = iso.w, iso.residual, iso.t
            target = (1.0 + iso.t) * target

    if np.any(shift):
        y0, z0 = shift[: sig.m], shift[sig.m:]
        transformed = translate(transformed, y=y0, u=z0[: sig.m0], v=z0[sig.m0:])
    final = NormalForm.from_series(transformed, delta)
    drift = final.omega - target
    increment = final.potential - nf.potential
    residual_perturbation = oscillating(transformed)

    nxt = schedule_next(sched)
    denominator = delta * sched.s * (sched.gamma**sched.b * sched.mu + sched.s)
    drift_norm = float(np.linalg.norm(drift))
    h_reference = nf.h if reference_h is None else reference_h
    h_drift = weighted_norm((final.h - h_reference).at_scale(delta), sched.domain())
    conditions = _condition_monitor(sched, checks, h_drift, sched.mu if mu0 is None else mu0)
    flags.extend(f"{name} violated" for name, ok in conditions.items() if not ok)
    flags.extend(nxt.flags)

    report = StepReport(
        nu=sched.nu,
        pre_norm=weighted_norm(perturbation, sched.domain(), delta),
        post_norm=weighted_norm(residual_perturbation, nxt.domain(), delta),
        tail_norm=checks.tail_norm,
        minimal_divisor=solution.minimal_divisor,
        homological_residual=relative_residual,
        shift_residual=shift_residual,
        drift=drift,
        drift_constant=drift_norm / denominator if denominator else math.inf,
        conditions=conditions,
        lie_order=lie.order,
        lie_remainder=lie.remainder_bound,
        flags=tuple(flags),
    )
    logger.info(
        "step %d: |P| %.3e -> %.3e, min divisor %.3e, |drift| %.3e",
        sched.nu,
        report.pre_norm,
        report.post_norm,
        report.minimal_divisor,
        drift_norm,
    )
    record = TransformRecord(generator, shift, exchange, elimination, t_value)
    return StepResult(transformed, record, report, increment, nxt)


@frozen
class IterationResult:
    series: FTSeries
    steps: list[StepResult]
    initial_potential: FTSeries
    delta: float

    @property
    def records(self) -> list[TransformRecord]:
        return [s.record for s in self.steps]

    @property
    def reports(self) -> list[StepReport]:
        return [s.report for s in self.steps]

    @property
    def ledger(self) -> list[FTSeries]:
        """Averaged-potential ledger: the initial potential, then one increment per step."""
        return [self.initial_potential] + [s.potential_increment for s in self.steps]

    @property
    def norms(self) -> list[float]:
        """|P_0|, |P_1|, ... with |P_nu+1| measured on the domain of step nu + 1."""
        if not self.steps:
            return []
        return [self.steps[0].report.pre_norm] + [s.report.post_norm for s in self.steps]

    @property
    def drift_constant(self) -> float:
        """Smallest c with |drift| <= c delta s (gamma^b mu + s) at every step."""
        return max((s.report.drift_constant for s in self.steps), default=0.0)

    @property
    def normal_form(self) -> NormalForm:
        return NormalForm.from_series(self.series, self.delta)

    @property
    def gbar(self) -> FTSeries:
        out = self.initial_potential
        for s in self.steps:
            out = out + s.potential_increment
        return out


def run_iteration(
    series: FTSeries,
    sched: KamSchedule,
    delta: float,
    steps: int,
    mode: StepMode = StepMode.PLAIN,
    *,
    shape: TruncationShape = TruncationShape.FULL,
    iso_variant: IsoVariant = IsoVariant.FULL_RANK,
    energy: float | None = None,
    lie_order: int = LIE_ORDER_DEFAULT,
) -> IterationResult:
    """Apply `steps` KAM cycles, carrying the schedule forward."""
    initial = NormalForm.from_series(series, delta)
    mu0 = sched.mu
    if mode is StepMode.ISOENERGETIC and energy is None:
        energy = initial.e
    results: list[StepResult] = []
    current = series
    for _ in range(steps):
        result = kam_step(
            current,
            sched,
            delta,
            mode,
            shape=shape,
            iso_variant=iso_variant,
            energy=energy,
            lie_order=lie_order,
            reference_h=initial.h,
            mu0=mu0,
        )
        results.append(result)
        current = result.series
        sched = result.schedule
    return IterationResult(current, results, initial.potential, delta)
