"""
Averaged torus potential: accumulation over KAM steps, order of degeneracy, relative
equilibria on T^m0 and the rescaling that puts one of them in normal-form position.
"""

import itertools
import logging
import math
from collections.abc import Sequence
from enum import StrEnum
from fractions import Fraction

import numpy as np
from attrs import field, frozen

from nfkam.core.errors import NoCleanOrder
from nfkam.core.ftalgebra import (
    FloatArray,
    FTSeries,
    PhaseSignature,
    VarKind,
    localize_angles,
    partial,
    split_slow_harmonics,
    translate,
)
from nfkam.utils.parallel import ordered_map

logger = logging.getLogger(__name__)

DEFAULT_DELTA_GRID = tuple(float(d) for d in np.logspace(-2, -4, 7))
DEFAULT_ORDER_CAP = 6
ORDER_RESIDUAL = 0.05
SEEDS_PER_ANGLE = 32
NEWTON_TOLERANCE = 1e-13
NEWTON_MAX_ITER = 60
DEDUPE_TOLERANCE = 1e-6
PROXIMITY_TOLERANCE = 1e-4
ACCEPT_RESIDUAL = 1e-10
ZERO_EIGENVALUE = 1e-10


class CriticalType(StrEnum):
    ELLIPTIC = "elliptic"
    HYPERBOLIC = "hyperbolic"
    MIXED = "mixed"
    DEGENERATE = "degenerate"


@frozen
class AveragedPotential:
    gbar: FTSeries
    steps: tuple[int, ...]
    delta: float
    delta_grid: tuple[float, ...] = DEFAULT_DELTA_GRID

    @property
    def signature(self) -> PhaseSignature:
        return self.gbar.signature

    def section(self, delta: float | None = None) -> "PotentialSection":
        return PotentialSection(self.gbar, self.delta if delta is None else delta)


def assemble_gbar(
    ledger: Sequence[FTSeries],
    delta: float,
    delta_grid: Sequence[float] = DEFAULT_DELTA_GRID,
) -> AveragedPotential:
    """Exact graded sum of the averaged-potential ledger; entry 0 is the initial potential."""
    if not ledger:
        raise ValueError("empty potential ledger")
    total = ledger[0]
    for increment in ledger[1:]:
        total = total + increment
    steps = tuple(i for i, s in enumerate(ledger) if not s.is_zero)
    _, harmonic = split_slow_harmonics(total)
    return AveragedPotential(harmonic, steps, delta, tuple(delta_grid))


# ---- the u-section (y, v) = (0, 0) ------------------------------------------------------


class PotentialSection:
    """gbar restricted to x = 0, y = 0, v = 0 as a function of u, at a numeric delta."""

    def __init__(self, gbar: FTSeries, delta: float):
        self.signature: PhaseSignature = gbar.signature
        self.delta: float = delta
        m, m0 = self.signature.m, self.signature.m0
        self.series: FTSeries = gbar.select(lambda t: not any(t.j[:m]) and not any(t.j[m + m0:]))
        self.scale: float = float(np.sum(np.abs(self.series.weights(delta)))) if len(self.series) else 0.0
        self._first: list[FTSeries] = [partial(self.series, VarKind.U, i) for i in range(m0)]

    def _state(self, u: FloatArray) -> FloatArray:
        sig = self.signature
        state = np.zeros(sig.dim)
        state[2 * sig.m:2 * sig.m + sig.m0] = u
        return state

    def value(self, u: FloatArray) -> float:
        return self.series.evaluate(self._state(u), self.delta)

    def gradient(self, u: FloatArray) -> FloatArray:
        sig = self.signature
        return self.series.gradient(self._state(u), self.delta)[2 * sig.m:2 * sig.m + sig.m0]

    def hessian(self, u: FloatArray) -> FloatArray:
        sig = self.signature
        state = self._state(u)
        rows = [d.gradient(state, self.delta)[2 * sig.m:2 * sig.m + sig.m0] for d in self._first]
        hess = np.array(rows)
        return 0.5 * (hess + hess.T)


# ---- critical points -------------------------------------------------------------------


@frozen
class CriticalPoint:
    u: FloatArray
    gradient_residual: float
    hessian: FloatArray
    morse_index: int
    kind: CriticalType | None = None
    eigenvalues: list[complex] = field(factory=list)
    flags: tuple[str, ...] = ()

    @property
    def nondegenerate(self) -> bool:
        size = float(np.max(np.abs(self.hessian)))
        return size > 0.0 and bool(np.all(np.abs(np.linalg.eigvalsh(self.hessian)) > ZERO_EIGENVALUE * size))


@frozen
class CriticalSet:
    points: list[CriticalPoint]
    euler_sum: int
    euler_ok: bool
    count_ok: bool

    def __len__(self) -> int:
        return len(self.points)


def _wrap(u: FloatArray) -> FloatArray:
    out = np.mod(u, 2 * np.pi)
    out[np.isclose(out, 2 * np.pi, atol=1e-12)] = 0.0
    return out


def _circular_distance(a: FloatArray, b: FloatArray) -> float:
    d = np.abs(_wrap(a) - _wrap(b))
    return float(np.max(np.minimum(d, 2 * np.pi - d)))


def _newton_on_section(section: PotentialSection, seed: FloatArray) -> FloatArray | None:
    if section.scale == 0.0:
        return None
    u = seed.copy()
    for _ in range(NEWTON_MAX_ITER):
        grad = section.gradient(u) / section.scale
        if np.max(np.abs(grad)) <= NEWTON_TOLERANCE:
            return _wrap(u)
        hess = section.hessian(u) / section.scale
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        u = u - step
        if not np.all(np.isfinite(u)):
            return None
    grad = section.gradient(u) / section.scale
    return _wrap(u) if np.max(np.abs(grad)) <= 1e3 * NEWTON_TOLERANCE else None


def find_critical_points(
    gbar: AveragedPotential | FTSeries,
    delta: float | None = None,
    seeds_per_angle: int = SEEDS_PER_ANGLE,
) -> CriticalSet:
    """Critical points of gbar on T^m0 at (y, v) = (0, 0) by Newton from a uniform seed grid."""
    if isinstance(gbar, AveragedPotential):
        section = gbar.section(delta)
    else:
        section = PotentialSection(gbar, 1.0 if delta is None else delta)
    m0 = section.signature.m0
    if m0 < 1:
        raise ValueError("critical points need at least one slow angle")
    axis = np.linspace(0.0, 2 * np.pi, seeds_per_angle, endpoint=False)
    seeds = [np.array(s) for s in itertools.product(axis, repeat=m0)]
    roots = ordered_map(lambda s: _newton_on_section(section, s), seeds)

    unique: list[FloatArray] = []
    for root in roots:
        if root is None:
            continue
        if any(_circular_distance(root, u) <= DEDUPE_TOLERANCE for u in unique):
            continue
        unique.append(root)
    unique.sort(key=lambda u: tuple(u))

    points: list[CriticalPoint] = []
    for u in unique:
        flags: tuple[str, ...] = ()
        if any(0 < _circular_distance(u, other) <= PROXIMITY_TOLERANCE for other in unique if other is not u):
            flags = ("near-duplicate",)
            logger.warning("critical points within %.0e of each other near u = %s", PROXIMITY_TOLERANCE, u)
        hess = section.hessian(u)
        residual = float(np.max(np.abs(section.gradient(u)))) / max(section.scale, 1e-300)
        if residual > ACCEPT_RESIDUAL:
            continue
        index = int(np.sum(np.linalg.eigvalsh(hess) < 0))
        points.append(CriticalPoint(u, residual, hess, index, flags=flags))

    euler = sum((-1) ** p.morse_index for p in points)
    morse = bool(points) and all(p.nondegenerate for p in points)
    euler_ok = (not morse) or euler == 0
    count_ok = (not morse) or len(points) >= m0 + 1
    if morse and not euler_ok:
        logger.warning("Euler characteristic check failed: sum of (-1)^index = %d", euler)
    logger.info("found %d critical points of the averaged potential (m0 = %d)", len(points), m0)
    return CriticalSet(points, euler, euler_ok, count_ok)


def classify(cp: CriticalPoint, kinetic: FloatArray | None = None) -> CriticalPoint:
    """
    Type of the relative equilibrium from the linearized normal flow u' = A v, v' = -V u.

    Args:
        kinetic: the v-block A of M; identity when omitted
    """
    v_mat = np.atleast_2d(np.asarray(cp.hessian, dtype=float))
    m0 = v_mat.shape[0]
    a_mat = np.eye(m0) if kinetic is None else np.atleast_2d(np.asarray(kinetic, dtype=float))
    v_norm = float(np.max(np.abs(v_mat))) or 1.0
    a_norm = float(np.max(np.abs(a_mat))) or 1.0
    linear = np.zeros((2 * m0, 2 * m0))
    linear[:m0, m0:] = a_mat / a_norm
    linear[m0:, :m0] = -v_mat / v_norm
    eigenvalues = np.linalg.eigvals(linear)
    if np.any(np.abs(eigenvalues) < ZERO_EIGENVALUE):
        kind = CriticalType.DEGENERATE
    else:
        hyperbolic = int(np.sum(np.abs(eigenvalues.real) > ZERO_EIGENVALUE))
        elliptic = len(eigenvalues) - hyperbolic
        if hyperbolic and elliptic:
            kind = CriticalType.MIXED
        elif hyperbolic:
            kind = CriticalType.HYPERBOLIC
        else:
            kind = CriticalType.ELLIPTIC
    values = sorted((complex(z) for z in eigenvalues), key=lambda z: (z.real, z.imag))
    return CriticalPoint(cp.u, cp.gradient_residual, cp.hessian, cp.morse_index, kind, values, cp.flags)


# ---- order of degeneracy ---------------------------------------------------------------


@frozen
class DegeneracyReport:
    order: int
    sigma_bar: float
    samples: list[tuple[float, float]]
    slope: float
    residual: float
    counts: list[int]


def _min_abs_det(gbar: AveragedPotential, delta: float, seeds_per_angle: int) -> tuple[float, int]:
    found = find_critical_points(gbar, delta, seeds_per_angle)
    if not found.points:
        return 0.0, 0
    return min(abs(float(np.linalg.det(p.hessian))) for p in found.points), len(found.points)


def detect_order(
    gbar: AveragedPotential,
    delta_grid: Sequence[float] | None = None,
    order_cap: int = DEFAULT_ORDER_CAP,
    seeds_per_angle: int = SEEDS_PER_ANGLE,
) -> DegeneracyReport:
    """
    Smallest a with delta^{-a m0} det d_u^2 gbar converging to a nonzero limit over the grid.

    Raises:
        NoCleanOrder: zero determinants, a non-integer slope or an order beyond the cap
    """
    grid = sorted(float(d) for d in (delta_grid or gbar.delta_grid))
    if len(grid) < 4:
        raise ValueError(f"delta grid needs at least 4 points, got {len(grid)}")
    m0 = gbar.signature.m0
    samples = ordered_map(lambda d: _min_abs_det(gbar, d, seeds_per_angle), grid)
    dets = [s for s, _ in samples]
    counts = [c for _, c in samples]
    log_delta = [math.log(d) for d in grid]
    if any(d <= 0.0 for d in dets):
        raise NoCleanOrder("Hessian determinant vanishes on the delta grid", log_delta, [], math.inf)
    log_det = [math.log(d) for d in dets]
    slope, _ = np.polyfit(log_delta, log_det, 1)
    per_angle = float(slope) / m0
    order = round(per_angle)
    residual = abs(per_angle - order)
    if residual >= ORDER_RESIDUAL or order < 1 or order > order_cap:
        raise NoCleanOrder(
            f"slope {per_angle:.4f} per slow angle is not a clean order in [1, {order_cap}]", log_delta, log_det, residual
        )
    sigma_bar = min(abs(d * delta ** (-order * m0)) for d, delta in zip(dets, grid))
    logger.info("degeneracy order a = %d, sigma_bar = %.4g, slope residual %.2e", order, sigma_bar, residual)
    return DegeneracyReport(order, sigma_bar, list(zip(grid, dets)), float(slope), residual, counts)


# ---- rescaling -------------------------------------------------------------------------


def rescale_grade(grade: Fraction, degree: int, a: int) -> Fraction:
    """Exponent of the new delta = delta^{(a+1)/2} after y, v -> delta^{(a-1)/2}(y, v), H -> delta^{(1-a)/2} H."""
    return (2 * grade + (a - 1) * (degree - 1)) / Fraction(a + 1)


def rescaled_delta(delta: float, a: int) -> float:
    return delta ** ((a + 1) / 2)


def rescale_at(cp: CriticalPoint | Sequence[float], series: FTSeries, a: int) -> FTSeries:
    """
    Translate the slow angles so the critical point is the origin, expand the slow harmonics
    there and rescale (y, v) and the Hamiltonian by powers of delta. Constant terms are dropped.
    """
    sig = series.signature
    u_star = np.asarray(cp.u if isinstance(cp, CriticalPoint) else cp, dtype=float)
    local = localize_angles(translate(series, u=u_star))
    unit = local.grade_unit
    new_unit = unit * (a + 1)
    acc = local.builder(grade_unit=new_unit)
    yv = list(range(sig.m)) + list(range(sig.m + sig.m0, sig.n_vars))
    dropped = 0.0
    for t in local.iter_terms():
        degree = sum(t.j[i] for i in yv)
        if degree == 0 and not any(t.k) and not any(t.j):
            dropped += t.coef
            continue
        scaled = 2 * t.grade + (a - 1) * (degree - 1) * unit
        if scaled < 0:
            raise ValueError(f"term {t} acquires a negative grade under the order-{a} rescaling")
        acc.add(scaled, t.basis, t.k, t.j, t.coef)
    if dropped:
        logger.debug("rescale_at dropped constant %.3e", dropped)
    return acc.finish().normalized_unit()


def relative_equilibria(
    gbar: AveragedPotential,
    kinetic: FloatArray | None = None,
    delta: float | None = None,
) -> CriticalSet:
    """Critical points with their classification, ordered by u."""
    found = find_critical_points(gbar, delta)
    classified = ordered_map(lambda p: classify(p, kinetic), found.points)
    return CriticalSet(classified, found.euler_sum, found.euler_ok, found.count_ok)
