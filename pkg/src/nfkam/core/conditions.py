"""
Hypothesis checks for the persistence theorems and a Monte Carlo estimate of the
Diophantine excluded measure.
"""

import functools
import itertools
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from typing import TYPE_CHECKING, Any

import numpy as np
import numpy.typing as npt
import scipy.stats
from attrs import field, frozen

from nfkam.core.ftalgebra import FloatArray, IntVector, VarKind, partial
from nfkam.core.lattice import H0Model, ResonanceFrame
from nfkam.utils.parallel import ordered_map

if TYPE_CHECKING:
    from nfkam.core.kamengine import NormalForm

logger = logging.getLogger(__name__)

RELATIVE_RANK_THRESHOLD = 1e-8
RUSSMANN_SAMPLES = 100
RUSSMANN_NOISE = 1e-4
MEASURE_CHUNK = 10_000
MIN_MEASURE_SAMPLES = 10_000

SURFACE_CONDITIONS = ("S1", "S2", "S3", "S3'", "S4", "S5", "S6", "S7", "S8")
NORMAL_FORM_CONDITIONS = ("A1", "A2", "A3")
ALL_CONDITIONS = SURFACE_CONDITIONS + NORMAL_FORM_CONDITIONS

type FrequencyMap = Callable[[FloatArray], FloatArray]


def numerical_rank(matrix: npt.ArrayLike, threshold: float = RELATIVE_RANK_THRESHOLD) -> int:
    """Singular values below threshold * largest count as zero."""
    arr = np.atleast_2d(np.asarray(matrix, dtype=float))
    if arr.size == 0:
        return 0
    sv = np.linalg.svd(arr, compute_uv=False)
    if not len(sv) or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > threshold * sv[0]))


def _singular_values(matrix: FloatArray) -> list[float]:
    if matrix.size == 0:
        return []
    return [float(s) for s in np.linalg.svd(matrix, compute_uv=False)]


# ---- Diophantine ------------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def half_lattice(m: int, cutoff: int) -> npt.NDArray[np.int64]:
    """Canonical k (first nonzero entry positive) with 0 < |k|_1 <= cutoff, ordered by |k|_1 then lexicographically."""
    vectors: list[IntVector] = []
    for k in itertools.product(range(-cutoff, cutoff + 1), repeat=m):
        norm = sum(abs(c) for c in k)
        if norm == 0 or norm > cutoff:
            continue
        lead = next(c for c in k if c)
        if lead > 0:
            vectors.append(k)
    vectors.sort(key=lambda k: (sum(abs(c) for c in k), k))
    return np.array(vectors, dtype=np.int64).reshape(-1, m)


@frozen
class DiophantineVerdict:
    passed: bool
    worst_k: IntVector | None
    worst_divisor: float
    worst_bound: float

    def __bool__(self) -> bool:
        return self.passed


def check_diophantine(omega: Sequence[float] | FloatArray, gamma: float, tau: float, cutoff: int) -> DiophantineVerdict:
    """|<k, omega>| > gamma / |k|^tau for every 0 < |k|_1 <= cutoff, by exhaustive scan."""
    w = np.asarray(omega, dtype=float)
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    ks = half_lattice(len(w), cutoff)
    divisors = np.abs(ks @ w)
    norms = np.abs(ks).sum(axis=1).astype(float)
    margins = divisors * norms**tau
    worst = int(np.argmin(margins))
    bound = gamma / norms[worst] ** tau
    passed = bool(np.all(margins > gamma))
    return DiophantineVerdict(passed, tuple(int(c) for c in ks[worst]), float(divisors[worst]), float(bound))


def diophantine_margins(omegas: FloatArray, tau: float, cutoff: int) -> FloatArray:
    """min_k |<k, omega>| |k|^tau for each row of omegas; omega fails at gamma iff margin <= gamma."""
    ks = half_lattice(omegas.shape[1], cutoff)
    weight = np.abs(ks).sum(axis=1).astype(float) ** tau
    return np.min(np.abs(omegas @ ks.T) * weight, axis=1)


# ---- reports ---------------------------------------------------------------------------


@frozen
class ConditionEntry:
    name: str
    holds: bool
    witness: dict[str, Any] = field(factory=dict)
    samples: list[list[float]] = field(factory=list)


@frozen
class ConditionReport:
    entries: dict[str, ConditionEntry]
    n: int | None = None

    def holds(self, *names: str) -> bool:
        return all(self.entries[name].holds for name in names)

    @property
    def failed(self) -> list[str]:
        return [name for name, entry in self.entries.items() if not entry.holds]


# ---- Rüssmann -----------------------------------------------------------------------------


def _multi_indices(p: int, max_order: int) -> list[tuple[int, ...]]:
    out = [a for a in itertools.product(range(max_order + 1), repeat=p) if sum(a) <= max_order]
    out.sort(key=lambda a: (sum(a), a))
    return out


def _derivative(fn: FrequencyMap, alpha: tuple[int, ...], point: FloatArray, step: float) -> FloatArray:
    """Nested central differences."""
    for i, a in enumerate(alpha):
        if a:
            lowered = alpha[:i] + (a - 1,) + alpha[i + 1:]
            e = np.zeros(len(point))
            e[i] = step
            return (_derivative(fn, lowered, point + e, step) - _derivative(fn, lowered, point - e, step)) / (2 * step)
    return np.asarray(fn(point), dtype=float)


def derivative_collection(fn: FrequencyMap, point: FloatArray, m: int, scale: float = 1.0) -> FloatArray:
    """Columns d^alpha omega(point) for 0 <= |alpha| <= m - 1."""
    point = np.asarray(point, dtype=float)
    columns = []
    for alpha in _multi_indices(len(point), m - 1):
        order = sum(alpha)
        step = scale * np.finfo(float).eps ** (1.0 / (order + 2)) if order else 0.0
        columns.append(_derivative(fn, alpha, point, step))
    return np.array(columns).T


def check_russmann(
    omega_map: FrequencyMap,
    box: tuple[Sequence[float], Sequence[float]],
    m: int,
    samples: int = RUSSMANN_SAMPLES,
    seed: int = 0,
    points: Sequence[Sequence[float]] | None = None,
    name: str = "A1",
) -> ConditionEntry:
    """rank {d^alpha omega : |alpha| <= m - 1} = m at every sampled parameter."""
    lo, hi = np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float)
    if points is None:
        rng = np.random.Generator(np.random.Philox(seed))
        pts = lo + (hi - lo) * rng.random((samples, len(lo)))
    else:
        pts = np.asarray(points, dtype=float)

    def evaluate(point: FloatArray) -> tuple[int, float, float]:
        coarse = derivative_collection(omega_map, point, m)
        fine = derivative_collection(omega_map, point, m, scale=0.5)
        sv = np.linalg.svd(fine, compute_uv=False)
        rank = numerical_rank(fine)
        ratio = float(sv[m - 1] / sv[0]) if len(sv) >= m and sv[0] > 0 else 0.0
        noise = float(np.max(np.abs(fine - coarse)) / max(np.max(np.abs(fine)), 1e-300))
        return rank, ratio, noise

    results = ordered_map(evaluate, list(pts))
    ranks = [r for r, _, _ in results]
    noise = max((n for _, _, n in results), default=0.0)
    holds = all(r == m for r in ranks)
    witness: dict[str, Any] = {
        "ranks": ranks,
        "min_relative_singular_value": min((q for _, q, _ in results), default=0.0),
        "derivative_noise": noise,
        "noise_flag": noise > RUSSMANN_NOISE,
    }
    if noise > RUSSMANN_NOISE:
        logger.warning("%s: finite-difference noise %.2e dominates the derivative estimates", name, noise)
    return ConditionEntry(name, holds, witness, [list(map(float, p)) for p in pts])


# ---- rank conditions -------------------------------------------------------------------


def bordered(matrix: FloatArray, border: FloatArray) -> FloatArray:
    size = matrix.shape[0]
    out = np.zeros((size + 1, size + 1))
    out[:size, :size] = matrix
    out[:size, size] = border
    out[size, :size] = border
    return out


@frozen
class _SurfaceSample:
    y: FloatArray
    gamma: FloatArray
    omega_star: FloatArray


def _surface_sample(h0: H0Model, frame: ResonanceFrame, y: FloatArray) -> _SurfaceSample:
    k0 = frame.matrix().astype(float)
    gamma = k0.T @ h0.hessian(y) @ k0
    omega_star = frame.k_star.T.astype(float) @ h0.gradient(y)
    return _SurfaceSample(np.asarray(y, dtype=float), 0.5 * (gamma + gamma.T), omega_star)


def _infer_n(ranks: Iterable[int], offset: int, upper: int) -> tuple[int | None, bool]:
    values = {r - offset for r in ranks}
    if len(values) != 1:
        return None, False
    n = values.pop()
    return n, 0 < n <= upper


def check_rank_conditions(
    h0: H0Model,
    frame: ResonanceFrame,
    points: Sequence[Sequence[float]],
    which: Iterable[str] = SURFACE_CONDITIONS,
    potential_hessian: Callable[[FloatArray], FloatArray] | None = None,
    slow_angles: Sequence[Sequence[float]] | None = None,
    normal_form: "NormalForm | None" = None,
    box: tuple[Sequence[float], Sequence[float]] | None = None,
    seed: int = 0,
) -> ConditionReport:
    """
    Evaluate the requested rank conditions at sampled resonant-surface points.

    Args:
        potential_hessian: u -> d_u^2 of the averaged perturbation, already scaled by eps^-kappa
        slow_angles: u sample points for S3/S4; defaults to a 16-point grid per slow angle
        normal_form: required for A1-A3
        box: parameter box for S1; defaults to the bounding box of `points`
    """
    requested = list(dict.fromkeys(which))
    unknown = [c for c in requested if c not in ALL_CONDITIONS]
    if unknown:
        raise ValueError(f"unknown conditions {unknown}")
    m, m0 = frame.m, frame.m0
    pts = [np.asarray(p, dtype=float) for p in points]
    samples = ordered_map(lambda y: _surface_sample(h0, frame, y), pts)
    sample_rows = [list(map(float, s.y)) for s in samples]
    if slow_angles is None:
        axis = np.linspace(0.0, 2 * np.pi, 16, endpoint=False)
        u_grid = [np.array(u) for u in itertools.product(axis, repeat=m0)] if m0 else []
    else:
        u_grid = [np.asarray(u, dtype=float) for u in slow_angles]
    potential = [potential_hessian(u) for u in u_grid] if potential_hessian is not None else []

    entries: dict[str, ConditionEntry] = {}
    gamma_ranks = [numerical_rank(s.gamma) for s in samples]
    n, n_ok = _infer_n(gamma_ranks, m0, m)
    if samples and n is None:
        logger.warning("inconsistent n across surface samples: ranks %s", gamma_ranks)

    def blocks(s: _SurfaceSample) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
        g = s.gamma
        return g[:m, :m], g[:m, m:], g[m:, :m], g[m:, m:]

    def entry(name: str, holds: bool, **witness: Any) -> None:
        entries[name] = ConditionEntry(name, bool(holds) and bool(samples), witness, sample_rows)

    for name in requested:
        match name:
            case "S1":
                if pts:
                    lo = np.min(pts, axis=0) if box is None else np.asarray(box[0], dtype=float)
                    hi = np.max(pts, axis=0) if box is None else np.asarray(box[1], dtype=float)
                    k_star = frame.k_star.T.astype(float)
                    entries["S1"] = check_russmann(
                        lambda y: k_star @ h0.gradient(y), (lo, hi), m, seed=seed, points=pts, name="S1"
                    )
                else:
                    entry("S1", False, reason="no surface samples")
            case "S2":
                slow_ranks = [numerical_rank(np.hstack([b[2], b[3]])) for b in map(blocks, samples)]
                entry("S2", n_ok and all(r == m0 for r in slow_ranks), n=n, ranks=gamma_ranks, slow_ranks=slow_ranks)
            case "S3" | "S3'":
                ranks = []
                for s in samples:
                    if name == "S3":
                        for a in potential or [np.zeros((m0, m0))]:
                            k = np.zeros((m + 2 * m0, m + 2 * m0))
                            k[: m + m0, : m + m0] = s.gamma
                            k[m + m0:, m + m0:] = a
                            ranks.append(numerical_rank(bordered(k, np.concatenate([s.omega_star, np.zeros(2 * m0)]))))
                    else:
                        ranks.append(numerical_rank(bordered(s.gamma, np.concatenate([s.omega_star, np.zeros(m0)]))))
                target = (n or 0) + (2 * m0 if name == "S3" else m0) + 1
                entry(name, n_ok and all(r == target for r in ranks), n=n, ranks=ranks, target=target)
            case "S4":
                dets = [abs(float(np.linalg.det(a))) for a in potential]
                sigma = min(dets, default=0.0)
                entry("S4", bool(potential) and sigma > 0.0 and sigma > RELATIVE_RANK_THRESHOLD * max(dets), sigma_tilde=sigma)
            case "S5":
                minors = [numerical_rank(s.gamma) for s in samples]
                slow_dets = [float(np.linalg.det(b[3])) if m0 else 1.0 for b in map(blocks, samples)]
                slow_ok = all(numerical_rank(b[3]) == m0 for b in map(blocks, samples)) if m0 else True
                entry("S5", n_ok and (n or 0) < m and slow_ok, n=n, ranks=minors, slow_determinants=slow_dets)
            case "S6":
                schur_ranks = []
                slow_ok = True
                for b in map(blocks, samples):
                    if m0 and numerical_rank(b[3]) < m0:
                        slow_ok = False
                        continue
                    schur = b[0] - b[1] @ np.linalg.solve(b[3], b[2]) if m0 else b[0]
                    schur_ranks.append(numerical_rank(schur))
                entry("S6", slow_ok and n_ok and (n or 0) < m and all(r == n for r in schur_ranks), n=n, ranks=schur_ranks)
            case "S7":
                full = all(r == m + m0 for r in gamma_ranks)
                slow_ok = all(numerical_rank(b[3]) == m0 for b in map(blocks, samples)) if m0 else True
                entry("S7", full and slow_ok, ranks=gamma_ranks)
            case "S8":
                ranks = [numerical_rank(bordered(s.gamma, np.concatenate([s.omega_star, np.zeros(m0)]))) for s in samples]
                entry("S8", all(r == m + m0 + 1 for r in ranks), ranks=ranks, target=m + m0 + 1)
            case "A1" | "A2" | "A3":
                if normal_form is None:
                    entries[name] = ConditionEntry(name, False, {"reason": "no normal form supplied"})
                    continue
                entries[name] = _normal_form_condition(name, normal_form, seed)

    inferred = n
    for name in ("A2", "A3"):
        if name in entries and entries[name].witness.get("n") is not None:
            inferred = entries[name].witness["n"]
    return ConditionReport(entries, inferred)


def normal_form_frequency_map(nf: "NormalForm") -> FrequencyMap:
    """lambda -> d_y N(y = lambda, z = 0) at the numeric delta."""
    sig = nf.signature
    derivatives = [partial(nf.core, VarKind.Y, i) for i in range(sig.m)]

    def omega(lam: FloatArray) -> FloatArray:
        state = np.zeros(sig.dim)
        state[sig.m:2 * sig.m] = lam
        return np.array([d.evaluate(state, nf.delta) for d in derivatives])

    return omega


def _normal_form_condition(name: str, nf: "NormalForm", seed: int) -> ConditionEntry:
    sig = nf.signature
    m, m0 = sig.m, sig.m0
    matrix = nf.M
    total = numerical_rank(matrix)
    n = total - 2 * m0
    match name:
        case "A1":
            box = (np.full(m, -0.1), np.full(m, 0.1))
            return check_russmann(normal_form_frequency_map(nf), box, m, seed=seed, name="A1")
        case "A2":
            slow = numerical_rank(matrix[m:, :]) if m0 else 0
            holds = 0 < n <= m and slow == 2 * m0
            return ConditionEntry(
                "A2", holds, {"n": n, "rank_M": total, "rank_slow_rows": slow, "singular_values": _singular_values(matrix)}
            )
        case _:
            omega_bar = np.concatenate([nf.omega, np.zeros(2 * m0)])
            rank = numerical_rank(bordered(matrix, omega_bar))
            holds = 0 < n <= m and rank == n + 2 * m0 + 1
            return ConditionEntry("A3", holds, {"n": n, "rank": rank, "target": n + 2 * m0 + 1})


# ---- excluded measure ------------------------------------------------------------------


@frozen
class MeasureEstimate:
    gammas: list[float]
    fractions: list[float]
    stderrs: list[float]
    slope: float | None
    slope_halfwidth: float | None
    censored: bool
    samples: int
    seed: int

    def rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.gammas, self.fractions, self.stderrs))


def _chunk_margins(
    seed: int, index: int, size: int, lo: FloatArray, hi: FloatArray, tau: float, cutoff: int
) -> FloatArray:
    rng = np.random.Generator(np.random.Philox(seed).jumped(index))
    omegas = lo + (hi - lo) * rng.random((size, len(lo)))
    return diophantine_margins(omegas, tau, cutoff)


def excluded_measure(
    box: tuple[Sequence[float], Sequence[float]],
    gammas: Sequence[float],
    tau: float,
    cutoff: int,
    samples: int,
    seed: int = 0,
) -> MeasureEstimate:
    """
    Fraction of uniformly sampled omega in the box that fail the Diophantine test, per gamma.

    One margin per sample serves every gamma; chunks are generated from independent
    jumps of a counter-based generator so the result does not depend on the worker count.
    """
    if samples < MIN_MEASURE_SAMPLES:
        raise ValueError(f"at least {MIN_MEASURE_SAMPLES} samples are required, got {samples}")
    lo, hi = np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float)
    sizes = [min(MEASURE_CHUNK, samples - start) for start in range(0, samples, MEASURE_CHUNK)]
    chunks = ordered_map(lambda item: _chunk_margins(seed, item[0], item[1], lo, hi, tau, cutoff), list(enumerate(sizes)))
    margins = np.concatenate(chunks)

    ordered = sorted(float(g) for g in gammas)
    fractions: list[float] = []
    stderrs: list[float] = []
    for g in ordered:
        f = float(np.count_nonzero(margins <= g)) / samples
        fractions.append(f)
        stderrs.append(math.sqrt(f * (1.0 - f) / samples))

    usable = [(g, f) for g, f in zip(ordered, fractions) if 0.0 < f < 1.0]
    censored = fractions[0] == 0.0 if fractions else True
    slope: float | None = None
    halfwidth: float | None = None
    if len(usable) >= 2:
        fit = scipy.stats.linregress(np.log([g for g, _ in usable]), np.log([f for _, f in usable]))
        slope = float(fit.slope)
        halfwidth = float(1.96 * fit.stderr) if len(usable) > 2 else 0.0
    else:
        censored = True
    if censored:
        logger.warning("excluded-measure slope fit is censored (fractions %s)", fractions)
    return MeasureEstimate(ordered, fractions, stderrs, slope, halfwidth, censored, samples, seed)


def check_normal_form_conditions(normal_form: "NormalForm", which: Iterable[str] = NORMAL_FORM_CONDITIONS, seed: int = 0) -> ConditionReport:
    """A1-A3 alone, for models given directly in (x, y, u, v) form without a resonant frame."""
    requested = [c for c in dict.fromkeys(which) if c in NORMAL_FORM_CONDITIONS] or list(NORMAL_FORM_CONDITIONS)
    entries = {name: _normal_form_condition(name, normal_form, seed) for name in requested}
    inferred = next((e.witness["n"] for e in entries.values() if e.witness.get("n") is not None), None)
    return ConditionReport(entries, inferred)
