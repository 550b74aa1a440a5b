"""
Numerical ground truth for the engine: symplectic integration, frequency analysis,
pull-back of predicted tori through the recorded transformations, and the end-to-end
regression runs on the built-in appendix models.
"""

import logging
import math
from collections.abc import Callable, Sequence
from enum import StrEnum
from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt
import scipy.integrate
import scipy.optimize
from attrs import field, frozen

from nfkam.core.degeneracy import CriticalType, assemble_gbar, relative_equilibria
from nfkam.core.errors import IntegrationError, StageMismatch
from nfkam.core.ftalgebra import Basis, FloatArray, FTSeries, PhaseSignature, average, oscillating
from nfkam.core.kamengine import IterationResult, StepMode, TransformRecord, run_iteration
from nfkam.core.models import ReducedModel, reduced_model
from nfkam.utils.parallel import ordered_map

if TYPE_CHECKING:
    from nfkam.utils.config import GoldenCoefficient, ModelConfig

logger = logging.getLogger(__name__)

MIDPOINT_TOLERANCE = 1e-14
MIDPOINT_MAX_ITER = 50
FLOW_RTOL = 1e-12
FLOW_ATOL = 1e-14
MIN_SPECTRUM_SAMPLES = 2**12
NOISE_FLOOR_FACTOR = 10.0
SYMPLECTIC_STEP = 1e-6
NONCRITICAL_FRACTION = 0.9

type ComplexArray = npt.NDArray[np.complex128]
type StateMap = Callable[[FloatArray], FloatArray]


# ---- vector fields and the integrator --------------------------------------------------


def hamiltonian_field(series: FTSeries, eps: float = 1.0) -> StateMap:
    """z' = J grad H with x' = H_y, y' = -H_x, u' = H_v, v' = -H_u."""
    sig = series.signature
    m, m0 = sig.m, sig.m0

    def field_at(z: FloatArray) -> FloatArray:
        g = series.gradient(z, eps)
        out = np.empty_like(g)
        out[:m] = g[m:2 * m]
        out[m:2 * m] = -g[:m]
        out[2 * m:2 * m + m0] = g[2 * m + m0:]
        out[2 * m + m0:] = -g[2 * m:2 * m + m0]
        return out

    return field_at


def _midpoint_step(field_at: StateMap, z: FloatArray, dt: float) -> FloatArray | None:
    guess = z + dt * field_at(z)
    scale = max(1.0, float(np.max(np.abs(z))))
    for _ in range(MIDPOINT_MAX_ITER):
        nxt = z + dt * field_at(0.5 * (z + guess))
        if float(np.max(np.abs(nxt - guess))) <= MIDPOINT_TOLERANCE * scale:
            return nxt
        guess = nxt
    return None


@frozen
class Trajectory:
    signature: PhaseSignature
    times: FloatArray
    states: FloatArray
    energy: FloatArray
    dt: float
    method: str = "implicit-midpoint"
    flags: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.times)

    @property
    def energy_drift(self) -> float:
        """Secular drift: difference of the mean energy over the last and first tenth."""
        window = max(1, len(self.energy) // 10)
        return abs(float(np.mean(self.energy[-window:])) - float(np.mean(self.energy[:window])))

    @property
    def energy_oscillation(self) -> float:
        return float(np.max(np.abs(self.energy - self.energy[0])))

    def header(self) -> list[str]:
        sig = self.signature
        names = [f"x{i}" for i in range(sig.m)] + [f"y{i}" for i in range(sig.m)]
        names += [f"u{i}" for i in range(sig.m0)] + [f"v{i}" for i in range(sig.m0)]
        return ["t", *names, "energy"]

    def rows(self) -> list[list[float]]:
        return [[float(t), *map(float, z), float(e)] for t, z, e in zip(self.times, self.states, self.energy)]


def integrate(
    series: FTSeries,
    z0: Sequence[float] | FloatArray,
    T: float,  # noqa: N803
    dt: float,
    eps: float = 1.0,
    *,
    sample_every: int = 1,
    backward: bool = False,
) -> Trajectory:
    """
    Implicit-midpoint integration of the Hamiltonian flow with a fixed-point inner solve.

    Args:
        eps: numeric value substituted for the formal grade parameter
        sample_every: keep every n-th state
        backward: integrate towards negative time

    Raises:
        IntegrationError: the inner iteration fails even after halving the step once
    """
    if dt <= 0 or T < dt:
        raise ValueError(f"need dt > 0 and T >= dt, got T={T}, dt={dt}")
    sig = series.signature
    field_at = hamiltonian_field(series, eps)
    z = np.asarray(z0, dtype=float).copy()
    if z.shape != (sig.dim,):
        raise ValueError(f"initial state of shape {z.shape} for phase dimension {sig.dim}")
    steps = int(round(T / dt))
    h = -dt if backward else dt
    halved = False
    flags: list[str] = []
    times = [0.0]
    states = [z.copy()]
    for n in range(1, steps + 1):
        nxt = None if halved else _midpoint_step(field_at, z, h)
        if nxt is None and not halved:
            halved = True
            flags.append(f"dt halved at step {n}")
            logger.warning("midpoint iteration stalled at t=%.6g, halving dt", (n - 1) * h)
        if halved:
            nxt = _midpoint_step(field_at, z, 0.5 * h)
            nxt = None if nxt is None else _midpoint_step(field_at, nxt, 0.5 * h)
            if nxt is None:
                raise IntegrationError(f"implicit midpoint failed at t={(n - 1) * h:.6g} with dt={dt / 2:.3g}")
        assert nxt is not None
        z = nxt
        if n % sample_every == 0:
            times.append(n * h)
            states.append(z.copy())
    arr = np.array(states)
    energy = series.evaluate_many(arr, eps)
    traj = Trajectory(sig, np.array(times), arr, energy, dt, flags=tuple(flags))
    logger.debug("integrated %d steps: drift %.3e, oscillation %.3e", steps, traj.energy_drift, traj.energy_oscillation)
    return traj


def one_step_map(series: FTSeries, dt: float, eps: float = 1.0) -> StateMap:
    field_at = hamiltonian_field(series, eps)

    def step(z: FloatArray) -> FloatArray:
        nxt = _midpoint_step(field_at, np.asarray(z, dtype=float), dt)
        if nxt is None:
            raise IntegrationError(f"implicit midpoint failed with dt={dt:.3g}")
        return nxt

    return step


# ---- frequency analysis ----------------------------------------------------------------


class SignalKind(StrEnum):
    ANGLE = "angle"
    OSCILLATION = "oscillation"


@frozen
class FrequencyEstimate:
    frequency: float
    amplitude: float
    residual: float
    flagged: bool = False


def _dtft(signal: ComplexArray, window: FloatArray, t: FloatArray, omega: float) -> complex:
    return complex(np.sum(window * signal * np.exp(-1j * omega * t)) / np.sum(window))


def _single_tone(signal: ComplexArray, window: FloatArray, t: FloatArray, dt: float) -> FrequencyEstimate:
    n = len(signal)
    spectrum = np.abs(np.fft.fft(window * signal))
    freqs = 2 * np.pi * np.fft.fftfreq(n, dt)
    peak = int(np.argmax(spectrum))
    floor = float(np.median(spectrum))
    if peak == 0 or spectrum[peak] <= NOISE_FLOOR_FACTOR * max(floor, 1e-300):
        amplitude = float(np.abs(_dtft(signal, window, t, float(freqs[peak]))))
        return FrequencyEstimate(float(freqs[peak]), amplitude, 0.0, flagged=True)

    left, right = spectrum[(peak - 1) % n], spectrum[(peak + 1) % n]
    lo, mid, hi = (math.log(max(v, 1e-300)) for v in (left, spectrum[peak], right))
    curvature = lo - 2 * mid + hi
    offset = 0.5 * (lo - hi) / curvature if curvature else 0.0
    bin_width = 2 * np.pi / (n * dt)
    guess = float(freqs[peak]) + offset * bin_width

    result = scipy.optimize.minimize_scalar(
        lambda w: -abs(_dtft(signal, window, t, w)),
        bounds=(guess - bin_width, guess + bin_width),
        method="bounded",
        options={"xatol": 1e-12 * max(1.0, abs(guess))},
    )
    omega = float(result.x)
    coefficient = _dtft(signal, window, t, omega)
    tone = coefficient * np.exp(1j * omega * t)
    residual = float(np.linalg.norm(signal - tone) / max(np.linalg.norm(signal), 1e-300))
    return FrequencyEstimate(omega, abs(coefficient), residual)


def analyze_signal(signal: ComplexArray, dt: float, tones: int = 1) -> list[FrequencyEstimate]:
    """Dominant tones of a uniformly sampled complex signal, strongest first."""
    signal = np.asarray(signal, dtype=complex)
    if len(signal) < MIN_SPECTRUM_SAMPLES:
        raise ValueError(f"frequency analysis needs at least {MIN_SPECTRUM_SAMPLES} samples, got {len(signal)}")
    t = dt * np.arange(len(signal))
    window = np.hanning(len(signal))
    found: list[FrequencyEstimate] = []
    remaining = signal.copy()
    for _ in range(tones):
        estimate = _single_tone(remaining, window, t, dt)
        found.append(estimate)
        if estimate.flagged:
            break
        coefficient = _dtft(remaining, window, t, estimate.frequency)
        remaining = remaining - coefficient * np.exp(1j * estimate.frequency * t)
    return found


def frequency_analysis(
    traj: Trajectory,
    index: int = 0,
    kind: SignalKind = SignalKind.ANGLE,
    tones: int = 1,
) -> list[FrequencyEstimate]:
    """
    Frequencies of one angle (signal e^{i x_index}) or one normal oscillation (signal u + i v).
    Flagged estimates carry no peak above the noise floor.
    """
    sig = traj.signature
    times = traj.times
    steps = np.diff(times)
    if len(steps) and not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        raise ValueError("frequency analysis needs uniformly sampled times")
    dt = abs(float(steps[0])) if len(steps) else traj.dt
    match kind:
        case SignalKind.ANGLE:
            signal = np.exp(1j * traj.states[:, index])
        case SignalKind.OSCILLATION:
            u = traj.states[:, 2 * sig.m + index]
            v = traj.states[:, 2 * sig.m + sig.m0 + index]
            signal = u + 1j * v
    return analyze_signal(signal, dt, tones)


# ---- flows and pull-back ---------------------------------------------------------------


def flow(series: FTSeries, z0: Sequence[float] | FloatArray, t: float, eps: float = 1.0) -> FloatArray:
    """Time-t Hamiltonian flow by DOP853 at tight tolerances."""
    field_at = hamiltonian_field(series, eps)
    z = np.asarray(z0, dtype=float)
    if series.is_zero or t == 0.0:
        return z.copy()
    sol = scipy.integrate.solve_ivp(
        lambda _, y: field_at(y), (0.0, t), z, method="DOP853", rtol=FLOW_RTOL, atol=FLOW_ATOL
    )
    if not sol.success:
        raise IntegrationError(f"generator flow failed: {sol.message}")
    return sol.y[:, -1]


def _translate_state(signature: PhaseSignature, z: FloatArray, shift: FloatArray) -> FloatArray:
    out = z.copy()
    out[signature.m:] += shift
    return out


def pull_back(
    records: Sequence[TransformRecord],
    point: Sequence[float] | FloatArray,
    signature: PhaseSignature,
    delta: float,
) -> FloatArray:
    """Map a state in the final coordinates to the initial ones, last step first."""
    z = np.asarray(point, dtype=float).copy()
    for record in reversed(records):
        if np.any(record.shift):
            z = _translate_state(signature, z, np.asarray(record.shift, dtype=float))
        z = flow(record.generator, z, 1.0, delta)
    return z


def composed_step_map(records: Sequence[TransformRecord], signature: PhaseSignature, delta: float) -> StateMap:
    return lambda z: pull_back(records, z, signature, delta)


def symplectic_form(signature: PhaseSignature) -> FloatArray:
    m, m0 = signature.m, signature.m0
    omega = np.zeros((signature.dim, signature.dim))
    for i in range(m):
        omega[i, m + i], omega[m + i, i] = 1.0, -1.0
    for i in range(m0):
        a, b = 2 * m + i, 2 * m + m0 + i
        omega[a, b], omega[b, a] = 1.0, -1.0
    return omega


def symplectic_defect(
    state_map: StateMap,
    point: Sequence[float] | FloatArray,
    signature: PhaseSignature,
    step: float = SYMPLECTIC_STEP,
) -> float:
    """max |G^T Omega G - Omega| for the central-difference Jacobian G of the map at a point."""
    z = np.asarray(point, dtype=float)
    dim = signature.dim
    jac = np.empty((dim, dim))
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = step
        jac[:, i] = (state_map(z + e) - state_map(z - e)) / (2 * step)
    omega = symplectic_form(signature)
    return float(np.max(np.abs(jac.T @ omega @ jac - omega)))


# ---- torus residual --------------------------------------------------------------------


def _angle_aware_distance(signature: PhaseSignature, a: FloatArray, b: FloatArray) -> float:
    diff = a - b
    angles = list(range(signature.m)) + list(range(2 * signature.m, 2 * signature.m + signature.m0))
    diff[angles] = (diff[angles] + np.pi) % (2 * np.pi) - np.pi
    return float(np.linalg.norm(diff))


def torus_state(signature: PhaseSignature, x: Sequence[float] | FloatArray, u_star: Sequence[float] | FloatArray) -> FloatArray:
    z = np.zeros(signature.dim)
    z[: signature.m] = x
    z[2 * signature.m:2 * signature.m + signature.m0] = u_star
    return z


def predicted_frequency(series: FTSeries, u_star: Sequence[float] | FloatArray, delta: float) -> FloatArray:
    """d_y of the averaged Hamiltonian on the torus (y, u, v) = (0, u*, 0)."""
    sig = series.signature
    state = torus_state(sig, np.zeros(sig.m), u_star)
    return average(series).gradient(state, delta)[sig.m:2 * sig.m]


@frozen
class TorusResidual:
    value: float
    per_probe: list[float]
    frequency: FloatArray
    period: float


def torus_residual(
    original: FTSeries,
    iteration: IterationResult,
    u_star: Sequence[float] | FloatArray = (),
    probes: int = 8,
    checkpoints: int = 4,
) -> TorusResidual:
    """
    Distance between the integrated flow of the original Hamiltonian and the pulled-back rigid
    rotation of the predicted torus, maximized over probes and checkpoints within one period.
    """
    sig = original.signature
    delta = iteration.delta
    records = iteration.records
    u = np.asarray(u_star, dtype=float) if len(u_star) else np.zeros(sig.m0)
    omega = predicted_frequency(iteration.series, u, delta)
    period = 2 * np.pi / abs(float(omega[0])) if omega[0] else 1.0
    times = [period * (c + 1) / checkpoints for c in range(checkpoints)]
    field_at = hamiltonian_field(original, delta)

    def probe(j: int) -> float:
        x0 = np.zeros(sig.m)
        x0[0] = 2 * np.pi * j / probes
        start = pull_back(records, torus_state(sig, x0, u), sig, delta)
        sol = scipy.integrate.solve_ivp(
            lambda _, y: field_at(y),
            (0.0, times[-1]),
            start,
            method="DOP853",
            t_eval=times,
            rtol=FLOW_RTOL,
            atol=FLOW_ATOL,
        )
        if not sol.success:
            raise IntegrationError(f"probe {j} integration failed: {sol.message}")
        worst = 0.0
        for c, t in enumerate(times):
            predicted = pull_back(records, torus_state(sig, x0 + omega * t, u), sig, delta)
            worst = max(worst, _angle_aware_distance(sig, sol.y[:, c], predicted))
        return worst

    per_probe = ordered_map(probe, list(range(probes)))
    value = max(per_probe)
    logger.info("torus residual after %d steps: %.3e", len(records), value)
    return TorusResidual(value, per_probe, omega, period)


@frozen
class TorusVerification:
    predicted: FloatArray
    measured: list[FrequencyEstimate]
    energy_drift: float
    energy_oscillation: float
    trajectory: Trajectory

    @property
    def frequency_error(self) -> float:
        return max(abs(est.frequency - float(w)) for est, w in zip(self.measured, self.predicted))


def verify_torus(
    original: FTSeries,
    iteration: IterationResult,
    u_star: Sequence[float] | FloatArray,
    T: float,  # noqa: N803
    dt: float,
) -> TorusVerification:
    """Integrate the original flow from the pulled-back torus and measure its fast frequencies."""
    sig = original.signature
    delta = iteration.delta
    u = np.asarray(u_star, dtype=float)
    omega = predicted_frequency(iteration.series, u, delta)
    start = pull_back(iteration.records, torus_state(sig, np.zeros(sig.m), u), sig, delta)
    traj = integrate(original, start, T, dt, delta)
    measured = [frequency_analysis(traj, i)[0] for i in range(sig.m)]
    return TorusVerification(omega, measured, traj.energy_drift, traj.energy_oscillation, traj)


# ---- regression runs -------------------------------------------------------------------


@frozen
class CoefficientCheck:
    stage: str
    label: str
    expected: float
    actual: float
    tolerance: float
    at_least: bool = False

    @property
    def passed(self) -> bool:
        if self.at_least:
            return self.actual >= self.expected - self.tolerance
        return abs(self.actual - self.expected) <= self.tolerance


@frozen
class StageResult:
    name: str
    checks: list[CoefficientCheck] = field(factory=list)
    detail: dict[str, float | str] = field(factory=dict)
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.passed for c in self.checks)


@frozen
class RegressionBundle:
    model: str
    stages: list[StageResult]
    iteration: IterationResult | None = None

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.stages)

    def stage(self, name: str) -> StageResult:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def first_failure(self) -> CoefficientCheck | None:
        for stage in self.stages:
            for check in stage.checks:
                if not check.passed:
                    return check
        return None

    def raise_on_failure(self) -> None:
        failure = self.first_failure()
        if failure is not None:
            raise StageMismatch(failure.stage, failure.label, failure.expected, failure.actual)


def _golden_checks(
    stage: str, series: FTSeries, golden: "Sequence[GoldenCoefficient]", tolerance: float
) -> list[CoefficientCheck]:
    checks: list[CoefficientCheck] = []
    for entry in golden:
        if entry.stage != stage:
            continue
        basis = Basis.SIN if entry.basis == "sin" else Basis.COS
        actual = series.coefficient(entry.k, entry.j, basis, entry.grade())
        checks.append(CoefficientCheck(stage, entry.label(), float(entry.coef), actual, tolerance))
    return checks


def _nearest_turn(actual: float, expected: float) -> float:
    """actual shifted by a multiple of 2 pi to lie closest to expected."""
    return expected + ((actual - expected + np.pi) % (2 * np.pi) - np.pi)


def run_regression(
    cfg: "ModelConfig",
    steps: int | None = None,
    verify: bool = True,
    *,
    model: ReducedModel | None = None,
    iteration: IterationResult | None = None,
) -> RegressionBundle:
    """
    KAM steps -> gbar -> critical points -> classification -> torus residual on a reduced
    model, each stage compared against the golden entries of the config. A finished
    iteration can be passed in to skip the KAM stage.
    """
    model = model or reduced_model(cfg)
    series, delta = model.series, model.delta
    sig = series.signature
    sched = cfg.schedule.build(sig)
    golden = cfg.golden
    tolerance = golden.tolerance
    stages: list[StageResult] = []

    iteration = iteration or run_iteration(
        series,
        sched,
        delta,
        cfg.engine.steps if steps is None else steps,
        StepMode(cfg.engine.mode),
        lie_order=cfg.engine.lie_order,
    )
    for nu, step in enumerate(iteration.steps, start=1):
        name = f"generator-{nu}"
        stages.append(StageResult(name, _golden_checks(name, step.record.generator, golden.coefficients, tolerance)))

    final = iteration.series
    lowest = oscillating(final).min_grade()
    normal_form = StageResult(
        "normal-form",
        _golden_checks("normal-form", average(final), golden.coefficients, tolerance),
        {"oscillating_min_grade": "none" if lowest is None else str(lowest)},
    )
    if golden.min_oscillating_grade is not None:
        measured = math.inf if lowest is None else float(lowest)
        normal_form.checks.append(
            CoefficientCheck("normal-form", "oscillating min grade", float(golden.min_oscillating_grade), measured, 0.0, at_least=True)
        )
    stages.append(normal_form)

    gbar = assemble_gbar(iteration.ledger, delta)
    stages.append(StageResult("potential", _golden_checks("potential", gbar.gbar, golden.coefficients, tolerance)))

    kinetic = iteration.normal_form.M[-sig.m0:, -sig.m0:] if sig.m0 else None
    equilibria = relative_equilibria(gbar, kinetic)
    critical = StageResult("critical-points", detail={"count": float(len(equilibria.points))})
    if golden.critical_points:
        critical.checks.append(
            CoefficientCheck("critical-points", "count", float(len(golden.critical_points)), float(len(equilibria.points)), 0.0)
        )
    for expected, point in zip(golden.critical_points, equilibria.points):
        u = float(point.u[0])
        critical.checks.append(CoefficientCheck("critical-points", f"u* near {expected:.6f}", expected, _nearest_turn(u, expected), 1e-8))
        critical.checks.append(CoefficientCheck("critical-points", f"gradient residual at {expected:.6f}", 0.0, point.gradient_residual, 1e-10))
    stages.append(critical)

    classification = StageResult("classification")
    for expected, point in zip(golden.critical_types, equilibria.points):
        ok = point.kind is CriticalType(expected)
        classification.checks.append(CoefficientCheck("classification", f"{expected} at u = {point.u[0]:.6f}", 1.0, float(ok), 0.0))
    stages.append(classification)

    if golden.noncritical:
        section = gbar.section(delta)
        bound = NONCRITICAL_FRACTION * golden.noncritical_scale(delta)
        noncritical = StageResult("noncritical", detail={"bound": bound})
        for u in golden.noncritical:
            grad = float(np.max(np.abs(section.gradient(np.array([u])))))
            noncritical.checks.append(CoefficientCheck("noncritical", f"|g'({u:.6f})|", bound, grad, 0.0, at_least=True))
        stages.append(noncritical)

    if verify and equilibria.points:
        try:
            residual = torus_residual(series, iteration, equilibria.points[0].u, probes=cfg.verify.probes)
            stages.append(StageResult("verification", detail={"torus_residual": residual.value, "period": residual.period}))
        except IntegrationError as e:
            stages.append(StageResult("verification", error=str(e)))

    bundle = RegressionBundle(cfg.name, stages, iteration)
    failure = bundle.first_failure()
    if failure is None:
        logger.info("regression %s: all %d stages pass", cfg.name, len(stages))
    else:
        logger.warning(
            "regression %s: %s mismatch on %s (expected %.12g, got %.12g)",
            cfg.name,
            failure.stage,
            failure.label,
            failure.expected,
            failure.actual,
        )
    return bundle


def run_appendix_a(steps: int = 2, verify: bool = True) -> RegressionBundle:
    from nfkam.utils.config import load_config

    return run_regression(load_config("appendix-a"), steps, verify)


def run_appendix_b(iota: int, steps: int = 2, verify: bool = True) -> RegressionBundle:
    from nfkam.utils.config import load_config

    if iota not in (0, 1):
        raise ValueError(f"iota must be 0 or 1, got {iota}")
    return run_regression(load_config(f"appendix-b-i{iota}"), steps, verify)
