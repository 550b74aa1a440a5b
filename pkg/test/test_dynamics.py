import json
import math

import numpy as np
import pytest

from nfkam.core.degeneracy import CriticalType
from nfkam.core.errors import StageMismatch
from nfkam.core.dynamics import (
    SignalKind,
    analyze_signal,
    composed_step_map,
    flow,
    frequency_analysis,
    integrate,
    one_step_map,
    predicted_frequency,
    pull_back,
    run_appendix_a,
    run_appendix_b,
    run_regression,
    symplectic_defect,
    torus_residual,
    verify_torus,
)
from nfkam.core.ftalgebra import FTSeries, PhaseSignature, Truncation
from nfkam.core.kamengine import KamSchedule, kam_step, run_iteration
from nfkam.core.models import reduced_model
from nfkam.utils.config import load_config, validate_config

GOLDEN = (1 + math.sqrt(5)) / 2
SIG1 = PhaseSignature(1, 0)
SIG11 = PhaseSignature(1, 1)
TRUNC = Truncation(8, 4)


def rotor() -> FTSeries:
    return FTSeries.monomial(SIG1, TRUNC, (1,), GOLDEN)


def oscillator() -> FTSeries:
    """omega y + (u^2 + v^2)/2"""
    return (
        FTSeries.monomial(SIG11, TRUNC, (1, 0, 0), GOLDEN)
        + FTSeries.monomial(SIG11, TRUNC, (0, 2, 0), 0.5)
        + FTSeries.monomial(SIG11, TRUNC, (0, 0, 2), 0.5)
    )


def pendulum() -> FTSeries:
    return FTSeries.monomial(SIG1, TRUNC, (2,), 0.5) + FTSeries.harmonic(SIG1, TRUNC, (1,), coef=-0.3)


def test_integrate_linear_flow():
    traj = integrate(rotor(), [0.25, 0.0], 100.0, 0.1)
    assert len(traj) == 1001
    assert traj.states[:, 0] == pytest.approx(0.25 + GOLDEN * traj.times, abs=1e-9)
    assert traj.times[-1] == pytest.approx(100.0)
    assert traj.header() == ["t", "x0", "y0", "energy"]
    assert len(traj.rows()[0]) == 4
    assert traj.flags == ()


def test_integrate_arguments():
    with pytest.raises(ValueError):
        _ = integrate(rotor(), [0.0, 0.0], 0.01, 0.1)
    with pytest.raises(ValueError):
        _ = integrate(rotor(), [0.0, 0.0, 0.0], 1.0, 0.1)


def test_oscillator_energy_and_frequencies():
    traj = integrate(oscillator(), [0.0, 0.0, 1.0, 0.0], 1e2, 1e-2)
    assert traj.energy_drift <= 1e-12
    assert traj.energy_oscillation <= 1e-11
    assert traj.header() == ["t", "x0", "y0", "u0", "v0", "energy"]

    (x_freq,) = frequency_analysis(traj, 0)
    assert x_freq.frequency == pytest.approx(GOLDEN, abs=1e-6)
    assert not x_freq.flagged
    (normal,) = frequency_analysis(traj, 0, SignalKind.OSCILLATION)
    assert normal.frequency == pytest.approx(-1.0, abs=1e-4)


def test_integrate_is_time_reversible():
    z0 = np.array([0.4, 0.3])
    forward = integrate(pendulum(), z0, 10.0, 0.01)
    back = integrate(pendulum(), forward.states[-1], 10.0, 0.01, backward=True)
    assert back.states[-1] == pytest.approx(z0, abs=1e-10)
    assert back.times[-1] == pytest.approx(-10.0)
    assert forward.energy_oscillation <= 1e-4


def test_sampling():
    traj = integrate(rotor(), [0.0, 0.0], 1.0, 0.1, sample_every=5)
    assert list(traj.times) == pytest.approx([0.0, 0.5, 1.0])


def test_analyze_signal():
    t = 0.2 * np.arange(5000)
    (single,) = analyze_signal(np.exp(1j * 0.7 * t), 0.2)
    assert single.frequency == pytest.approx(0.7, abs=1e-6)
    assert single.amplitude == pytest.approx(1.0, abs=1e-3)

    (constant,) = analyze_signal(np.ones(5000, dtype=complex), 0.2)
    assert constant.flagged

    two = analyze_signal(np.exp(1j * 0.7 * t) + 0.5 * np.exp(1j * math.sqrt(2) * t), 0.2, tones=2)
    assert sorted(e.frequency for e in two) == pytest.approx([0.7, math.sqrt(2)], abs=1e-5)

    with pytest.raises(ValueError):
        _ = analyze_signal(np.ones(100, dtype=complex), 0.2)


def test_one_step_map_is_symplectic():
    step = one_step_map(pendulum(), 1e-2)
    rng = np.random.default_rng(7)
    for point in rng.uniform(-1.0, 1.0, size=(10, 2)):
        assert symplectic_defect(step, point, SIG1) <= 1e-8
    assert symplectic_defect(lambda z: 2.0 * z, [0.1, 0.2], SIG1) == pytest.approx(3.0)


def test_flow_and_pull_back():
    assert flow(rotor(), [0.3, 1.0], 2.0) == pytest.approx([0.3 + 2 * GOLDEN, 1.0])
    point = np.array([0.1, 0.2, 0.3, 0.4])
    assert pull_back([], point, SIG11, 0.1) == pytest.approx(point)
    assert predicted_frequency(oscillator(), [0.0], 1.0) == pytest.approx([GOLDEN])


def test_composed_step_map_is_symplectic():
    cfg = load_config("appendix-a")
    model = reduced_model(cfg)
    step = kam_step(model.series, cfg.schedule.build(model.signature), model.delta)
    state_map = composed_step_map([step.record], model.signature, model.delta)
    rng = np.random.default_rng(11)
    for point in rng.uniform(-0.5, 0.5, size=(100, 4)):
        assert symplectic_defect(state_map, point, model.signature) <= 1e-6


def test_torus_residual_of_unperturbed_system():
    series = oscillator()
    iteration = run_iteration(series, KamSchedule.initial(SIG11), 1.0, 1)
    residual = torus_residual(series, iteration, [0.0], probes=4)
    assert residual.value <= 1e-9
    assert residual.period == pytest.approx(2 * math.pi / GOLDEN)


def test_run_appendix_a():
    bundle = run_appendix_a(verify=False)
    failure = bundle.first_failure()
    assert failure is None, f"{failure}"
    assert bundle.passed
    names = [s.name for s in bundle.stages]
    assert names[:5] == ["generator-1", "generator-2", "normal-form", "potential", "critical-points"]
    classification = bundle.stage("classification")
    assert classification.passed
    assert [c.label.split(" ")[0] for c in classification.checks] == [CriticalType.HYPERBOLIC, CriticalType.ELLIPTIC]


@pytest.mark.parametrize("iota", [0, 1])
def test_run_appendix_b(iota: int):
    bundle = run_appendix_b(iota, verify=False)
    failure = bundle.first_failure()
    assert failure is None, f"{failure}"
    if iota == 1:
        assert bundle.stage("noncritical").passed


def test_run_appendix_b_rejects_iota():
    with pytest.raises(ValueError):
        _ = run_appendix_b(2)


@pytest.mark.slow
def test_appendix_a_torus_verification():
    cfg = load_config("appendix-a")
    model = reduced_model(cfg)
    sched = cfg.schedule.build(model.signature)
    one = run_iteration(model.series, sched, model.delta, 1)
    two = run_iteration(model.series, sched, model.delta, 2)
    u_star = [math.pi]

    check = verify_torus(model.series, two, u_star, 1e4, 1e-2)
    assert check.measured[0].frequency == pytest.approx(1.0, abs=1e-4)
    assert check.frequency_error <= 1e-4
    assert check.energy_drift <= 1e-9

    first = torus_residual(model.series, one, u_star, probes=4)
    second = torus_residual(model.series, two, u_star, probes=4)
    assert second.value < first.value

    bundle = run_regression(cfg, verify=True, model=model, iteration=two)
    assert bundle.stage("verification").error is None


def test_regression_mismatch_raises():
    raw = json.loads(load_config("appendix-a").model_dump_json(by_alias=True))
    raw["golden"]["coefficients"][0]["coef"] = "0.3"
    bundle = run_regression(validate_config(raw), steps=1, verify=False)
    assert not bundle.passed
    failure = bundle.first_failure()
    assert failure is not None and failure.stage == "generator-1"
    with pytest.raises(StageMismatch):
        bundle.raise_on_failure()
