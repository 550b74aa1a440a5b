import math

import numpy as np
import pytest

from nfkam.core.dynamics import flow
from nfkam.core.errors import RankConditionError, SmallDivisor
from nfkam.core.ftalgebra import Basis, DomainParams, FTSeries, PhaseSignature, Truncation, average, oscillating, weighted_norm
from nfkam.core.kamengine import (
    KamSchedule,
    NormalForm,
    frequency_shift_full,
    frequency_shift_isoenergetic,
    frequency_shift_partial,
    homological_residual,
    kam_step,
    lie_transform,
    pivot_rows,
    run_iteration,
    schedule_next,
    solve_homological,
)
from nfkam.core.models import reduced_model
from nfkam.utils.config import load_config

GOLDEN = (1 + math.sqrt(5)) / 2


@pytest.fixture(scope="module")
def appendix_a():
    cfg = load_config("appendix-a")
    model = reduced_model(cfg)
    return cfg, model


def random_homological_instance(rng: np.random.Generator, singular: bool) -> tuple[NormalForm, FTSeries, float]:
    """Random symmetric M and a grade-1 R whose harmonics have |k_x| <= K_+ <= 10."""
    m, m0 = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    sig = PhaseSignature(m, m0)
    trunc = Truncation(fourier_cutoff=16, degree_cutoff=3)
    n = sig.n_vars
    a = rng.uniform(-1.0, 1.0, size=(n, n))
    matrix = a + a.T
    if singular:
        values, vectors = np.linalg.eigh(matrix)
        values[0] = 0.0
        matrix = vectors @ np.diag(values) @ vectors.T
    omega = rng.uniform(1.0, 2.0, size=m)
    delta = float(rng.uniform(0.01, 0.1))
    nf = NormalForm.build(sig, trunc, omega, matrix, delta)

    k_plus = int(rng.integers(1, 11))
    items = []
    while len(items) < 6:
        kx = rng.integers(-k_plus, k_plus + 1, size=m)
        if not kx.any() or np.abs(kx).sum() > k_plus or abs(float(kx @ omega)) < 0.05:
            continue
        ku = rng.integers(-2, 3, size=m0)
        j = np.zeros(n, dtype=int)
        for _ in range(int(rng.integers(0, 3))):
            j[rng.integers(n)] += 1
        basis = Basis.COS if rng.random() < 0.5 else Basis.SIN
        k = tuple(int(c) for c in np.concatenate([kx, ku]))
        items.append((1, basis, k, tuple(int(p) for p in j), float(rng.uniform(-1.0, 1.0))))
    return nf, FTSeries.from_terms(sig, trunc, items), delta


def test_normal_form_build():
    sig = PhaseSignature(2, 0)
    trunc = Truncation(8, 4)
    matrix = np.array([[2.0, 1.0], [1.0, 3.0]])
    nf = NormalForm.build(sig, trunc, [1.0, GOLDEN], matrix, 0.1, e=0.5)
    assert nf.omega == pytest.approx([1.0, GOLDEN])
    assert nf.base_omega == pytest.approx([1.0, GOLDEN])
    assert nf.hessian == pytest.approx(0.1 * matrix)
    assert nf.M == pytest.approx(matrix)
    assert nf.e == pytest.approx(0.5)
    assert nf.h.is_zero


def test_homological_residual_on_random_instances():
    rng = np.random.default_rng(2024)
    dom = DomainParams(r=0.5, s=0.5)
    singular_draws = 0
    for index in range(50):
        singular = index % 2 == 1
        nf, r, delta = random_homological_instance(rng, singular)
        singular_draws += int(np.linalg.matrix_rank(nf.M, tol=1e-9) < nf.M.shape[0])
        solution = solve_homological(nf, r)
        residual = homological_residual(nf, r, solution.generator)
        assert weighted_norm(residual, dom, delta) <= 1e-10 * weighted_norm(r, dom, delta), f"instance {index}"
    assert singular_draws == 25


def test_frequency_shift_full():
    sig = PhaseSignature(2, 0)
    matrix = np.array([[2.0, 1.0], [1.0, 3.0]])
    delta = 0.1
    nf = NormalForm.build(sig, Truncation(8, 4), [1.0, GOLDEN], matrix, delta)
    p = np.array([0.01, -0.02])
    shift = frequency_shift_full(nf, p, [])
    assert shift.w == pytest.approx(-np.linalg.solve(matrix, p) / delta, abs=1e-12)
    assert shift.residual <= 1e-12

    zero = frequency_shift_full(nf, [0.0, 0.0], [])
    assert not np.any(zero.w)


def test_frequency_shift_full_rejects_singular_m():
    sig = PhaseSignature(1, 1)
    nf = NormalForm.build(sig, Truncation(8, 4), [GOLDEN], np.diag([0.0, 0.0, 1.0]), 0.1)
    with pytest.raises(RankConditionError) as e:
        _ = frequency_shift_full(nf, [0.01], [0.0, 0.0])
    assert e.value.block == "M"


def test_pivot_rows():
    preserved, n = pivot_rows(np.diag([1.0, 0.0, 1.0, 1.0]), 2)
    assert preserved == (0, 2, 3)
    assert n == 1
    full, n_full = pivot_rows(np.eye(3), 1)
    assert full == (0, 1, 2)
    assert n_full == 1
    with pytest.raises(RankConditionError):
        _ = pivot_rows(np.diag([1.0, 1.0, 0.0]), 1)


@pytest.mark.parametrize("matrix, preserved", [
    (np.diag([1.0, 0.0, 1.0, 1.0]), (0, 2, 3)),
    (np.diag([0.0, 1.0, 1.0, 1.0]), (1, 2, 3)),
    (np.array([[2.0, 1.0, 0.0, 0.0], [1.0, 0.5, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]), (0, 2, 3)),
])
def test_frequency_shift_partial(matrix: np.ndarray, preserved: tuple[int, ...]):
    sig = PhaseSignature(2, 1)
    delta = 0.1
    nf = NormalForm.build(sig, Truncation(8, 4), [1.0, GOLDEN], matrix, delta)
    p = np.array([0.01, -0.02, 0.03, 0.015])
    shift = frequency_shift_partial(nf, p[:2], p[2:])
    assert shift.preserved == preserved
    assert shift.n == 1

    idx = list(preserved)
    (free,) = [i for i in range(4) if i not in preserved]
    restored = delta * matrix @ shift.w + p
    assert np.max(np.abs(restored[idx])) <= 1e-12

    # the preserved subsystem on its own
    expected = np.zeros(4)
    expected[idx] = np.linalg.solve(delta * matrix[np.ix_(idx, idx)], -p[idx])
    assert shift.w == pytest.approx(expected, abs=1e-10)
    assert shift.drift[free] == pytest.approx((delta * matrix @ expected + p)[free], abs=1e-10)
    assert not np.any(shift.drift[idx])

    eliminated = shift.elimination @ shift.row_exchange @ matrix
    assert np.max(np.abs(eliminated[-1])) <= 1e-12


def test_isoenergetic_shift_closed_form():
    sig = PhaseSignature(1, 0)
    delta = 0.1
    nf = NormalForm.build(sig, Truncation(8, 4), [1.0], np.array([[1.0]]), delta)

    zero = frequency_shift_isoenergetic(nf, [0.0], [], 0.0, target_omega=[1.0])
    assert zero.t == 0.0
    assert not np.any(zero.w)

    # (1 + p) w + (delta/2) w^2 = energy and delta w + p = t
    p, energy = 0.01, 2e-3
    shift = frequency_shift_isoenergetic(nf, [p], [], energy, target_omega=[1.0])
    a = 1.0 + p
    w = 2 * energy / (a + math.sqrt(a * a + 2 * delta * energy))
    assert shift.w[0] == pytest.approx(w, abs=1e-12)
    assert shift.t == pytest.approx(delta * w + p, abs=1e-12)
    assert shift.energy_residual <= 1e-11
    assert a + delta * shift.w[0] == pytest.approx(1.0 + shift.t, abs=1e-11)
    assert shift.preserved == (0,)


def test_lie_transform_exact_for_linear_action():
    sig = PhaseSignature(1, 0)
    trunc = Truncation(8, 4)
    h = FTSeries.monomial(sig, trunc, (1,))
    generator = FTSeries.harmonic(sig, trunc, (1,), coef=0.25)
    lie = lie_transform(h, generator, order=6)
    assert lie.series.coefficient((0,), (1,)) == 1.0
    assert lie.series.coefficient((1,), (0,), Basis.SIN) == pytest.approx(0.25)
    assert len(lie.series) == 2
    assert lie.remainder_bound == 0.0
    assert lie_transform(h, FTSeries.zero(sig, trunc)).series is h


def test_lie_transform_matches_generator_flow(appendix_a):
    cfg, model = appendix_a
    series, delta = model.series, model.delta
    generator = kam_step(series, cfg.schedule.build(model.signature), delta).record.generator
    lie = lie_transform(series, generator, 6, delta)
    rng = np.random.default_rng(13)
    points = np.column_stack([
        rng.uniform(0, 2 * math.pi, 20),
        rng.uniform(-0.1, 0.1, 20),
        rng.uniform(0, 2 * math.pi, 20),
        rng.uniform(-0.1, 0.1, 20),
    ])
    for point in points:
        moved = flow(generator, point, 1.0, delta)
        assert series.evaluate(moved, delta) == pytest.approx(lie.series.evaluate(point, delta), abs=1e-8)
    # the grade-2 potential keeps +cos u under this convention
    assert average(lie.series).coefficient((0, 1), (0, 0, 0), grade=2) == pytest.approx(1.0, abs=1e-10)


def test_schedule_next():
    sched = KamSchedule.initial(PhaseSignature(1, 1), c0=1e-3)
    nxt = schedule_next(sched)
    assert nxt.nu == 1
    assert nxt.r == pytest.approx(sched.r0 - sched.r0 / 4)
    assert nxt.gamma == pytest.approx(sched.gamma0 - sched.gamma0 / 4)
    assert nxt.s == pytest.approx(sched.alpha * sched.s / 8)
    assert nxt.mu < sched.mu
    assert nxt.K_plus >= sched.K_plus
    assert nxt.flags == ()
    third = schedule_next(nxt)
    assert third.r == pytest.approx(sched.r0 * (1 - 1 / 4 - 1 / 8))

    loose = schedule_next(KamSchedule.initial(PhaseSignature(1, 1)))
    assert "non-contracting" in loose.flags
    assert loose.mu > 1.0
    assert loose.K_plus == KamSchedule.initial(PhaseSignature(1, 1)).K_plus


def test_first_step_generator(appendix_a):
    cfg, model = appendix_a
    omega = 1.0
    sched = cfg.schedule.build(model.signature)
    step = kam_step(model.series, sched, model.delta)
    generator = step.record.generator
    for n in range(4):
        expected = -1.0 / (2 * omega * math.factorial(n))
        for k in ((1, 1), (1, -1)):
            assert generator.coefficient(k, (n, 0, 0), Basis.COS, grade=1) == pytest.approx(expected, abs=1e-12)
    assert all(t.basis is Basis.COS and t.grade == 1 for t in generator.iter_terms())
    report = step.report
    assert report.homological_residual <= 1e-10
    assert report.minimal_divisor == pytest.approx(omega)
    assert "singular-M" in report.flags
    assert report.post_norm < report.pre_norm
    assert step.schedule.nu == 1


def test_two_steps_push_oscillation_up(appendix_a):
    cfg, model = appendix_a
    sched = cfg.schedule.build(model.signature)
    result = run_iteration(model.series, sched, model.delta, 2)
    assert len(result.steps) == 2
    lowest = oscillating(result.series).min_grade()
    assert lowest is None or lowest >= 3
    assert len(result.ledger) == 3
    assert result.initial_potential.coefficient((0, 1), (0, 0, 0), grade=2) == 1.0


def test_four_steps_contract(appendix_a):
    cfg, model = appendix_a
    sched = cfg.schedule.build(model.signature)
    assert cfg.schedule.profile == "practical"
    assert sched.mu == 1e-3
    result = run_iteration(model.series, sched, model.delta, 4)
    norms = result.norms
    assert len(norms) == 5
    for nu, (before, after) in enumerate(zip(norms, norms[1:])):
        assert after <= before**1.05, f"step {nu}: {before:.3e} -> {after:.3e}"
    assert result.drift_constant <= 10.0
    assert all(s.schedule.K_plus >= sched.K_plus for s in result.steps)


def test_identity_step():
    sig = PhaseSignature(1, 1)
    trunc = Truncation(8, 4)
    series = FTSeries.monomial(sig, trunc, (1, 0, 0), GOLDEN) + FTSeries.harmonic(sig, trunc, (0, 1), grade=2)
    step = kam_step(series, KamSchedule.initial(sig), 0.1)
    assert "identity" in step.report.flags
    assert step.series is series
    assert step.record.generator.is_zero


def test_resonant_frequency_raises_small_divisor():
    sig = PhaseSignature(2, 0)
    trunc = Truncation(8, 4)
    series = (
        FTSeries.monomial(sig, trunc, (1, 0))
        + FTSeries.monomial(sig, trunc, (0, 1))
        + FTSeries.harmonic(sig, trunc, (1, -1), grade=1)
    )
    with pytest.raises(SmallDivisor) as e:
        _ = kam_step(series, KamSchedule.initial(sig), 0.1)
    assert e.value.k == (1, -1)

    nf = NormalForm.from_series(series, 0.1)
    with pytest.raises(SmallDivisor):
        _ = solve_homological(nf, oscillating(series))
