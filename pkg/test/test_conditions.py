import math

import numpy as np
import pytest

from nfkam.core.conditions import (
    MIN_MEASURE_SAMPLES,
    check_diophantine,
    check_normal_form_conditions,
    check_rank_conditions,
    check_russmann,
    excluded_measure,
    half_lattice,
    numerical_rank,
)
from nfkam.core.ftalgebra import PhaseSignature, Truncation
from nfkam.core.kamengine import NormalForm
from nfkam.core.lattice import QuadraticH0, resonant_surface_sample, unimodular_completion

GOLDEN = (1 + math.sqrt(5)) / 2
BOX = ([1.0, 1.0], [2.0, 2.0])
GAMMAS = [1e-4, 1e-3, 1e-2, 1e-1]


def test_numerical_rank():
    assert numerical_rank(np.eye(3)) == 3
    assert numerical_rank(np.diag([1.0, 1e-12])) == 1
    assert numerical_rank(np.diag([1.0, 1e-6])) == 2
    assert numerical_rank(np.zeros((2, 2))) == 0
    assert numerical_rank(np.zeros((0, 0))) == 0


def test_half_lattice():
    assert half_lattice(2, 1).tolist() == [[0, 1], [1, 0]]
    ks = half_lattice(2, 2)
    assert len(ks) == 6
    for k in ks:
        lead = next(c for c in k if c)
        assert lead > 0
    assert [int(np.abs(k).sum()) for k in ks] == sorted(int(np.abs(k).sum()) for k in ks)


def test_check_diophantine():
    verdict = check_diophantine([1.0, GOLDEN], 1e-2, 2.0, 20)
    assert verdict.passed
    assert bool(verdict)

    resonant = check_diophantine([1.0, 1.0], 1e-2, 2.0, 20)
    assert not resonant.passed
    assert resonant.worst_k == (1, -1)
    assert resonant.worst_divisor == 0.0

    with pytest.raises(ValueError):
        _ = check_diophantine([1.0, GOLDEN], 1e-2, 2.0, 0)


def test_check_russmann():
    box = ([-0.1, -0.1], [0.1, 0.1])
    twist = check_russmann(lambda y: np.array([1.0 + y[0], GOLDEN + y[1]]), box, 2, samples=5)
    assert twist.holds
    assert twist.witness["ranks"] == [2] * 5
    # a frequency map confined to a fixed line fails
    flat = check_russmann(lambda y: np.array([1.0, 2.0]) * (1.0 + y[0]), box, 2, samples=5)
    assert not flat.holds


def test_normal_form_conditions_on_singular_m():
    sig = PhaseSignature(1, 1)
    nf = NormalForm.build(sig, Truncation(8, 4), [GOLDEN], np.diag([0.0, 0.0, 1.0]), 1e-3)
    report = check_normal_form_conditions(nf)
    assert report.holds("A1")
    assert sorted(report.failed) == ["A2", "A3"]
    only_a1 = check_normal_form_conditions(nf, ["A1", "S1"])
    assert list(only_a1.entries) == ["A1"]


def test_normal_form_conditions_on_twist():
    sig = PhaseSignature(2, 0)
    nf = NormalForm.build(sig, Truncation(8, 4), [1.0, GOLDEN], np.array([[2.0, 0.0], [0.0, 1.0]]), 1e-2)
    report = check_normal_form_conditions(nf)
    assert report.holds("A2")
    assert report.n == 2


def test_rank_conditions_convex_surface():
    h0 = QuadraticH0([[1.0, 0.0], [0.0, 1.0]])
    frame = unimodular_completion([[1, -1]])
    points = resonant_surface_sample(h0, frame, BOX, 4)
    report = check_rank_conditions(
        h0,
        frame,
        points,
        ["S2", "S7", "S8"],
        potential_hessian=lambda u: np.array([[-math.cos(u[0])]]),
    )
    assert report.holds("S2", "S7", "S8")
    assert report.n == 1
    with pytest.raises(ValueError):
        _ = check_rank_conditions(h0, frame, points, ["S99"])


def test_excluded_measure():
    estimate = excluded_measure(BOX, GAMMAS, 3.0, 30, MIN_MEASURE_SAMPLES, seed=0)
    assert estimate.gammas == sorted(GAMMAS)
    assert estimate.fractions == sorted(estimate.fractions)
    assert all(0.0 <= f <= 1.0 for f in estimate.fractions)
    assert len(estimate.rows()) == len(GAMMAS)
    for (gamma, fraction, stderr), g in zip(estimate.rows(), sorted(GAMMAS)):
        assert gamma == g
        assert stderr == pytest.approx(math.sqrt(fraction * (1 - fraction) / MIN_MEASURE_SAMPLES))

    again = excluded_measure(BOX, GAMMAS, 3.0, 30, MIN_MEASURE_SAMPLES, seed=0)
    assert again.fractions == estimate.fractions

    with pytest.raises(ValueError):
        _ = excluded_measure(BOX, GAMMAS, 3.0, 30, 100)


@pytest.mark.slow
def test_excluded_measure_million_samples():
    gammas = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4]
    estimate = excluded_measure(BOX, gammas, 3.0, 30, 1_000_000, seed=1)
    coarse = excluded_measure(BOX, gammas, 3.0, 30, MIN_MEASURE_SAMPLES, seed=1)
    assert estimate.fractions == sorted(estimate.fractions)
    assert all(s <= 5e-4 for s in estimate.stderrs)
    for fine, rough, err in zip(estimate.fractions, coarse.fractions, coarse.stderrs):
        assert abs(fine - rough) <= 5 * err + 1e-3
    assert not estimate.censored
    assert estimate.slope is not None
    assert 0.7 <= estimate.slope <= 1.3
