import math
from fractions import Fraction

import numpy as np
import pytest

from nfkam.core.errors import SignatureMismatch
from nfkam.core.ftalgebra import (
    ArithOp,
    Basis,
    DomainParams,
    FTSeries,
    PhaseSignature,
    Truncation,
    TruncationShape,
    VarKind,
    arith,
    average,
    oscillating,
    partial,
    poisson_bracket,
    split_slow_harmonics,
    translate,
    truncate,
    weighted_norm,
)

SIG1 = PhaseSignature(1, 0)
SIG11 = PhaseSignature(1, 1)
TRUNC = Truncation(fourier_cutoff=8, degree_cutoff=6)


def sample_series() -> FTSeries:
    """cos(x - u) y + 0.3 sin(2x) u v + 0.7 y^2 + 0.2 cos(u) v^2 on the (1, 1) signature."""
    return FTSeries.from_terms(SIG11, TRUNC, [
        (0, Basis.COS, (1, -1), (1, 0, 0), 1.0),
        (1, Basis.SIN, (2, 0), (0, 1, 1), 0.3),
        (0, Basis.COS, (0, 0), (2, 0, 0), 0.7),
        (2, Basis.COS, (0, 1), (0, 0, 2), 0.2),
    ])


def test_signature_layout():
    assert SIG11.n_angles == 2
    assert SIG11.n_vars == 3
    assert SIG11.dim == 4
    assert SIG11.state_index(VarKind.U) == 2
    assert SIG11.var_index(VarKind.V) == 2
    angles, poly = SIG11.split_state([0.1, 0.2, 0.3, 0.4])
    assert list(angles) == [0.1, 0.3]
    assert list(poly) == [0.2, 0.3, 0.4]
    with pytest.raises(SignatureMismatch):
        _ = SIG11.split_state([0.0, 1.0])


def test_canonical_harmonics():
    s = FTSeries.harmonic(SIG11, TRUNC, (-1, 1), Basis.SIN, 2.0)
    assert s.coefficient((1, -1), (0, 0, 0), Basis.SIN) == -2.0
    assert s.coefficient((-1, 1), (0, 0, 0), Basis.SIN) == 2.0
    assert FTSeries.harmonic(SIG11, TRUNC, (0, 0), Basis.SIN).is_zero
    c = FTSeries.harmonic(SIG11, TRUNC, (-2, 0), Basis.COS, 1.5)
    assert c.coefficient((2, 0), (0, 0, 0)) == 1.5


def test_cutoffs_drop_terms():
    small = Truncation(fourier_cutoff=2, degree_cutoff=1)
    s = FTSeries.from_terms(SIG1, small, [
        (0, Basis.COS, (3,), (0,), 1.0),
        (0, Basis.COS, (1,), (2,), 1.0),
        (0, Basis.COS, (2,), (1,), 1.0),
    ])
    assert len(s) == 1
    with pytest.raises(SignatureMismatch):
        _ = FTSeries.from_terms(SIG1, small, [(0, Basis.COS, (1, 0), (0,), 1.0)])


def test_product_identities():
    cos_x = FTSeries.harmonic(SIG1, TRUNC, (1,))
    sin_x = FTSeries.harmonic(SIG1, TRUNC, (1,), Basis.SIN)

    cc = cos_x.mul(cos_x)
    assert cc.coefficient((0,), (0,)) == pytest.approx(0.5)
    assert cc.coefficient((2,), (0,)) == pytest.approx(0.5)

    ss = sin_x * sin_x
    assert ss.coefficient((0,), (0,)) == pytest.approx(0.5)
    assert ss.coefficient((2,), (0,)) == pytest.approx(-0.5)

    sc = sin_x.mul(cos_x)
    assert sc.coefficient((2,), (0,), Basis.SIN) == pytest.approx(0.5)
    assert sc.coefficient((0,), (0,)) == 0.0

    # sin^2 + cos^2 = 1
    one = cc + ss
    assert len(one) == 1
    assert one.coefficient((0,), (0,)) == pytest.approx(1.0)


def test_arith_matches_pointwise_values():
    a = sample_series()
    b = FTSeries.harmonic(SIG11, TRUNC, (1, 1), Basis.SIN, 0.5) + FTSeries.monomial(SIG11, TRUNC, (0, 1, 0), -1.5)
    point = np.array([0.4, 0.3, -0.7, 0.2])
    va, vb = a.evaluate(point, 0.5), b.evaluate(point, 0.5)
    assert arith(a, b, ArithOp.ADD).evaluate(point, 0.5) == pytest.approx(va + vb, abs=1e-14)
    assert arith(a, b, ArithOp.SUB).evaluate(point, 0.5) == pytest.approx(va - vb, abs=1e-14)
    assert arith(a, b, ArithOp.MUL).evaluate(point, 0.5) == pytest.approx(va * vb, abs=1e-14)
    assert arith(a, 2.5, ArithOp.SCALE).evaluate(point, 0.5) == pytest.approx(2.5 * va, abs=1e-14)
    assert arith(a, a, ArithOp.SUB).is_zero
    with pytest.raises(SignatureMismatch):
        _ = arith(a, FTSeries.harmonic(SIG1, TRUNC, (1,)), ArithOp.ADD)


@pytest.mark.parametrize("b, op", [
    (2.0, ArithOp.ADD),
    (2.0, ArithOp.SUB),
    (2.0, ArithOp.MUL),
    (None, ArithOp.SCALE),
])
def test_arith_rejects_operand_types(b, op: ArithOp):
    a = sample_series()
    operand = a if b is None else b
    with pytest.raises(TypeError):
        _ = arith(a, operand, op)
    with pytest.raises(TypeError):
        _ = arith(1.0, a, ArithOp.ADD)


def test_product_respects_grade_horizon():
    trunc = Truncation(fourier_cutoff=8, degree_cutoff=6, grade_horizon=2)
    a = FTSeries.harmonic(SIG1, trunc, (1,), grade=1)
    assert a.mul(a).min_grade() == 2
    assert a.mul(a).mul(a).is_zero


def test_poisson_bracket_basics():
    y = FTSeries.monomial(SIG1, TRUNC, (1,))
    cos_x = FTSeries.harmonic(SIG1, TRUNC, (1,))
    b = poisson_bracket(y, cos_x)
    assert len(b) == 1
    assert b.coefficient((1,), (0,), Basis.SIN) == pytest.approx(1.0)

    s = sample_series()
    t = FTSeries.from_terms(SIG11, TRUNC, [
        (0, Basis.SIN, (1, 1), (1, 0, 0), 0.5),
        (1, Basis.COS, (0, 0), (0, 1, 1), 2.0),
    ])
    total = poisson_bracket(s, t) + poisson_bracket(t, s)
    assert total.max_abs_coefficient() < 1e-14
    with pytest.raises(SignatureMismatch):
        _ = poisson_bracket(y, t)


def test_partial_in_u_uses_angle_and_polynomial():
    # d/du (u cos u) = cos u - u sin u
    s = FTSeries.from_terms(SIG11, TRUNC, [(0, Basis.COS, (0, 1), (0, 1, 0), 1.0)])
    d = partial(s, VarKind.U)
    assert d.coefficient((0, 1), (0, 0, 0)) == pytest.approx(1.0)
    assert d.coefficient((0, 1), (0, 1, 0), Basis.SIN) == pytest.approx(-1.0)
    assert len(d) == 2


def test_gradient_matches_finite_differences():
    s = sample_series()
    point = np.array([0.3, 0.2, -0.4, 0.25])
    grad = s.gradient(point, eps=0.1)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (s.evaluate(point + e, 0.1) - s.evaluate(point - e, 0.1)) / (2 * h)
        assert grad[i] == pytest.approx(fd, abs=1e-8)


def test_evaluate_many_matches_evaluate():
    s = sample_series()
    rng = np.random.default_rng(3)
    points = rng.uniform(-1, 1, size=(6, 4))
    many = s.evaluate_many(points, 0.5)
    for p, value in zip(points, many):
        assert value == pytest.approx(s.evaluate(p, 0.5), abs=1e-14)


def test_translate():
    y2 = FTSeries.monomial(SIG1, TRUNC, (2,))
    shifted = translate(y2, y=[1.0])
    assert shifted.coefficient((0,), (2,)) == 1.0
    assert shifted.coefficient((0,), (1,)) == 2.0
    assert shifted.coefficient((0,), (0,)) == 1.0

    cos_u = FTSeries.harmonic(SIG11, TRUNC, (0, 1))
    moved = translate(cos_u, u=[math.pi / 2])
    assert moved.coefficient((0, 1), (0, 0, 0), Basis.SIN) == pytest.approx(-1.0)
    assert abs(moved.coefficient((0, 1), (0, 0, 0))) < 1e-15

    s = sample_series()
    y0, u0, v0 = 0.3, -0.7, 0.2
    g = translate(s, y=[y0], u=[u0], v=[v0])
    point = np.array([0.4, 0.1, 0.5, -0.3])
    assert g.evaluate(point) == pytest.approx(s.evaluate(point + np.array([0.0, y0, u0, v0])), abs=1e-12)


def test_literal_round_trip():
    s = sample_series().shift_grade(Fraction(1, 2))
    records = s.to_literal()
    assert all(isinstance(r["coef"], str) for r in records)
    back = FTSeries.from_literal(SIG11, TRUNC, records)
    assert back.grades() == s.grades()
    for t in s.iter_terms():
        assert back.coefficient(t.k, t.j, t.basis, s.grade_of(t.grade)) == t.coef


def test_shift_grade_fractional():
    s = FTSeries.harmonic(SIG1, TRUNC, (1,), coef=3.0)
    half = s.shift_grade(Fraction(1, 2))
    assert half.grade_unit == 2
    assert half.min_grade() == Fraction(1, 2)
    assert half.coefficient((1,), (0,), grade=Fraction(1, 2)) == 3.0
    assert half.coefficient((1,), (0,), grade=0) == 0.0
    whole = half.shift_grade(Fraction(3, 2))
    assert whole.min_grade() == 2
    assert whole.normalized_unit().grade_unit == 1


def test_at_scale():
    s = FTSeries.from_terms(SIG1, TRUNC, [(2, Basis.COS, (1,), (0,), 1.0), (0, Basis.COS, (0,), (1,), 1.0)])
    scaled = s.at_scale(0.1)
    assert scaled.grades() == [0]
    assert scaled.coefficient((1,), (0,)) == pytest.approx(0.01)


def test_truncate_partitions_exactly():
    s = sample_series()
    head, tail = truncate(s, fourier_cutoff=2, degree_cutoff=1)
    assert (head + tail).terms == s.terms
    assert len(head) == 1
    assert all(sum(abs(c) for c in t.k) <= 2 and sum(t.j) <= 1 for t in head.iter_terms())

    quad_head, _ = truncate(s, 8, 6, TruncationShape.QUADRATIC)
    assert all(sum(t.j) <= 2 for t in quad_head.iter_terms())
    with pytest.raises(ValueError):
        _ = truncate(s, 99, 1)


def test_average_and_splits():
    s = sample_series()
    avg = average(s)
    osc = oscillating(s)
    assert (avg + osc).terms == s.terms
    assert all(not t.k[0] for t in avg.iter_terms())
    free, harmonic = split_slow_harmonics(s)
    assert all(not t.k[1] for t in free.iter_terms())
    assert all(t.k[1] for t in harmonic.iter_terms())


def test_weighted_norm_bounds_sup():
    s = sample_series()
    dom = DomainParams(r=0.3, s=0.5)
    norm = weighted_norm(s, dom, eps=0.2)
    rng = np.random.default_rng(0)
    points = np.column_stack([
        rng.uniform(0, 2 * math.pi, 2000),
        rng.uniform(-0.5, 0.5, 2000),
        rng.uniform(-0.5, 0.5, 2000),
        rng.uniform(-0.5, 0.5, 2000),
    ])
    assert np.max(np.abs(s.evaluate_many(points, 0.2))) <= norm
    assert weighted_norm(FTSeries.zero(SIG11, TRUNC), dom) == 0.0
