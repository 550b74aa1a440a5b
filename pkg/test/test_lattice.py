import numpy as np
import pytest

from nfkam.core.errors import CompletionError, DependentGenerators, OffSurfaceError
from nfkam.core.ftalgebra import PhaseSignature
from nfkam.core.lattice import (
    QuadraticH0,
    ResonanceFrame,
    check_symplectic_frame,
    exact_inverse,
    integer_det,
    invariant_factors,
    reduce_at_resonance,
    resonant_surface_sample,
    unimodular_completion,
    xgcd,
)
from nfkam.core.models import original_hamiltonian, reduced_model
from nfkam.utils.config import load_config


def test_integer_helpers():
    x, y, g = xgcd(240, 46)
    assert g == 2
    assert 240 * x + 46 * y == 2
    assert integer_det([[2, 1], [1, 1]]) == 1
    assert integer_det([[1, 2, 3], [4, 5, 6], [7, 8, 10]]) == -3
    assert integer_det([[1, 2], [2, 4]]) == 0
    inv = exact_inverse([[2, 1], [1, 1]])
    assert inv == [[1, -1], [-1, 2]]


@pytest.mark.parametrize("generators", [
    [[1, -1]],
    [[2, 3, 0]],
    [[1, -1, 0], [0, 1, -1]],
    [[1, 2, 3, 4]],
])
def test_unimodular_completion(generators: list[list[int]]):
    frame = unimodular_completion(generators)
    d, m0 = len(generators[0]), len(generators)
    assert frame.d == d
    assert frame.m0 == m0
    assert frame.determinant() == 1
    k0 = frame.matrix()
    assert k0.shape == (d, d)
    if frame.flipped_column is None or frame.flipped_column < frame.m:
        assert frame.k_prime.T.tolist() == generators
    inverse = np.array(frame.inverse())
    assert (k0 @ inverse == np.eye(d, dtype=np.int64)).all()
    assert check_symplectic_frame(frame).ok


def test_frame_record_round_trip():
    frame = unimodular_completion([[2, 3, 0]])
    back = ResonanceFrame.from_record(frame.to_record())
    assert back == frame
    assert back.signature == PhaseSignature(2, 1)


def test_completion_errors():
    with pytest.raises(CompletionError) as e:
        _ = unimodular_completion([[2, 4]])
    assert 2 in e.value.invariant_factors
    with pytest.raises(DependentGenerators):
        _ = unimodular_completion([[1, 1], [2, 2]])
    with pytest.raises(DependentGenerators):
        _ = unimodular_completion([])
    with pytest.raises(DependentGenerators):
        _ = unimodular_completion([[1, 0], [0, 1], [1, 1]])


def test_symplectic_check_rejects_non_unimodular():
    check = check_symplectic_frame([[2, 0], [0, 1]])
    assert not check.ok
    assert check.determinant == 2


@pytest.mark.parametrize("columns", [
    [[2, 4, 6], [0, 3, 3]],
    [[1, -1, 0], [0, 1, -1]],
    [[4, 6]],
    [[2, 0, 0], [0, 6, 0]],
])
def test_invariant_factors_match_smith_form(columns: list[list[int]]):
    sympy = pytest.importorskip("sympy")
    from sympy.matrices.normalforms import smith_normal_form

    matrix = sympy.Matrix([[col[r] for col in columns] for r in range(len(columns[0]))])
    smith = smith_normal_form(matrix, domain=sympy.ZZ)
    expected = [abs(int(smith[i, i])) for i in range(len(columns))]
    assert [abs(f) for f in invariant_factors(columns)] == expected


def test_completion_agrees_with_smith_form_on_random_generators():
    sympy = pytest.importorskip("sympy")
    from sympy.matrices.normalforms import smith_normal_form

    rng = np.random.default_rng(5)
    completed = rejected = 0
    for _ in range(1000):
        d = int(rng.integers(2, 7))
        m0 = int(rng.integers(1, min(3, d) + 1))
        generators = rng.integers(-9, 10, size=(m0, d))
        match int(rng.integers(0, 6)):
            case 0:
                generators[0] *= int(rng.integers(2, 4))
            case 1 if m0 > 1:
                generators[-1] = generators[0] * int(rng.integers(-2, 3))
            case _:
                pass
        gens = generators.tolist()
        smith = smith_normal_form(sympy.Matrix(gens).T, domain=sympy.ZZ)
        primitive = all(abs(int(smith[i, i])) == 1 for i in range(m0))
        if not primitive:
            with pytest.raises((CompletionError, DependentGenerators)):
                _ = unimodular_completion(gens)
            rejected += 1
            continue
        frame = unimodular_completion(gens)
        assert frame.determinant() == 1, gens
        if frame.flipped_column is None or frame.flipped_column < frame.m:
            assert frame.k_prime.T.tolist() == gens
        assert (frame.matrix() @ np.array(frame.inverse()) == np.eye(d, dtype=np.int64)).all()
        completed += 1
    assert completed > 100
    assert rejected > 100


def test_resonant_surface_sample():
    h0 = QuadraticH0([[1.0, 0.0], [0.0, 1.0]])
    frame = unimodular_completion([[1, -1]])
    found = resonant_surface_sample(h0, frame, ([0.5, 0.5], [2.0, 2.0]), 3)
    assert len(found) == 3
    for y in found:
        assert abs(y[0] - y[1]) <= 1e-10
        assert np.all(y >= 0.5 - 1e-12) and np.all(y <= 2.0 + 1e-12)
    assert [tuple(y) for y in found] == sorted(tuple(y) for y in found)

    # the resonance line misses this box entirely
    assert resonant_surface_sample(h0, frame, ([0.0, 1.5], [0.5, 2.0]), 1) == []


def test_reduce_at_resonance():
    cfg = load_config("convex-2dof-resonant")
    model = reduced_model(cfg)
    assert model.signature == PhaseSignature(1, 1)
    assert model.delta == pytest.approx(1e-4 ** 0.25)
    reduction = model.reduction
    assert reduction is not None
    assert reduction.frame.determinant() == 1
    assert abs(reduction.omega_star[0]) > 0.0
    assert reduction.gamma.shape == (2, 2)
    assert reduction.h0_value == pytest.approx(1.0)

    with pytest.raises(OffSurfaceError):
        _ = reduce_at_resonance(original_hamiltonian(cfg), [1.0, 2.0], reduction.frame, 1e-4)


def test_reduced_series_reproduces_original_energy():
    cfg = load_config("convex-2dof-resonant")
    model = reduced_model(cfg)
    reduction = model.reduction
    assert reduction is not None
    original = original_hamiltonian(cfg)
    rng = np.random.default_rng(5)
    for state in rng.uniform(-0.5, 0.5, size=(4, 4)):
        reduced_value = reduction.series.evaluate(state, reduction.delta)
        expected = original.evaluate(reduction.to_original(state), cfg.epsilon_value)
        assert reduction.original_energy(reduced_value) == pytest.approx(expected, abs=1e-10)
