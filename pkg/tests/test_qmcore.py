"""Tests for matrix validation, spectral decomposition and the typed operators."""
import json

import numpy as np
import pytest
from scipy.linalg import expm, sqrtm

from ppslab.errors import (
    DimensionMismatch,
    IncompletePovm,
    InvalidMatrix,
    NotHermitian,
    NotNormalized,
    NotPositive,
    PpsError,
)
from ppslab.qmcore import (
    KET_0,
    KET_PLUS,
    MAX_DIM,
    PAULI_I,
    PAULI_X,
    PAULI_Y,
    PAULI_Z,
    DensityMatrix,
    Povm,
    PovmElement,
    antihermitian_part,
    as_matrix,
    commutes,
    hermitian_part,
    load_matrix,
    matrix_from_dict,
    matrix_to_dict,
    operator_norm,
    projector,
    psd_sqrt,
    random_commuting_triple,
    random_density_matrix,
    random_effect,
    random_hermitian,
    random_povm,
    random_unitary,
    require_hermitian,
    save_matrix,
    spectral_decompose,
    unitary_from_hamiltonian,
    validate_hermitian,
)


def test_errors_are_value_errors():
    """Every domain error is catchable as PpsError and ValueError."""
    with pytest.raises(ValueError):
        as_matrix(np.ones((2, 3)))
    assert issubclass(InvalidMatrix, PpsError)


@pytest.mark.parametrize("bad", [
    np.ones((2, 3)),
    np.ones(4),
    np.zeros((0, 0)),
    np.array([[1.0, np.nan], [0.0, 1.0]]),
    np.array([[np.inf, 0.0], [0.0, 1.0]]),
])
def test_as_matrix_rejects_malformed_input(bad):
    with pytest.raises(InvalidMatrix):
        as_matrix(bad)


def test_as_matrix_dimension_cap():
    with pytest.raises(InvalidMatrix, match="exceeds"):
        as_matrix(np.eye(MAX_DIM + 1))
    assert as_matrix(np.eye(MAX_DIM)).shape == (MAX_DIM, MAX_DIM)


def test_hermitian_decomposition(rng):
    """M = M' + i M'' with both parts Hermitian."""
    m = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    h = hermitian_part(m)
    k = antihermitian_part(m)
    assert np.allclose(h, h.conj().T)
    assert np.allclose(k, k.conj().T)
    assert np.allclose(h + 1j * k, m, atol=1e-14)


def test_validate_hermitian_relative_tolerance():
    """The tolerance scales with the norm of the matrix."""
    big = 1e6 * PAULI_Z + 1e-6j * np.array([[0, 1], [0, 0]])
    assert validate_hermitian(big)
    small = PAULI_Z + 1e-6j * np.array([[0, 1], [0, 0]])
    assert not validate_hermitian(small)
    with pytest.raises(NotHermitian):
        require_hermitian(small)


def test_spectral_decomposition_pauli_x():
    """sigma_1 = (+1)|+><+| + (-1)|-><-|"""
    obs = spectral_decompose(PAULI_X)
    assert np.allclose(obs.eigenvalues, [-1.0, 1.0])
    assert np.allclose(obs.projectors[1], projector(KET_PLUS))
    assert obs.spectrum_range == pytest.approx((-1.0, 1.0))


def test_spectral_decomposition_groups_degenerate_eigenvalues():
    obs = spectral_decompose(np.diag([2.0, 2.0, 5.0]))
    assert len(obs) == 2
    assert np.allclose(obs.eigenvalues, [2.0, 5.0])
    assert np.allclose(obs.projectors[0], np.diag([1.0, 1.0, 0.0]))


def test_spectral_decomposition_identity_is_one_group():
    obs = spectral_decompose(np.eye(3))
    assert len(obs) == 1
    assert np.allclose(obs.projectors[0], np.eye(3))


def test_spectral_decomposition_rejects_non_hermitian():
    with pytest.raises(NotHermitian):
        spectral_decompose(np.array([[0, 1], [0, 0]]))


def test_spectral_projectors_resolve_identity(rng):
    for d in range(2, 7):
        obs = spectral_decompose(random_hermitian(d, rng))
        assert np.allclose(sum(obs.projectors), np.eye(d), atol=1e-12)
        rebuilt = sum(a * p for a, p in zip(obs.eigenvalues, obs.projectors))
        assert np.allclose(rebuilt, obs.matrix, atol=1e-12)
        for p in obs.projectors:
            assert np.allclose(p @ p, p, atol=1e-12)


def test_unitary_from_hamiltonian_matches_expm(rng):
    h = random_hermitian(4, rng)
    assert np.allclose(unitary_from_hamiltonian(h, 0.37), expm(-1j * 0.37 * h), atol=1e-12)


def test_unitary_from_hamiltonian_pauli_z():
    u = unitary_from_hamiltonian(PAULI_Z, np.pi / 2)
    assert np.allclose(u, np.diag([-1j, 1j]), atol=1e-14)


def test_psd_sqrt_matches_scipy(rng):
    e = random_effect(3, rng).matrix
    root = psd_sqrt(e)
    assert np.allclose(root @ root, e, atol=1e-12)
    assert np.allclose(root, sqrtm(e), atol=1e-8)


def test_operator_norm_is_largest_singular_value():
    assert operator_norm(np.diag([3.0, -4.0])) == pytest.approx(4.0)
    assert operator_norm(np.array([[0, 2], [0, 0]])) == pytest.approx(2.0)


def test_commutes():
    assert commutes(PAULI_Z, np.diag([0.3, 0.7]))
    assert not commutes(PAULI_Z, PAULI_X)
    with pytest.raises(DimensionMismatch):
        commutes(PAULI_Z, np.eye(3))


def test_density_matrix_validation():
    DensityMatrix(np.eye(2) / 2)
    with pytest.raises(NotNormalized):
        DensityMatrix(np.eye(2))
    with pytest.raises(NotPositive):
        DensityMatrix(np.diag([1.5, -0.5]))
    with pytest.raises(NotHermitian):
        DensityMatrix(np.array([[0.5, 0.5], [0.0, 0.5]]))


def test_density_matrix_is_read_only():
    rho = DensityMatrix.maximally_mixed(2)
    with pytest.raises(ValueError):
        rho.matrix[0, 0] = 1.0


def test_povm_element_scalar_multiples():
    """Effects above the unit interval are accepted but flagged."""
    assert PovmElement(np.diag([0.2, 0.9])).normalized
    loose = PovmElement(3 * np.eye(2))
    assert not loose.normalized
    assert loose.trace == pytest.approx(6.0)
    with pytest.raises(NotPositive):
        PovmElement(np.diag([1.0, -0.1]))
    with pytest.raises(NotPositive):
        PovmElement(np.zeros((2, 2)))


def test_povm_completeness():
    Povm((projector(KET_0), np.eye(2) - projector(KET_0)))
    with pytest.raises(IncompletePovm):
        Povm((projector(KET_0), projector(KET_PLUS)))
    with pytest.raises(IncompletePovm):
        Povm(())


def test_random_generators_produce_valid_objects(rng):
    for d in (2, 3, 5):
        u = random_unitary(d, rng)
        assert np.allclose(u.conj().T @ u, np.eye(d), atol=1e-12)
        rho = random_density_matrix(d, rng, rank=1)
        assert np.trace(rho.matrix @ rho.matrix).real == pytest.approx(1.0)
        e = random_effect(d, rng)
        assert e.normalized
        povm = random_povm(d, 4, rng)
        assert len(povm) == 4
        assert np.allclose(sum(el.matrix for el in povm), np.eye(d), atol=1e-10)


@pytest.mark.parametrize("side", ["state", "effect"])
@pytest.mark.parametrize("degenerate", [False, True])
def test_random_commuting_triple(rng, side, degenerate):
    rho, effect, obs = random_commuting_triple(4, rng, side=side, degenerate=degenerate)
    partner = rho if side == "state" else effect
    assert commutes(obs.matrix, partner.matrix)


def test_matrix_json_codec(tmp_path):
    m = np.array([[0.5, 0.25 - 0.5j], [0.25 + 0.5j, 0.5]])
    obj = matrix_to_dict(m)
    assert obj == {"dim": 2, "re": [0.5, 0.25, 0.25, 0.5], "im": [0.0, -0.5, 0.5, 0.0]}
    path = tmp_path / "m.json"
    save_matrix(path, m)
    assert np.array_equal(load_matrix(path), m)
    assert json.loads(path.read_text())["dim"] == 2


@pytest.mark.parametrize("obj", [
    {"dim": 2, "re": [1, 0, 0]},
    {"dim": 2, "re": [1, 0, 0], "im": [0, 0, 0]},
    {"dim": 0, "re": [], "im": []},
    {"dim": 1, "re": ["x"], "im": [0]},
    [1, 2, 3],
])
def test_matrix_from_dict_rejects_bad_objects(obj):
    with pytest.raises(InvalidMatrix):
        matrix_from_dict(obj)


def test_load_matrix_rejects_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(InvalidMatrix):
        load_matrix(path)


def test_pauli_constants_are_read_only():
    with pytest.raises(ValueError):
        PAULI_Y[0, 0] = 1.0
    assert np.allclose(PAULI_X @ PAULI_Y, 1j * PAULI_Z)
    assert np.allclose(PAULI_I, np.eye(2))


@pytest.mark.slow
def test_spectral_decomposition_sweep(rng):
    """500 random Hermitian matrices, d = 2..8: orthogonal idempotents resolving the identity."""
    for k in range(500):
        d = 2 + k % 7
        obs = spectral_decompose(random_hermitian(d, rng))
        for i, p in enumerate(obs.projectors):
            for j, q in enumerate(obs.projectors):
                expected = p if i == j else np.zeros((d, d))
                assert np.allclose(p @ q, expected, atol=1e-10)
        assert np.allclose(sum(obs.projectors), np.eye(d), atol=1e-10)


def test_operator_norm_triangle_inequality(rng):
    for d in range(2, 9):
        a, b = random_hermitian(d, rng), rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        assert operator_norm(a + b) <= operator_norm(a) + operator_norm(b) + 1e-12
