"""
Conventional and strong pre- and post-selected measurements.

Born probabilities, expectation values and posterior states for ordinary
measurements, the ABL rule for strong measurements between pre- and
post-selection, and the connection-state shortcuts that reproduce the ABL
rule when the observable commutes with the state or with the effect.
"""

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from numpy.typing import NDArray

from ppslab.connection import TAU_CLASSIFY, ConnectionKind, ConnectionState, classify, connection_state
from ppslab.errors import (
    CommutationRequired,
    DegeneratePostSelection,
    InvalidMatrix,
    InvalidParameter,
    UnnormalizedEffect,
)
from ppslab.qmcore import (
    EPS_PS,
    PAULI_I,
    PAULI_X,
    PAULI_Y,
    DensityMatrix,
    PovmElement,
    as_density,
    as_effect,
    as_observable,
    commutes,
    ket,
    observable_matrix,
    operator_norm,
    psd_sqrt,
    require_hermitian,
    require_same_dim,
)

TAU_PROJECTOR = 1e-10
# var_sum must fall this far below one to count as a violation
VIOLATION_SLACK = 1e-12
# Tolerance on the commuting gate for the connection-state shortcuts
TAU_GATE = 1e-10


def _require_normalized(effect: PovmElement) -> None:
    if not effect.normalized:
        top = float(np.linalg.eigvalsh(effect.matrix)[-1])
        raise UnnormalizedEffect(f'effect has largest eigenvalue {top:.6g} > 1')


def _real_trace(m: np.ndarray, what: str) -> float:
    trace = np.trace(m)
    if abs(trace.imag) > 1e-12 * max(1.0, abs(trace.real)):
        raise InvalidMatrix(f'{what} has imaginary part {trace.imag:.3e}')
    return float(trace.real)


# ============================================================================
# CONVENTIONAL MEASUREMENTS
# ============================================================================

def born_probability(rho: Any, effect: Any) -> float:
    """
    P = Tr(rho E).

    Raises:
        DimensionMismatch: if rho and E differ in dimension.
        UnnormalizedEffect: if E has eigenvalues above one.
    """
    rho = as_density(rho)
    effect = as_effect(effect)
    require_same_dim(rho, effect, names=('rho', 'E'))
    _require_normalized(effect)
    return _real_trace(rho.matrix @ effect.matrix, 'Tr(rho E)')


def expectation(observable: Any, rho: Any) -> float:
    """Tr(A rho)."""
    a = observable_matrix(observable)
    rho = as_density(rho)
    require_same_dim(a, rho, names=('A', 'rho'))
    return _real_trace(a @ rho.matrix, 'Tr(A rho)')


def projective_posterior(rho: Any, proj: Any) -> DensityMatrix:
    """
    Pi rho Pi / Tr(rho Pi), the state left after outcome Pi of a projective measurement.

    Raises:
        InvalidMatrix: if Pi is not an orthogonal projector.
        DegeneratePostSelection: if Tr(rho Pi) <= EPS_PS.
    """
    rho = as_density(rho)
    p_mat = require_hermitian(proj, 'projector')
    require_same_dim(rho, p_mat, names=('rho', 'Pi'))
    if operator_norm(p_mat @ p_mat - p_mat) > TAU_PROJECTOR:
        raise InvalidMatrix('projector: Pi^2 differs from Pi')
    p = _real_trace(rho.matrix @ p_mat, 'Tr(rho Pi)')
    if p <= EPS_PS:
        raise DegeneratePostSelection(f'Tr(rho Pi) = {p:.3e} <= {EPS_PS:.0e}')
    return DensityMatrix(p_mat @ rho.matrix @ p_mat / p)


def minimally_disturbing_posterior(rho: Any, effect: Any) -> DensityMatrix:
    """sqrt(E) rho sqrt(E) / Tr(rho E)."""
    rho = as_density(rho)
    effect = as_effect(effect)
    require_same_dim(rho, effect, names=('rho', 'E'))
    _require_normalized(effect)
    p = _real_trace(rho.matrix @ effect.matrix, 'Tr(rho E)')
    if p <= EPS_PS:
        raise DegeneratePostSelection(f'Tr(rho E) = {p:.3e} <= {EPS_PS:.0e}')
    root = psd_sqrt(effect.matrix)
    return DensityMatrix(root @ rho.matrix @ root / p)


# ============================================================================
# STRONG PRE- AND POST-SELECTED MEASUREMENTS
# ============================================================================

def abl_probabilities(rho: Any, observable: Any, effect: Any) -> NDArray[np.float64]:
    """
    P(a_i | E) = Tr(E Pi_i rho Pi_i) / sum_j Tr(E Pi_j rho Pi_j).

    Probabilities are ordered like ``observable.eigenvalues``.

    Raises:
        DegeneratePostSelection: if the denominator is at or below EPS_PS.
    """
    rho = as_density(rho)
    obs = as_observable(observable)
    effect = as_effect(effect)
    require_same_dim(rho, obs.matrix, effect, names=('rho', 'A', 'E'))
    weights = np.array([
        np.trace(effect.matrix @ proj @ rho.matrix @ proj).real for proj in obs.projectors
    ])
    total = float(weights.sum())
    if total <= EPS_PS:
        raise DegeneratePostSelection(f'sum_j Tr(E Pi_j rho Pi_j) = {total:.3e} <= {EPS_PS:.0e}')
    return weights / total


def check_commuting_gate(
    obs_matrix: np.ndarray,
    w: ConnectionState,
    rho: Optional[Any] = None,
    effect: Optional[Any] = None,
) -> None:
    """
    Raise CommutationRequired unless A commutes with rho or with E.

    Uses ``rho``/``effect`` when given, otherwise the factors stored on ``w``.
    """
    rho_m = w.rho if rho is None else as_density(rho).matrix
    effect_m = w.effect if effect is None else as_effect(effect).matrix
    if rho_m is None or effect_m is None:
        raise CommutationRequired(
            'connection state carries no (rho, E) factors; pass them to check the commuting condition'
        )
    if not (commutes(obs_matrix, rho_m, TAU_GATE) or commutes(obs_matrix, effect_m, TAU_GATE)):
        raise CommutationRequired('observable commutes with neither rho nor E')


def strong_pps_via_connection(
    observable: Any,
    w: ConnectionState,
    rho: Optional[Any] = None,
    effect: Optional[Any] = None,
) -> NDArray[np.float64]:
    """
    Strong-measurement probabilities Tr(Pi_i w), valid when [A, rho] = 0 or [A, E] = 0.

    The gate is checked against the factors stored on ``w``, or against
    ``rho``/``effect`` when given.

    Raises:
        CommutationRequired: if the gate fails or no factors are available.
    """
    obs = as_observable(observable)
    require_same_dim(obs.matrix, w.w, names=('A', 'w'))
    check_commuting_gate(obs.matrix, w, rho, effect)
    return np.array([np.trace(proj @ w.w).real for proj in obs.projectors])


def weak_value_spectral(
    observable: Any,
    w: ConnectionState,
    rho: Optional[Any] = None,
    effect: Optional[Any] = None,
) -> float:
    """sum_i a_i Tr(Pi_i w), the weak value as an average over the spectrum."""
    obs = as_observable(observable)
    probs = strong_pps_via_connection(obs, w, rho, effect)
    return float(np.dot(obs.eigenvalues, probs))


def connection_variance(observable: Any, w: ConnectionState) -> float:
    """(A^2)_w' - ((A)_w')^2, with the anti-Hermitian part of w neglected."""
    a = observable_matrix(observable)
    require_same_dim(a, w.w, names=('A', 'w'))
    mean = np.trace(a @ w.w_herm).real
    return float(np.trace(a @ a @ w.w_herm).real - mean ** 2)


# ============================================================================
# QUBIT UNCERTAINTY EXAMPLE
# ============================================================================

def _check_bloch_component(value: float, name: str) -> None:
    if not -1.0 <= value <= 1.0:
        raise InvalidParameter(f'{name} must lie in [-1, 1], got {value}')


def qubit_uncertainty_ensemble(lambda1: float, lambda2: float) -> tuple[DensityMatrix, PovmElement]:
    """
    rho = (I + lambda1 sigma_1)/2 commuting with sigma_1 and E = (I + lambda2 sigma_2)/2 commuting with sigma_2.

    The effect has eigenvalues e+ and e- with e+ + e- = 1 and e+ - e- = lambda2.
    """
    _check_bloch_component(lambda1, 'lambda1')
    _check_bloch_component(lambda2, 'lambda2')
    rho = DensityMatrix((PAULI_I + lambda1 * PAULI_X) / 2)
    effect = PovmElement((PAULI_I + lambda2 * PAULI_Y) / 2)
    return rho, effect


def vertex_connection_state(alpha: int, beta: int) -> np.ndarray:
    """
    Closed form (1 + i alpha beta) |1beta><2alpha| at a vertex of the parameter square.

    |1beta> = (|0> + beta|1>)/sqrt(2) is the sigma_1 eigenvector and
    |2alpha> = (|0> + i alpha|1>)/sqrt(2) the sigma_2 eigenvector; the vertex
    (lambda1, lambda2) = (beta, alpha) pre-selects |1beta> and post-selects
    |2alpha>.
    """
    if alpha not in (-1, 1) or beta not in (-1, 1):
        raise InvalidParameter(f'alpha and beta must be +1 or -1, got {alpha}, {beta}')
    one_beta = ket(1, beta)
    two_alpha = ket(1, 1j * alpha)
    return (1 + 1j * alpha * beta) * np.outer(one_beta, two_alpha.conj())


@dataclass(frozen=True)
class UncertaintyRow:
    lambda1: float
    lambda2: float
    var_sum: float
    wprime_min_eig: float
    violates: bool
    w_unusual: bool

    def to_dict(self) -> dict:
        return {
            'lambda1': self.lambda1,
            'lambda2': self.lambda2,
            'var_sum': self.var_sum,
            'wprime_min_eig': self.wprime_min_eig,
            'violates': self.violates,
            'w_unusual': self.w_unusual,
        }


def uncertainty_point(lambda1: float, lambda2: float) -> UncertaintyRow:
    """
    Sum of the sigma_1 and sigma_2 variances under w' for the qubit ensemble at (lambda1, lambda2).

    The sum is 2 - lambda1^2 - lambda2^2, which drops below the uncertainty
    bound of one exactly when lambda1^2 + lambda2^2 > 1; w' then has a
    negative eigenvalue (1 - sqrt(lambda1^2 + lambda2^2))/2.
    """
    rho, effect = qubit_uncertainty_ensemble(lambda1, lambda2)
    w = connection_state(rho, effect)
    var_sum = connection_variance(PAULI_X, w) + connection_variance(PAULI_Y, w)
    min_eig = float(np.linalg.eigvalsh(w.w_herm)[0])
    return UncertaintyRow(
        lambda1=float(lambda1),
        lambda2=float(lambda2),
        var_sum=var_sum,
        wprime_min_eig=min_eig,
        violates=var_sum < 1.0 - VIOLATION_SLACK,
        w_unusual=classify(w) is ConnectionKind.UNUSUAL,
    )


def uncertainty_grid(
    lambda1_values: Any,
    lambda2_values: Any,
    tau: float = TAU_CLASSIFY,
) -> list[UncertaintyRow]:
    """
    uncertainty_point over every (lambda1, lambda2) pair, lambda1 major.

    All connection states of the grid are formed at once as a stack of 2 x 2
    matrices; each row equals uncertainty_point at the same parameters.
    """
    l1 = np.asarray(lambda1_values, dtype=np.float64).reshape(-1)
    l2 = np.asarray(lambda2_values, dtype=np.float64).reshape(-1)
    for values, name in ((l1, 'lambda1'), (l2, 'lambda2')):
        bad = values[~(np.abs(values) <= 1.0)]
        if bad.size:
            _check_bloch_component(float(bad[0]), name)
    g1, g2 = (m.reshape(-1) for m in np.meshgrid(l1, l2, indexing='ij'))

    rho = (PAULI_I + g1[:, None, None] * PAULI_X) / 2
    effect = (PAULI_I + g2[:, None, None] * PAULI_Y) / 2
    product = rho @ effect
    p = np.trace(product, axis1=1, axis2=2).real
    if np.any(p <= EPS_PS):
        raise DegeneratePostSelection(f'Tr(rho E) = {p.min():.3e} <= {EPS_PS:.0e}')
    w = product / p[:, None, None]
    w_dag = np.conj(np.swapaxes(w, 1, 2))
    w_herm = (w + w_dag) / 2
    w_antiherm = (w - w_dag) / 2j

    var_sum = np.zeros(g1.size)
    for a in (PAULI_X, PAULI_Y):
        mean = np.einsum('ij,nji->n', a, w_herm).real
        var_sum += np.einsum('ij,nji->n', a @ a, w_herm).real - mean ** 2
    min_eig = np.linalg.eigvalsh(w_herm)[:, 0]
    unusual = (np.linalg.norm(w_antiherm, ord=2, axis=(1, 2)) > tau) | (min_eig < -tau)

    return [
        UncertaintyRow(float(a), float(b), float(v), float(m), bool(v < 1.0 - VIOLATION_SLACK), bool(u))
        for a, b, v, m, u in zip(g1, g2, var_sum, min_eig, unusual)
    ]
