"""
Connection states w = rho E / Tr(rho E) and what can be read off them.

A connection state plays the role of a density matrix for a pre- and
post-selected ensemble. It is trace one but in general neither Hermitian nor
positive; its Hermitian part w' carries the real parts of weak values and
its anti-Hermitian part w'' the imaginary parts.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, NamedTuple, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ppslab.errors import (
    DegeneratePostSelection,
    DimensionMismatch,
    InvalidMatrix,
    InvalidParameter,
    NotNormalized,
    NotPositive,
    UnnormalizedEffect,
    ZeroProbabilityOutcome,
)
from ppslab.qmcore import (
    EPS_PS,
    KET_0,
    ComplexMatrix,
    DensityMatrix,
    PovmElement,
    antihermitian_part,
    as_density,
    as_effect,
    as_matrix,
    as_povm,
    frozen_matrix,
    hermitian_part,
    matrix_from_dict,
    matrix_to_dict,
    observable_matrix,
    operator_norm,
    projector,
    require_same_dim,
)

# Tr w must equal one within this (scaled by max(1, ||w||))
TAU_TRACE = 1e-10
# Single tolerance for the usual/unusual dichotomy
TAU_CLASSIFY = 1e-10
# Outcomes with |Tr(rho E_l)| at or below this are treated as impossible
ZERO_PROBABILITY_FLOOR = 1e-15
# Allowed imaginary part of Tr(rho E)
TAU_IMAG_TRACE = 1e-12


# ============================================================================
# CONNECTION STATE
# ============================================================================

@dataclass(frozen=True, eq=False)
class ConnectionState:
    """
    Trace-one connection matrix with cached Hermitian and anti-Hermitian parts.

    ``post_selection_prob`` is Tr(rho E); it is a probability only when both
    factors are normalized, which ``normalized`` records. ``rho`` and
    ``effect`` keep the factors when the state was built from them, so that
    operations valid only in the commuting case can check their gate.
    """
    w: ComplexMatrix
    post_selection_prob: float = 1.0
    normalized: bool = True
    rho: Optional[ComplexMatrix] = None
    effect: Optional[ComplexMatrix] = None
    w_herm: ComplexMatrix = field(init=False)
    w_antiherm: ComplexMatrix = field(init=False)

    def __post_init__(self) -> None:
        w = as_matrix(self.w, 'connection state')
        trace = np.trace(w)
        if abs(trace - 1.0) > TAU_TRACE * max(1.0, operator_norm(w)):
            raise NotNormalized(f'connection state: Tr w = {trace:.12g} differs from 1')
        object.__setattr__(self, 'w', frozen_matrix(w))
        object.__setattr__(self, 'w_herm', frozen_matrix(hermitian_part(w)))
        object.__setattr__(self, 'w_antiherm', frozen_matrix(antihermitian_part(w)))
        object.__setattr__(self, 'post_selection_prob', float(self.post_selection_prob))
        if self.rho is not None:
            object.__setattr__(self, 'rho', frozen_matrix(self.rho))
        if self.effect is not None:
            object.__setattr__(self, 'effect', frozen_matrix(self.effect))

    @classmethod
    def from_matrix(cls, w: ArrayLike, post_selection_prob: float = 1.0, normalized: bool = True) -> 'ConnectionState':
        """Wrap a trace-one matrix that was not built from known factors."""
        return cls(w=np.asarray(w, dtype=np.complex128), post_selection_prob=post_selection_prob,
                   normalized=normalized)

    @classmethod
    def from_dict(cls, obj: dict) -> 'ConnectionState':
        if not isinstance(obj, dict) or 'w' not in obj:
            raise InvalidMatrix('connection state object must contain "w"')
        return cls.from_matrix(matrix_from_dict(obj['w']), obj.get('post_selection_prob', 1.0))

    def to_dict(self) -> dict:
        return {
            'w': matrix_to_dict(self.w),
            'w_herm': matrix_to_dict(self.w_herm),
            'w_antiherm': matrix_to_dict(self.w_antiherm),
            'post_selection_prob': self.post_selection_prob,
        }

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @property
    def has_factors(self) -> bool:
        return self.rho is not None and self.effect is not None

    def dagger(self) -> 'ConnectionState':
        """w†, which is the connection state of the exchanged ensemble."""
        return ConnectionState(
            w=np.conj(self.w).T,
            post_selection_prob=self.post_selection_prob,
            normalized=self.normalized,
        )

    def hermitian(self) -> 'ConnectionState':
        """The state w' alone, with w'' dropped."""
        return ConnectionState(
            w=self.w_herm,
            post_selection_prob=self.post_selection_prob,
            normalized=self.normalized,
            rho=self.rho,
            effect=self.effect,
        )


def _post_selection_trace(product: ComplexMatrix) -> float:
    trace = np.trace(product)
    if abs(trace.imag) > TAU_IMAG_TRACE * max(1.0, abs(trace.real)):
        raise InvalidMatrix(f'Tr(rho E) has imaginary part {trace.imag:.3e}')
    p = float(trace.real)
    if p <= EPS_PS:
        raise DegeneratePostSelection(f'Tr(rho E) = {p:.3e} <= {EPS_PS:.0e}')
    return p


def connection_state(rho: Any, effect: Any) -> ConnectionState:
    """
    w = rho E / Tr(rho E).

    Raises:
        DimensionMismatch: if rho and E differ in dimension.
        DegeneratePostSelection: if Tr(rho E) <= EPS_PS.
    """
    rho = as_density(rho)
    effect = as_effect(effect)
    require_same_dim(rho, effect, names=('rho', 'E'))
    product = rho.matrix @ effect.matrix
    p = _post_selection_trace(product)
    return ConnectionState(
        w=product / p,
        post_selection_prob=p,
        normalized=effect.normalized,
        rho=rho.matrix,
        effect=effect.matrix,
    )


def pure_connection_state(psi: ArrayLike, phi: ArrayLike) -> ConnectionState:
    """
    |psi><phi| / <phi|psi> for pure pre- and post-selection.

    The cutoff applies to the overlap |<phi|psi>| rather than to its square,
    which keeps overlaps down to about 1e-6 usable.
    """
    psi = np.asarray(psi, dtype=np.complex128).reshape(-1)
    phi = np.asarray(phi, dtype=np.complex128).reshape(-1)
    if psi.shape != phi.shape:
        raise DimensionMismatch(f'dimensions differ: psi={psi.size}, phi={phi.size}')
    psi = psi / np.linalg.norm(psi)
    phi = phi / np.linalg.norm(phi)
    overlap = np.vdot(phi, psi)
    if abs(overlap) <= EPS_PS:
        raise DegeneratePostSelection(f'|<phi|psi>| = {abs(overlap):.3e} <= {EPS_PS:.0e}')
    return ConnectionState(
        w=np.outer(psi, phi.conj()) / overlap,
        post_selection_prob=float(abs(overlap) ** 2),
        rho=projector(psi),
        effect=projector(phi),
    )


def exchanged_connection_state(rho: Any, effect: Any) -> ConnectionState:
    """Connection state with the roles swapped: E/Tr E prepared, rho post-selected. Equals w†."""
    rho = as_density(rho)
    effect = as_effect(effect)
    trace = effect.trace
    if trace <= EPS_PS:
        raise DegeneratePostSelection(f'Tr E = {trace:.3e} <= {EPS_PS:.0e}')
    return connection_state(DensityMatrix(effect.matrix / trace), PovmElement(rho.matrix))


def weak_value(observable: Any, w: ConnectionState) -> complex:
    """A_w = Tr(A w)."""
    a = observable_matrix(observable)
    require_same_dim(a, w.w, names=('A', 'w'))
    return complex(np.trace(a @ w.w))


# ============================================================================
# CLASSIFICATION AND NORMS
# ============================================================================

class ConnectionKind(str, Enum):
    USUAL = 'usual'
    UNUSUAL = 'unusual'


@dataclass(frozen=True)
class ClassificationReport:
    kind: ConnectionKind
    antiherm_norm: float
    herm_min_eigenvalue: float

    def to_dict(self) -> dict:
        return {
            'kind': self.kind.value,
            'antiherm_norm': self.antiherm_norm,
            'herm_min_eigenvalue': self.herm_min_eigenvalue,
        }


def classification_report(w: ConnectionState, tau: float = TAU_CLASSIFY) -> ClassificationReport:
    antiherm_norm = operator_norm(w.w_antiherm)
    min_eig = float(np.linalg.eigvalsh(w.w_herm)[0])
    usual = antiherm_norm <= tau and min_eig >= -tau
    return ClassificationReport(
        kind=ConnectionKind.USUAL if usual else ConnectionKind.UNUSUAL,
        antiherm_norm=antiherm_norm,
        herm_min_eigenvalue=min_eig,
    )


def classify(w: ConnectionState, tau: float = TAU_CLASSIFY) -> ConnectionKind:
    """Usual iff w is Hermitian and positive within tau, which happens iff rho and E commute."""
    return classification_report(w, tau).kind


class NormBound(NamedTuple):
    c_herm: float
    c_antiherm: float
    norm: float
    holds: bool


def norm_bound_check(w: ConnectionState) -> NormBound:
    """||w'|| + ||w''|| >= ||w|| with 1e-12 slack."""
    c_herm = operator_norm(w.w_herm)
    c_antiherm = operator_norm(w.w_antiherm)
    norm = operator_norm(w.w)
    return NormBound(c_herm, c_antiherm, norm, c_herm + c_antiherm >= norm - 1e-12)


@dataclass(frozen=True)
class AmplificationRow:
    overlap: float
    norm: float
    c_herm: float
    c_antiherm: float
    bound_holds: bool

    def to_dict(self) -> dict:
        return {
            'overlap': self.overlap,
            'norm': self.norm,
            'c_herm': self.c_herm,
            'c_antiherm': self.c_antiherm,
            'bound_holds': self.bound_holds,
        }


def amplification_point(overlap: float) -> AmplificationRow:
    """
    Norms of w for |psi> = |0> and |phi> = cos(theta)|0> + sin(theta)|1> with cos(theta) = overlap.

    ||w|| = 1/overlap, so small overlaps amplify the connection state.
    """
    if not overlap <= 1.0:
        raise InvalidParameter(f'overlap must be at most 1, got {overlap}')
    if overlap <= EPS_PS:
        raise DegeneratePostSelection(f'overlap {overlap:.3e} <= {EPS_PS:.0e}')
    phi = np.array([overlap, np.sqrt(1.0 - overlap ** 2)], dtype=np.complex128)
    bound = norm_bound_check(pure_connection_state(KET_0, phi))
    return AmplificationRow(float(overlap), bound.norm, bound.c_herm, bound.c_antiherm, bound.holds)


# ============================================================================
# POSTERIOR FAMILIES AND RETRODICTION
# ============================================================================

@dataclass(frozen=True, eq=False)
class PosteriorFamily:
    """
    Outcome probabilities P_l and posterior connection states w_l of a POVM.

    Outcomes that cannot occur have ``states[l] is None`` and are listed in
    ``excluded``.
    """
    probs: tuple
    states: tuple
    excluded: tuple = ()

    def reconstruct(self) -> ComplexMatrix:
        """sum_l P_l w_l, equal to rho."""
        total = np.zeros_like(next(s.w for s in self.states if s is not None))
        for p, s in zip(self.probs, self.states):
            if s is not None:
                total = total + p * s.w
        return total

    def weak_values(self, observable: Any) -> list:
        return [None if s is None else weak_value(observable, s) for s in self.states]

    def weak_value_sum(self, observable: Any) -> complex:
        """sum_l P_l A_{w,l}, equal to Tr(A rho) with vanishing imaginary part."""
        return complex(sum(p * v for p, v in zip(self.probs, self.weak_values(observable)) if v is not None))

    def __len__(self) -> int:
        return len(self.probs)


def posterior_family(rho: Any, povm: Any) -> PosteriorFamily:
    """
    Split rho into the post-selected sub-ensembles of a complete POVM.

    Raises:
        IncompletePovm: if the effects do not sum to the identity.
        DegeneratePostSelection: if some 0 < P_l <= EPS_PS.
    """
    rho = as_density(rho)
    povm = as_povm(povm)
    require_same_dim(rho, povm.elements[0], names=('rho', 'POVM'))

    probs, states, excluded = [], [], []
    for index, effect in enumerate(povm):
        p = float(np.trace(rho.matrix @ effect.matrix).real)
        if abs(p) <= ZERO_PROBABILITY_FLOOR:
            probs.append(0.0)
            states.append(None)
            excluded.append(index)
            continue
        if p <= EPS_PS:
            raise DegeneratePostSelection(f'outcome {index}: Tr(rho E) = {p:.3e} <= {EPS_PS:.0e}')
        w = connection_state(rho, effect)
        probs.append(w.post_selection_prob)
        states.append(w)
    return PosteriorFamily(tuple(probs), tuple(states), tuple(excluded))


def retrodictive_state(effect: Any) -> ConnectionState:
    """E / Tr E: the connection state of a completely random preparation."""
    effect = as_effect(effect)
    trace = effect.trace
    if trace <= EPS_PS:
        raise DegeneratePostSelection(f'Tr E = {trace:.3e} <= {EPS_PS:.0e}')
    d = effect.dim
    return ConnectionState(
        w=effect.matrix / trace,
        post_selection_prob=trace / d,
        normalized=effect.normalized,
        rho=np.eye(d, dtype=np.complex128) / d,
        effect=effect.matrix,
    )


def connection_from_pred_retr(rho_pred: Any, rho_retr: Any) -> ConnectionState:
    """
    w = rho_pred rho_retr / Tr(rho_pred rho_retr).

    The normalization Tr(rho_pred rho_retr) is P / Tr E and lies in (0, 1].
    """
    rho_pred = as_density(rho_pred)
    rho_retr = as_density(rho_retr)
    require_same_dim(rho_pred, rho_retr, names=('rho_pred', 'rho_retr'))
    product = rho_pred.matrix @ rho_retr.matrix
    p = _post_selection_trace(product)
    return ConnectionState(
        w=product / p,
        post_selection_prob=p,
        rho=rho_pred.matrix,
        effect=rho_retr.matrix,
    )


# ============================================================================
# CLASSICAL BAYES ORACLE
# ============================================================================

@dataclass(frozen=True, eq=False)
class ClassicalEnsemble:
    """Prior p_i over hidden values and likelihood table e[i, l] = P(outcome l | i)."""
    priors: NDArray[np.float64]
    likelihoods: NDArray[np.float64]

    def __post_init__(self) -> None:
        priors = np.array(self.priors, dtype=np.float64)
        likelihoods = np.array(self.likelihoods, dtype=np.float64)
        if likelihoods.ndim == 1:
            likelihoods = likelihoods[:, None]
        if priors.ndim != 1 or likelihoods.ndim != 2 or likelihoods.shape[0] != priors.size:
            raise DimensionMismatch(
                f'priors of shape {priors.shape} do not match likelihoods of shape {likelihoods.shape}'
            )
        if np.any(priors < 0):
            raise NotPositive('priors must be non-negative')
        if abs(priors.sum() - 1.0) > 1e-12:
            raise NotNormalized(f'priors sum to {priors.sum():.15g}, not 1')
        if np.any(likelihoods < 0):
            raise NotPositive('conditional probabilities must be non-negative')
        if np.any(likelihoods > 1):
            raise UnnormalizedEffect('conditional probabilities must not exceed 1')
        priors.setflags(write=False)
        likelihoods.setflags(write=False)
        object.__setattr__(self, 'priors', priors)
        object.__setattr__(self, 'likelihoods', likelihoods)

    @property
    def outcomes(self) -> int:
        return self.likelihoods.shape[1]

    @classmethod
    def from_diagonal(cls, rho: Any, effects: Sequence[Any]) -> 'ClassicalEnsemble':
        """Read p_i and e[i, l] off the diagonals of a simultaneously diagonal state and effects."""
        priors = np.real(np.diag(as_density(rho).matrix))
        table = np.column_stack([np.real(np.diag(as_effect(e).matrix)) for e in effects])
        return cls(np.clip(priors, 0.0, None), np.clip(table, 0.0, 1.0))


def classical_posterior(ensemble: ClassicalEnsemble, outcome: int) -> tuple[float, NDArray[np.float64]]:
    """
    Bayes' theorem: P_l = sum_i p_i e[i, l] and P(i | l) = p_i e[i, l] / P_l.

    Raises:
        ZeroProbabilityOutcome: if P_l <= EPS_PS.
    """
    if not 0 <= outcome < ensemble.outcomes:
        raise DimensionMismatch(f'outcome {outcome} out of range for {ensemble.outcomes} outcomes')
    joint = ensemble.priors * ensemble.likelihoods[:, outcome]
    p = float(joint.sum())
    if p <= EPS_PS:
        raise ZeroProbabilityOutcome(f'outcome {outcome} has probability {p:.3e}')
    return p, joint / p
