"""
Finite-dimensional von Neumann meter.

The system is coupled to a meter by U_c = exp(-i g A (x) F) and the pointer
observable R of the meter is read out. Because U_c is block diagonal in the
eigenspaces of A, U_c = sum_i Pi_i (x) B_i with B_i = exp(-i g a_i F), every
pointer statistic reduces to

    sum_ij Tr(E Pi_i X Pi_j) Tr(R B_i rho_M B_j†)

for a system operator X (a state or a connection state) and an effect E.
The functions below evaluate that double sum; coupling_unitary() and
sequential_pointer_expectation() build the full joint matrices instead and
serve as the brute-force path.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from ppslab.connection import ConnectionState
from ppslab.errors import (
    AliasedCoupling,
    CommutationRequired,
    ConfigError,
    DegeneratePostSelection,
    InvalidMatrix,
    InvalidParameter,
)
from ppslab.measurement import check_commuting_gate
from ppslab.qmcore import (
    EPS_PS,
    ComplexMatrix,
    DensityMatrix,
    Observable,
    PovmElement,
    as_density,
    as_effect,
    as_observable,
    commutes,
    dagger,
    operator_norm,
    require_same_dim,
    require_unitary,
    spectral_decompose,
)

# ============================================================================
# CONSTANTS
# ============================================================================

DEFAULT_DIM_M = 32
DEFAULT_HALF_WIDTH = 8.0
DEFAULT_POINTER_WIDTH = 1.0
TAU_ALIAS = 1e-10
TAU_POINTER_IMAG = 1e-10
METER_PROFILES = ('gaussian',)


# ============================================================================
# METER MODEL
# ============================================================================

@dataclass(frozen=True, eq=False)
class MeterModel:
    """
    Meter state rho_M, coupling generator F, pointer R and coupling strength g.

    The eigendecomposition of F is cached so that the blocks exp(-i g a F)
    cost one matrix product each.
    """
    rho_m: DensityMatrix
    generator: Observable
    pointer: Observable
    g: float
    _f_evals: NDArray[np.float64] = field(init=False, repr=False)
    _f_vecs: ComplexMatrix = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not np.isfinite(self.g):
            raise InvalidParameter(f'coupling strength must be finite, got {self.g}')
        object.__setattr__(self, 'g', float(self.g))
        object.__setattr__(self, 'rho_m', as_density(self.rho_m))
        object.__setattr__(self, 'generator', as_observable(self.generator))
        object.__setattr__(self, 'pointer', as_observable(self.pointer))
        require_same_dim(self.rho_m, self.generator.matrix, self.pointer.matrix,
                         names=('rho_M', 'F', 'R'))
        evals, vecs = np.linalg.eigh(self.generator.matrix)
        object.__setattr__(self, '_f_evals', evals)
        object.__setattr__(self, '_f_vecs', vecs)

    @property
    def dim(self) -> int:
        return self.rho_m.dim

    @classmethod
    def gaussian(
        cls,
        g: float,
        dim_m: int = DEFAULT_DIM_M,
        half_width: float = DEFAULT_HALF_WIDTH,
        width: float = DEFAULT_POINTER_WIDTH,
        kick: float = 0.0,
    ) -> 'MeterModel':
        """
        Grid meter on [-L, L] with a Gaussian pointer state.

        R is the position grid, F the momentum operator conjugate to it
        (diagonal in the discrete Fourier basis), and rho_M the pure state
        with amplitude exp(-x^2 / (4 width^2) + i kick x). A nonzero kick
        gives the pointer a mean momentum and breaks its parity.
        """
        if dim_m < 2:
            raise InvalidParameter(f'meter dimension must be at least 2, got {dim_m}')
        if half_width <= 0 or width <= 0:
            raise InvalidParameter('meter half-width and pointer width must be positive')
        x = np.linspace(-half_width, half_width, dim_m)
        dx = x[1] - x[0]
        dft = np.fft.fft(np.eye(dim_m), norm='ortho')
        momenta = 2 * np.pi * np.fft.fftfreq(dim_m, d=dx)
        generator = dagger(dft) @ np.diag(momenta) @ dft
        generator = (generator + dagger(generator)) / 2

        amplitude = np.exp(-x ** 2 / (4 * width ** 2) + 1j * kick * x)
        amplitude = amplitude / np.linalg.norm(amplitude)
        return cls(
            rho_m=DensityMatrix(np.outer(amplitude, amplitude.conj())),
            generator=spectral_decompose(generator),
            pointer=spectral_decompose(np.diag(x).astype(np.complex128)),
            g=g,
        )

    @classmethod
    def from_config(cls, config: dict) -> 'MeterModel':
        """
        Build from {"dim_M", "L", "width", "g", "profile", "kick"}.

        Raises:
            ConfigError: on an unknown profile or invalid values.
        """
        profile = config.get('profile', 'gaussian')
        if profile not in METER_PROFILES:
            raise ConfigError(f'unknown meter profile {profile!r}; expected one of {METER_PROFILES}')
        try:
            return cls.gaussian(
                g=float(config['g']),
                dim_m=int(config.get('dim_M', DEFAULT_DIM_M)),
                half_width=float(config.get('L', DEFAULT_HALF_WIDTH)),
                width=float(config.get('width', DEFAULT_POINTER_WIDTH)),
                kick=float(config.get('kick', 0.0)),
            )
        except KeyError as e:
            raise ConfigError(f'meter config is missing {e}') from e
        except (TypeError, ValueError) as e:
            raise ConfigError(f'invalid meter config: {e}') from e

    def with_coupling(self, g: float) -> 'MeterModel':
        return replace(self, g=g)

    def block(self, eigenvalue: float) -> ComplexMatrix:
        """exp(-i g a F) for one eigenvalue a of the system observable."""
        phases = np.exp(-1j * self.g * eigenvalue * self._f_evals)
        return (self._f_vecs * phases) @ dagger(self._f_vecs)

    def undisturbed_pointer(self) -> float:
        """Tr(R rho_M)."""
        return float(np.trace(self.pointer.matrix @ self.rho_m.matrix).real)


def _blocks(obs: Observable, meter: MeterModel) -> list:
    blocks = [meter.block(a) for a in obs.eigenvalues]
    if meter.g != 0.0:
        for i in range(len(blocks)):
            for j in range(i + 1, len(blocks)):
                if operator_norm(blocks[i] - blocks[j]) <= TAU_ALIAS:
                    raise AliasedCoupling(
                        f'eigenvalues {obs.eigenvalues[i]:.6g} and {obs.eigenvalues[j]:.6g} '
                        f'give the same meter transformation at g = {meter.g:.6g}'
                    )
    return blocks


def _meter_kernels(blocks: list, meter: MeterModel) -> tuple[ComplexMatrix, ComplexMatrix]:
    """K_R[i, j] = Tr(R B_i rho_M B_j†) and K_1[i, j] = Tr(B_i rho_M B_j†)."""
    n = len(blocks)
    k_pointer = np.empty((n, n), dtype=np.complex128)
    k_norm = np.empty((n, n), dtype=np.complex128)
    r = meter.pointer.matrix
    for i, bi in enumerate(blocks):
        left = bi @ meter.rho_m.matrix
        for j, bj in enumerate(blocks):
            evolved = left @ dagger(bj)
            k_pointer[i, j] = np.trace(r @ evolved)
            k_norm[i, j] = np.trace(evolved)
    return k_pointer, k_norm


def _system_kernel(obs: Observable, x: ComplexMatrix, effect: ComplexMatrix) -> ComplexMatrix:
    """S[i, j] = Tr(E Pi_i X Pi_j)."""
    n = len(obs.projectors)
    out = np.empty((n, n), dtype=np.complex128)
    for i, pi in enumerate(obs.projectors):
        left = effect @ pi @ x
        for j, pj in enumerate(obs.projectors):
            out[i, j] = np.trace(left @ pj)
    return out


def _real_pointer(value: complex, scale: float) -> float:
    if abs(value.imag) > TAU_POINTER_IMAG * max(1.0, scale):
        raise InvalidMatrix(f'pointer expectation has imaginary part {value.imag:.3e}')
    return float(value.real)


# ============================================================================
# COUPLING AND POINTER STATISTICS
# ============================================================================

def coupling_unitary(observable: Any, meter: MeterModel) -> ComplexMatrix:
    """
    U_c = exp(-i g A (x) F) on system (x) meter, as sum_i Pi_i (x) exp(-i g a_i F).

    Raises:
        AliasedCoupling: if two distinct eigenvalues of A give meter blocks
            equal within 1e-10 (only checked for g != 0).
    """
    obs = as_observable(observable)
    blocks = _blocks(obs, meter)
    return sum(np.kron(pi, b) for pi, b in zip(obs.projectors, blocks))


def pointer_value(eigenvalue: float, meter: MeterModel) -> float:
    """Pointer expectation Tr(R B rho_M B†) left by a system in an eigenstate with this eigenvalue."""
    b = meter.block(eigenvalue)
    return float(np.trace(meter.pointer.matrix @ b @ meter.rho_m.matrix @ dagger(b)).real)


def pointer_expectation_pps(rho: Any, effect: Any, observable: Any, meter: MeterModel) -> float:
    """
    Tr[(E (x) R) U_c (rho (x) rho_M) U_c†] / Tr[(E (x) I) U_c (rho (x) rho_M) U_c†].

    Raises:
        DegeneratePostSelection: if the denominator is at or below EPS_PS.
    """
    rho = as_density(rho)
    effect = as_effect(effect)
    obs = as_observable(observable)
    require_same_dim(rho, effect, obs.matrix, names=('rho', 'E', 'A'))
    k_pointer, k_norm = _meter_kernels(_blocks(obs, meter), meter)
    system = _system_kernel(obs, rho.matrix, effect.matrix)
    numerator = np.sum(system * k_pointer)
    denominator = np.sum(system * k_norm)
    if denominator.real <= EPS_PS:
        raise DegeneratePostSelection(f'post-selection probability {denominator.real:.3e} <= {EPS_PS:.0e}')
    return _real_pointer(numerator / denominator.real, operator_norm(meter.pointer.matrix))


def pointer_expectation_preselected(rho: Any, observable: Any, meter: MeterModel) -> float:
    """Tr[(I (x) R) U_c (rho (x) rho_M) U_c†], the pointer reading without post-selection."""
    rho = as_density(rho)
    return pointer_expectation_pps(rho, PovmElement.identity(rho.dim), observable, meter)


def pointer_expectation_connection(
    w: ConnectionState,
    observable: Any,
    meter: MeterModel,
    rho: Optional[Any] = None,
    effect: Optional[Any] = None,
) -> float:
    """
    Tr[(I (x) R) U_c (w (x) rho_M) U_c†] with the connection state in the system slot.

    Only the diagonal blocks survive the trace, so this equals
    sum_i Tr(Pi_i w) R_i; it reproduces the post-selected pointer reading
    when A commutes with rho or with E, which is checked first.

    Raises:
        CommutationRequired: if the commuting gate fails.
    """
    obs = as_observable(observable)
    require_same_dim(w.w, obs.matrix, names=('w', 'A'))
    check_commuting_gate(obs.matrix, w, rho, effect)
    k_pointer, _ = _meter_kernels(_blocks(obs, meter), meter)
    system = _system_kernel(obs, w.w, np.eye(w.dim, dtype=np.complex128))
    return _real_pointer(np.sum(system * k_pointer), operator_norm(meter.pointer.matrix))


def pointer_expectation_spectral(w: ConnectionState, observable: Any, meter: MeterModel) -> float:
    """sum_i Tr(Pi_i w) R_i, the pointer reading as a classical average over eigenvalues."""
    obs = as_observable(observable)
    require_same_dim(w.w, obs.matrix, names=('w', 'A'))
    weights = [np.trace(pi @ w.w).real for pi in obs.projectors]
    return float(sum(p * pointer_value(a, meter) for p, a in zip(weights, obs.eigenvalues)))


@dataclass(frozen=True)
class BranchWeights:
    """
    Weights P_ik over the eigenbasis |ik> of the commuting factor restricted to each eigenspace of A.

    ``branch`` is 'state' when A commutes with rho and 'effect' when it
    commutes with E. Summing over k gives Tr(Pi_i w).
    """
    branch: str
    weights: tuple

    def totals(self) -> NDArray[np.float64]:
        return np.array([float(np.sum(w)) for w in self.weights])


def branch_weights(rho: Any, effect: Any, observable: Any, branch: Optional[str] = None) -> BranchWeights:
    """
    Degeneracy-resolved weights of the commuting case.

    With [A, rho] = 0, P_ik = r_ik <ik|E|ik> / Tr(rho E) where r_ik, |ik> diagonalize
    rho inside eigenspace i; with [A, E] = 0 the roles of rho and E swap.

    Raises:
        CommutationRequired: if the requested (or any) branch does not commute.
    """
    rho = as_density(rho)
    effect = as_effect(effect)
    obs = as_observable(observable)
    require_same_dim(rho, effect, obs.matrix, names=('rho', 'E', 'A'))
    if branch is None:
        if commutes(obs.matrix, rho.matrix):
            branch = 'state'
        elif commutes(obs.matrix, effect.matrix):
            branch = 'effect'
        else:
            raise CommutationRequired('observable commutes with neither rho nor E')
    if branch == 'state':
        diagonal, other = rho.matrix, effect.matrix
    elif branch == 'effect':
        diagonal, other = effect.matrix, rho.matrix
    else:
        raise InvalidParameter(f"branch must be 'state' or 'effect', got {branch!r}")
    if not commutes(obs.matrix, diagonal):
        raise CommutationRequired(f'observable does not commute with the {branch} factor')

    total = float(np.trace(rho.matrix @ effect.matrix).real)
    if total <= EPS_PS:
        raise DegeneratePostSelection(f'Tr(rho E) = {total:.3e} <= {EPS_PS:.0e}')

    weights = []
    for pi in obs.projectors:
        evals, vecs = np.linalg.eigh(pi)
        basis = vecs[:, evals > 0.5]
        restricted = dagger(basis) @ diagonal @ basis
        r, u = np.linalg.eigh((restricted + dagger(restricted)) / 2)
        kets = basis @ u
        overlaps = np.real(np.einsum('ki,kl,li->i', kets.conj(), other, kets))
        weights.append(r * overlaps / total)
    return BranchWeights(branch, tuple(weights))


# ============================================================================
# SYSTEM DYNAMICS AROUND AN IMPULSIVE COUPLING
# ============================================================================

def apply_dynamics_substitution(
    rho: Any,
    effect: Any,
    observable: Any,
    u_pre: Any,
    u_post: Any,
    u1: Optional[Any] = None,
) -> tuple[DensityMatrix, PovmElement, Observable]:
    """
    Fold the system evolution around a coupling at time t into the static inputs.

    u_pre = U(t, t0) and u_post = U(t1, t). Returns U1 rho(t) U1†,
    U1 E(t1, t) U1† and U1 A U1†, where rho(t) = u_pre rho u_pre† and
    E(t1, t) = u_post† E u_post. The pointer statistics do not depend on the
    choice of the unitary U1 (identity by default).

    Raises:
        NotUnitary: if any of the unitaries fails the 1e-10 check.
    """
    rho = as_density(rho)
    effect = as_effect(effect)
    obs = as_observable(observable)
    pre = require_unitary(u_pre, 'U_pre')
    post = require_unitary(u_post, 'U_post')
    frame = np.eye(rho.dim, dtype=np.complex128) if u1 is None else require_unitary(u1, 'U1')
    require_same_dim(rho, effect, obs.matrix, pre, post, frame,
                     names=('rho', 'E', 'A', 'U_pre', 'U_post', 'U1'))

    rho_t = pre @ rho.matrix @ dagger(pre)
    effect_t = dagger(post) @ effect.matrix @ post
    return (
        DensityMatrix(frame @ rho_t @ dagger(frame)),
        PovmElement(frame @ effect_t @ dagger(frame)),
        spectral_decompose(frame @ obs.matrix @ dagger(frame)),
    )


def sequential_pointer_expectation(
    rho: Any,
    effect: Any,
    observable: Any,
    meter: MeterModel,
    u_pre: Any,
    u_post: Any,
) -> float:
    """
    Brute-force joint simulation: evolve with u_pre, couple, evolve with u_post, post-select, read R.

    Builds the full (d dim_M)-dimensional joint state.
    """
    rho = as_density(rho)
    effect = as_effect(effect)
    pre = require_unitary(u_pre, 'U_pre')
    post = require_unitary(u_post, 'U_post')
    eye_m = np.eye(meter.dim, dtype=np.complex128)

    joint = np.kron(pre @ rho.matrix @ dagger(pre), meter.rho_m.matrix)
    coupling = coupling_unitary(observable, meter)
    joint = coupling @ joint @ dagger(coupling)
    post_joint = np.kron(post, eye_m)
    joint = post_joint @ joint @ dagger(post_joint)

    selected = np.kron(effect.matrix, eye_m) @ joint
    denominator = float(np.trace(selected).real)
    if denominator <= EPS_PS:
        raise DegeneratePostSelection(f'post-selection probability {denominator:.3e} <= {EPS_PS:.0e}')
    numerator = np.trace(np.kron(effect.matrix, meter.pointer.matrix) @ joint)
    return _real_pointer(numerator / denominator, operator_norm(meter.pointer.matrix))


# ============================================================================
# WEAK LIMIT
# ============================================================================

@dataclass(frozen=True)
class WeakLimitEstimate:
    """shift/g at each coupling, and the linear extrapolation of the first two to g = 0."""
    g_values: tuple
    shift_over_g: tuple
    extrapolated: float

    def errors(self, reference: float) -> tuple:
        return tuple(abs(s - reference) for s in self.shift_over_g)

    def to_dict(self) -> dict:
        return {
            'g_values': list(self.g_values),
            'shift_over_g': list(self.shift_over_g),
            'extrapolated': self.extrapolated,
        }


def weak_limit_estimate(
    rho: Any,
    effect: Any,
    observable: Any,
    meter: MeterModel,
    g_values: Sequence[float] = (1e-2, 1e-3),
) -> WeakLimitEstimate:
    """
    Pointer shift per unit coupling, which tends to Re A_w as g -> 0.

    The shift is measured from the undisturbed pointer Tr(R rho_M).
    """
    if len(g_values) < 2 or any(g == 0 for g in g_values):
        raise InvalidParameter('need at least two nonzero coupling strengths')
    baseline = meter.undisturbed_pointer()
    ratios = tuple(
        (pointer_expectation_pps(rho, effect, observable, meter.with_coupling(g)) - baseline) / g
        for g in g_values
    )
    g1, g2 = g_values[0], g_values[1]
    extrapolated = (g1 * ratios[1] - g2 * ratios[0]) / (g1 - g2)
    return WeakLimitEstimate(tuple(float(g) for g in g_values), ratios, float(extrapolated))
