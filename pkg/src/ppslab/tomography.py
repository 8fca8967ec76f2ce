"""
Linear tomography of connection states and of detector effects.

Weak values (A_j)_w = Tr(A_j w) are linear in w. Expanding w = sum_i alpha_i B_i
in an operator basis gives the linear system sum_i a_ji alpha_i = (A_j)_w
with design matrix a_ji = Tr(A_j B_i), solved here by SVD. With a completely
random preparation the reconstructed state is the retrodictive state E/Tr E,
and rescaling by Tr E = P d recovers the detector effect itself.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ppslab.connection import ConnectionState, weak_value
from ppslab.errors import InconsistentData, InvalidParameter, SingularDesign
from ppslab.measurement import abl_probabilities
from ppslab.qmcore import (
    PAULIS,
    TAU_HERM,
    ComplexMatrix,
    PovmElement,
    as_effect,
    as_observable,
    dagger,
    frozen_matrix,
    hermitian_part,
    matrix_to_dict,
    operator_norm,
    require_same_dim,
)

# ============================================================================
# CONSTANTS
# ============================================================================

SINGULAR_CUTOFF = 1e-10
# |Tr w - 1| above this marks a reconstruction as renormalized
RECONSTRUCTION_TOL = 1e-8
# Negative eigenvalues and anti-Hermitian parts are tolerated up to this many noise sigmas
NOISE_SIGMAS = 10.0

WEAK_VALUE_COLUMNS = ('probe_index', 're_weak_value', 'im_weak_value')


# ============================================================================
# OPERATOR BASES AND PROBES
# ============================================================================

@dataclass(frozen=True, eq=False)
class OperatorBasis:
    """d^2 linearly independent operators B_i spanning the d x d matrices."""
    operators: tuple
    label: str = 'custom'

    def __post_init__(self) -> None:
        ops = tuple(frozen_matrix(b) for b in self.operators)
        if not ops:
            raise SingularDesign('operator basis is empty')
        d = require_same_dim(*ops)
        if len(ops) != d * d:
            raise SingularDesign(f'a basis for d = {d} needs {d * d} operators, got {len(ops)}')
        flat = np.array([b.ravel() for b in ops])
        gram = flat.conj() @ flat.T
        smallest = float(np.linalg.svd(gram, compute_uv=False)[-1])
        if smallest <= SINGULAR_CUTOFF:
            raise SingularDesign(f'basis Gram matrix has smallest singular value {smallest:.3e}')
        object.__setattr__(self, 'operators', ops)

    @property
    def dim(self) -> int:
        return self.operators[0].shape[0]

    def __len__(self) -> int:
        return len(self.operators)

    def is_hermitian(self) -> bool:
        return all(operator_norm(b - dagger(b)) <= TAU_HERM for b in self.operators)

    def combine(self, coefficients: ArrayLike) -> ComplexMatrix:
        """sum_i alpha_i B_i"""
        return np.tensordot(np.asarray(coefficients, dtype=np.complex128), np.array(self.operators), axes=1)


def pauli_basis(normalized: bool = True) -> OperatorBasis:
    """{I, sigma_1, sigma_2, sigma_3}, divided by sqrt(2) when normalized."""
    scale = 1 / np.sqrt(2) if normalized else 1.0
    return OperatorBasis(tuple(scale * p for p in PAULIS), 'pauli' if normalized else 'pauli-unnormalized')


def gell_mann_basis(dim: int) -> OperatorBasis:
    """
    Identity plus generalized Gell-Mann matrices, orthonormal under Tr(B_i B_j).

    Order: I/sqrt(d), symmetric pairs, antisymmetric pairs, diagonal matrices.
    """
    if dim < 1:
        raise InvalidParameter(f'dimension must be positive, got {dim}')
    ops = [np.eye(dim, dtype=np.complex128) / np.sqrt(dim)]
    for j in range(dim):
        for k in range(j + 1, dim):
            m = np.zeros((dim, dim), dtype=np.complex128)
            m[j, k] = m[k, j] = 1 / np.sqrt(2)
            ops.append(m)
    for j in range(dim):
        for k in range(j + 1, dim):
            m = np.zeros((dim, dim), dtype=np.complex128)
            m[j, k] = -1j / np.sqrt(2)
            m[k, j] = 1j / np.sqrt(2)
            ops.append(m)
    for l in range(1, dim):
        diag = np.zeros(dim)
        diag[:l] = 1.0
        diag[l] = -l
        ops.append(np.diag(diag / np.sqrt(l * (l + 1))).astype(np.complex128))
    return OperatorBasis(tuple(ops), f'gell-mann-{dim}')


def default_basis(dim: int) -> OperatorBasis:
    return pauli_basis() if dim == 2 else gell_mann_basis(dim)


def design_matrix(probes: Sequence[Any], basis: OperatorBasis) -> ComplexMatrix:
    """
    a[j, i] = Tr(A_j B_i).

    Raises:
        SingularDesign: if there are fewer than d^2 probes or the smallest
            singular value is at or below 1e-10.
    """
    probe_mats = [as_observable(p).matrix for p in probes]
    require_same_dim(*probe_mats, basis.operators[0])
    if len(probe_mats) < len(basis):
        raise SingularDesign(f'{len(probe_mats)} probes cannot determine {len(basis)} coefficients')
    a = np.array([[np.trace(pj @ bi) for bi in basis.operators] for pj in probe_mats])
    smallest = float(np.linalg.svd(a, compute_uv=False)[-1])
    if smallest <= SINGULAR_CUTOFF:
        raise SingularDesign(f'design matrix has smallest singular value {smallest:.3e}')
    return a


@dataclass(frozen=True, eq=False)
class ProbeSet:
    """Probe observables A_j together with their design matrix against a basis."""
    observables: tuple
    basis: OperatorBasis
    design: ComplexMatrix = field(init=False)

    def __post_init__(self) -> None:
        observables = tuple(as_observable(a) for a in self.observables)
        object.__setattr__(self, 'observables', observables)
        object.__setattr__(self, 'design', frozen_matrix(design_matrix(observables, self.basis)))

    @classmethod
    def from_basis(cls, basis: OperatorBasis) -> 'ProbeSet':
        """Use the (Hermitian) basis operators themselves as probes."""
        return cls(tuple(basis.operators), basis)

    @classmethod
    def default(cls, dim: int) -> 'ProbeSet':
        return cls.from_basis(default_basis(dim))

    def __len__(self) -> int:
        return len(self.observables)


# ============================================================================
# RECONSTRUCTION
# ============================================================================

@dataclass(frozen=True, eq=False)
class Reconstruction:
    state: ConnectionState
    coefficients: NDArray[np.complex128]
    residual_norm: float
    trace_deviation: float
    renormalized: bool

    def to_dict(self) -> dict:
        return {
            'w': {
                'w': matrix_to_dict(self.state.w),
                'w_herm': matrix_to_dict(self.state.w_herm),
                'w_antiherm': matrix_to_dict(self.state.w_antiherm),
            },
            'residual_norm': self.residual_norm,
            'trace_deviation': self.trace_deviation,
            'renormalized': self.renormalized,
        }


def _solve(design: ComplexMatrix, data: NDArray[np.complex128]) -> NDArray[np.complex128]:
    u, s, vh = np.linalg.svd(design, full_matrices=False)
    if s[-1] <= SINGULAR_CUTOFF:
        raise SingularDesign(f'design matrix has smallest singular value {s[-1]:.3e}')
    return dagger(vh) @ ((dagger(u) @ data) / s)


def reconstruct_connection(
    weak_values: Sequence[complex],
    probes: Sequence[Any],
    basis: OperatorBasis,
) -> Reconstruction:
    """
    Solve a alpha = (A_j)_w and return w = sum_i alpha_i B_i, rescaled to unit trace.

    ``renormalized`` is set when the raw trace missed one by more than
    RECONSTRUCTION_TOL, which indicates noisy data.

    Raises:
        SingularDesign: if the design matrix is (near) singular.
        InconsistentData: if the data has the wrong length or gives a vanishing trace.
    """
    probes = probes.observables if isinstance(probes, ProbeSet) else probes
    design = design_matrix(probes, basis)
    data = np.asarray(weak_values, dtype=np.complex128).reshape(-1)
    if data.size != design.shape[0]:
        raise InconsistentData(f'expected {design.shape[0]} weak values, got {data.size}')

    alpha = _solve(design, data)
    residual = float(np.linalg.norm(design @ alpha - data))
    w = basis.combine(alpha)
    trace = np.trace(w)
    if abs(trace) <= SINGULAR_CUTOFF:
        raise InconsistentData(f'reconstructed trace {trace:.3e} is too small to normalize')
    deviation = float(abs(trace - 1.0))
    return Reconstruction(
        state=ConnectionState.from_matrix(w / trace),
        coefficients=alpha,
        residual_norm=residual,
        trace_deviation=deviation,
        renormalized=deviation > RECONSTRUCTION_TOL,
    )


def simulate_weak_value_data(
    w: ConnectionState,
    probes: Sequence[Any],
    noise_sigma: float = 0.0,
    seed: Optional[int] = None,
) -> NDArray[np.complex128]:
    """Exact weak values plus independent Gaussian noise of std noise_sigma on each quadrature."""
    if noise_sigma < 0:
        raise InvalidParameter(f'noise_sigma must be non-negative, got {noise_sigma}')
    probes = probes.observables if isinstance(probes, ProbeSet) else probes
    exact = np.array([weak_value(a, w) for a in probes], dtype=np.complex128)
    if noise_sigma == 0:
        return exact
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=exact.size) + 1j * rng.normal(size=exact.size)
    return exact + noise_sigma * noise


def weak_values_from_strong_statistics(effect: Any, probes: Sequence[Any]) -> NDArray[np.complex128]:
    """
    Probe weak values of the retrodictive ensemble read off strong post-selected statistics.

    With a completely random preparation every probe commutes with the state,
    so sum_i a_i P(a_i | E) from the ABL rule is the weak value.
    """
    effect = as_effect(effect)
    probes = probes.observables if isinstance(probes, ProbeSet) else probes
    mixed = np.eye(effect.dim, dtype=np.complex128) / effect.dim
    values = []
    for probe in probes:
        obs = as_observable(probe)
        values.append(float(np.dot(obs.eigenvalues, abl_probabilities(mixed, obs, effect))))
    return np.array(values, dtype=np.complex128)


@dataclass(frozen=True, eq=False)
class DetectorEstimate:
    effect_matrix: ComplexMatrix
    retrodictive: ConnectionState
    trace: float
    min_eigenvalue: float
    consistent: bool
    reconstruction: Reconstruction

    def as_povm_element(self) -> PovmElement:
        return PovmElement(self.effect_matrix)

    def to_dict(self) -> dict:
        out = self.reconstruction.to_dict()
        out.update({
            'effect': matrix_to_dict(self.effect_matrix),
            'trace': self.trace,
            'min_eigenvalue': self.min_eigenvalue,
            'consistent': self.consistent,
        })
        return out


def detector_tomography(
    weak_values: Sequence[complex],
    probes: Sequence[Any],
    basis: OperatorBasis,
    post_selection_prob: float,
    dim: int,
    noise_sigma: float = 0.0,
    strict: bool = True,
) -> DetectorEstimate:
    """
    Recover a detector effect from post-selected-only data taken with a completely random preparation.

    The reconstructed connection state is the retrodictive state E/Tr E and
    Tr E = P d, so E = P d w'. The data is inconsistent when w has an
    anti-Hermitian part or a negative eigenvalue beyond NOISE_SIGMAS noise
    standard deviations; with strict=True that raises, otherwise the estimate
    is returned with consistent=False.

    Raises:
        SingularDesign: from the reconstruction.
        InconsistentData: see above, or if P is outside (0, 1].
    """
    if not 0 < post_selection_prob <= 1:
        raise InconsistentData(f'post-selection probability must lie in (0, 1], got {post_selection_prob}')
    if dim != basis.dim:
        raise InconsistentData(f'dimension {dim} does not match the basis dimension {basis.dim}')
    rec = reconstruct_connection(weak_values, probes, basis)
    antiherm = operator_norm(rec.state.w_antiherm)
    retro = hermitian_part(rec.state.w)
    min_eig = float(np.linalg.eigvalsh(retro)[0])

    slack = NOISE_SIGMAS * noise_sigma
    consistent = antiherm <= slack * dim + TAU_HERM and min_eig >= -(slack + TAU_HERM)
    if strict and not consistent:
        raise InconsistentData(
            f'retrodictive state is not a density matrix within noise: ||w\'\'|| = {antiherm:.3e}, '
            f'min eigenvalue {min_eig:.3e}'
        )
    scale = post_selection_prob * dim
    return DetectorEstimate(
        effect_matrix=frozen_matrix(scale * retro),
        retrodictive=rec.state,
        trace=float(scale),
        min_eigenvalue=min_eig * scale,
        consistent=consistent,
        reconstruction=rec,
    )


# ============================================================================
# WEAK-VALUE DATA FILES
# ============================================================================

def format_weak_value_data(weak_values: Sequence[complex]) -> str:
    """CSV text with one row per probe: probe_index, re_weak_value, im_weak_value."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(WEAK_VALUE_COLUMNS)
    for index, value in enumerate(np.asarray(weak_values, dtype=np.complex128).reshape(-1)):
        writer.writerow([index, f'{value.real:.17g}', f'{value.imag:.17g}'])
    return buffer.getvalue()


def save_weak_value_data(path: Union[str, Path], weak_values: Sequence[complex]) -> None:
    Path(path).write_text(format_weak_value_data(weak_values), encoding='utf-8')


def parse_weak_value_data(text: str) -> NDArray[np.complex128]:
    """
    Weak values from CSV text, ordered by probe_index.

    Rows may come in any order but the indices must be exactly 0 .. n-1.

    Raises:
        InconsistentData: on a wrong header, unparsable numbers, or missing
            or repeated probe indices.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != WEAK_VALUE_COLUMNS:
        raise InconsistentData(f'weak-value data must start with the header {",".join(WEAK_VALUE_COLUMNS)}')
    values = {}
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(WEAK_VALUE_COLUMNS):
            raise InconsistentData(f'line {line_no}: expected 3 columns, got {len(row)}')
        try:
            index = int(row[0])
            value = complex(float(row[1]), float(row[2]))
        except ValueError as e:
            raise InconsistentData(f'line {line_no}: {e}') from e
        if not np.isfinite(value):
            raise InconsistentData(f'line {line_no}: weak value is not finite')
        if index in values:
            raise InconsistentData(f'line {line_no}: probe_index {index} appears twice')
        values[index] = value
    if not values:
        raise InconsistentData('weak-value data has no rows')
    if sorted(values) != list(range(len(values))):
        raise InconsistentData(f'probe indices must be 0..{len(values) - 1}')
    return np.array([values[k] for k in range(len(values))], dtype=np.complex128)


def load_weak_value_data(path: Union[str, Path]) -> NDArray[np.complex128]:
    return parse_weak_value_data(Path(path).read_text(encoding='utf-8'))


def default_probes_for(weak_values: Sequence[complex]) -> ProbeSet:
    """Default probe set whose size d^2 matches the number of weak values."""
    n = len(weak_values)
    dim = math.isqrt(n)
    if dim < 2 or dim * dim != n:
        raise InconsistentData(f'{n} weak values do not match a default probe set of d^2 probes with d >= 2')
    return ProbeSet.default(dim)
