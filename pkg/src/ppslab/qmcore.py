"""
Dense complex linear algebra shared by every ppslab module.

Matrices are plain ``numpy.ndarray`` values of dtype complex128. The typed
wrappers (Observable, DensityMatrix, PovmElement, Povm) validate once at
construction, cache their spectral data and freeze their arrays, so they can
be shared freely between threads.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ppslab.errors import (
    DimensionMismatch,
    IncompletePovm,
    InvalidMatrix,
    InvalidParameter,
    NotHermitian,
    NotNormalized,
    NotPositive,
    NotUnitary,
)

ComplexMatrix = NDArray[np.complex128]

# ============================================================================
# CONSTANTS
# ============================================================================

# Relative Hermiticity tolerance, absolute positivity slack
TAU_HERM = 1e-10
TAU_POS = 1e-10
# Degeneracy threshold is TAU_DEG_REL * ||M||_op
TAU_DEG_REL = 1e-8
TAU_UNITARY = 1e-10
# Post-selection cutoff on Tr(rho E)
EPS_PS = 1e-12
MAX_DIM = 64

PAULI_I = np.eye(2, dtype=np.complex128)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
PAULIS = (PAULI_I, PAULI_X, PAULI_Y, PAULI_Z)

for _p in PAULIS:
    _p.setflags(write=False)


# ============================================================================
# VALIDATION AND BASIC OPERATIONS
# ============================================================================

def frozen_matrix(a: ArrayLike) -> ComplexMatrix:
    """Return a read-only complex128 copy."""
    out = np.array(a, dtype=np.complex128, copy=True)
    out.setflags(write=False)
    return out


def raw_matrix(x: Any) -> ComplexMatrix:
    """Unwrap an Observable/DensityMatrix/PovmElement/ConnectionState or pass an array through."""
    if hasattr(x, 'matrix'):
        return x.matrix
    if hasattr(x, 'w'):
        return x.w
    return np.asarray(x, dtype=np.complex128)


def as_matrix(m: Any, name: str = 'matrix', max_dim: Optional[int] = MAX_DIM) -> ComplexMatrix:
    """
    Coerce to a square, finite complex matrix.

    Raises:
        InvalidMatrix: if the input is not square, empty, non-finite or larger than max_dim.
    """
    try:
        arr = np.asarray(raw_matrix(m), dtype=np.complex128)
    except (TypeError, ValueError) as e:
        raise InvalidMatrix(f'{name}: cannot convert to a complex matrix ({e})') from e
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise InvalidMatrix(f'{name}: expected a non-empty square matrix, got shape {arr.shape}')
    if max_dim is not None and arr.shape[0] > max_dim:
        raise InvalidMatrix(f'{name}: dimension {arr.shape[0]} exceeds the cap of {max_dim}')
    if not np.all(np.isfinite(arr)):
        raise InvalidMatrix(f'{name}: entries must be finite')
    return arr


def dagger(m: ArrayLike) -> ComplexMatrix:
    return np.conj(np.asarray(m)).T


def hermitian_part(m: ArrayLike) -> ComplexMatrix:
    """(M + M†)/2"""
    m = np.asarray(m, dtype=np.complex128)
    return (m + dagger(m)) / 2


def antihermitian_part(m: ArrayLike) -> ComplexMatrix:
    """(M − M†)/(2i), so that M = hermitian_part(M) + i·antihermitian_part(M)."""
    m = np.asarray(m, dtype=np.complex128)
    return (m - dagger(m)) / 2j


def commutator(a: ArrayLike, b: ArrayLike) -> ComplexMatrix:
    a = np.asarray(a)
    b = np.asarray(b)
    return a @ b - b @ a


def operator_norm(m: Any) -> float:
    """Largest singular value, i.e. sqrt of the largest eigenvalue of M†M."""
    arr = as_matrix(m, max_dim=None)
    return float(np.linalg.norm(arr, 2))


def validate_hermitian(m: Any, tau: float = TAU_HERM) -> bool:
    """True iff ||M − M†||_op <= tau·max(1, ||M||_op)."""
    arr = as_matrix(m, max_dim=None)
    return operator_norm(arr - dagger(arr)) <= tau * max(1.0, operator_norm(arr))


def require_hermitian(m: Any, name: str = 'matrix', tau: float = TAU_HERM) -> ComplexMatrix:
    arr = as_matrix(m, name)
    if not validate_hermitian(arr, tau):
        deviation = operator_norm(arr - dagger(arr))
        raise NotHermitian(f'{name}: ||M - M^dagger|| = {deviation:.3e} exceeds tolerance {tau:.1e}')
    return arr


def require_same_dim(*mats: Any, names: Sequence[str] = ()) -> int:
    """Return the shared dimension or raise DimensionMismatch."""
    dims = [raw_matrix(m).shape[0] for m in mats]
    if len(set(dims)) != 1:
        label = ', '.join(f'{n}={d}' for n, d in zip(names, dims)) if names else str(dims)
        raise DimensionMismatch(f'dimensions differ: {label}')
    return dims[0]


def commutes(a: Any, b: Any, tau: float = TAU_HERM) -> bool:
    """True iff ||AB − BA||_op <= tau·max(1, ||A||_op·||B||_op)."""
    a = as_matrix(a, 'A', max_dim=None)
    b = as_matrix(b, 'B', max_dim=None)
    require_same_dim(a, b, names=('A', 'B'))
    return operator_norm(commutator(a, b)) <= tau * max(1.0, operator_norm(a) * operator_norm(b))


def validate_unitary(u: Any, tau: float = TAU_UNITARY) -> bool:
    arr = as_matrix(u, max_dim=None)
    return operator_norm(dagger(arr) @ arr - np.eye(arr.shape[0])) <= tau


def require_unitary(u: Any, name: str = 'U', tau: float = TAU_UNITARY) -> ComplexMatrix:
    arr = as_matrix(u, name, max_dim=None)
    if not validate_unitary(arr, tau):
        deviation = operator_norm(dagger(arr) @ arr - np.eye(arr.shape[0]))
        raise NotUnitary(f'{name}: ||U^dagger U - I|| = {deviation:.3e} exceeds tolerance {tau:.1e}')
    return arr


def psd_sqrt(m: Any) -> ComplexMatrix:
    """Square root of a positive semidefinite matrix; eigenvalues below zero are treated as zero."""
    evals, vecs = np.linalg.eigh(hermitian_part(as_matrix(m)))
    roots = np.sqrt(np.clip(evals, 0.0, None))
    return (vecs * roots) @ dagger(vecs)


def unitary_from_hamiltonian(h: Any, dt: float) -> ComplexMatrix:
    """
    exp(−i·H·dt) via eigendecomposition (hbar = 1).

    Raises:
        NotHermitian: if H is not Hermitian within TAU_HERM.
        InvalidMatrix: if dt is not finite.
    """
    if not np.isfinite(dt):
        raise InvalidMatrix(f'time step must be finite, got {dt}')
    hm = hermitian_part(require_hermitian(h, 'H'))
    evals, vecs = np.linalg.eigh(hm)
    return (vecs * np.exp(-1j * evals * dt)) @ dagger(vecs)


# ============================================================================
# TYPED OPERATORS
# ============================================================================

@dataclass(frozen=True, eq=False)
class Observable:
    """
    Hermitian observable with its grouped spectral decomposition.

    Build with spectral_decompose(); eigenvalues are distinct and sorted
    ascending, projectors[i] projects onto the eigenspace of eigenvalues[i].
    """
    matrix: ComplexMatrix
    eigenvalues: NDArray[np.float64]
    projectors: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, 'matrix', frozen_matrix(self.matrix))
        evals = np.array(self.eigenvalues, dtype=np.float64, copy=True)
        evals.setflags(write=False)
        object.__setattr__(self, 'eigenvalues', evals)
        object.__setattr__(self, 'projectors', tuple(frozen_matrix(p) for p in self.projectors))

    @classmethod
    def from_matrix(cls, m: Any, tau_deg: Optional[float] = None) -> 'Observable':
        return spectral_decompose(m, tau_deg)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def spectrum_range(self) -> tuple[float, float]:
        return float(self.eigenvalues[0]), float(self.eigenvalues[-1])

    def __len__(self) -> int:
        return len(self.eigenvalues)


def spectral_decompose(m: Any, tau_deg: Optional[float] = None) -> Observable:
    """
    Spectral decomposition with degenerate eigenvalues grouped.

    Sorted eigenvalues whose consecutive gap is at most tau_deg (default
    TAU_DEG_REL·||M||_op) form one group; the group value is the mean and the
    projector is the sum of the group's eigenvector projectors.

    Raises:
        NotHermitian: if M fails validate_hermitian.
    """
    arr = require_hermitian(m, 'observable')
    herm = hermitian_part(arr)
    if tau_deg is None:
        tau_deg = TAU_DEG_REL * operator_norm(herm)
    evals, vecs = np.linalg.eigh(herm)

    groups: list[list[int]] = [[0]]
    for k in range(1, len(evals)):
        if evals[k] - evals[k - 1] <= tau_deg:
            groups[-1].append(k)
        else:
            groups.append([k])

    eigenvalues = [float(np.mean(evals[g])) for g in groups]
    projectors = [vecs[:, g] @ dagger(vecs[:, g]) for g in groups]
    return Observable(matrix=arr, eigenvalues=np.array(eigenvalues), projectors=tuple(projectors))


def _check_positive(arr: ComplexMatrix, name: str) -> NDArray[np.float64]:
    evals = np.linalg.eigvalsh(hermitian_part(arr))
    slack = TAU_POS * max(1.0, float(np.max(np.abs(evals))))
    if evals[0] < -slack:
        raise NotPositive(f'{name}: minimum eigenvalue {evals[0]:.3e} is below -{slack:.1e}')
    return evals


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Hermitian, positive semidefinite, unit-trace state."""
    matrix: ComplexMatrix

    def __post_init__(self) -> None:
        arr = require_hermitian(self.matrix, 'density matrix')
        _check_positive(arr, 'density matrix')
        trace = np.trace(arr).real
        if abs(trace - 1.0) > TAU_HERM:
            raise NotNormalized(f'density matrix: trace {trace:.12g} differs from 1')
        object.__setattr__(self, 'matrix', frozen_matrix(hermitian_part(arr)))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def maximally_mixed(cls, dim: int) -> 'DensityMatrix':
        return cls(np.eye(dim, dtype=np.complex128) / dim)


@dataclass(frozen=True, eq=False)
class PovmElement:
    """
    Positive semidefinite effect E.

    Scalar multiples beyond the unit interval are allowed (connection states
    are invariant under rescaling); ``normalized`` records whether all
    eigenvalues are at most one.
    """
    matrix: ComplexMatrix
    normalized: bool = field(init=False)

    def __post_init__(self) -> None:
        arr = require_hermitian(self.matrix, 'effect')
        evals = _check_positive(arr, 'effect')
        if operator_norm(arr) == 0.0:
            raise NotPositive('effect: the zero matrix is not a valid effect')
        object.__setattr__(self, 'matrix', frozen_matrix(hermitian_part(arr)))
        object.__setattr__(self, 'normalized', bool(evals[-1] <= 1.0 + TAU_POS))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    @classmethod
    def identity(cls, dim: int) -> 'PovmElement':
        return cls(np.eye(dim, dtype=np.complex128))


@dataclass(frozen=True, eq=False)
class Povm:
    """Complete family of effects, sum_l E_l = I."""
    elements: tuple

    def __post_init__(self) -> None:
        elems = tuple(e if isinstance(e, PovmElement) else PovmElement(e) for e in self.elements)
        if not elems:
            raise IncompletePovm('POVM has no elements')
        d = require_same_dim(*elems)
        total = sum(e.matrix for e in elems)
        deviation = operator_norm(total - np.eye(d))
        if deviation > TAU_HERM * max(1.0, len(elems)):
            raise IncompletePovm(f'sum of effects differs from identity by {deviation:.3e}')
        object.__setattr__(self, 'elements', elems)

    @property
    def dim(self) -> int:
        return self.elements[0].dim

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self) -> Iterator[PovmElement]:
        return iter(self.elements)

    def __getitem__(self, index: int) -> PovmElement:
        return self.elements[index]


def as_density(x: Any) -> DensityMatrix:
    return x if isinstance(x, DensityMatrix) else DensityMatrix(raw_matrix(x))


def as_effect(x: Any) -> PovmElement:
    return x if isinstance(x, PovmElement) else PovmElement(raw_matrix(x))


def as_observable(x: Any) -> Observable:
    return x if isinstance(x, Observable) else spectral_decompose(x)


def as_povm(x: Any) -> Povm:
    return x if isinstance(x, Povm) else Povm(tuple(x))


def observable_matrix(x: Any, name: str = 'observable') -> ComplexMatrix:
    """Matrix of an Observable, or a validated Hermitian matrix, without decomposing it."""
    if isinstance(x, Observable):
        return x.matrix
    return require_hermitian(x, name)


# ============================================================================
# STATE BUILDERS
# ============================================================================

def ket(*amplitudes: complex) -> NDArray[np.complex128]:
    """Normalized column vector from amplitudes."""
    v = np.array(amplitudes, dtype=np.complex128)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise InvalidMatrix('ket: zero vector')
    return v / norm


def projector(psi: ArrayLike) -> ComplexMatrix:
    """|psi><psi| for a (normalized) vector."""
    v = np.asarray(psi, dtype=np.complex128).reshape(-1)
    v = v / np.linalg.norm(v)
    return np.outer(v, v.conj())


def pure_state(psi: ArrayLike) -> DensityMatrix:
    return DensityMatrix(projector(psi))


KET_0 = ket(1, 0)
KET_1 = ket(0, 1)
KET_PLUS = ket(1, 1)
KET_MINUS = ket(1, -1)
KET_PLUS_I = ket(1, 1j)
KET_MINUS_I = ket(1, -1j)

for _k in (KET_0, KET_1, KET_PLUS, KET_MINUS, KET_PLUS_I, KET_MINUS_I):
    _k.setflags(write=False)


# ============================================================================
# RANDOM GENERATORS
# ============================================================================

def _ginibre(rng: np.random.Generator, rows: int, cols: int) -> ComplexMatrix:
    return (rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))) / np.sqrt(2)


def random_unitary(dim: int, rng: np.random.Generator) -> ComplexMatrix:
    """Haar-random unitary: QR of a Ginibre matrix with the phases of diag(R) removed."""
    q, r = np.linalg.qr(_ginibre(rng, dim, dim))
    phases = np.diag(r) / np.abs(np.diag(r))
    return q * np.conj(phases)


def random_hermitian(dim: int, rng: np.random.Generator, scale: float = 1.0) -> ComplexMatrix:
    return scale * hermitian_part(_ginibre(rng, dim, dim))


def random_density_matrix(dim: int, rng: np.random.Generator, rank: Optional[int] = None) -> DensityMatrix:
    g = _ginibre(rng, dim, rank or dim)
    m = g @ dagger(g)
    return DensityMatrix(m / np.trace(m).real)


def random_effect(dim: int, rng: np.random.Generator, rank: Optional[int] = None) -> PovmElement:
    """Random normalized effect with largest eigenvalue drawn from [0.5, 1]."""
    g = _ginibre(rng, dim, rank or dim)
    m = g @ dagger(g)
    top = np.linalg.eigvalsh(hermitian_part(m))[-1]
    return PovmElement(m * (rng.uniform(0.5, 1.0) / top))


def random_povm(dim: int, outcomes: int, rng: np.random.Generator) -> Povm:
    """Random POVM: E_l = S^{-1/2} M_l S^{-1/2} with M_l Wishart and S = sum_l M_l."""
    mats = []
    for _ in range(outcomes):
        g = _ginibre(rng, dim, dim)
        mats.append(g @ dagger(g))
    evals, vecs = np.linalg.eigh(hermitian_part(sum(mats)))
    inv_sqrt = (vecs / np.sqrt(evals)) @ dagger(vecs)
    return Povm(tuple(hermitian_part(inv_sqrt @ m @ inv_sqrt) for m in mats))


def random_commuting_triple(
    dim: int,
    rng: np.random.Generator,
    side: str = 'state',
    degenerate: bool = False,
) -> tuple[DensityMatrix, PovmElement, Observable]:
    """
    Random (rho, E, A) with A diagonal in the eigenbasis of rho (side='state') or of E (side='effect').

    With degenerate=True the eigenvalues of A are drawn from a small integer
    set so that eigenspaces of dimension > 1 occur.
    """
    v = random_unitary(dim, rng)
    if degenerate:
        a = rng.integers(-1, 2, size=dim).astype(float)
    else:
        a = rng.normal(size=dim)
    obs = spectral_decompose((v * a) @ dagger(v))
    if side == 'state':
        p = rng.dirichlet(np.ones(dim))
        rho = DensityMatrix((v * p) @ dagger(v))
        effect = random_effect(dim, rng)
    elif side == 'effect':
        e = rng.uniform(0.05, 1.0, size=dim)
        effect = PovmElement((v * e) @ dagger(v))
        rho = random_density_matrix(dim, rng)
    else:
        raise InvalidParameter(f"side must be 'state' or 'effect', got {side!r}")
    return rho, effect, obs


# ============================================================================
# MATRIX FILE FORMAT
# ============================================================================

def matrix_to_dict(m: Any) -> dict:
    """{"dim": d, "re": [...], "im": [...]} with row-major entries."""
    arr = as_matrix(m, max_dim=None)
    return {
        'dim': int(arr.shape[0]),
        're': arr.real.ravel().tolist(),
        'im': arr.imag.ravel().tolist(),
    }


def matrix_from_dict(obj: Any) -> ComplexMatrix:
    """
    Parse the matrix JSON object.

    Raises:
        InvalidMatrix: on missing keys, non-positive dim or length mismatches.
    """
    if not isinstance(obj, dict) or not {'dim', 're', 'im'} <= set(obj):
        raise InvalidMatrix('matrix object must contain "dim", "re" and "im"')
    dim = obj['dim']
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise InvalidMatrix(f'matrix "dim" must be a positive integer, got {dim!r}')
    re, im = obj['re'], obj['im']
    if len(re) != dim * dim or len(im) != dim * dim:
        raise InvalidMatrix(
            f'matrix of dim {dim} needs {dim * dim} entries, got re={len(re)} im={len(im)}'
        )
    try:
        arr = np.array(re, dtype=np.float64) + 1j * np.array(im, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise InvalidMatrix(f'matrix entries must be numbers ({e})') from e
    return as_matrix(arr.reshape(dim, dim))


def load_matrix(path: Union[str, Path]) -> ComplexMatrix:
    try:
        obj = json.loads(Path(path).read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise InvalidMatrix(f'{path}: not valid JSON ({e})') from e
    return matrix_from_dict(obj)


def save_matrix(path: Union[str, Path], m: Any) -> None:
    Path(path).write_text(json.dumps(matrix_to_dict(m)) + '\n', encoding='utf-8')
