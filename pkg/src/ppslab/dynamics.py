"""
Unitary time evolution between preparation (t0) and post-selection (t1).

Hamiltonians are piecewise constant, so propagators are exact ordered
products of segment exponentials (hbar = 1). The connection state at an
intermediate time t is w(t) = rho(t) E(t1, t) / P with the predicted state
rho(t) = U(t, t0) rho U(t, t0)† and the Heisenberg-evolved effect
E(t1, t) = U(t1, t)† E U(t1, t); P does not depend on t.
"""

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from ppslab.connection import ConnectionState, connection_from_pred_retr, retrodictive_state
from ppslab.errors import (
    DegeneratePostSelection,
    InvalidMatrix,
    InvalidParameter,
    InvalidSchedule,
    OutOfScheduleRange,
)
from ppslab.qmcore import (
    EPS_PS,
    ComplexMatrix,
    DensityMatrix,
    PovmElement,
    as_density,
    as_effect,
    commutator,
    dagger,
    frozen_matrix,
    matrix_from_dict,
    matrix_to_dict,
    observable_matrix,
    require_hermitian,
    require_same_dim,
    require_unitary,
    unitary_from_hamiltonian,
)

# Slack when comparing times against schedule bounds and segment joints
TIME_SLACK = 1e-12


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= TIME_SLACK * max(1.0, abs(a), abs(b))


# ============================================================================
# SCHEDULES
# ============================================================================

@dataclass(frozen=True, eq=False)
class Segment:
    t_start: float
    t_end: float
    hamiltonian: ComplexMatrix

    def __post_init__(self) -> None:
        if not (np.isfinite(self.t_start) and np.isfinite(self.t_end)):
            raise InvalidSchedule('segment times must be finite')
        if not self.t_start < self.t_end:
            raise InvalidSchedule(f'segment start {self.t_start} is not before its end {self.t_end}')
        object.__setattr__(self, 't_start', float(self.t_start))
        object.__setattr__(self, 't_end', float(self.t_end))
        object.__setattr__(self, 'hamiltonian', frozen_matrix(require_hermitian(self.hamiltonian, 'H')))

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@dataclass(frozen=True, eq=False)
class HamiltonianSchedule:
    """Contiguous piecewise-constant H(t) covering [t0, t1]."""
    segments: tuple

    def __post_init__(self) -> None:
        segments = tuple(self.segments)
        if not segments:
            raise InvalidSchedule('schedule has no segments')
        require_same_dim(*(s.hamiltonian for s in segments))
        for before, after in zip(segments, segments[1:]):
            if not _close(before.t_end, after.t_start):
                raise InvalidSchedule(
                    f'segments must be contiguous: {before.t_end} is followed by {after.t_start}'
                )
        object.__setattr__(self, 'segments', segments)

    @classmethod
    def constant(cls, hamiltonian: Any, t0: float, t1: float) -> 'HamiltonianSchedule':
        return cls((Segment(t0, t1, np.asarray(hamiltonian, dtype=np.complex128)),))

    @property
    def t0(self) -> float:
        return self.segments[0].t_start

    @property
    def t1(self) -> float:
        return self.segments[-1].t_end

    @property
    def dim(self) -> int:
        return self.segments[0].hamiltonian.shape[0]

    def check_time(self, t: float) -> None:
        if not (self.t0 <= t <= self.t1 or _close(t, self.t0) or _close(t, self.t1)):
            raise OutOfScheduleRange(f'time {t} lies outside the schedule [{self.t0}, {self.t1}]')

    def hamiltonian_at(self, t: float) -> ComplexMatrix:
        """H(t); at a joint between segments the later segment applies."""
        self.check_time(t)
        for segment in self.segments:
            if t < segment.t_end:
                return segment.hamiltonian
        return self.segments[-1].hamiltonian

    def breakpoints(self, t_a: float, t_b: float) -> list:
        """Segment joints strictly between t_a and t_b, in the order travelled from t_a to t_b."""
        lo, hi = min(t_a, t_b), max(t_a, t_b)
        joints = [s.t_start for s in self.segments[1:] if lo < s.t_start < hi]
        return joints if t_b >= t_a else joints[::-1]

    def to_dict(self) -> dict:
        return {
            'segments': [
                {'t_start': s.t_start, 't_end': s.t_end, 'H': matrix_to_dict(s.hamiltonian)}
                for s in self.segments
            ]
        }

    @classmethod
    def from_dict(cls, obj: Any) -> 'HamiltonianSchedule':
        if not isinstance(obj, dict) or not isinstance(obj.get('segments'), list):
            raise InvalidSchedule('schedule object must contain a "segments" list')
        segments = []
        for index, raw in enumerate(obj['segments']):
            try:
                segments.append(Segment(float(raw['t_start']), float(raw['t_end']), matrix_from_dict(raw['H'])))
            except (KeyError, TypeError) as e:
                raise InvalidSchedule(f'segment {index}: expected "t_start", "t_end" and "H" ({e})') from e
        return cls(tuple(segments))


def load_schedule(path: Union[str, Path]) -> HamiltonianSchedule:
    try:
        obj = json.loads(Path(path).read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise InvalidMatrix(f'{path}: not valid JSON ({e})') from e
    return HamiltonianSchedule.from_dict(obj)


# ============================================================================
# PROPAGATORS AND PICTURES
# ============================================================================

def propagator(schedule: HamiltonianSchedule, t_start: float, t_end: float) -> ComplexMatrix:
    """
    U(t_end, t_start): ordered product of segment exponentials, later times on the left.

    For t_start > t_end this is the adjoint of U(t_start, t_end).

    Raises:
        OutOfScheduleRange: if either time is outside the schedule.
    """
    schedule.check_time(t_start)
    schedule.check_time(t_end)
    if t_start > t_end:
        return dagger(propagator(schedule, t_end, t_start))
    u = np.eye(schedule.dim, dtype=np.complex128)
    for segment in schedule.segments:
        lo = max(t_start, segment.t_start)
        hi = min(t_end, segment.t_end)
        if hi > lo:
            u = unitary_from_hamiltonian(segment.hamiltonian, hi - lo) @ u
    return u


def evolve_state(rho: Any, u: Any) -> DensityMatrix:
    """U rho U†."""
    rho = as_density(rho)
    u = require_unitary(u)
    require_same_dim(rho, u, names=('rho', 'U'))
    return DensityMatrix(u @ rho.matrix @ dagger(u))


def heisenberg_effect(effect: Any, u: Any) -> PovmElement:
    """U† E U, the effect carried back by U = U(t1, t)."""
    effect = as_effect(effect)
    u = require_unitary(u)
    require_same_dim(effect, u, names=('E', 'U'))
    return PovmElement(dagger(u) @ effect.matrix @ u)


def _check_order(t0: float, t: float, t1: float) -> None:
    if not (t0 <= t <= t1):
        raise OutOfScheduleRange(f'times must satisfy t0 <= t <= t1, got {t0}, {t}, {t1}')


def _bounds(schedule: HamiltonianSchedule, t0: Optional[float], t1: Optional[float]) -> tuple[float, float]:
    return (schedule.t0 if t0 is None else t0), (schedule.t1 if t1 is None else t1)


def connection_state_at(
    rho: Any,
    effect: Any,
    schedule: HamiltonianSchedule,
    t: float,
    t0: Optional[float] = None,
    t1: Optional[float] = None,
) -> ConnectionState:
    """
    w(t) = U(t, t0) rho U(t1, t0)† E U(t1, t) / P.

    The returned state keeps rho(t) and E(t1, t) as its factors. t0 and t1
    default to the schedule bounds.

    Raises:
        OutOfScheduleRange: if t0 <= t <= t1 fails or a time is outside the schedule.
        DegeneratePostSelection: if P <= EPS_PS.
    """
    rho = as_density(rho)
    effect = as_effect(effect)
    t0, t1 = _bounds(schedule, t0, t1)
    _check_order(t0, t, t1)
    require_same_dim(rho, effect, schedule.segments[0].hamiltonian, names=('rho', 'E', 'H'))

    u_pre = propagator(schedule, t0, t)
    u_post = propagator(schedule, t, t1)
    rho_t = u_pre @ rho.matrix @ dagger(u_pre)
    effect_t = dagger(u_post) @ effect.matrix @ u_post
    product = rho_t @ effect_t
    p = float(np.trace(product).real)
    if p <= EPS_PS:
        raise DegeneratePostSelection(f'P = {p:.3e} <= {EPS_PS:.0e}')
    return ConnectionState(
        w=product / p,
        post_selection_prob=p,
        normalized=effect.normalized,
        rho=rho_t,
        effect=effect_t,
    )


def post_selection_probabilities(
    rho: Any,
    effect: Any,
    schedule: HamiltonianSchedule,
    t: float,
    t0: Optional[float] = None,
    t1: Optional[float] = None,
) -> tuple[float, float, float]:
    """(Tr[rho(t) E(t1, t)], Tr[rho E(t1, t0)], Tr[rho(t1) E]); all three are equal."""
    rho = as_density(rho)
    effect = as_effect(effect)
    t0, t1 = _bounds(schedule, t0, t1)
    _check_order(t0, t, t1)
    u_pre = propagator(schedule, t0, t)
    u_post = propagator(schedule, t, t1)
    u_full = propagator(schedule, t0, t1)
    at_t = np.trace(u_pre @ rho.matrix @ dagger(u_pre) @ dagger(u_post) @ effect.matrix @ u_post)
    at_t0 = np.trace(rho.matrix @ dagger(u_full) @ effect.matrix @ u_full)
    at_t1 = np.trace(u_full @ rho.matrix @ dagger(u_full) @ effect.matrix)
    return float(at_t.real), float(at_t0.real), float(at_t1.real)


def retrodictive_at(effect: Any, schedule: HamiltonianSchedule, t: float, t1: Optional[float] = None) -> ConnectionState:
    """E(t1, t) / Tr E, the retrodictive state carried back to time t."""
    _, t1 = _bounds(schedule, None, t1)
    if t > t1:
        raise OutOfScheduleRange(f'time {t} is after the post-selection time {t1}')
    return retrodictive_state(heisenberg_effect(effect, propagator(schedule, t, t1)))


def smoothed_connection_state(
    rho: Any,
    effect: Any,
    schedule: HamiltonianSchedule,
    t: float,
    t0: Optional[float] = None,
    t1: Optional[float] = None,
) -> ConnectionState:
    """w(t) assembled from the predicted state rho(t) and the retrodictive state at t."""
    t0, t1 = _bounds(schedule, t0, t1)
    _check_order(t0, t, t1)
    predicted = evolve_state(rho, propagator(schedule, t0, t))
    retrodicted = retrodictive_at(effect, schedule, t, t1)
    return connection_from_pred_retr(predicted, DensityMatrix(retrodicted.w))


class PictureKind(str, Enum):
    SCHROEDINGER = 'schroedinger'
    HEISENBERG_AT = 'heisenberg-at'
    FORWARD_HEISENBERG = 'forward-heisenberg'
    BACKWARD_HEISENBERG = 'backward-heisenberg'


@dataclass(frozen=True)
class Picture:
    """
    Representation in which weak values are evaluated.

    Every picture places the states at a reference time t_r and moves the
    observable there: Schroedinger uses t_r = t, forward Heisenberg t_r = t0,
    backward Heisenberg t_r = t1, and HeisenbergAt an explicit t_r.
    """
    kind: PictureKind
    reference_time: Optional[float] = None

    def __post_init__(self) -> None:
        if (self.kind is PictureKind.HEISENBERG_AT) != (self.reference_time is not None):
            raise InvalidParameter('a reference time is required for, and only for, HeisenbergAt')

    @classmethod
    def schroedinger(cls) -> 'Picture':
        return cls(PictureKind.SCHROEDINGER)

    @classmethod
    def heisenberg_at(cls, t_r: float) -> 'Picture':
        return cls(PictureKind.HEISENBERG_AT, float(t_r))

    @classmethod
    def forward(cls) -> 'Picture':
        return cls(PictureKind.FORWARD_HEISENBERG)

    @classmethod
    def backward(cls) -> 'Picture':
        return cls(PictureKind.BACKWARD_HEISENBERG)

    def reference(self, t0: float, t: float, t1: float) -> float:
        if self.kind is PictureKind.SCHROEDINGER:
            return t
        if self.kind is PictureKind.FORWARD_HEISENBERG:
            return t0
        if self.kind is PictureKind.BACKWARD_HEISENBERG:
            return t1
        if not t0 <= self.reference_time <= t1:
            raise OutOfScheduleRange(f'reference time {self.reference_time} lies outside [{t0}, {t1}]')
        return self.reference_time


def weak_value_in_picture(
    observable: Any,
    rho: Any,
    effect: Any,
    schedule: HamiltonianSchedule,
    t: float,
    picture: Picture,
    t0: Optional[float] = None,
    t1: Optional[float] = None,
) -> complex:
    """
    A_w at time t, computed as Tr[A(t; t_r) w(t_r)] with A(t; t_r) = U(t, t_r)† A U(t, t_r).

    The value does not depend on the picture.
    """
    a = observable_matrix(observable)
    t0, t1 = _bounds(schedule, t0, t1)
    _check_order(t0, t, t1)
    t_r = picture.reference(t0, t, t1)
    w_ref = connection_state_at(rho, effect, schedule, t_r, t0, t1)
    require_same_dim(a, w_ref.w, names=('A', 'w'))
    u = propagator(schedule, t_r, t)
    return complex(np.trace(dagger(u) @ a @ u @ w_ref.w))


# ============================================================================
# VON NEUMANN EQUATION
# ============================================================================

@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-ordered samples of w(t) as produced by the integrator."""
    times: tuple
    states: tuple

    def __len__(self) -> int:
        return len(self.times)

    @property
    def final(self) -> ConnectionState:
        return self.states[-1]

    def csv_header(self) -> list:
        d = self.states[0].dim
        header = ['t']
        for i in range(d):
            for j in range(d):
                header += [f're_w_{i}_{j}', f'im_w_{i}_{j}']
        return header

    def csv_rows(self) -> list:
        """One row per sample: t followed by re/im of w(t) entries in row-major order."""
        rows = []
        for t, state in zip(self.times, self.states):
            row = [float(t)]
            for value in state.w.ravel():
                row += [float(value.real), float(value.imag)]
            rows.append(row)
        return rows


def _rk4_step(h_matrix: ComplexMatrix, w: ComplexMatrix, step: float) -> ComplexMatrix:
    def rate(x: ComplexMatrix) -> ComplexMatrix:
        return -1j * commutator(h_matrix, x)

    k1 = rate(w)
    k2 = rate(w + step / 2 * k1)
    k3 = rate(w + step / 2 * k2)
    k4 = rate(w + step * k3)
    return w + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def evolve_connection_ode(
    w0: ConnectionState,
    schedule: HamiltonianSchedule,
    t_span: tuple[float, float],
    dt: float,
) -> Trajectory:
    """
    Integrate dw/dt = -i[H(t), w] with classical fixed-step RK4.

    Steps are aligned to segment joints so that H is constant within each
    step; every sub-interval uses the smallest number of equal steps not
    longer than dt. t_span may run backwards (t_b < t_a).

    Raises:
        OutOfScheduleRange: if the span leaves the schedule.
    """
    if not dt > 0:
        raise InvalidParameter(f'step size must be positive, got {dt}')
    t_a, t_b = float(t_span[0]), float(t_span[1])
    schedule.check_time(t_a)
    schedule.check_time(t_b)
    require_same_dim(w0.w, schedule.segments[0].hamiltonian, names=('w', 'H'))

    times = [t_a]
    states = [w0]
    w = np.array(w0.w)
    t = t_a
    for stop in schedule.breakpoints(t_a, t_b) + [t_b]:
        length = stop - t
        if length == 0:
            continue
        n_steps = max(1, math.ceil(abs(length) / dt - 1e-9))
        step = length / n_steps
        h_matrix = schedule.hamiltonian_at(t + length / 2)
        for k in range(1, n_steps + 1):
            w = _rk4_step(h_matrix, w, step)
            times.append(stop if k == n_steps else t + k * step)
            states.append(ConnectionState.from_matrix(w, w0.post_selection_prob, w0.normalized))
        t = stop
    return Trajectory(tuple(times), tuple(states))
