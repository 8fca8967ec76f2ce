"""
ppslab: scenario runner and command-line front end.

Scenario subcommands sweep the library over parameter grids and write CSV or
JSON tables; operation subcommands evaluate one library call on matrices
read from JSON files (or named presets) and print a JSON result. All
numbers come from ppslab library calls; this module only parses, schedules
and writes.
"""

import argparse
import csv
import io
import json
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from functools import partial
from pathlib import Path
from typing import Any, Callable, Optional, TextIO

import numpy as np

from ppslab.connection import (
    ConnectionState,
    amplification_point,
    classification_report,
    connection_state,
    norm_bound_check,
    posterior_family,
    retrodictive_state,
    weak_value,
)
from ppslab.dynamics import HamiltonianSchedule, Trajectory, connection_state_at, evolve_connection_ode
from ppslab.errors import CommutationRequired, ConfigError, PpsError
from ppslab.measurement import (
    abl_probabilities,
    born_probability,
    expectation,
    strong_pps_via_connection,
    uncertainty_grid,
)
from ppslab.meter import (
    MeterModel,
    pointer_expectation_connection,
    pointer_expectation_pps,
    pointer_expectation_spectral,
)
from ppslab.qmcore import (
    KET_0,
    KET_1,
    KET_MINUS,
    KET_MINUS_I,
    KET_PLUS,
    KET_PLUS_I,
    MAX_DIM,
    PAULI_I,
    PAULI_X,
    PAULI_Y,
    PAULI_Z,
    Povm,
    as_observable,
    load_matrix,
    matrix_from_dict,
    operator_norm,
    projector,
    random_density_matrix,
    random_effect,
)
from ppslab.tomography import (
    ProbeSet,
    default_probes_for,
    detector_tomography,
    format_weak_value_data,
    load_weak_value_data,
    reconstruct_connection,
    simulate_weak_value_data,
    weak_values_from_strong_statistics,
)

# Get package version
try:
    from importlib.metadata import version, PackageNotFoundError
    __version__ = version("ppslab")
except (ImportError, PackageNotFoundError):
    from ppslab._version import __version__

# ============================================================================
# CONSTANTS AND GLOBAL STATE
# ============================================================================

# Thread synchronization for log file writes
_log_lock = threading.Lock()
# Thread synchronization for console writes
_console_lock = threading.Lock()

SECTION_WIDTH = 80

BOX_TOP_LEFT = '╔'
BOX_TOP_RIGHT = '╗'
BOX_BOTTOM_LEFT = '╚'
BOX_BOTTOM_RIGHT = '╝'
BOX_HORIZONTAL_HEAVY = '═'
BOX_VERTICAL_HEAVY = '║'
BOX_LEFT_TEE_HEAVY = '╠'
BOX_RIGHT_TEE_HEAVY = '╣'
BOX_LEFT_TEE_LIGHT = '╟'
BOX_RIGHT_TEE_LIGHT = '╢'
BOX_HORIZONTAL_LIGHT = '─'

EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE_ERROR = 2

SCENARIOS = (
    'uncertainty-scan',
    'amplification-scan',
    'dynamics-trace',
    'tomography-roundtrip',
    'detector-tomography',
    'meter-sweep',
)
OPERATIONS = (
    'connection-state',
    'weak-value',
    'classify',
    'norm-bound',
    'born-probability',
    'expectation',
    'abl-probabilities',
    'strong-pps',
    'retrodictive-state',
    'posterior',
    'simulate-weak-values',
    'reconstruct',
    'reconstruct-detector',
)
OUTPUT_FORMATS = ('csv', 'json')
DEFAULT_WORKERS = 4
# lambda1 values per uncertainty-scan work item
UNCERTAINTY_BLOCK_ROWS = 16

# Named operators accepted wherever a matrix file is expected
PRESET_OPERATORS = {
    'ket0': projector(KET_0),
    'ket1': projector(KET_1),
    'plus': projector(KET_PLUS),
    'minus': projector(KET_MINUS),
    'plus_i': projector(KET_PLUS_I),
    'minus_i': projector(KET_MINUS_I),
    'mixed': PAULI_I / 2,
    'identity': PAULI_I,
    'pauli_x': PAULI_X,
    'pauli_y': PAULI_Y,
    'pauli_z': PAULI_Z,
}
PRESET_POVMS = {
    'z-basis': ('ket0', 'ket1'),
    'x-basis': ('plus', 'minus'),
    'y-basis': ('plus_i', 'minus_i'),
}


# ============================================================================
# UTILITY FUNCTIONS
# ============================================================================

def console_print(message: str) -> None:
    """Print a status line to stderr so that stdout stays machine-readable."""
    with _console_lock:
        sys.stderr.write(message + '\n')
        sys.stderr.flush()


def create_log_file_path(name: str) -> str:
    """Create log file path with scenario name and timestamp."""
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    return f'/tmp/ppslab_{name}_{timestamp}.log'


def format_cell(value: Any) -> str:
    """CSV cell text: floats with 17 significant digits, booleans as true/false."""
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f'{float(value):.17g}'
    return str(value)


def json_cell(value: Any) -> Any:
    """JSON-safe cell: numpy scalars unwrapped, non-finite floats as null."""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def error_payload(exc: BaseException, context_key: str, context_value: str) -> dict:
    return {'error': type(exc).__name__, 'message': str(exc), context_key: context_value}


def emit_error(exc: BaseException, context_key: str, context_value: str) -> int:
    """Print the machine-readable error line and a human line to stderr; return the exit code."""
    print(json.dumps(error_payload(exc, context_key, context_value)), file=sys.stderr)
    print(f"❌ Error ({context_value}): {exc}", file=sys.stderr)
    return EXIT_USAGE_ERROR if isinstance(exc, ConfigError) else EXIT_DOMAIN_ERROR


def resolve_operator(value: Any, what: str) -> np.ndarray:
    """
    Matrix from a preset name, a matrix JSON object, or a path to a matrix JSON file.

    Raises:
        ConfigError: if the value is none of these.
    """
    if isinstance(value, dict):
        return matrix_from_dict(value)
    if isinstance(value, str):
        if value in PRESET_OPERATORS:
            return np.array(PRESET_OPERATORS[value])
        if Path(value).is_file():
            return load_matrix(value)
        raise ConfigError(
            f'{what}: {value!r} is neither a file nor a preset ({", ".join(sorted(PRESET_OPERATORS))})'
        )
    raise ConfigError(f'{what}: expected a preset name, file path or matrix object')


def resolve_povm(value: str) -> Povm:
    """POVM from a preset name or a JSON file {"elements": [matrix, ...]}."""
    if value in PRESET_POVMS:
        return Povm(tuple(PRESET_OPERATORS[name] for name in PRESET_POVMS[value]))
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f'povm: {value!r} is neither a file nor a preset ({", ".join(sorted(PRESET_POVMS))})')
    try:
        obj = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError(f'povm: {value} is not valid JSON ({e})') from e
    if not isinstance(obj, dict) or not isinstance(obj.get('elements'), list):
        raise ConfigError('povm file must contain an "elements" list')
    return Povm(tuple(matrix_from_dict(m) for m in obj['elements']))


# ============================================================================
# LOG WRITING HELPERS
# ============================================================================

def write_to_log(log_file: TextIO, text: str, flush: bool = True) -> None:
    """Write text to log file and optionally flush. Thread-safe."""
    with _log_lock:
        log_file.write(text)
        if flush:
            log_file.flush()


def write_log_box_header(log_file: TextIO, title: str, width: int = SECTION_WIDTH) -> None:
    """Write a box header with heavy borders."""
    line = BOX_HORIZONTAL_HEAVY * (width - 2)
    write_to_log(log_file, f"{BOX_TOP_LEFT}{line}{BOX_TOP_RIGHT}\n")
    write_to_log(log_file, f"{BOX_VERTICAL_HEAVY} {title}\n")
    write_to_log(log_file, f"{BOX_LEFT_TEE_HEAVY}{line}{BOX_RIGHT_TEE_HEAVY}\n")


def write_log_box_footer(log_file: TextIO, width: int = SECTION_WIDTH) -> None:
    line = BOX_HORIZONTAL_HEAVY * (width - 2)
    write_to_log(log_file, f"{BOX_BOTTOM_LEFT}{line}{BOX_BOTTOM_RIGHT}\n")


def write_log_box_divider(log_file: TextIO, width: int = SECTION_WIDTH, heavy: bool = True) -> None:
    if heavy:
        line = BOX_HORIZONTAL_HEAVY * (width - 2)
        write_to_log(log_file, f"{BOX_LEFT_TEE_HEAVY}{line}{BOX_RIGHT_TEE_HEAVY}\n")
    else:
        line = BOX_HORIZONTAL_LIGHT * (width - 2)
        write_to_log(log_file, f"{BOX_LEFT_TEE_LIGHT}{line}{BOX_RIGHT_TEE_LIGHT}\n")


def write_log_box_line(log_file: TextIO, text: str) -> None:
    """Write a line inside a box with vertical border."""
    write_to_log(log_file, f"{BOX_VERTICAL_HEAVY} {text}\n")


# ============================================================================
# LOGGING CLASSES
# ============================================================================

class DetailedLogger:
    """Timestamped event logger for scenario runs."""

    def __init__(self, log_file: TextIO):
        self.log_file = log_file
        self.start_time: Optional[datetime] = None

    def log_event(self, event_type: str, message: str, **kwargs) -> None:
        """Log an event with timestamp and structured data."""
        timestamp = datetime.now().strftime('%Y-%m-%d %H:%M:%S.%f')[:-3]
        elapsed = ""

        if self.start_time:
            elapsed_sec = (datetime.now() - self.start_time).total_seconds()
            elapsed = f" [+{elapsed_sec:.2f}s]"

        log_line = f"[{timestamp}]{elapsed} [{event_type}] {message}"

        if kwargs:
            log_line += " | " + " | ".join(f"{k}={v}" for k, v in kwargs.items())

        write_to_log(self.log_file, log_line + "\n")

    def start_timing(self) -> None:
        self.start_time = datetime.now()

    def elapsed_seconds(self) -> float:
        if not self.start_time:
            return 0.0
        return (datetime.now() - self.start_time).total_seconds()


# ============================================================================
# DATA CLASSES
# ============================================================================

@dataclass
class ScenarioConfig:
    """Validated scenario request."""
    name: str
    params: dict
    out: Optional[str] = None
    fmt: str = 'csv'
    seed: Optional[int] = None
    workers: int = DEFAULT_WORKERS

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScenarioResult:
    """Table produced by a scenario, plus a few summary figures for the run log."""
    header: list
    rows: list
    summary: dict = field(default_factory=dict)

    def records(self) -> list:
        return [dict(zip(self.header, row)) for row in self.rows]


# ============================================================================
# SCENARIO CONFIGURATION
# ============================================================================

def get_scenario_config_path(name: str) -> Path:
    """Get the bundled default configuration for a scenario from the package."""
    config_path = Path(__file__).parent / 'scenarios' / f'{name}.json'

    if not config_path.exists():
        raise FileNotFoundError(
            f"Could not find {name}.json in package at {config_path}"
        )

    return config_path


def _read_json_config(path: Path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding='utf-8'))
    except FileNotFoundError as e:
        raise ConfigError(f'config file not found: {path}') from e
    except json.JSONDecodeError as e:
        raise ConfigError(f'config file {path} is not valid JSON ({e})') from e
    if not isinstance(obj, dict):
        raise ConfigError(f'config file {path} must contain a JSON object')
    return obj


def _int_param(params: dict, key: str, minimum: int, maximum: Optional[int] = None) -> int:
    value = params.get(key)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f'"{key}" must be an integer >= {minimum}, got {value!r}')
    if maximum is not None and value > maximum:
        raise ConfigError(f'"{key}" must be at most {maximum}, got {value}')
    return value


def _float_param(params: dict, key: str, minimum: Optional[float] = None) -> float:
    value = params.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise ConfigError(f'"{key}" must be a finite number, got {value!r}')
    if minimum is not None and value < minimum:
        raise ConfigError(f'"{key}" must be >= {minimum}, got {value!r}')
    return float(value)


def _float_list_param(params: dict, key: str) -> list:
    values = params.get(key)
    if not isinstance(values, list) or not values:
        raise ConfigError(f'"{key}" must be a non-empty list of numbers')
    return [_float_param({key: v}, key) for v in values]


def _validate_uncertainty_scan(params: dict) -> None:
    _int_param(params, 'grid_n', 2)


def _validate_amplification_scan(params: dict) -> None:
    for overlap in _float_list_param(params, 'overlaps'):
        if not 0 < overlap <= 1:
            raise ConfigError(f'overlaps must lie in (0, 1], got {overlap}')


def _validate_dynamics_trace(params: dict) -> None:
    resolve_operator(params.get('rho'), 'rho')
    resolve_operator(params.get('effect'), 'effect')
    HamiltonianSchedule.from_dict(params.get('schedule'))
    _int_param(params, 'n_times', 2)
    if params.get('method') not in ('exact', 'ode'):
        raise ConfigError(f'"method" must be "exact" or "ode", got {params.get("method")!r}')
    if params['method'] == 'ode' and _float_param(params, 'dt') <= 0:
        raise ConfigError('"dt" must be positive')


def _validate_tomography_roundtrip(params: dict) -> None:
    _int_param(params, 'dim', 2, maximum=MAX_DIM)
    _int_param(params, 'trials', 1)
    _float_param(params, 'noise_sigma', 0.0)
    _int_param(params, 'seed', 0)


def _validate_detector_tomography(params: dict) -> None:
    resolve_operator(params.get('effect'), 'effect')
    _float_param(params, 'noise_sigma', 0.0)
    _int_param(params, 'seed', 0)
    if params.get('data_path') not in ('weak', 'strong'):
        raise ConfigError(f'"data_path" must be "weak" or "strong", got {params.get("data_path")!r}')


def _validate_meter_sweep(params: dict) -> None:
    resolve_operator(params.get('rho'), 'rho')
    resolve_operator(params.get('effect'), 'effect')
    resolve_operator(params.get('observable'), 'observable')
    _float_list_param(params, 'g_values')
    if not isinstance(params.get('meter'), dict):
        raise ConfigError('"meter" must be an object')
    MeterModel.from_config({**params['meter'], 'g': 0.0})


SCENARIO_VALIDATORS: dict = {
    'uncertainty-scan': _validate_uncertainty_scan,
    'amplification-scan': _validate_amplification_scan,
    'dynamics-trace': _validate_dynamics_trace,
    'tomography-roundtrip': _validate_tomography_roundtrip,
    'detector-tomography': _validate_detector_tomography,
    'meter-sweep': _validate_meter_sweep,
}


def load_scenario_config(
    name: str,
    config_path: Optional[str] = None,
    out: Optional[str] = None,
    fmt: str = 'csv',
    seed: Optional[int] = None,
    workers: int = DEFAULT_WORKERS,
) -> ScenarioConfig:
    """
    Merge a user config over the bundled defaults and validate it.

    Raises:
        ConfigError: for unknown scenarios, unreadable files or invalid parameters.
    """
    if name not in SCENARIOS:
        raise ConfigError(f'unknown scenario {name!r}; expected one of {", ".join(SCENARIOS)}')
    if fmt not in OUTPUT_FORMATS:
        raise ConfigError(f'unknown format {fmt!r}; expected csv or json')
    if workers < 1:
        raise ConfigError(f'workers must be at least 1, got {workers}')

    params = _read_json_config(get_scenario_config_path(name))
    if config_path is not None:
        params.update(_read_json_config(Path(config_path)))
    if seed is not None:
        params['seed'] = seed
    try:
        SCENARIO_VALIDATORS[name](params)
    except ConfigError:
        raise
    except PpsError as e:
        raise ConfigError(f'invalid {name} parameters: {e}') from e
    return ScenarioConfig(name, params, out, fmt, params.get('seed'), workers)


# ============================================================================
# SCENARIOS
# ============================================================================

def uncertainty_scan(params: dict, pool: ThreadPoolExecutor, logger: DetailedLogger) -> ScenarioResult:
    """Variance sum, w' minimum eigenvalue and labels over a grid_n x grid_n grid of (lambda1, lambda2)."""
    grid = np.linspace(-1.0, 1.0, params['grid_n'])
    header = ['lambda1', 'lambda2', 'var_sum', 'wprime_min_eig', 'violates', 'w_unusual']
    blocks = [grid[i:i + UNCERTAINTY_BLOCK_ROWS] for i in range(0, grid.size, UNCERTAINTY_BLOCK_ROWS)]
    rows = []
    violations = 0
    for index, block in enumerate(pool.map(partial(uncertainty_grid, lambda2_values=grid), blocks)):
        for point in block:
            rows.append([point.lambda1, point.lambda2, point.var_sum, point.wprime_min_eig,
                         point.violates, point.w_unusual])
            violations += point.violates
        logger.log_event('BATCH_DONE', 'lambda1 block evaluated', index=index, points=len(block))
    return ScenarioResult(header, rows, {'grid_points': len(rows), 'violations': violations})


def amplification_scan(params: dict, pool: ThreadPoolExecutor, logger: DetailedLogger) -> ScenarioResult:
    """||w||, c' and c'' for pure pre- and post-selection at each overlap."""
    header = ['overlap', 'norm', 'c_herm', 'c_antiherm', 'bound_holds']
    rows = []
    for point in pool.map(amplification_point, params['overlaps']):
        rows.append([point.overlap, point.norm, point.c_herm, point.c_antiherm, point.bound_holds])
    logger.log_event('BATCH_DONE', 'overlaps evaluated', count=len(rows))
    return ScenarioResult(header, rows, {'max_norm': max(r[1] for r in rows)})


def dynamics_trace(params: dict, pool: ThreadPoolExecutor, logger: DetailedLogger) -> ScenarioResult:
    """w(t) sampled on an even time grid, exactly or by integrating the von Neumann equation."""
    rho = resolve_operator(params['rho'], 'rho')
    effect = resolve_operator(params['effect'], 'effect')
    schedule = HamiltonianSchedule.from_dict(params['schedule'])
    times = np.linspace(schedule.t0, schedule.t1, params['n_times'])

    if params['method'] == 'exact':
        states = list(pool.map(lambda t: connection_state_at(rho, effect, schedule, t), times))
        trajectory = Trajectory(tuple(float(t) for t in times), tuple(states))
    else:
        trajectory = _integrate_on_grid(connection_state_at(rho, effect, schedule, schedule.t0),
                                        schedule, times, float(params['dt']))
    logger.log_event('BATCH_DONE', 'trajectory evaluated', method=params['method'], samples=len(trajectory))
    return ScenarioResult(
        trajectory.csv_header(),
        trajectory.csv_rows(),
        {'samples': len(trajectory), 'post_selection_prob': trajectory.states[0].post_selection_prob},
    )


def _integrate_on_grid(w0: ConnectionState, schedule: HamiltonianSchedule, times: np.ndarray, dt: float) -> Trajectory:
    """Integrate interval by interval so that every requested time is sampled exactly."""
    states = [w0]
    for t_a, t_b in zip(times[:-1], times[1:]):
        states.append(evolve_connection_ode(states[-1], schedule, (t_a, t_b), dt).final)
    return Trajectory(tuple(float(t) for t in times), tuple(states))


def _tomography_trial(trial: int, dim: int, noise_sigma: float, seed: int) -> list:
    rng = np.random.default_rng([seed, trial])
    w = connection_state(random_density_matrix(dim, rng), random_effect(dim, rng))
    probes = ProbeSet.default(dim)
    data = simulate_weak_value_data(w, probes, noise_sigma, seed=int(rng.integers(2 ** 31)))
    rec = reconstruct_connection(data, probes, probes.basis)
    error = operator_norm(rec.state.w - w.w)
    return [trial, dim, noise_sigma, error, rec.residual_norm, rec.trace_deviation, rec.renormalized]


def tomography_roundtrip(params: dict, pool: ThreadPoolExecutor, logger: DetailedLogger) -> ScenarioResult:
    """Reconstruct random connection states from simulated weak values."""
    header = ['trial', 'dim', 'noise_sigma', 'error', 'residual_norm', 'trace_deviation', 'renormalized']
    run_trial = partial(
        _tomography_trial,
        dim=params['dim'],
        noise_sigma=float(params['noise_sigma']),
        seed=params['seed'],
    )
    rows = list(pool.map(run_trial, range(params['trials'])))
    logger.log_event('BATCH_DONE', 'trials reconstructed', count=len(rows))
    errors = [r[3] for r in rows]
    return ScenarioResult(header, rows, {'median_error': float(np.median(errors))})


def detector_tomography_scenario(params: dict, pool: ThreadPoolExecutor, logger: DetailedLogger) -> ScenarioResult:
    """Recover a detector effect from post-selected-only data with a completely random preparation."""
    effect_true = resolve_operator(params['effect'], 'effect')
    dim = effect_true.shape[0]
    probes = ProbeSet.default(dim)
    retro = retrodictive_state(effect_true)
    mixed = np.eye(dim) / dim
    p = born_probability(mixed, effect_true)
    if params['data_path'] == 'weak':
        data = simulate_weak_value_data(retro, probes, float(params['noise_sigma']), seed=params['seed'])
    else:
        data = weak_values_from_strong_statistics(effect_true, probes)
    estimate = detector_tomography(data, probes, probes.basis, p, dim,
                                   noise_sigma=float(params['noise_sigma']), strict=False)
    error = operator_norm(estimate.effect_matrix - effect_true)
    logger.log_event('BATCH_DONE', 'detector reconstructed', data_path=params['data_path'])

    header = ['post_selection_prob', 'trace', 'min_eigenvalue', 'consistent', 'error']
    row = [p, estimate.trace, estimate.min_eigenvalue, estimate.consistent, error]
    for i in range(dim):
        for j in range(dim):
            header += [f're_E_{i}_{j}', f'im_E_{i}_{j}']
            row += [float(estimate.effect_matrix[i, j].real), float(estimate.effect_matrix[i, j].imag)]
    return ScenarioResult(header, [row], {'error': error, 'consistent': estimate.consistent})


def _meter_point(g: float, rho: np.ndarray, effect: np.ndarray, observable: Any, meter_config: dict) -> list:
    meter = MeterModel.from_config({**meter_config, 'g': g})
    pps = pointer_expectation_pps(rho, effect, observable, meter)
    w = connection_state(rho, effect)
    spectral = pointer_expectation_spectral(w, observable, meter)
    try:
        via_w = pointer_expectation_connection(w, observable, meter)
        via_w_herm = pointer_expectation_connection(w.hermitian(), observable, meter)
    except CommutationRequired:
        via_w = via_w_herm = float('nan')
    shift_over_g = (pps - meter.undisturbed_pointer()) / g if g != 0 else float('nan')
    return [g, pps, spectral, via_w, via_w_herm, shift_over_g]


def meter_sweep(params: dict, pool: ThreadPoolExecutor, logger: DetailedLogger) -> ScenarioResult:
    """Pointer readings of the post-selected meter model against the connection-state predictions."""
    rho = resolve_operator(params['rho'], 'rho')
    effect = resolve_operator(params['effect'], 'effect')
    observable = as_observable(resolve_operator(params['observable'], 'observable'))
    header = ['g', 'pointer_pps', 'pointer_spectral', 'pointer_connection', 'pointer_connection_herm',
              'shift_over_g']
    run_point = partial(_meter_point, rho=rho, effect=effect, observable=observable,
                        meter_config=params['meter'])
    rows = []
    for g, row in zip(params['g_values'], pool.map(run_point, params['g_values'])):
        rows.append(row)
        logger.log_event('BATCH_DONE', 'coupling evaluated', g=g)
    return ScenarioResult(header, rows, {'couplings': len(rows)})


SCENARIO_RUNNERS: dict = {
    'uncertainty-scan': uncertainty_scan,
    'amplification-scan': amplification_scan,
    'dynamics-trace': dynamics_trace,
    'tomography-roundtrip': tomography_roundtrip,
    'detector-tomography': detector_tomography_scenario,
    'meter-sweep': meter_sweep,
}


# ============================================================================
# OUTPUT
# ============================================================================

def render_table(result: ScenarioResult, fmt: str, scenario: str) -> str:
    """Serialize a result table; identical results give identical text."""
    if fmt == 'json':
        records = [{k: json_cell(v) for k, v in record.items()} for record in result.records()]
        return json.dumps({'scenario': scenario, 'rows': records}, indent=2, allow_nan=False) + '\n'
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(result.header)
    for row in result.rows:
        writer.writerow([format_cell(v) for v in row])
    return buffer.getvalue()


def write_output(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        Path(out).write_text(text, encoding='utf-8')


def write_run_header(log_file: TextIO, config: ScenarioConfig) -> None:
    write_log_box_header(log_file, f"PPSLAB SCENARIO: {config.name}")
    write_log_box_line(log_file, f"Start time: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    write_log_box_line(log_file, f"Output: {config.out or '<stdout>'} | Format: {config.fmt}")
    write_log_box_line(log_file, f"Seed: {config.seed} | Workers: {config.workers}")
    write_log_box_divider(log_file, heavy=False)
    write_log_box_line(log_file, "Parameters:")
    for key, value in config.params.items():
        text = json.dumps(value)
        write_log_box_line(log_file, f"  {key}: {text[:60]}{'...' if len(text) > 60 else ''}")
    write_log_box_footer(log_file)


def write_run_summary(log_file: TextIO, config: ScenarioConfig, result: ScenarioResult, elapsed: float) -> None:
    write_to_log(log_file, "\n")
    write_log_box_header(log_file, "PPSLAB RUN SUMMARY")
    write_log_box_line(log_file, f"Scenario: {config.name}")
    write_log_box_line(log_file, f"Rows: {len(result.rows)} | Elapsed: {elapsed:.2f}s")
    write_log_box_line(log_file, f"Output: {config.out or '<stdout>'}")
    if result.summary:
        write_log_box_divider(log_file, heavy=False)
        for key, value in result.summary.items():
            write_log_box_line(log_file, f"  {key}: {format_cell(value)}")
    write_log_box_footer(log_file)


# ============================================================================
# RUNNERS
# ============================================================================

def run_scenario(config: ScenarioConfig, log_file_path: Optional[str] = None) -> int:
    """
    Execute a validated scenario, write its table and return the exit code.

    Library errors are reported as error JSON on stderr with the scenario
    name attached: exit 1 for numerical/domain errors, 2 for configuration.
    """
    if log_file_path is None:
        log_file_path = create_log_file_path(config.name)

    with open(log_file_path, 'w', encoding='utf-8') as log_file:
        logger = DetailedLogger(log_file)
        logger.start_timing()
        write_run_header(log_file, config)
        logger.log_event('SCENARIO_START', f'running {config.name}', workers=config.workers)
        for key, value in config.params.items():
            logger.log_event('CONFIG', key, value=json.dumps(value)[:200])
        console_print(f"🚀 ppslab {config.name}")
        console_print(f"📝 Log file: {log_file_path}")

        try:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                result = SCENARIO_RUNNERS[config.name](config.params, pool, logger)
            write_output(render_table(result, config.fmt, config.name), config.out)
        except PpsError as e:
            logger.log_event('ERROR', str(e), error=type(e).__name__)
            return emit_error(e, 'scenario', config.name)
        except OSError as e:
            logger.log_event('ERROR', str(e), error=type(e).__name__)
            return emit_error(ConfigError(f'cannot write output: {e}'), 'scenario', config.name)

        logger.log_event('OUTPUT_WRITTEN', config.out or '<stdout>', rows=len(result.rows), fmt=config.fmt)
        elapsed = logger.elapsed_seconds()
        write_run_summary(log_file, config, result, elapsed)
        logger.log_event('SCENARIO_DONE', f'{config.name} complete', elapsed=f'{elapsed:.2f}s')
        console_print(f"✅ {len(result.rows)} rows in {elapsed:.2f}s")
    return EXIT_OK


def _matrices(args: argparse.Namespace, *names: str) -> list:
    return [resolve_operator(getattr(args, name), name) for name in names]


def _complex_dict(z: complex) -> dict:
    return {'re': z.real, 'im': z.imag}


def op_connection_state(args: argparse.Namespace) -> dict:
    rho, effect = _matrices(args, 'rho', 'effect')
    return connection_state(rho, effect).to_dict()


def op_weak_value(args: argparse.Namespace) -> dict:
    rho, effect, observable = _matrices(args, 'rho', 'effect', 'observable')
    return _complex_dict(weak_value(observable, connection_state(rho, effect)))


def op_classify(args: argparse.Namespace) -> dict:
    rho, effect = _matrices(args, 'rho', 'effect')
    return classification_report(connection_state(rho, effect)).to_dict()


def op_norm_bound(args: argparse.Namespace) -> dict:
    rho, effect = _matrices(args, 'rho', 'effect')
    return norm_bound_check(connection_state(rho, effect))._asdict()


def op_born_probability(args: argparse.Namespace) -> dict:
    rho, effect = _matrices(args, 'rho', 'effect')
    return {'probability': born_probability(rho, effect)}


def op_expectation(args: argparse.Namespace) -> dict:
    rho, observable = _matrices(args, 'rho', 'observable')
    return {'expectation': expectation(observable, rho)}


def op_abl_probabilities(args: argparse.Namespace) -> dict:
    rho, effect, observable = _matrices(args, 'rho', 'effect', 'observable')
    obs = as_observable(observable)
    return {
        'eigenvalues': obs.eigenvalues.tolist(),
        'probabilities': abl_probabilities(rho, obs, effect).tolist(),
    }


def op_strong_pps(args: argparse.Namespace) -> dict:
    rho, effect, observable = _matrices(args, 'rho', 'effect', 'observable')
    obs = as_observable(observable)
    return {
        'eigenvalues': obs.eigenvalues.tolist(),
        'probabilities': strong_pps_via_connection(obs, connection_state(rho, effect)).tolist(),
    }


def op_retrodictive_state(args: argparse.Namespace) -> dict:
    (effect,) = _matrices(args, 'effect')
    return retrodictive_state(effect).to_dict()


def op_posterior(args: argparse.Namespace) -> dict:
    (rho,) = _matrices(args, 'rho')
    family = posterior_family(rho, resolve_povm(args.povm))
    return {
        'probs': list(family.probs),
        'states': [None if s is None else s.to_dict() for s in family.states],
        'excluded': list(family.excluded),
    }


def _weak_value_data(args: argparse.Namespace) -> np.ndarray:
    try:
        return load_weak_value_data(args.data)
    except OSError as e:
        raise ConfigError(f'cannot read weak-value data {args.data}: {e}') from e


def op_simulate_weak_values(args: argparse.Namespace) -> str:
    """Weak values of the default probe set as a probe_index, re_weak_value, im_weak_value CSV."""
    rho, effect = _matrices(args, 'rho', 'effect')
    w = connection_state(rho, effect)
    probes = ProbeSet.default(w.dim)
    return format_weak_value_data(simulate_weak_value_data(w, probes, args.noise_sigma, seed=args.seed))


def op_reconstruct(args: argparse.Namespace) -> dict:
    data = _weak_value_data(args)
    probes = default_probes_for(data)
    return reconstruct_connection(data, probes, probes.basis).to_dict()


def op_reconstruct_detector(args: argparse.Namespace) -> dict:
    data = _weak_value_data(args)
    probes = default_probes_for(data)
    estimate = detector_tomography(data, probes, probes.basis, args.post_selection_prob, probes.basis.dim,
                                   noise_sigma=args.noise_sigma, strict=not args.lenient)
    return estimate.to_dict()


OPERATION_HANDLERS: dict = {
    'connection-state': (op_connection_state, ('rho', 'effect')),
    'weak-value': (op_weak_value, ('rho', 'effect', 'observable')),
    'classify': (op_classify, ('rho', 'effect')),
    'norm-bound': (op_norm_bound, ('rho', 'effect')),
    'born-probability': (op_born_probability, ('rho', 'effect')),
    'expectation': (op_expectation, ('rho', 'observable')),
    'abl-probabilities': (op_abl_probabilities, ('rho', 'effect', 'observable')),
    'strong-pps': (op_strong_pps, ('rho', 'effect', 'observable')),
    'retrodictive-state': (op_retrodictive_state, ('effect',)),
    'posterior': (op_posterior, ('rho', 'povm')),
    'simulate-weak-values': (op_simulate_weak_values, ('rho', 'effect')),
    'reconstruct': (op_reconstruct, ('data',)),
    'reconstruct-detector': (op_reconstruct_detector, ('data',)),
}

_NOISE_SIGMA_OPTION = ('--noise-sigma', {'type': float, 'default': 0.0,
                                            'help': 'Noise standard deviation per quadrature (default: 0)'})
# Optional flags beyond the matrix and data inputs
OPERATION_OPTIONS: dict = {
    'simulate-weak-values': (
        _NOISE_SIGMA_OPTION,
        ('--seed', {'type': int, 'default': 0, 'help': 'Noise seed (default: 0)'}),
    ),
    'reconstruct-detector': (
        ('--post-selection-prob', {'type': float, 'required': True,
                                    'help': 'Measured post-selection probability P'}),
        _NOISE_SIGMA_OPTION,
        ('--lenient', {'action': 'store_true',
                        'help': 'Report inconsistent data with consistent=false instead of failing'}),
    ),
}


def run_operation(args: argparse.Namespace) -> int:
    """Evaluate one library operation and print its result (JSON, or CSV for weak-value data)."""
    handler: Callable[[argparse.Namespace], Any] = OPERATION_HANDLERS[args.command][0]
    try:
        payload = handler(args)
        text = payload if isinstance(payload, str) else json.dumps(payload, indent=2) + '\n'
        write_output(text, args.out)
    except PpsError as e:
        return emit_error(e, 'operation', args.command)
    except OSError as e:
        return emit_error(ConfigError(f'cannot write output: {e}'), 'operation', args.command)
    return EXIT_OK


# ============================================================================
# MAIN
# ============================================================================

class PpsArgumentParser(argparse.ArgumentParser):
    """Argument parser whose usage errors end in an error JSON line and exit code 2."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(json.dumps({'error': 'UsageError', 'message': message}), file=sys.stderr)
        self.exit(EXIT_USAGE_ERROR, f"❌ Error: {message}\n")


def setup_argument_parser() -> argparse.ArgumentParser:
    """Create and configure argument parser."""
    parser = PpsArgumentParser(
        prog='ppslab',
        description='ppslab: connection states, weak values and pre- and post-selected measurements',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s uncertainty-scan --out scan.csv
  %(prog)s amplification-scan --format json
  %(prog)s tomography-roundtrip --config my_tomography.json --seed 7 --workers 8
  %(prog)s meter-sweep --out sweep.csv --log-file /tmp/sweep.log
  %(prog)s weak-value --rho ket0 --effect plus --observable pauli_z
  %(prog)s posterior --rho rho.json --povm x-basis
  %(prog)s simulate-weak-values --rho ket0 --effect plus --noise-sigma 1e-3 --out data.csv
  %(prog)s reconstruct --data data.csv --out report.json
  %(prog)s reconstruct-detector --data detector.csv --post-selection-prob 0.5
        """
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', metavar='command')
    subparsers.required = True

    for name in SCENARIOS:
        sub = subparsers.add_parser(name, help=f'run the {name} scenario',
                                    formatter_class=argparse.RawDescriptionHelpFormatter)
        sub.add_argument('--config', type=str, default=None, help='Scenario config JSON (default: bundled config)')
        sub.add_argument('--out', type=str, default=None, help='Output path (default: stdout)')
        sub.add_argument('--format', dest='fmt', choices=OUTPUT_FORMATS, default='csv', help='Output format (default: csv)')
        sub.add_argument('--seed', type=int, default=None, help='Override the config seed')
        sub.add_argument('--workers', type=int, default=DEFAULT_WORKERS, help=f'Worker threads (default: {DEFAULT_WORKERS})')
        sub.add_argument('--log-file', type=str, default=None, help='Path to log file (default: /tmp/ppslab_[scenario]_[timestamp].log)')

    input_help = {
        'povm': 'POVM JSON file {"elements": [...]} or preset',
        'data': 'weak-value CSV with columns probe_index,re_weak_value,im_weak_value',
    }
    for name, (_, inputs) in OPERATION_HANDLERS.items():
        sub = subparsers.add_parser(name, help=f'evaluate {name}')
        for arg in inputs:
            help_text = input_help.get(arg, 'matrix JSON file or preset name')
            sub.add_argument(f'--{arg}', type=str, required=True, help=help_text)
        for flag, options in OPERATION_OPTIONS.get(name, ()):
            sub.add_argument(flag, **options)
        sub.add_argument('--out', type=str, default=None, help='Output path (default: stdout)')

    return parser


def main(argv: Optional[list] = None) -> int:
    """Main entry point for ppslab."""
    parser = setup_argument_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE_ERROR

    if args.command in OPERATION_HANDLERS:
        return run_operation(args)

    try:
        config = load_scenario_config(
            args.command,
            config_path=args.config,
            out=args.out,
            fmt=args.fmt,
            seed=args.seed,
            workers=args.workers,
        )
    except PpsError as e:
        return emit_error(e, 'scenario', args.command)
    return run_scenario(config, args.log_file)


if __name__ == '__main__':
    sys.exit(main())
