"""Experiment driver: mesh -> initial data -> adaptive run -> diagnostics, plus sweeps and order studies."""
from dataclasses import dataclass, field, replace
from functools import partial
from itertools import product
import logging
import math
import os
from pathlib import Path
import time
from typing import List, Optional, Tuple

from diagnostics import BlowupReport, diagnose, phi_h, rescale
from discretize import (DiscreteSystem, InitialData, Profile, build_system, sample_initial,
                        validate_properties)
from errors import ConfigError, DiscretizationError
from oracle import (consistency_residual, endpoint_error, observed_order, self_converged,
                    semidiscrete_blowup_time, sine_decay, stable_step_count)
from stepper import (Scheme, SolverConfig, Termination, Trajectory, check_initial_lambda, load_trajectory,
                     run, w_norm, write_trajectory)
from utils import (config_hash, dump_json, load_json, ordered_pool_results, read_yaml,
                   resolve_workers, write_csv)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STUDIES = ('single', 'rate', 'set', 'time_convergence', 'order')
SWEEP_AXES = ('lambda', 'n', 'p')
SUMMARY_COLUMNS = ('n', 'h', 'lambda', 'p', 'T_estimate', 'T_tail_bound', 'rate_constant', 'K',
                   'detected', 'termination', 'steps', 'T_reference', 'runtime', 'error')
ORDER_COLUMNS = ('n', 'h', 'lambda', 'steps', 'tau_max', 'error', 'order', 'consistency', 'consistency_ratio')
ORDER_STEP_FRACTION = 0.25


@dataclass
class ExperimentConfig:
    mesh: dict = field(default_factory=lambda: {'builder': 'fd_interval', 'n': 20})
    profile: dict = field(default_factory=lambda: {'family': 'sine', 'amplitude': 50.0})
    solver: SolverConfig = field(default_factory=SolverConfig)
    study: str = 'single'
    output_dir: str = 'output'
    sweep: dict = field(default_factory=dict)
    order: dict = field(default_factory=dict)
    window: Optional[Tuple[float, float]] = None
    seed: int = 0
    workers: Optional[int] = None
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> 'ExperimentConfig':
        if not isinstance(data, dict):
            raise ConfigError('configuration must be a mapping')
        data = dict(data)
        version = data.pop('schema_version', None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f'schema_version must be {SCHEMA_VERSION}, got {version!r}')
        solver = SolverConfig.from_dict(data.pop('solver', None))
        window = data.pop('window', None)
        unknown = set(data) - {'mesh', 'profile', 'study', 'output_dir', 'sweep', 'order', 'seed', 'workers'}
        if unknown:
            raise ConfigError(f'unknown configuration sections: {sorted(unknown)}')
        return cls(solver=solver, window=tuple(window) if window else None, **data)

    @classmethod
    def from_file(cls, config_file) -> 'ExperimentConfig':
        if not os.path.exists(config_file):
            raise ConfigError(f'config file {config_file} not found')
        # json is a subset of yaml
        data = read_yaml(config_file)
        if data is None:
            raise ConfigError(f'cannot parse config file {config_file}')
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> 'ExperimentConfig':
        """Apply command-line overrides; ``None`` values are ignored."""
        solver_keys = {'p', 'lam', 'scheme', 'w_stop', 'max_steps'}
        solver = {k: v for k, v in overrides.items() if k in solver_keys and v is not None}
        top = {k: v for k, v in overrides.items() if k not in solver_keys and v is not None}
        try:
            new_solver = replace(self.solver, **solver)
        except ValueError as exc:
            raise ConfigError(str(exc))
        return replace(self, solver=new_solver, **top)

    def to_dict(self) -> dict:
        return {
            'schema_version': self.schema_version,
            'mesh': self.mesh,
            'profile': self.profile,
            'solver': self.solver.to_dict(),
            'study': self.study,
            'output_dir': self.output_dir,
            'sweep': self.sweep,
            'order': self.order,
            'window': list(self.window) if self.window else None,
            'seed': self.seed,
            'workers': self.workers,
        }

    def identity(self) -> dict:
        # output_dir and workers do not change any number
        data = self.to_dict()
        data.pop('output_dir')
        data.pop('workers')
        return data

    def hash(self) -> str:
        return config_hash(self.identity())

    def validate(self) -> 'ExperimentConfig':
        if self.study not in STUDIES:
            raise ConfigError(f'study must be one of {STUDIES}, got {self.study!r}')
        self.solver.validate()
        try:
            sys = load_system(self.mesh)
            data = sample_initial(sys, Profile.from_dict(self.profile))
        except (KeyError, TypeError) as exc:
            raise DiscretizationError(f'incomplete mesh or profile config: {exc}')
        solver = self.solver
        if (self.study in ('single', 'rate', 'set') and solver.scheme == Scheme.EXPLICIT
                and (solver.enforce_comparison_restriction or solver.enforce_lyapunov_restriction)):
            check = check_initial_lambda(sys, solver, data)
            if not check.passed:
                raise ConfigError(f'lambda={solver.lam!r} violates lambda < {check.bound!r} for this mesh and data')
        if self.workers is not None and int(self.workers) < 1:
            raise ConfigError(f'workers must be >= 1, got {self.workers}')
        if self.window is not None and not (len(self.window) == 2 and 0 <= self.window[0] < self.window[1]):
            raise ConfigError(f'window must be [lo, hi] with 0 <= lo < hi, got {self.window}')
        if self.study == 'time_convergence':
            sweep_points(self)
        if self.study == 'order':
            order_rungs(self)
        return self


def load_system(mesh: dict) -> DiscreteSystem:
    """Build from a builder spec or read a mesh file written by ``mesh``."""
    if 'file' in mesh:
        sys = DiscreteSystem.from_dict(load_json(mesh['file']))
        report = validate_properties(sys)
        if not report.passed:
            raise DiscretizationError(f'mesh {mesh["file"]} fails the structural checks: '
                                      + '; '.join(report.messages))
        return sys
    return build_system(mesh)


def sweep_points(config: ExperimentConfig) -> List[dict]:
    """Cartesian product of the sweep axes in a fixed order (n, lambda, p)."""
    axes = config.sweep.get('axes', {k: v for k, v in config.sweep.items() if k in SWEEP_AXES})
    if not axes:
        raise ConfigError('sweep needs at least one axis among ' + ', '.join(SWEEP_AXES))
    for name, values in axes.items():
        if name not in SWEEP_AXES:
            raise ConfigError(f'unknown sweep axis {name!r}')
        if not isinstance(values, (list, tuple)) or len(values) == 0:
            raise ConfigError(f'sweep axis {name!r} is empty')
    ns = axes.get('n', [config.mesh.get('n')])
    lams = axes.get('lambda', [config.solver.lam])
    ps = axes.get('p', [config.solver.p])
    return [{'n': n, 'lambda': float(lam), 'p': float(p)} for n, lam, p in product(ns, lams, ps)]


def point_dir(output_dir, n: int, lam: float, p: float) -> Path:
    return Path(output_dir) / 'points' / f'n{n}_lam{float(lam)!r}_p{float(p)!r}'


def order_rungs(config: ExperimentConfig) -> List[int]:
    rungs = list(config.order.get('n', []))
    if not rungs:
        raise ConfigError('order study needs order.n, a nonempty list of mesh sizes')
    if not config.order.get('t_end', config.solver.t_end):
        raise ConfigError('order study needs order.t_end')
    return rungs


class ExperimentPipeline:
    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()

    def build(self, mesh: Optional[dict] = None, profile: Optional[dict] = None
              ) -> Tuple[DiscreteSystem, InitialData]:
        sys = load_system(mesh or self.config.mesh)
        data = sample_initial(sys, Profile.from_dict(profile or self.config.profile))
        return sys, data

    def run(self, output_dir=None) -> Tuple[Trajectory, BlowupReport]:
        sys, data = self.build()
        logger.info('%s with %d nodes, %s data, p=%g, lambda=%g, %s scheme', sys.label, sys.n,
                    self.config.profile.get('family', 'sine'), self.config.solver.p,
                    self.config.solver.lam, self.config.solver.scheme.value)
        traj = run(sys, self.config.solver, data)
        report = diagnose(traj, window=self.config.window)
        report.metadata.update(self._report_metadata(traj))
        if output_dir is not None:
            self.write_run(output_dir, sys, traj, report)
        return traj, report

    def _report_metadata(self, traj):
        return {'config_hash': self.config.hash(), 'config': self.config.identity(),
                'mesh': traj.system.label, 'n': traj.system.n, **traj.metadata}

    def write_run(self, output_dir, sys, traj, report):
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_json(sys.to_dict(), out / 'mesh.json')
        dump_json(self.config.to_dict(), out / 'config.json')
        write_trajectory(traj, out)
        dump_json(report.to_dict(), out / 'report.json')
        report.write_node_csv(out / 'nodes.csv')
        # timestamps live here so report.json stays byte-identical across reruns
        dump_json({'finished': time.strftime('%Y-%m-%dT%H:%M:%S'), 'config_hash': self.config.hash()},
                  out / 'run.json')
        logger.info('wrote run outputs to %s', out)

    def run_point(self, point: dict, output_dir=None) -> dict:
        """One sweep point; with ``output_dir`` its report goes to ``points/<name>/report.json``."""
        mesh = dict(self.config.mesh)
        if point['n'] is not None:
            mesh['n'] = point['n']
        solver = replace(self.config.solver, lam=point['lambda'], p=point['p'])
        sys, data = self.build(mesh=mesh)
        start = time.perf_counter()
        traj = run(sys, solver, data)
        report = diagnose(traj, window=self.config.window)
        row = {'n': sys.n, 'h': sys.h, 'lambda': solver.lam, 'p': solver.p,
               'T_estimate': report.T_estimate, 'T_tail_bound': report.T_tail_bound,
               'rate_constant': report.rate_constant, 'K': report.K, 'detected': report.detected,
               'termination': report.termination, 'steps': report.steps, 'T_reference': None,
               'runtime': time.perf_counter() - start, 'error': ''}
        if self.config.sweep.get('reference'):
            row['T_reference'] = semidiscrete_blowup_time(
                sys, solver.p, data, w_threshold=solver.w_stop,
                ds=float(self.config.sweep.get('reference_ds', 1e-3)))
        if output_dir is not None:
            sub = point_dir(output_dir, sys.n, solver.lam, solver.p)
            sub.mkdir(parents=True, exist_ok=True)
            report.metadata.update(self._report_metadata(traj), point=dict(point))
            dump_json(report.to_dict(), sub / 'report.json')
        return row

    def sweep(self, output_dir=None) -> List[dict]:
        """Run every sweep point in the worker pool; failures become rows with an error message."""
        points = sweep_points(self.config)
        workers = resolve_workers(self.config.workers)
        logger.info('sweep of %d points on %d workers', len(points), workers)
        rows = []
        target = partial(self.run_point, output_dir=output_dir)
        for point, (row, error) in zip(points, ordered_pool_results(
                target, points, max_work_count=workers, desc='sweep')):
            if error is not None:
                row = {**{c: None for c in SUMMARY_COLUMNS}, 'n': point['n'], 'lambda': point['lambda'],
                       'p': point['p'], 'error': f'{type(error).__name__}: {error}'}
            rows.append(row)
        if output_dir is not None:
            Path(output_dir).mkdir(parents=True, exist_ok=True)
            write_csv(os.path.join(output_dir, 'summary.csv'), SUMMARY_COLUMNS,
                      ([_cell(row[c]) for c in SUMMARY_COLUMNS] for row in rows))
            dump_json({'config_hash': self.config.hash(), 'points': len(rows)},
                      os.path.join(output_dir, 'sweep.json'))
        return rows

    def order(self, output_dir=None) -> List[dict]:
        """Explicit runs to a fixed t_end with steps of h^2/4 against a self-converged reference."""
        rungs = order_rungs(self.config)
        t_end = float(self.config.order.get('t_end', self.config.solver.t_end))
        oracle_steps = int(self.config.order.get('oracle_steps', 10000))
        rows = []
        for n in rungs:
            mesh = dict(self.config.mesh, n=n)
            sys, data = self.build(mesh=mesh)
            p = self.config.solver.p
            if phi_h(sys, data.values, p) < 0:
                raise ConfigError(f'order study needs data that stays finite up to t_end; Phi_h(U0) < 0 '
                                  f'on {sys.label} certifies blow-up')
            # first step h^2/4, the comparison clamp of the FD stencil
            lam = ORDER_STEP_FRACTION * sys.h ** 2 * w_norm(sys, data.values) ** p
            solver = replace(self.config.solver, lam=lam, t_end=t_end, scheme=Scheme.EXPLICIT)
            traj = run(sys, solver, data)
            if traj.termination != Termination.T_END:
                raise ConfigError(f'order run on {sys.label} ended with {traj.termination.value} before '
                                  f't_end={t_end}; use decaying data or an earlier t_end')
            reference = self_converged(sys, p, data, t_end, stable_step_count(sys, t_end, traj.eta, oracle_steps))
            _, consistency = consistency_residual(sys, sine_decay(), t_end)
            rows.append({'n': sys.n, 'h': sys.h, 'lambda': solver.lam, 'steps': traj.final_index,
                         'tau_max': float(traj.tau[:-1].max()),
                         'error': endpoint_error(traj.final_state, reference, t=float(traj.t[-1])),
                         'order': None, 'consistency': consistency, 'consistency_ratio': None})
        orders = observed_order([r['error'] for r in rows], [r['h'] for r in rows])
        consistency_orders = observed_order([r['consistency'] for r in rows], [r['h'] for r in rows])
        for row, q, qc in zip(rows[1:], orders, consistency_orders):
            row['order'] = q
            # residual reduction per halving of h
            row['consistency_ratio'] = 2.0 ** qc
        for row in rows:
            logger.info('order study n=%d h=%.5f error=%.3e order=%s', row['n'], row['h'], row['error'],
                        '-' if row['order'] is None else f'{row["order"]:.3f}')
        if output_dir is not None:
            Path(output_dir).mkdir(parents=True, exist_ok=True)
            write_csv(os.path.join(output_dir, 'order.csv'), ORDER_COLUMNS,
                      ([_cell(row[c]) for c in ORDER_COLUMNS] for row in rows))
        return rows


def _cell(value):
    if value is None:
        return ''
    if isinstance(value, float) and math.isinf(value):
        return 'inf'
    return value


def rate_from_run(run_dir, window=None) -> Tuple[Trajectory, BlowupReport]:
    """Diagnose a trajectory written by ``run``: rescaled series, rate constant and node classes."""
    run_dir = Path(run_dir)
    try:
        config = ExperimentConfig.from_dict(load_json(run_dir / 'config.json'))
        sys = DiscreteSystem.from_dict(load_json(run_dir / 'mesh.json'))
        previous = load_json(run_dir / 'report.json')
    except FileNotFoundError as exc:
        raise ConfigError(f'{run_dir} is not a run directory: {exc}')
    traj = load_trajectory(run_dir, sys, config.solver, previous['termination'],
                           eta=previous.get('eta') or float('nan'))
    report = diagnose(traj, window=window or config.window)
    return traj, report


def write_rate(run_dir, output_dir, traj: Trajectory, report: BlowupReport) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if report.T_estimate is not None:
        rescaled = rescale(traj, report.T_estimate)
        rows = ((int(j), float(t), float(y.max()), int(y.argmax()))
                for j, t, y in zip(rescaled.index, rescaled.t, rescaled.y))
    write_csv(out / 'rescaled.csv', ('j', 't', 'max_y', 'argmax'), rows)
    report.write_node_csv(out / 'nodes.csv')
    dump_json(report.to_dict(), out / 'rate.json')
    logger.info('rate constant %s (C_p=%.5f) from %s', report.rate_constant, report.C_p, run_dir)
