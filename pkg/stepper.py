"""Adaptive explicit and implicit time stepping for M U' = -A U + M U^p."""
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
import logging
import math
import os
from typing import List, Optional, Sequence, Union

import numpy as np

from diagnostics import phi_h
from discretize import DiscreteSystem, InitialData
from errors import ConfigError, NumericalError
from spectral import ETA_SAFETY, eta_for_restriction, solve_shifted
from utils import TimeAccumulator, dump_jsonl, fmt_float, iter_jsonl, read_csv, write_csv

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ('j', 't', 'tau', 'w', 'phi', 'max_u', 'argmax')


class Scheme(str, Enum):
    EXPLICIT = 'explicit'
    IMPLICIT = 'implicit'


class StepNorm(str, Enum):
    L1 = 'l1'
    LINF = 'linf'


class Termination(str, Enum):
    W_THRESHOLD = 'w_threshold'
    MAX_STEPS = 'max_steps'
    STEADY = 'steady'
    OVERFLOW_GUARD = 'overflow_guard'
    T_END = 't_end'


class GuardTripped(ArithmeticError):
    """A power of the state would exceed ``overflow_guard``."""


@dataclass(frozen=True)
class SolverConfig:
    p: float = 2.0
    lam: float = 1e-3
    scheme: Scheme = Scheme.EXPLICIT
    w_stop: float = 1e6
    max_steps: int = 10_000_000
    enforce_comparison_restriction: bool = True
    enforce_lyapunov_restriction: bool = True
    overflow_guard: float = 1e300
    step_norm: StepNorm = StepNorm.L1
    t_end: Optional[float] = None
    decay_floor: float = 1e-12
    comparison_safety: float = 0.5
    steady_rtol: float = 1e-14
    steady_window: int = 10
    max_halvings: int = 200
    snapshot_budget: int = 1000
    tail_states: int = 200

    def __post_init__(self):
        object.__setattr__(self, 'scheme', Scheme(self.scheme))
        object.__setattr__(self, 'step_norm', StepNorm(self.step_norm))

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> 'SolverConfig':
        data = dict(data or {})
        if 'lambda' in data:
            data['lam'] = data.pop('lambda')
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f'unknown solver options: {sorted(unknown)}')
        try:
            return cls(**data)
        except ValueError as exc:
            raise ConfigError(str(exc))

    def to_dict(self) -> dict:
        out = asdict(self)
        out['lambda'] = out.pop('lam')
        out['scheme'] = self.scheme.value
        out['step_norm'] = self.step_norm.value
        return out

    def validate(self) -> 'SolverConfig':
        if not self.p > 1:
            raise ConfigError(f'p must be > 1, got {self.p}')
        if not self.lam > 0:
            raise ConfigError(f'lambda must be > 0, got {self.lam}')
        if not self.w_stop > 0:
            raise ConfigError(f'w_stop must be > 0, got {self.w_stop}')
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise ConfigError(f'max_steps must be an integer >= 1, got {self.max_steps}')
        if self.t_end is not None and not self.t_end > 0:
            raise ConfigError(f't_end must be > 0, got {self.t_end}')
        if not 0 < self.comparison_safety <= 1:
            raise ConfigError(f'comparison_safety must lie in (0, 1], got {self.comparison_safety}')
        if not 1.0 < self.overflow_guard <= 1.7e308:
            raise ConfigError(f'overflow_guard out of range: {self.overflow_guard}')
        return self


@dataclass
class StepRecord:
    j: int
    t: float
    tau: float
    u: np.ndarray
    w: float
    phi: float
    halvings: int = 0


@dataclass(frozen=True)
class LambdaCheck:
    passed: bool
    bound: float
    lam: float


@dataclass
class Trajectory:
    """Per-step scalars for every step plus thinned full-state snapshots.

    ``tau[j]`` is the step taken from j to j+1; the final entry is the step
    the law would take next.
    """
    system: DiscreteSystem
    config: SolverConfig
    t: np.ndarray
    tau: np.ndarray
    w: np.ndarray
    phi: np.ndarray
    max_u: np.ndarray
    argmax: np.ndarray
    halvings: np.ndarray
    snapshot_index: np.ndarray
    snapshots: np.ndarray
    termination: Termination
    eta: float = float('nan')
    eta_source: str = ''
    metadata: dict = field(default_factory=dict)

    @property
    def final_index(self) -> int:
        return len(self.t) - 1

    @property
    def j(self) -> np.ndarray:
        return np.arange(len(self.t))

    @property
    def records(self) -> List[StepRecord]:
        return [StepRecord(j=int(j), t=float(self.t[j]), tau=float(self.tau[j]), u=u,
                           w=float(self.w[j]), phi=float(self.phi[j]), halvings=int(self.halvings[j]))
                for j, u in zip(self.snapshot_index, self.snapshots)]

    def state(self, j: int) -> np.ndarray:
        k = np.searchsorted(self.snapshot_index, j)
        if k >= len(self.snapshot_index) or self.snapshot_index[k] != j:
            raise KeyError(f'no stored state for step {j}')
        return self.snapshots[k]

    @property
    def final_state(self) -> np.ndarray:
        return self.snapshots[-1]


def w_norm(sys: DiscreteSystem, U) -> float:
    """w = sum_k m_k u_k (weighted L1 norm for positive U)."""
    return math.fsum(sys.mass * np.asarray(U, dtype=float))


def _step_norm(sys, config, U) -> float:
    if config.step_norm == StepNorm.LINF:
        return float(np.max(U))
    return w_norm(sys, U)


def step_size(config: SolverConfig, w: float) -> float:
    if not w > 0:
        raise ValueError(f'step law needs w > 0, got {w!r}')
    return config.lam / w ** config.p


def check_initial_lambda(sys: DiscreteSystem, config: SolverConfig, U0) -> LambdaCheck:
    """lambda < min_i (m_i/a_ii) (w^0)^p, which makes tau_0 satisfy the comparison bound."""
    U0 = np.asarray(getattr(U0, 'values', U0), dtype=float)
    bound = sys.comparison_bound() * _step_norm(sys, config, U0) ** config.p
    return LambdaCheck(passed=bool(config.lam < bound), bound=bound, lam=config.lam)


def _check_guard(u, config):
    # guard u^(p+1), the highest power evaluated along a run
    umax = float(np.max(u))
    if umax > 1.0 and (config.p + 1.0) * math.log(umax) > math.log(config.overflow_guard):
        raise GuardTripped(f'max u = {umax:.6g} exceeds the overflow guard for p = {config.p}')


def step_explicit(sys: DiscreteSystem, config: SolverConfig, U, tau: float) -> np.ndarray:
    u = np.asarray(U, dtype=float)
    if not tau > 0:
        raise ValueError(f'tau must be > 0, got {tau!r}')
    if config.enforce_comparison_restriction and not tau < sys.comparison_bound():
        raise ValueError(f'tau={tau!r} violates tau < min m_i/a_ii = {sys.comparison_bound()!r}')
    _check_guard(u, config)
    return u + tau * (u ** config.p - (sys.stiffness @ u) / sys.mass)


def step_implicit(sys: DiscreteSystem, config: SolverConfig, U, tau: float) -> np.ndarray:
    """Solve (M + tau A) X = M U + tau M U^p: diffusion at t^{j+1}, source at t^j."""
    u = np.asarray(U, dtype=float)
    if tau < 0:
        raise ValueError(f'tau must be >= 0, got {tau!r}')
    if tau == 0.0:
        return u.copy()
    _check_guard(u, config)
    rhs = sys.mass * (u + tau * u ** config.p)
    return solve_shifted(sys, tau, rhs)


class _SnapshotRecorder:
    """Power-of-two thinning of full states plus a dense tail."""

    def __init__(self, budget, tail):
        self.budget = max(1, int(budget))
        self.stride = 1
        self.index = []
        self.states = []
        self.tail = deque(maxlen=max(1, int(tail)))

    def push(self, j, u):
        if j % self.stride == 0:
            self.index.append(j)
            self.states.append(u)
            if len(self.index) >= 2 * self.budget:
                self.stride *= 2
                keep = [k for k, jj in enumerate(self.index) if jj % self.stride == 0]
                self.index = [self.index[k] for k in keep]
                self.states = [self.states[k] for k in keep]
        self.tail.append((j, u))

    def finish(self):
        merged = dict(zip(self.index, self.states))
        merged.update(self.tail)
        order = sorted(merged)
        return np.array(order, dtype=int), np.array([merged[j] for j in order])


def run(sys: DiscreteSystem, config: SolverConfig, U0: Union[InitialData, Sequence[float]],
        eta: Optional[float] = None) -> Trajectory:
    """Iterate the configured scheme with tau_j = lambda / (w^j)^p until a termination reason."""
    config.validate()
    u = np.array(getattr(U0, 'values', U0), dtype=float)
    if u.shape != (sys.n,) or not np.all(u > 0.0):
        raise ValueError('initial state must be a positive vector with one value per node')

    explicit = config.scheme == Scheme.EXPLICIT
    p = config.p
    eta_source = 'given'
    if eta is None:
        estimate = eta_for_restriction(sys)
        eta, eta_source = estimate.eta, estimate.source
    eta_r = eta * ETA_SAFETY

    lambda_check = check_initial_lambda(sys, config, u)
    if explicit and (config.enforce_comparison_restriction or config.enforce_lyapunov_restriction):
        if not lambda_check.passed:
            raise ConfigError(f'lambda={config.lam!r} violates the initial restriction '
                              f'lambda < {lambda_check.bound!r}')
    comparison_cap = (config.comparison_safety * sys.comparison_bound()
                      if explicit and config.enforce_comparison_restriction else math.inf)

    clock = TimeAccumulator()
    recorder = _SnapshotRecorder(config.snapshot_budget, config.tail_states)
    t_hist, tau_hist, w_hist, phi_hist = [0.0], [], [], []
    max_hist, arg_hist, halv_hist = [], [], []

    def record(j, state, w):
        w_hist.append(w)
        phi_hist.append(phi_h(sys, state, p))
        k = int(np.argmax(state))
        arg_hist.append(k)
        max_hist.append(float(state[k]))
        recorder.push(j, state)

    w = w_norm(sys, u)
    w0 = w
    record(0, u, w)
    j = 0
    quiet = 0
    termination = None
    while termination is None:
        if j >= config.max_steps:
            termination = Termination.MAX_STEPS
            break
        tau = min(step_size(config, _step_norm(sys, config, u)), comparison_cap)
        landing = False
        if config.t_end is not None:
            remaining = config.t_end - clock.value
            if tau >= remaining:
                tau, landing = remaining, True

        halvings = 0
        try:
            while True:
                cand = step_explicit(sys, config, u, tau) if explicit else step_implicit(sys, config, u, tau)
                w_next = w_norm(sys, cand)
                if (explicit and config.enforce_lyapunov_restriction
                        and not tau < 2.0 / (p * w_next ** (p - 1.0) + eta_r)):
                    halvings += 1
                    if halvings > config.max_halvings:
                        raise NumericalError(f'step {j}: restriction still violated after '
                                             f'{config.max_halvings} halvings (tau={tau:.3e})')
                    tau *= 0.5
                    landing = False
                    continue
                break
            _check_guard(cand, config)
        except GuardTripped as exc:
            logger.info('step %d: %s', j, exc)
            termination = Termination.OVERFLOW_GUARD
            break
        if not np.all(cand > 0.0):
            raise NumericalError(f'step {j}: state lost positivity (tau={tau:.3e}); '
                                 f'check the step restrictions')

        tau_hist.append(tau)
        halv_hist.append(halvings)
        clock.add(tau)
        t_hist.append(config.t_end if landing else clock.value)
        change = float(np.max(np.abs(cand - u)))
        scale = float(np.max(u))
        u = cand
        w = w_next
        j += 1
        record(j, u, w)

        quiet = quiet + 1 if change < config.steady_rtol * scale else 0
        if w >= config.w_stop:
            termination = Termination.W_THRESHOLD
        elif landing:
            termination = Termination.T_END
        elif w < config.decay_floor * w0 or quiet >= config.steady_window:
            termination = Termination.STEADY

    try:
        tau_hist.append(step_size(config, _step_norm(sys, config, u)))
    except ValueError:
        tau_hist.append(float('nan'))
    halv_hist.append(0)

    index, states = recorder.finish()
    traj = Trajectory(
        system=sys, config=config,
        t=np.array(t_hist), tau=np.array(tau_hist), w=np.array(w_hist), phi=np.array(phi_hist),
        max_u=np.array(max_hist), argmax=np.array(arg_hist, dtype=int),
        halvings=np.array(halv_hist, dtype=int),
        snapshot_index=index, snapshots=states, termination=termination,
        eta=float(eta), eta_source=eta_source,
        metadata={'lambda_check': asdict(lambda_check), 'eta_restriction': eta_r,
                  'comparison_cap': comparison_cap if math.isfinite(comparison_cap) else None},
    )
    logger.info('%s run on %s: %s after %d steps, t=%.17g, w=%.6g, halvings=%d',
                config.scheme.value, sys.label or f'{sys.n} nodes', termination.value,
                traj.final_index, traj.t[-1], traj.w[-1], int(traj.halvings.sum()))
    return traj


def replay(sys: DiscreteSystem, config: SolverConfig, U0, taus: Sequence[float]) -> np.ndarray:
    """Advance U0 through a prescribed step sequence; returns every state, shape (len(taus)+1, N)."""
    u = np.array(getattr(U0, 'values', U0), dtype=float)
    step = step_explicit if config.scheme == Scheme.EXPLICIT else step_implicit
    states = [u]
    for tau in taus:
        u = step(sys, config, u, float(tau))
        states.append(u)
    return np.array(states)


def write_trajectory(traj: Trajectory, out_dir) -> None:
    rows = ((j, float(traj.t[j]), float(traj.tau[j]), float(traj.w[j]), float(traj.phi[j]),
             float(traj.max_u[j]), int(traj.argmax[j])) for j in range(len(traj.t)))
    write_csv(os.path.join(out_dir, 'trajectory.csv'), TRAJECTORY_COLUMNS, rows)
    dump_jsonl(({'j': int(j), 'u': [fmt_float(x) for x in u]}
                for j, u in zip(traj.snapshot_index, traj.snapshots)),
               os.path.join(out_dir, 'snapshots.jsonl'))


def load_trajectory(out_dir, sys: DiscreteSystem, config: SolverConfig,
                    termination: Union[str, Termination], eta: float = float('nan')) -> Trajectory:
    rows = read_csv(os.path.join(out_dir, 'trajectory.csv'))
    col = {name: [r[name] for r in rows] for name in TRAJECTORY_COLUMNS}
    snaps = list(iter_jsonl(os.path.join(out_dir, 'snapshots.jsonl')))
    return Trajectory(
        system=sys, config=config,
        t=np.array(col['t'], dtype=float), tau=np.array(col['tau'], dtype=float),
        w=np.array(col['w'], dtype=float), phi=np.array(col['phi'], dtype=float),
        max_u=np.array(col['max_u'], dtype=float), argmax=np.array(col['argmax'], dtype=int),
        halvings=np.zeros(len(rows), dtype=int),
        snapshot_index=np.array([s['j'] for s in snaps], dtype=int),
        snapshots=np.array([[float(x) for x in s['u']] for s in snaps]),
        termination=Termination(termination), eta=eta)
