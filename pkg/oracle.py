"""Independent reference computations used to validate the adaptive solver."""
from dataclasses import dataclass
import logging
import math
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.linalg import eigvalsh

from discretize import DiscreteSystem
from errors import OracleError
from spectral import gershgorin_bound

logger = logging.getLogger(__name__)

DENSE_EIGS_MAX_N = 200
SELF_CONVERGENCE_RTOL = 1e-10
DECAY_FLOOR = 1e-3


@dataclass(frozen=True)
class ReferenceSolution:
    times: np.ndarray
    states: np.ndarray
    step: float
    method: str = 'rk4'

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _rhs(sys, p, source):
    A = sys.stiffness
    m = sys.mass

    def f(u):
        du = -(A @ u) / m
        if source:
            du += u ** p
        return du
    return f


def _rk4_step(f, u, dt):
    k1 = f(u)
    k2 = f(u + 0.5 * dt * k1)
    k3 = f(u + 0.5 * dt * k2)
    k4 = f(u + dt * k3)
    return u + dt * (k1 + 2.0 * (k2 + k3) + k4) / 6.0


def reference_integrate(sys: DiscreteSystem, p: float, U0, t_end: float, n_steps: int,
                        n_checkpoints: int = 10, source: bool = True) -> ReferenceSolution:
    """Classical fixed-step RK4 for U' = -M^{-1}AU + U^p on [0, t_end].

    Checkpoints are evenly spaced in step count; the last one is t_end.
    ``source=False`` drops the reaction term (pure diffusion).
    """
    if not t_end > 0 or n_steps < 1:
        raise ValueError('t_end must be > 0 and n_steps >= 1')
    u = np.array(getattr(U0, 'values', U0), dtype=float)
    if u.shape != (sys.n,):
        raise ValueError(f'U0 has shape {u.shape}, expected ({sys.n},)')
    f = _rhs(sys, p, source)
    dt = t_end / n_steps
    every = max(1, n_steps // max(1, n_checkpoints))

    times, states = [0.0], [u]
    for k in range(1, n_steps + 1):
        u = _rk4_step(f, u, dt)
        if not np.all(np.isfinite(u)) or (source and not np.all(u > 0.0)):
            raise OracleError(f'reference integration broke down at t={k * dt:.6g}: the state is not '
                              f'finite and positive; choose t_end before blow-up')
        if k % every == 0 or k == n_steps:
            times.append(t_end if k == n_steps else k * dt)
            states.append(u)
    return ReferenceSolution(times=np.array(times), states=np.array(states), step=dt)


def self_converged(sys: DiscreteSystem, p: float, U0, t_end: float, n_steps: int,
                   rtol: float = SELF_CONVERGENCE_RTOL, source: bool = True) -> ReferenceSolution:
    """Integrate with n and 2n steps; accept the finer run only if the endpoints agree to ``rtol``."""
    coarse = reference_integrate(sys, p, U0, t_end, n_steps, n_checkpoints=1, source=source)
    fine = reference_integrate(sys, p, U0, t_end, 2 * n_steps, source=source)
    scale = max(float(np.max(np.abs(fine.final))), np.finfo(float).tiny)
    change = float(np.max(np.abs(fine.final - coarse.final))) / scale
    if change >= rtol:
        raise OracleError(f'reference integration not self-converged: {n_steps} vs {2 * n_steps} steps '
                          f'differ by {change:.3e} relative (limit {rtol:g}); raise n_steps')
    logger.debug('reference self-convergence %.3e with %d steps', change, 2 * n_steps)
    return fine


def stable_step_count(sys: DiscreteSystem, t_end: float, eta: float, minimum: int = 10000) -> int:
    # RK4 is stable for dt * eta < 2.78; stay well inside
    return max(int(minimum), int(math.ceil(4.0 * t_end * eta)))


def exact_ode_blowup(u0: float, p: float) -> Tuple[float, Callable]:
    """Blow-up time and solution of u' = u^p, u(0) = u0."""
    if not u0 > 0 or not p > 1:
        raise ValueError('need u0 > 0 and p > 1')
    T = u0 ** (1.0 - p) / (p - 1.0)

    def u(t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide='ignore', invalid='ignore'):
            val = ((p - 1.0) * (T - t)) ** (-1.0 / (p - 1.0))
        val = np.where(t == 0.0, u0, val)
        return float(val) if val.ndim == 0 else val
    return T, u


def dense_generalized_eigs(sys: DiscreteSystem) -> np.ndarray:
    """All eigenvalues of A phi = lambda M phi, ascending, from M^{-1/2} A M^{-1/2}."""
    if sys.n > DENSE_EIGS_MAX_N:
        raise OracleError(f'dense eigensolve limited to N <= {DENSE_EIGS_MAX_N}, got {sys.n}')
    s = 1.0 / np.sqrt(sys.mass)
    B = s[:, None] * sys.dense_stiffness() * s[None, :]
    return eigvalsh(0.5 * (B + B.T))


def semidiscrete_blowup_time(sys: DiscreteSystem, p: float, U0, w_threshold: float,
                             ds: float = 1e-3, max_steps: int = 10_000_000,
                             decay_floor: float = DECAY_FLOOR) -> float:
    """Blow-up time of the semidiscrete system.

    RK4 in the stretched variable s with dt = ds / w^p, up to w >= w_threshold,
    then the remaining time of u' = u^p from the current maximum.  dt is capped
    at 2/eta so decaying data stays stable until w drops below
    ``decay_floor * w^0``, which is reported as data that may not blow up.
    """
    u = np.array(getattr(U0, 'values', U0), dtype=float)
    f = _rhs(sys, p, True)
    m = sys.mass
    dt_max = 2.0 / gershgorin_bound(sys)

    def g(z):
        v = z[:-1]
        scale = float(m @ v) ** -p
        return np.append(f(v) * scale, scale)

    z = np.append(u, 0.0)
    w0 = float(m @ u)
    for _ in range(max_steps):
        w = float(m @ z[:-1])
        if w >= w_threshold:
            umax = float(np.max(z[:-1]))
            return float(z[-1]) + umax ** (1.0 - p) / (p - 1.0)
        if w < decay_floor * w0:
            raise OracleError(f'w decayed to {w:.3e} (from {w0:.3e}); the data may not blow up')
        z = _rk4_step(g, z, min(ds, dt_max * w ** p))
        if not np.all(np.isfinite(z)) or not np.all(z[:-1] > 0.0):
            raise OracleError('semidiscrete integration lost positivity or finiteness; reduce ds')
    raise OracleError(f'w stayed below {w_threshold:g} for {max_steps} steps; the data may not blow up')


@dataclass(frozen=True)
class ManufacturedSolution:
    """Smooth w(x, t) with w_t and the forcing f = w_t - Laplacian(w) in closed form."""
    name: str
    w: Callable
    w_t: Callable
    f: Callable


def sine_decay(k: int = 1) -> ManufacturedSolution:
    """w = prod_i sin(k pi x_i) e^{-t}."""
    kpi = k * math.pi

    def w(x, t):
        x = np.atleast_2d(x)
        return np.prod(np.sin(kpi * x), axis=1) * math.exp(-t)

    def f(x, t):
        d = np.atleast_2d(x).shape[1]
        return (d * kpi ** 2 - 1.0) * w(x, t)
    return ManufacturedSolution(f'sine_decay({k})', w, lambda x, t: -w(x, t), f)


def poly_sine() -> ManufacturedSolution:
    """w = (1 + t^2) sin(pi x) on the interval."""
    def shape(x):
        return np.sin(math.pi * np.atleast_2d(x)[:, 0])
    return ManufacturedSolution(
        'poly_sine',
        lambda x, t: (1.0 + t * t) * shape(x),
        lambda x, t: 2.0 * t * shape(x),
        lambda x, t: (2.0 * t + math.pi ** 2 * (1.0 + t * t)) * shape(x))


def affine(slope: float = 1.0, offset: float = 0.0) -> ManufacturedSolution:
    """w = offset + slope * x; only meaningful away from the eliminated boundary."""
    return ManufacturedSolution(
        'affine',
        lambda x, t: offset + slope * np.atleast_2d(x)[:, 0],
        lambda x, t: np.zeros(len(np.atleast_2d(x))),
        lambda x, t: np.zeros(len(np.atleast_2d(x))))


def boundary_rows(sys: DiscreteSystem) -> np.ndarray:
    """Rows with a strictly positive row sum, i.e. nodes coupled to the eliminated boundary."""
    return np.asarray(sys.stiffness.sum(axis=1)).ravel() > 0.0


def consistency_residual(sys: DiscreteSystem, solution: ManufacturedSolution, t: float,
                         interior_only: bool = False) -> Tuple[np.ndarray, float]:
    """rho_i = m_i w_t(x_i) + sum_k a_ik w(x_k) - m_i f(x_i), and max_i |rho_i| / m_i."""
    x = sys.nodes
    w = solution.w(x, t)
    rho = sys.mass * solution.w_t(x, t) + sys.stiffness @ w - sys.mass * solution.f(x, t)
    scaled = np.abs(rho) / sys.mass
    if interior_only:
        scaled = scaled[~boundary_rows(sys)]
    return rho, float(np.max(scaled)) if len(scaled) else 0.0


def observed_order(errors, hs) -> list:
    """log(e_k / e_{k+1}) / log(h_k / h_{k+1}) between consecutive rungs."""
    out = []
    for (e0, e1), (h0, h1) in zip(zip(errors, errors[1:]), zip(hs, hs[1:])):
        out.append(math.log(e0 / e1) / math.log(h0 / h1) if e0 > 0 and e1 > 0 else float('nan'))
    return out


def endpoint_error(U, reference: ReferenceSolution, t: Optional[float] = None) -> float:
    """Nodewise max error against the reference at its final checkpoint."""
    if t is not None and not math.isclose(t, reference.times[-1], rel_tol=1e-12, abs_tol=1e-15):
        raise OracleError(f'state at t={t!r} compared with reference at t={reference.times[-1]!r}')
    return float(np.max(np.abs(np.asarray(U, dtype=float) - reference.final)))
