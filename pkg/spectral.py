"""Generalized spectral bound of the pencil (A, M) and the shifted SPD solve."""
from dataclasses import dataclass
import logging

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from discretize import DiscreteSystem
from errors import LinearSolveError, SpectralConvergenceError

logger = logging.getLogger(__name__)

DIRECT_SOLVE_MAX_N = 64
SOLVE_RTOL = 1e-12
# eta used inside step restrictions is inflated by this factor
ETA_SAFETY = 1.01


@dataclass(frozen=True)
class SpectralEstimate:
    eta: float
    residual: float
    iterations: int
    converged: bool = True
    source: str = 'power'

    def to_dict(self) -> dict:
        return {'eta': self.eta, 'residual': self.residual, 'iterations': self.iterations,
                'converged': self.converged, 'source': self.source}


def gershgorin_bound(sys: DiscreteSystem) -> float:
    """max_i sum_k |a_ik| / m_i, an upper bound on every generalized eigenvalue."""
    row_abs = np.asarray(abs(sys.stiffness).sum(axis=1)).ravel()
    return float(np.max(row_abs / sys.mass))


def start_vector(n: int) -> np.ndarray:
    # all-ones is M-orthogonal to the top mode of the uniform pencil when n is even
    return 1.0 + np.arange(1, n + 1, dtype=float) / n


def eta_estimate(sys: DiscreteSystem, tol: float = 1e-8, max_iter: int = 200000) -> SpectralEstimate:
    """Largest eigenvalue of A phi = eta M phi by power iteration on M^{-1}A.

    The iteration is carried in the M-inner product, where M^{-1}A is
    self-adjoint, and stops when the M-norm residual of the Rayleigh pair is
    below ``tol * eta``.
    """
    if tol <= 0:
        raise ValueError(f'tol must be positive, got {tol}')
    m = sys.mass
    A = sys.stiffness
    x = start_vector(sys.n)
    x /= np.sqrt(x @ (m * x))

    eta = 0.0
    residual = float('inf')
    for it in range(1, max_iter + 1):
        Ax = A @ x
        eta = float(x @ Ax)  # x is M-normalized
        r = Ax / m - eta * x
        residual = float(np.sqrt(r @ (m * r)))
        if residual <= tol * max(eta, np.finfo(float).tiny):
            logger.debug('eta=%.17g after %d iterations (residual %.3e)', eta, it, residual)
            return SpectralEstimate(eta=eta, residual=residual, iterations=it)
        y = Ax / m
        norm = np.sqrt(y @ (m * y))
        if norm == 0.0:
            # x lies in the kernel of A; nothing above zero to find
            return SpectralEstimate(eta=0.0, residual=0.0, iterations=it)
        x = y / norm

    raise SpectralConvergenceError(
        f'power iteration did not reach tol={tol:g} in {max_iter} iterations '
        f'(eta~{eta:.6g}, residual {residual:.3e})',
        fallback=gershgorin_bound(sys), iterations=max_iter, residual=residual)


def eta_for_restriction(sys: DiscreteSystem, tol: float = 1e-8, max_iter: int = 200000) -> SpectralEstimate:
    """eta used by the step restrictions: the estimate, or the Gershgorin bound when it fails."""
    try:
        return eta_estimate(sys, tol=tol, max_iter=max_iter)
    except SpectralConvergenceError as exc:
        logger.warning('%s; falling back to the Gershgorin bound %.17g', exc, exc.fallback)
        return SpectralEstimate(eta=exc.fallback, residual=exc.residual,
                                iterations=exc.iterations, converged=False, source='gershgorin')


def _solve_direct(sys, tau, rhs):
    K = np.diag(sys.mass) + tau * sys.dense_stiffness()
    try:
        return cho_solve(cho_factor(K, lower=True, check_finite=False), rhs, check_finite=False)
    except LinAlgError as exc:
        raise LinearSolveError(f'Cholesky factorization of M + tau*A failed (tau={tau!r}): {exc}')


def _solve_cg(sys, tau, rhs):
    """Jacobi-preconditioned conjugate gradients on M + tau*A."""
    m = sys.mass
    A = sys.stiffness
    diag = m + tau * sys.diagonal()
    max_iter = 10 * sys.n
    target = SOLVE_RTOL * np.linalg.norm(rhs)

    x = rhs / diag
    k = 0
    while True:
        # restart from the true residual; the recursive one drifts
        r = rhs - (m * x + tau * (A @ x))
        res = np.linalg.norm(r)
        if res <= target:
            return x
        if k >= max_iter:
            raise LinearSolveError(
                f'conjugate gradients reached residual {res:.3e} > {target:.3e} after {k} iterations')
        z = r / diag
        d = z.copy()
        rz = r @ z
        while np.linalg.norm(r) > target and k < max_iter:
            Kd = m * d + tau * (A @ d)
            dKd = d @ Kd
            if dKd <= 0.0:
                raise LinearSolveError(
                    f'conjugate gradients broke down at iteration {k} (d.Kd={dKd:.3e})')
            alpha = rz / dKd
            x = x + alpha * d
            r = r - alpha * Kd
            z = r / diag
            rz_new = r @ z
            d = z + (rz_new / rz) * d
            rz = rz_new
            k += 1


def solve_shifted(sys: DiscreteSystem, tau: float, rhs, method: str = 'auto') -> np.ndarray:
    """Solve (M + tau*A) X = rhs.

    ``method`` is ``'auto'`` (Cholesky for N <= 64, conjugate gradients
    otherwise), ``'direct'`` or ``'cg'``.
    """
    if tau < 0:
        raise ValueError(f'tau must be nonnegative, got {tau}')
    rhs = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(rhs)):
        raise ValueError('rhs must be finite')
    if tau == 0.0:
        return rhs / sys.mass
    if not np.any(rhs):
        return np.zeros_like(rhs)
    if method == 'auto':
        method = 'direct' if sys.n <= DIRECT_SOLVE_MAX_N else 'cg'
    if method == 'direct':
        return _solve_direct(sys, tau, rhs)
    if method == 'cg':
        return _solve_cg(sys, tau, rhs)
    raise ValueError(f'unknown solve method {method!r}')
