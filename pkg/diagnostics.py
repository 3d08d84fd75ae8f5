"""Post-processing of trajectories: energy, detection, blow-up time, rate and blow-up set."""
from dataclasses import asdict, dataclass, field
import logging
import math
from typing import TYPE_CHECKING, Iterable, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.sparse.csgraph import shortest_path

from discretize import DiscreteSystem
from errors import DiagnosticsError
from utils import write_csv

if TYPE_CHECKING:
    from stepper import Trajectory

logger = logging.getLogger(__name__)

RATE_WINDOW = 50
RATE_EXCLUDE = 5
TAIL_INCREMENTS = 100
BSTAR_RTOL = 0.25
BOUNDED_GROWTH = 10.0
MIN_FIT_POINTS = 8
FIT_RESIDUAL_MAX = 0.1
NODE_COLUMNS = ('node', 'd', 'class', 'fitted_exponent', 'residual')
BLOWUP_STATUSES = ('bstar', 'blowup', 'log_blowup')

_BLOWUP_TERMINATIONS = ('w_threshold', 'overflow_guard')


def phi_h(sys: DiscreteSystem, U, p: float) -> float:
    """Phi_h(U) = 1/2 <AU, U> - 1/(p+1) sum_k m_k u_k^(p+1)."""
    u = np.asarray(U, dtype=float)
    return 0.5 * float(u @ (sys.stiffness @ u)) - float(sys.mass @ u ** (p + 1.0)) / (p + 1.0)


def phi_h_printed(sys: DiscreteSystem, U, p: float) -> float:
    """<AU, U> - <M U^(p+1), M E>/(p+1): the functional without the 1/2 and with M applied twice."""
    u = np.asarray(U, dtype=float)
    return float(u @ (sys.stiffness @ u)) - float(sys.mass ** 2 @ u ** (p + 1.0)) / (p + 1.0)


def blowup_constant(p: float) -> float:
    """C_p = (1/(p-1))^(1/(p-1))."""
    return (1.0 / (p - 1.0)) ** (1.0 / (p - 1.0))


class Detection(NamedTuple):
    detected: bool
    j0: Optional[int]


class TimeEstimate(NamedTuple):
    T_estimate: float
    # bound on T - t^J, not an absolute time
    T_tail_bound: float


def first_negative_phi(traj: 'Trajectory') -> Optional[int]:
    neg = np.flatnonzero(traj.phi < 0.0)
    return int(neg[0]) if len(neg) else None


def detect_blowup(traj: 'Trajectory') -> Detection:
    j0 = first_negative_phi(traj)
    detected = j0 is not None and traj.termination in _BLOWUP_TERMINATIONS
    return Detection(detected, j0 if detected else None)


def _tail_sum(lam, delta, w, p):
    return (lam / delta) * w ** (1.0 - p) / (p - 1.0)


def estimate_blowup_time(traj: 'Trajectory') -> TimeEstimate:
    """Close the sum of the remaining steps assuming w keeps growing linearly.

    With w^j ~ w^J + delta (j - J) and tau_j = lambda/(w^j)^p the tail is
    lambda (w^J)^(1-p) / (delta (p-1)).  The bound uses the smallest increment
    of the last 100 steps; a nonpositive increment leaves T at t^J with an
    infinite bound.
    """
    J = traj.final_index
    if J < 1:
        raise DiagnosticsError('blow-up time estimate needs at least 2 recorded steps')
    p = traj.config.p
    lam = traj.config.lam
    if traj.config.step_norm == 'linf':
        # same closed form with lambda rescaled to the current step
        lam = traj.tau[J] * traj.w[J] ** p
    tJ = float(traj.t[J])
    wJ = float(traj.w[J])
    deltas = np.diff(traj.w[max(0, J - TAIL_INCREMENTS):])
    delta_J = float(deltas[-1])
    if not delta_J > 0:
        logger.warning('last increment of w is %.3e <= 0; T estimate falls back to t^J', delta_J)
        return TimeEstimate(tJ, math.inf)
    estimate = tJ + _tail_sum(lam, delta_J, wJ, p)
    delta_min = float(np.min(deltas))
    bound = _tail_sum(lam, delta_min, wJ, p) if delta_min > 0 else math.inf
    return TimeEstimate(estimate, bound)


class Rescaled(NamedTuple):
    index: np.ndarray
    t: np.ndarray
    y: np.ndarray


def rescale(traj: 'Trajectory', T: float) -> Rescaled:
    """y_i^j = u_i^j (T - t^j)^(1/(p-1)) over the stored snapshots with t^j < T."""
    t = traj.t[traj.snapshot_index]
    keep = T - t > 0.0
    factor = (T - t[keep]) ** (1.0 / (traj.config.p - 1.0))
    return Rescaled(traj.snapshot_index[keep], t[keep], traj.snapshots[keep] * factor[:, None])


def _rate_window(rescaled: Rescaled) -> slice:
    usable = len(rescaled.index) - RATE_EXCLUDE
    if usable < RATE_WINDOW:
        raise DiagnosticsError(f'rate constant needs {RATE_WINDOW + RATE_EXCLUDE} snapshots before T, '
                               f'got {len(rescaled.index)}')
    return slice(usable - RATE_WINDOW, usable)


def rate_constant(traj: 'Trajectory', T: float) -> float:
    """Median of max_i y_i^j over the last 50 usable snapshots, the final 5 excluded."""
    rescaled = rescale(traj, T)
    window = _rate_window(rescaled)
    return float(np.median(np.max(rescaled.y[window], axis=1)))


def graph_distance(sys: DiscreteSystem, seed_set: Iterable[int]) -> np.ndarray:
    """Breadth-first hop counts from the nearest seed node; unreachable nodes get inf."""
    seeds = sorted({int(k) for k in seed_set})
    if not seeds:
        raise ValueError('seed set must be nonempty')
    if seeds[0] < 0 or seeds[-1] >= sys.n:
        raise ValueError(f'seed nodes out of range 0..{sys.n - 1}')
    dist = shortest_path(sys.adjacency(), directed=False, unweighted=True, indices=seeds)
    return np.min(np.atleast_2d(dist), axis=0)


def propagation_depth(p: float) -> Tuple[int, bool]:
    """K with (K+2)/(K+1) < p <= (K+1)/K, and whether p sits on the upper end."""
    if not p > 1:
        raise ValueError(f'p must be > 1, got {p}')
    K = int(math.floor(1.0 / (p - 1.0)))
    # floor of the reciprocal can be off by one near bracket ends
    while K > 0 and not p <= (K + 1) / K:
        K -= 1
    while not (K + 2) / (K + 1) < p:
        K += 1
    return K, bool(K > 0 and p == (K + 1) / K)


@dataclass
class NodeClass:
    node: int
    in_bstar: bool
    d: float
    status: str
    fitted_exponent: Optional[float] = None
    log_case: bool = False
    log_slope: Optional[float] = None
    residual: Optional[float] = None
    y_tail_median: Optional[float] = None


def _power_fit(gap, u):
    """Least squares log u = -alpha log(gap) + c; returns (alpha, rms residual)."""
    X = np.column_stack([-np.log(gap), np.ones_like(gap)])
    coef, *_ = np.linalg.lstsq(X, np.log(u), rcond=None)
    resid = np.log(u) - X @ coef
    return float(coef[0]), float(np.sqrt(np.mean(resid ** 2)))


def _increment_fit(gap, u):
    """Exponent alpha in u ~ gap^-alpha from the secant rates du/dt ~ gap^-(alpha+1).

    Rates drop whatever value the node built up before the fit window, which
    swamps a direct fit of log u at reachable sizes of w.  Returns None when
    fewer than two increments are positive.
    """
    du = np.diff(u)
    dt = gap[:-1] - gap[1:]
    ok = (du > 0.0) & (dt > 0.0)
    if ok.sum() < 2:
        return None
    mid = np.sqrt(gap[:-1] * gap[1:])[ok]
    exponent, residual = _power_fit(mid, du[ok] / dt[ok])
    return exponent - 1.0, residual


def _log_fit(gap, u):
    """Least squares u = -s ln(gap) + c; residual relative to the spread of u."""
    X = np.column_stack([-np.log(gap), np.ones_like(gap)])
    coef, *_ = np.linalg.lstsq(X, u, rcond=None)
    resid = u - X @ coef
    spread = max(float(np.ptp(u)), np.finfo(float).tiny)
    return float(coef[0]), float(np.sqrt(np.mean(resid ** 2)) / spread)


def _fit_rows(traj, T, tail_bound, t_detect, window):
    """Snapshot masks for the exponent fits and for the boundedness tail."""
    t = traj.t[traj.snapshot_index]
    gap = T - t
    before = gap > 0.0
    after_detect = before & (t >= (t_detect if t_detect is not None else -math.inf))
    if window is None:
        lo = 10.0 * tail_bound if math.isfinite(tail_bound) else 0.0
        hi = 0.1 * (T - t_detect) if t_detect is not None else math.inf
    else:
        lo, hi = window
    rows = before & (gap >= lo) & (gap <= hi)
    if rows.sum() < MIN_FIT_POINTS:
        logger.warning('fit window [%.3e, %.3e] holds %d snapshots; using every snapshot after detection',
                       lo, hi, int(rows.sum()))
        rows = after_detect
    tail = before & (gap <= hi)
    if tail.sum() < 2:
        tail = after_detect
    return rows, tail


def classify_blowup_set(sys: DiscreteSystem, traj: 'Trajectory', T: float, p: float,
                        tail_bound: float = 0.0, t_detect: Optional[float] = None,
                        window: Optional[Tuple[float, float]] = None) -> List[NodeClass]:
    """Split the nodes into B*, blowing-up rings, log-rate ring and bounded nodes.

    B* is the band of tail medians within 25% of C_p, or of the largest median
    when that one misses C_p, and always holds the node with the largest median.
    ``window`` overrides the (T - t) range used for exponent fits; the final
    phase for the boundedness test ends at its upper edge.
    """
    C_p = blowup_constant(p)
    rescaled = rescale(traj, T)
    y_med = np.median(rescaled.y[_rate_window(rescaled)], axis=0)
    top = int(np.argmax(y_med))
    center = C_p
    if abs(y_med[top] - C_p) > BSTAR_RTOL * C_p:
        # a biased T scales every y by the same factor; the maximal node still leads
        center = float(y_med[top])
        logger.warning('largest tail median y=%.5f (node %d) is not within %.0f%% of C_p=%.5f; '
                       'B* falls back to the band around it', center, top, 100 * BSTAR_RTOL, C_p)
    band = np.flatnonzero(np.abs(y_med - center) <= BSTAR_RTOL * center)
    bstar = np.union1d(band, [top]).astype(int)
    d = graph_distance(sys, bstar)
    K, log_case = propagation_depth(p)

    rows, tail_rows = _fit_rows(traj, T, tail_bound, t_detect, window)
    gap = T - traj.t[traj.snapshot_index][rows]
    states = traj.snapshots[rows]
    tail = traj.snapshots[tail_rows]

    classes = []
    for k in range(sys.n):
        node = NodeClass(node=k, in_bstar=bool(k in bstar), d=float(d[k]), status='unclassified',
                         y_tail_median=float(y_med[k]))
        u = states[:, k]
        if d[k] <= K and len(u) >= 3:
            fit = _increment_fit(gap, u)
            if fit is not None:
                node.fitted_exponent, node.residual = fit
            if log_case and d[k] == K:
                node.log_case = True
                node.log_slope, node.residual = _log_fit(gap, u)
                if node.log_slope > 0 and node.residual <= FIT_RESIDUAL_MAX:
                    node.status = 'log_blowup'
            elif fit is not None and node.fitted_exponent > 0 and node.residual <= FIT_RESIDUAL_MAX:
                node.status = 'bstar' if node.in_bstar else 'blowup'
        elif d[k] > K and len(tail):
            node.residual = float(np.max(tail[:, k]) / tail[0, k])
            if node.residual < BOUNDED_GROWTH:
                node.status = 'bounded'
        if node.status not in BLOWUP_STATUSES:
            node.fitted_exponent = None
        classes.append(node)
    return classes


def linear_growth_fit(traj: 'Trajectory') -> Tuple[float, float]:
    """Slope and relative residual of a straight-line fit of w^j against j over the final half."""
    J = traj.final_index
    if J < 4:
        raise DiagnosticsError('linear growth fit needs at least 5 steps')
    j = np.arange(J // 2, J + 1, dtype=float)
    w = traj.w[J // 2:]
    slope, intercept = np.polyfit(j, w, 1)
    resid = w - (slope * j + intercept)
    return float(slope), float(np.linalg.norm(resid) / np.linalg.norm(w))


def tau_tail_check(traj: 'Trajectory', steps: int = TAIL_INCREMENTS) -> Tuple[float, float, bool]:
    """Compare the time spent over the last ``steps`` steps with the integral tail bound.

    Given w^j >= w^i + delta_min (j - i) and tau_j <= lambda/(w^j)^p,
    sum_{j>=i} tau_j <= tau_i + lambda (w^i)^(1-p) / (delta_min (p-1)).
    Returns (observed, bound, observed <= bound).
    """
    J = traj.final_index
    i = max(0, J - steps)
    if J - i < 2:
        raise DiagnosticsError('tail check needs at least 2 steps')
    observed = float(traj.t[J] - traj.t[i])
    delta_min = float(np.min(np.diff(traj.w[i:])))
    if not delta_min > 0:
        return observed, math.inf, True
    p = traj.config.p
    lam = traj.config.lam if traj.config.step_norm == 'l1' else traj.tau[i] * traj.w[i] ** p
    bound = float(traj.tau[i]) + _tail_sum(lam, delta_min, float(traj.w[i]), p)
    return observed, bound, bool(observed <= bound * (1.0 + 1e-12))


def step_ratio_tail(traj: 'Trajectory', T: float) -> float:
    """Median of (T - t^j)/(T - t^(j+1)) over the last 50 steps, the final 5 excluded."""
    gap = T - traj.t
    gap = gap[gap > 0.0]
    usable = len(gap) - RATE_EXCLUDE
    if usable < RATE_WINDOW + 1:
        raise DiagnosticsError('step ratio needs more steps before T')
    window = gap[usable - RATE_WINDOW - 1:usable]
    return float(np.median(window[:-1] / window[1:]))


@dataclass
class BlowupReport:
    detected: bool
    first_negative_phi_index: Optional[int]
    T_estimate: Optional[float]
    T_tail_bound: Optional[float]
    rate_constant: Optional[float]
    K: int
    log_case: bool
    C_p: float
    node_classes: List[NodeClass] = field(default_factory=list)
    termination: str = ''
    steps: int = 0
    t_final: float = float('nan')
    w_final: float = float('nan')
    eta: float = float('nan')
    eta_source: str = ''
    halvings_total: int = 0
    halvings_max: int = 0
    phi_printed_at_j0: Optional[float] = None
    growth_slope: Optional[float] = None
    growth_residual: Optional[float] = None
    tau_tail: Optional[dict] = None
    step_ratio: Optional[float] = None
    flags: List[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_node_csv(self, fname) -> None:
        write_csv(fname, NODE_COLUMNS,
                  ((n.node, n.d, n.status, n.fitted_exponent if n.fitted_exponent is not None else '',
                    n.residual if n.residual is not None else '') for n in self.node_classes))


def diagnose(traj: 'Trajectory', window: Optional[Tuple[float, float]] = None) -> BlowupReport:
    """Run every diagnostic on a finished trajectory; failures become report flags."""
    sys = traj.system
    p = traj.config.p
    K, log_case = propagation_depth(p)
    detected, j0 = detect_blowup(traj)
    report = BlowupReport(
        detected=detected, first_negative_phi_index=j0, T_estimate=None, T_tail_bound=None,
        rate_constant=None, K=K, log_case=log_case, C_p=blowup_constant(p),
        termination=getattr(traj.termination, 'value', traj.termination), steps=traj.final_index,
        t_final=float(traj.t[-1]), w_final=float(traj.w[-1]), eta=traj.eta, eta_source=traj.eta_source,
        halvings_total=int(traj.halvings.sum()), halvings_max=int(traj.halvings.max(initial=0)))

    negative = first_negative_phi(traj)
    if negative is not None and not detected:
        report.flags.append('negative_phi_without_blowup')
        logger.warning('Phi_h < 0 at step %d but the run ended with %s', negative, report.termination)
    increases = np.flatnonzero(np.diff(traj.phi) > 1e-10 * np.abs(traj.phi[:-1]) + 1e-12)
    if len(increases):
        report.flags.append('phi_increase')
        logger.warning('Phi_h increased at %d steps (first at %d)', len(increases), increases[0])

    if not detected:
        logger.info('no blow-up detected (%s after %d steps)', report.termination, report.steps)
        return report

    # only available when the state at j0 survived thinning
    try:
        report.phi_printed_at_j0 = phi_h_printed(sys, traj.state(j0), p)
    except KeyError:
        pass

    try:
        T, tail_bound = estimate_blowup_time(traj)
        report.T_estimate = T
        report.T_tail_bound = tail_bound
        if not math.isfinite(tail_bound):
            report.flags.append('nonpositive_increment')
        report.rate_constant = rate_constant(traj, T)
        report.step_ratio = step_ratio_tail(traj, T)
        report.node_classes = classify_blowup_set(sys, traj, T, p, tail_bound=tail_bound,
                                                  t_detect=float(traj.t[j0]), window=window)
    except DiagnosticsError as exc:
        report.flags.append('insufficient_tail')
        logger.warning('%s', exc)
    try:
        report.growth_slope, report.growth_residual = linear_growth_fit(traj)
        observed, bound, ok = tau_tail_check(traj)
        report.tau_tail = {'observed': observed, 'bound': bound, 'passed': ok}
        if not ok:
            report.flags.append('tau_tail_exceeded')
    except DiagnosticsError as exc:
        logger.warning('%s', exc)

    logger.info('blow-up detected at j0=%d: T=%.17g (tail bound %.3e), rate constant %s (C_p=%.5f), K=%d%s',
                j0, report.T_estimate if report.T_estimate is not None else float('nan'),
                report.T_tail_bound if report.T_tail_bound is not None else float('nan'),
                report.rate_constant, report.C_p, K, ' log case' if log_case else '')
    return report
