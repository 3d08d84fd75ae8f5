"""Method-of-lines spatial discretizations satisfying (P1)-(P3).

Every builder returns a :class:`DiscreteSystem` for the interior nodes of the
domain; boundary nodes (homogeneous Dirichlet) are eliminated.  Nodes are
ordered lexicographically by their coordinates.
"""
from dataclasses import dataclass, field
from itertools import product
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from errors import DiscretizationError

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-12
PROFILE_FAMILIES = ('sine', 'bump', 'constant')


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    """Diagonal mass matrix, sparse symmetric stiffness matrix and node set.

    ``stiffness`` is kept in canonical CSR form: each row is a list of
    (column, value) pairs with sorted column indices and no duplicates.
    """
    dim: int
    nodes: np.ndarray
    mass: np.ndarray
    stiffness: sp.csr_matrix
    h: float = float('nan')
    label: str = ''
    _cache: Dict[str, object] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(len(self.mass), -1)
        nodes.setflags(write=False)
        object.__setattr__(self, 'nodes', nodes)
        object.__setattr__(self, 'mass', _frozen(self.mass))
        stiffness = sp.csr_matrix(self.stiffness, dtype=float, copy=True)
        stiffness.sum_duplicates()
        stiffness.sort_indices()
        n = len(self.mass)
        if stiffness.shape != (n, n):
            raise ValueError(f'stiffness shape {stiffness.shape} does not match {n} nodes')
        if nodes.shape[1] != self.dim:
            raise ValueError(f'nodes have {nodes.shape[1]} coordinates, expected {self.dim}')
        object.__setattr__(self, 'stiffness', stiffness)

    @property
    def n(self) -> int:
        return len(self.mass)

    def rows(self) -> List[List[Tuple[int, float]]]:
        A = self.stiffness
        return [list(zip(A.indices[A.indptr[i]:A.indptr[i + 1]].tolist(),
                         A.data[A.indptr[i]:A.indptr[i + 1]].tolist()))
                for i in range(self.n)]

    def diagonal(self) -> np.ndarray:
        if 'diag' not in self._cache:
            self._cache['diag'] = _frozen(self.stiffness.diagonal())
        return self._cache['diag']

    def dense_stiffness(self) -> np.ndarray:
        if 'dense' not in self._cache:
            self._cache['dense'] = _frozen(self.stiffness.toarray())
        return self._cache['dense']

    def adjacency(self) -> sp.csr_matrix:
        """Graph of the nodes: i ~ j iff a_ij != 0, i != j."""
        if 'adjacency' not in self._cache:
            A = self.stiffness.tocoo()
            keep = (A.row != A.col) & (A.data != 0.0)
            graph = sp.csr_matrix((np.ones(int(keep.sum())), (A.row[keep], A.col[keep])),
                                  shape=A.shape)
            self._cache['adjacency'] = graph
        return self._cache['adjacency']

    def comparison_bound(self) -> float:
        """min_i m_i / a_ii, the explicit-scheme step bound of the comparison lemma."""
        return float(np.min(self.mass / self.diagonal()))

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.stiffness @ u

    def triplets(self) -> List[Tuple[int, int, float]]:
        """Upper-triangular (i, j, value) triplets, i <= j."""
        A = sp.triu(self.stiffness).tocoo()
        order = np.lexsort((A.col, A.row))
        return [(int(A.row[k]), int(A.col[k]), float(A.data[k])) for k in order]

    def replace(self, mass=None, stiffness=None, label=None) -> 'DiscreteSystem':
        return DiscreteSystem(dim=self.dim, nodes=self.nodes,
                              mass=self.mass if mass is None else mass,
                              stiffness=self.stiffness if stiffness is None else stiffness,
                              h=self.h, label=self.label if label is None else label)

    def to_dict(self) -> dict:
        return {
            'dim': self.dim,
            'h': self.h,
            'label': self.label,
            'nodes': self.nodes.tolist(),
            'mass': self.mass.tolist(),
            'stiffness_triplets': [list(t) for t in self.triplets()],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'DiscreteSystem':
        n = len(data['mass'])
        rows, cols, vals = [], [], []
        for i, j, v in data['stiffness_triplets']:
            rows.append(int(i))
            cols.append(int(j))
            vals.append(float(v))
            if i != j:
                rows.append(int(j))
                cols.append(int(i))
                vals.append(float(v))
        A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return cls(dim=int(data['dim']), nodes=data['nodes'], mass=data['mass'], stiffness=A,
                   h=float(data.get('h', float('nan'))), label=data.get('label', ''))


@dataclass(frozen=True)
class InitialData:
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise DiscretizationError('initial data must be a finite vector')
        if np.any(values <= 0.0):
            raise DiscretizationError(
                f'initial data must be positive at every node, min={values.min()!r}')
        object.__setattr__(self, 'values', values)


@dataclass
class PropertyReport:
    p1: bool
    p2: bool
    p3: bool
    symmetric: bool
    semidefinite: bool
    messages: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.p1 and self.p2 and self.p3 and self.symmetric

    def to_dict(self) -> dict:
        return {'P1': self.p1, 'P2': self.p2, 'P3': self.p3, 'symmetric': self.symmetric,
                'semidefinite': self.semidefinite, 'passed': self.passed,
                'messages': list(self.messages)}


def _row_sums(A: sp.csr_matrix) -> np.ndarray:
    return np.asarray(A.sum(axis=1)).ravel()


def _enforce_row_sums(A: sp.csr_matrix) -> sp.csr_matrix:
    """Bump diagonals by a few ulps where rounding made a zero row sum negative."""
    for _ in range(16):
        bad = np.flatnonzero(_row_sums(A) < 0.0)
        if len(bad) == 0:
            return A
        A = A.tolil()
        for i in bad:
            A[i, i] = np.nextafter(A[i, i], np.inf)
        A = A.tocsr()
    return A


def build_fd_cube(d: int, n_per_side: int) -> DiscreteSystem:
    """Finite differences on (0,1)^d with the (2d+1)-point stencil scaled by h^d."""
    if d not in (1, 2, 3):
        raise DiscretizationError(f'unsupported dimension d={d}; expected 1, 2 or 3')
    if int(n_per_side) != n_per_side or n_per_side < 1:
        raise DiscretizationError(f'n_per_side must be a positive integer, got {n_per_side!r}')
    n_per_side = int(n_per_side)
    h = 1.0 / (n_per_side + 1)
    diag = 2 * d * h ** (d - 2)
    off = -(h ** (d - 2))

    # itertools.product yields lexicographic order of the grid indices
    grid = list(product(range(1, n_per_side + 1), repeat=d))
    index = {g: k for k, g in enumerate(grid)}
    rows, cols, vals = [], [], []
    for k, g in enumerate(grid):
        rows.append(k)
        cols.append(k)
        vals.append(diag)
        for axis in range(d):
            for step in (-1, 1):
                nb = list(g)
                nb[axis] += step
                l = index.get(tuple(nb))
                if l is not None:
                    rows.append(k)
                    cols.append(l)
                    vals.append(off)
    n = len(grid)
    A = _enforce_row_sums(sp.csr_matrix((vals, (rows, cols)), shape=(n, n)))
    nodes = np.array(grid, dtype=float) * h
    mass = np.full(n, h ** d)
    label = f'fd_cube(d={d}, n={n_per_side})' if d > 1 else f'fd_interval({n_per_side})'
    return DiscreteSystem(dim=d, nodes=nodes, mass=mass, stiffness=A, h=h, label=label)


def build_fd_interval(n_interior: int) -> DiscreteSystem:
    """Three-point finite differences on (0,1); the d = 1 case of :func:`build_fd_cube`."""
    if int(n_interior) != n_interior or n_interior < 1:
        raise DiscretizationError(f'n_interior must be a positive integer, got {n_interior!r}')
    return build_fd_cube(1, n_interior)


def build_fem_interval(breakpoints: Sequence[float]) -> DiscreteSystem:
    """P1 finite elements on a partition of [0,1] with lumped mass."""
    x = np.asarray(breakpoints, dtype=float)
    if x.ndim != 1 or len(x) < 3:
        raise DiscretizationError('a partition needs at least one interior node')
    if x[0] != 0.0 or x[-1] != 1.0:
        raise DiscretizationError(f'partition must start at 0 and end at 1, got [{x[0]}, {x[-1]}]')
    lengths = np.diff(x)
    if np.any(lengths <= 0.0):
        raise DiscretizationError('partition must be strictly increasing')

    n = len(x) - 2
    mass = 0.5 * (lengths[:-1] + lengths[1:])
    inv = 1.0 / lengths
    diag = inv[:-1] + inv[1:]
    off = -inv[1:-1]
    idx = np.arange(n)
    rows = np.concatenate([idx, idx[:-1], idx[1:]])
    cols = np.concatenate([idx, idx[1:], idx[:-1]])
    A = _enforce_row_sums(sp.csr_matrix((np.concatenate([diag, off, off]), (rows, cols)), shape=(n, n)))
    return DiscreteSystem(dim=1, nodes=x[1:-1].reshape(-1, 1), mass=mass, stiffness=A,
                          h=float(lengths.max()), label=f'fem_interval({n})')


def build_system(spec: dict) -> DiscreteSystem:
    """Build from a mesh spec: ``{'builder': 'fd_interval'|'fd_cube'|'fem_interval', ...}``."""
    builder = spec.get('builder')
    if builder == 'fd_interval':
        return build_fd_interval(spec['n'])
    if builder == 'fd_cube':
        return build_fd_cube(spec.get('d', 1), spec['n'])
    if builder == 'fem_interval':
        if 'breakpoints' in spec:
            return build_fem_interval(spec['breakpoints'])
        return build_fem_interval(np.linspace(0.0, 1.0, int(spec['n']) + 2))
    raise DiscretizationError(f'unknown mesh builder {builder!r}')


def validate_properties(sys: DiscreteSystem) -> PropertyReport:
    messages = []
    mass = np.asarray(sys.mass)
    p1 = bool(np.all(mass > 0.0))
    if not p1:
        messages.append(f'P1: nonpositive mass at nodes {np.flatnonzero(mass <= 0.0).tolist()}')

    A = sys.stiffness.tocoo()
    offdiag = A.row != A.col
    diag = sys.stiffness.diagonal()
    bad_off = offdiag & (A.data > 0.0)
    p2 = bool(np.all(diag > 0.0)) and not bool(np.any(bad_off))
    if not p2:
        if np.any(diag <= 0.0):
            messages.append(f'P2: nonpositive diagonal at rows {np.flatnonzero(diag <= 0.0).tolist()}')
        if np.any(bad_off):
            pairs = list(zip(A.row[bad_off].tolist(), A.col[bad_off].tolist()))
            messages.append(f'P2: positive off-diagonal entries at {pairs[:10]}')

    row_sums = _row_sums(sys.stiffness)
    p3 = bool(np.all(row_sums >= 0.0))
    if not p3:
        messages.append(f'P3: negative row sums at rows {np.flatnonzero(row_sums < 0.0).tolist()}')

    At = sys.stiffness.transpose().tocsr()
    At.sort_indices()
    S = sys.stiffness
    symmetric = (S.shape == At.shape and np.array_equal(S.indptr, At.indptr)
                 and np.array_equal(S.indices, At.indices))
    if symmetric:
        scale = np.maximum(np.abs(S.data), np.abs(At.data))
        symmetric = bool(np.all(np.abs(S.data - At.data) <= SYMMETRY_RTOL * scale))
    if not symmetric:
        messages.append('symmetry: stored entries do not match their transposes')

    # random samples of <AU,U> >= 0; fixed seed keeps the report reproducible
    rng = np.random.default_rng(0)
    samples = rng.standard_normal((16, sys.n))
    quad = np.einsum('ij,ij->i', np.asarray(sys.stiffness @ samples.T).T, samples)
    semidefinite = bool(np.all(quad >= -1e-12 * np.abs(quad).max(initial=1.0)))

    return PropertyReport(p1=p1, p2=p2, p3=p3, symmetric=bool(symmetric),
                          semidefinite=semidefinite, messages=messages)


@dataclass(frozen=True)
class Profile:
    """Named initial-data family: ``sine``, ``bump`` or ``constant``."""
    family: str = 'sine'
    amplitude: float = 1.0
    sharpness: float = 1.0

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> 'Profile':
        data = dict(data or {})
        return cls(family=data.get('family', 'sine'),
                   amplitude=float(data.get('amplitude', 1.0)),
                   sharpness=float(data.get('sharpness', 1.0)))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.family == 'sine':
            shape = np.prod(np.sin(math.pi * x), axis=1)
        elif self.family == 'bump':
            # product of 1D bumps exp(s * (1 - 1/(1 - r^2))), r = 2x - 1, peak 1 at the center
            r2 = (2.0 * x - 1.0) ** 2
            with np.errstate(divide='ignore', over='ignore'):
                shape = np.prod(np.where(r2 < 1.0, np.exp(self.sharpness * (1.0 - 1.0 / (1.0 - r2))), 0.0),
                                axis=1)
        elif self.family == 'constant':
            shape = np.ones(len(x))
        else:
            raise DiscretizationError(
                f'unknown profile family {self.family!r}; expected one of {PROFILE_FAMILIES}')
        return self.amplitude * shape


def sample_initial(sys: DiscreteSystem, profile: Profile) -> InitialData:
    values = profile(sys.nodes)
    if np.any(~(values > 0.0)):
        bad = np.flatnonzero(~(values > 0.0))
        raise DiscretizationError(
            f'profile {profile.family} (amplitude {profile.amplitude}) is not positive '
            f'at nodes {bad[:10].tolist()}')
    return InitialData(values=values)
