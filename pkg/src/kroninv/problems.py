"""Benchmark linear systems in Kronecker-structured form.

Two generators: the d-dimensional Poisson equation discretized with 1-D linear
finite elements per direction, and a reaction-diffusion equation on the unit
square with two independent uniform random coefficients, discretized by a
stochastic Galerkin method with orthonormal Legendre polynomials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .operators import KronSumOperator
from .tensor_formats import CanonicalTensor

__all__ = [
    "PoissonSpec",
    "StochasticEllipticSpec",
    "build_poisson",
    "build_stochastic_elliptic",
    "poisson_1d_matrices",
    "bilinear_fem_matrices",
    "legendre_gram_matrices",
    "indicator_load_vector",
    "KAPPA_MEAN",
    "ETA_MEAN",
]

# affine coefficient maps: kappa = 5.5 + 4.5 xi1, eta = 600 + 400 xi2
KAPPA_MEAN, KAPPA_SPREAD = 5.5, 4.5
ETA_MEAN, ETA_SPREAD = 600.0, 400.0


@dataclass
class PoissonSpec:
    d: int = 20
    n: int = 100

    def __post_init__(self):
        assert self.d >= 2 and self.n >= 2


@dataclass
class StochasticEllipticSpec:
    mesh: int = 20          # elements per side of the unit square
    p: int = 10             # polynomial count per random variable (degree p-1)
    load_region: tuple = (0.6, 0.8)

    def __post_init__(self):
        assert self.mesh >= 2 and self.p >= 1
        lo, hi = self.load_region
        assert 0.0 <= lo < hi <= 1.0

    @property
    def n_interior(self):
        return (self.mesh - 1) ** 2


def poisson_1d_matrices(n):
    """Stiffness, mass, and load of 1-D linear elements on n+1 uniform cells.

    Closed forms on (0,1) with zero boundary: h = 1/(n+1),
    K = (1/h) tridiag(-1, 2, -1), M = h tridiag(1/6, 2/3, 1/6), c = h * ones.
    """
    h = 1.0 / (n + 1)
    ones = np.ones(n - 1)
    k = sp.diags([-ones / h, 2.0 * np.ones(n) / h, -ones / h], [-1, 0, 1], format="csr")
    m = sp.diags([h * ones / 6.0, 2.0 * h * np.ones(n) / 3.0, h * ones / 6.0],
                 [-1, 0, 1], format="csr")
    c = h * np.ones(n)
    return k, m, c


def build_poisson(spec: PoissonSpec):
    """Galerkin system of the Poisson equation on (0,1)^d, right side one.

    A = sum_nu (x)_mu (K if mu == nu else M), a rank-d operator sharing the two
    1-D matrices across all terms; b is the rank-one tensor of 1-D loads.
    """
    k, m, c = poisson_1d_matrices(spec.n)
    dims = (spec.n,) * spec.d
    terms = [tuple(k if mu == nu else m for mu in range(spec.d))
             for nu in range(spec.d)]
    a = KronSumOperator(dims, terms)
    b = CanonicalTensor.rank_one([c] * spec.d)
    return a, b


# ---------------------------------------------------------------------------
# stochastic elliptic problem
# ---------------------------------------------------------------------------

def bilinear_fem_matrices(mesh):
    """Q1 stiffness/mass on a uniform mesh of the unit square, interior nodes.

    Node (i, j), i, j in 1..mesh-1 at (i h, j h), indexed i-fastest.
    """
    h = 1.0 / mesh
    # local matrices on an h x h square, nodes (0,0),(1,0),(1,1),(0,1)
    ke = np.array([[4, -1, -2, -1],
                   [-1, 4, -1, -2],
                   [-2, -1, 4, -1],
                   [-1, -2, -1, 4]], dtype=float) / 6.0
    me = np.array([[4, 2, 1, 2],
                   [2, 4, 2, 1],
                   [1, 2, 4, 2],
                   [2, 1, 2, 4]], dtype=float) * h * h / 36.0
    nin = mesh - 1

    def node_index(i, j):
        if 1 <= i <= nin and 1 <= j <= nin:
            return (j - 1) * nin + (i - 1)
        return -1

    rows, cols, kv, mv = [], [], [], []
    for ex in range(mesh):
        for ey in range(mesh):
            nodes = [(ex, ey), (ex + 1, ey), (ex + 1, ey + 1), (ex, ey + 1)]
            idx = [node_index(i, j) for i, j in nodes]
            for a in range(4):
                if idx[a] < 0:
                    continue
                for b in range(4):
                    if idx[b] < 0:
                        continue
                    rows.append(idx[a])
                    cols.append(idx[b])
                    kv.append(ke[a, b])
                    mv.append(me[a, b])
    n = nin * nin
    k = sp.csr_matrix((kv, (rows, cols)), shape=(n, n))
    m = sp.csr_matrix((mv, (rows, cols)), shape=(n, n))
    k.sum_duplicates()
    m.sum_duplicates()
    return k, m


def _hat_segment_integral(x0, h, a, b, rising):
    """Integral over [a, b] of the rising/falling linear shape on [x0, x0+h]."""
    a, b = max(a, x0), min(b, x0 + h)
    if b <= a:
        return 0.0
    # integral of (x - x0)/h resp. 1 - (x - x0)/h
    t1, t2 = (a - x0) / h, (b - x0) / h
    up = 0.5 * h * (t2 ** 2 - t1 ** 2)
    return up if rising else (b - a) - up


def indicator_load_vector(mesh, region):
    """Exact integrals of the Q1 basis over region^2 (interior nodes only)."""
    h = 1.0 / mesh
    lo, hi = region
    nin = mesh - 1
    f = np.zeros(nin * nin)
    for ex in range(mesh):
        x0 = ex * h
        ix = [_hat_segment_integral(x0, h, lo, hi, rising=True),
              _hat_segment_integral(x0, h, lo, hi, rising=False)]
        if ix[0] == 0.0 and ix[1] == 0.0:
            continue
        for ey in range(mesh):
            y0 = ey * h
            iy = [_hat_segment_integral(y0, h, lo, hi, rising=True),
                  _hat_segment_integral(y0, h, lo, hi, rising=False)]
            if iy[0] == 0.0 and iy[1] == 0.0:
                continue
            # local node -> (x-shape, y-shape): rising means the node sits at
            # the right/top end of the segment
            locs = [((ex, ey), ix[1] * iy[1]), ((ex + 1, ey), ix[0] * iy[1]),
                    ((ex + 1, ey + 1), ix[0] * iy[0]), ((ex, ey + 1), ix[1] * iy[0])]
            for (i, j), val in locs:
                if 1 <= i <= nin and 1 <= j <= nin:
                    f[(j - 1) * nin + (i - 1)] += val
    return f


def legendre_gram_matrices(p):
    """Gram and coordinate-multiplication matrices of orthonormal Legendre
    polynomials under the uniform probability measure on (-1, 1).

    Normalization makes the Gram the identity; multiplication by the variable
    is symmetric tridiagonal with zero diagonal and off-diagonal entries
    (i+1) / sqrt((2i+1)(2i+3)).
    """
    g0 = np.eye(p)
    off = np.array([(i + 1) / np.sqrt((2 * i + 1) * (2 * i + 3)) for i in range(p - 1)])
    g1 = np.diag(off, 1) + np.diag(off, -1)
    return g0, g1


def build_stochastic_elliptic(spec: StochasticEllipticSpec):
    """Rank-2 Galerkin operator of -kappa Lap(v) + eta v = 1_{region} and its
    rank-one right-hand side, on FEM x Legendre x Legendre bases."""
    k_x, m_x = bilinear_fem_matrices(spec.mesh)
    g0, g1 = legendre_gram_matrices(spec.p)
    g_kappa = KAPPA_MEAN * g0 + KAPPA_SPREAD * g1
    g_eta = ETA_MEAN * g0 + ETA_SPREAD * g1
    n = spec.n_interior
    dims = (n, spec.p, spec.p)
    a = KronSumOperator(dims, [(k_x, g_kappa, g0), (m_x, g0, g_eta)])
    f_x = indicator_load_vector(spec.mesh, spec.load_region)
    g_load = np.zeros(spec.p)
    g_load[0] = 1.0  # moments of the constant one in the orthonormal basis
    b = CanonicalTensor.rank_one([f_x, g_load, g_load])
    return a, b
