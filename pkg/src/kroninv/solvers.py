"""Truncated low-rank Krylov solvers with Kronecker-structured preconditioners.

``pcg_lowrank`` runs preconditioned conjugate gradients with hierarchical
compression of every iterate; ``gmres_lowrank`` runs restart-free left-
preconditioned GMRES with the Arnoldi basis held as Tucker tensors of fixed
rank.  Setting ``truncate=False`` in the config disables compression (up to a
1e-14 numerical-zero drop), which reproduces the classical dense iterations on
small problems.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg

from .greedy import GreedyState
from .operators import KronSumOperator, apply_operator, apply_operator_term
from .rank_one import ProjectedPrev, SparsityPattern, _adapt_and_solve
from .problems import (ETA_MEAN, KAPPA_MEAN, StochasticEllipticSpec,
                       bilinear_fem_matrices, legendre_gram_matrices)
from .tensor_formats import (CanonicalTensor, DimensionTree, HTTensor,
                             TuckerTensor, densify, hooi_refine, hosvd,
                             ht_add, ht_from_canonical, ht_identity_leaves,
                             ht_scale, ht_truncate, inner, norm)

__all__ = [
    "SolverConfig",
    "SolveTrace",
    "BreakdownError",
    "SizeExceededError",
    "pcg_lowrank",
    "gmres_lowrank",
    "reference_solution",
    "mean_based_preconditioner",
    "as_preconditioner",
]


class BreakdownError(Exception):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class SizeExceededError(Exception):
    pass


@dataclass
class SolverConfig:
    method: str = "pcg"               # "pcg" | "gmres"
    max_iterations: int = 100
    residual_tolerance: float = 0.0   # 0 disables the tolerance stop (fixed budget)
    ht_rank: int = 15                 # PCG iterate rank cap, every tree node
    tucker_rank: int = 10             # GMRES iterate rank (m, m, m)
    hooi_sweeps: int = 2
    internal_rank_cap: int = None     # intermediate sums; default 2x the iterate rank
    recompute_residual_every: int = 10
    stagnation_window: int = 0        # 0 disables stagnation detection
    stagnation_improvement: float = 0.01
    truncate: bool = True

    def __post_init__(self):
        assert self.method in ("pcg", "gmres")
        assert self.max_iterations >= 1


@dataclass
class SolveTrace:
    iterations: list = field(default_factory=list)
    relative_residual: list = field(default_factory=list)
    epsilon_solution: list = field(default_factory=list)
    epsilon_preconditioned: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    breakdown: str = None

    def append(self, k, relres, eps_sol, eps_pre, wall):
        self.iterations.append(k)
        self.relative_residual.append(relres)
        self.epsilon_solution.append(eps_sol)
        self.epsilon_preconditioned.append(eps_pre)
        self.wall_ms.append(wall)

    def rows(self):
        for i, k in enumerate(self.iterations):
            yield {"iteration": k,
                   "relative_residual": self.relative_residual[i],
                   "epsilon_solution": self.epsilon_solution[i],
                   "epsilon_preconditioned": self.epsilon_preconditioned[i],
                   "wall_ms": self.wall_ms[i]}


# ---------------------------------------------------------------------------
# preconditioner adapters
# ---------------------------------------------------------------------------

class _KronPrecond:
    def __init__(self, op: KronSumOperator):
        self.op = op
        self.dims = op.dims

    def apply_tucker(self, x: TuckerTensor):
        return apply_operator(self.op, x)

    def apply_ht(self, x: HTTensor, accumulate):
        return accumulate(apply_operator_term(self.op, i, x) for i in range(self.op.rank))


class _ProjectedPrecond:
    """Bases-plus-core preconditioner; cores may be dense or hierarchical."""

    def __init__(self, bases, core, dims):
        self.bases = bases
        self.core = core
        self.dims = dims

    def apply_tucker(self, x: TuckerTensor):
        core = densify(self.core) if isinstance(self.core, HTTensor) else self.core
        factors = []
        for mu, mats in enumerate(self.bases):
            cols = [m @ x.factors[mu] for m in mats]
            factors.append(np.concatenate(cols, axis=1))  # basis index slow
        d = len(self.dims)
        big = np.multiply.outer(core, x.core)
        # interleave (i_1..i_d, a_1..a_d) -> ((i_1 a_1), ..., (i_d a_d))
        perm = []
        for mu in range(d):
            perm += [mu, d + mu]
        big = big.transpose(perm)
        big = big.reshape([core.shape[mu] * x.core.shape[mu] for mu in range(d)])
        return TuckerTensor(big, factors)

    def apply_ht(self, x: HTTensor, accumulate):
        assert isinstance(self.core, HTTensor), "hierarchical core required"
        core = ht_identity_leaves(self.core)
        tree = x.tree
        assert core.tree == tree
        frames = []
        for mu, mats in enumerate(self.bases):
            cols = [m @ x.leaf_frames[mu] for m in mats]
            frames.append(np.concatenate(cols, axis=1))
        transfer = {}
        for t in tree.interior_nodes():
            bc, bx = core.transfer[t], x.transfer[t]
            prod = np.einsum("ijk,abc->iajbkc", bc, bx)
            transfer[t] = prod.reshape(bc.shape[0] * bx.shape[0],
                                       bc.shape[1] * bx.shape[1],
                                       bc.shape[2] * bx.shape[2])
        return HTTensor(tree, frames, transfer)


def as_preconditioner(p, dims):
    """Adapt a preconditioner-like object for the solvers.

    Accepts a KronSumOperator (canonical form), a ProjectedPrev, a GreedyState,
    or None (identity).
    """
    if p is None:
        return _KronPrecond(KronSumOperator.identity(dims))
    if isinstance(p, GreedyState):
        p = p.as_prev()
    if isinstance(p, ProjectedPrev):
        return _ProjectedPrecond(p.bases, p.core, dims)
    if isinstance(p, KronSumOperator):
        return _KronPrecond(p)
    raise TypeError(type(p))


# ---------------------------------------------------------------------------
# PCG with hierarchical iterates
# ---------------------------------------------------------------------------

def pcg_lowrank(a: KronSumOperator, b, precond, cfg: SolverConfig,
                reference=None, tree=None):
    """Preconditioned conjugate gradients; iterates compressed after every
    update of u, r, p, and A p.  Raises BreakdownError (with the partial trace
    attached) when truncation destroys positive definiteness."""
    dims = a.dims
    tree = tree or DimensionTree.balanced(len(dims))
    p_op = as_preconditioner(precond, dims)
    cap = cfg.ht_rank if cfg.truncate else 10**9
    internal = cfg.internal_rank_cap or 2 * cfg.ht_rank if cfg.truncate else 10**9

    def trunc(x, rank=None):
        return ht_truncate(x, rank or cap)

    def accumulate(parts):
        acc = None
        for y in parts:
            acc = y if acc is None else ht_add(acc, y)
            if max(acc.ranks.values()) > internal:
                acc = trunc(acc, internal)
        return acc

    def apply_a(x):
        return trunc(accumulate(apply_operator_term(a, i, x) for i in range(a.rank)))

    def apply_p(x):
        return trunc(p_op.apply_ht(x, accumulate))

    if isinstance(b, CanonicalTensor):
        b_ht = ht_from_canonical(tree, b)
    else:
        b_ht = b
    norm_b = norm(b_ht)
    trace = SolveTrace()

    u = ht_scale(b_ht, 0.0)
    r = b_ht
    z = apply_p(r)
    p_dir = z
    rz = inner(r, z)
    t0 = time.perf_counter()
    for k in range(1, cfg.max_iterations + 1):
        ap = apply_a(p_dir)
        pap = inner(p_dir, ap)
        if pap <= 0.0:
            trace.breakdown = f"p^T A p = {pap:.3e} at iteration {k}"
            raise BreakdownError(trace.breakdown, trace)
        alpha = rz / pap
        u = trunc(ht_add(u, ht_scale(p_dir, alpha)))
        if cfg.recompute_residual_every and k % cfg.recompute_residual_every == 0:
            r = trunc(accumulate([b_ht, ht_scale(apply_a(u), -1.0)]))
        else:
            r = trunc(ht_add(r, ht_scale(ap, -alpha)))
        relres = norm(r) / norm_b
        eps_sol = None
        if reference is not None:
            eps_sol = _relative_error(u, reference)
        trace.append(k, relres, eps_sol, None, 1000 * (time.perf_counter() - t0))
        if cfg.residual_tolerance and relres <= cfg.residual_tolerance:
            break
        if _stagnated(trace.relative_residual, cfg):
            break
        z = apply_p(r)
        rz_new = inner(r, z)
        beta = rz_new / rz
        rz = rz_new
        p_dir = trunc(ht_add(z, ht_scale(p_dir, beta)))
    return u, trace


def _relative_error(u, reference):
    if isinstance(reference, np.ndarray):
        nref = float(np.linalg.norm(reference))
        err_sq = inner(u, u) - 2.0 * inner(u, reference) + nref ** 2
        return float(np.sqrt(max(err_sq, 0.0))) / nref
    diff = inner(u, u) - 2.0 * inner(u, reference) + inner(reference, reference)
    return float(np.sqrt(max(diff, 0.0))) / norm(reference)


def _stagnated(history, cfg):
    w = cfg.stagnation_window
    if not w or len(history) <= w:
        return False
    best_now = min(history)
    best_then = min(history[:-w])
    return best_now > (1.0 - cfg.stagnation_improvement) * best_then


# ---------------------------------------------------------------------------
# GMRES with Tucker iterates
# ---------------------------------------------------------------------------

def _trunc_tucker(x: TuckerTensor, rank, sweeps):
    ranks = tuple(min(rank, n) for n in x.dims)
    if all(r >= c for r, c in zip(ranks, x.ranks)):
        return x
    return hooi_refine(x, ranks, sweeps)


def gmres_lowrank(a: KronSumOperator, b, precond, cfg: SolverConfig,
                  reference=None):
    """Left-preconditioned GMRES without restart, Tucker-compressed basis.

    Every Arnoldi vector is truncated to rank (m, m, m) by alternating
    refinement; orthogonalization is modified Gram-Schmidt with one
    reorthogonalization pass, all inner products in low-rank arithmetic.
    A vanishing new direction is treated as convergence (happy breakdown).
    """
    dims = a.dims
    p_op = as_preconditioner(precond, dims)
    m_rank = cfg.tucker_rank if cfg.truncate else max(dims)
    internal = cfg.internal_rank_cap or 3 * m_rank

    def trunc(x, rank=m_rank):
        return _trunc_tucker(x, rank, cfg.hooi_sweeps)

    def tucker_axpy(x, alpha, y):
        # x + alpha * y without truncation (ranks add)
        factors = [np.concatenate([fx, fy], axis=1)
                   for fx, fy in zip(x.factors, y.factors)]
        rx, ry = x.ranks, y.ranks
        core = np.zeros(tuple(i + j for i, j in zip(rx, ry)))
        core[tuple(slice(0, i) for i in rx)] = x.core
        core[tuple(slice(i, None) for i in rx)] = alpha * y.core
        return TuckerTensor(core, factors)

    if isinstance(b, CanonicalTensor):
        core = np.zeros((b.rank,) * len(dims))
        core[tuple(np.arange(b.rank) for _ in dims)] = b.weights
        b_t = TuckerTensor(core, list(b.factors))
    else:
        b_t = b
    pb_exact_norm = norm(p_op.apply_tucker(b_t))
    pb = trunc(p_op.apply_tucker(b_t))
    beta = norm(pb)
    basis = [TuckerTensor(pb.core / beta, pb.factors)]
    norm_b = norm(b_t)
    h = np.zeros((cfg.max_iterations + 1, cfg.max_iterations))
    g = np.zeros(cfg.max_iterations + 1)
    g[0] = beta
    trace = SolveTrace()
    t0 = time.perf_counter()
    u = None
    n_iter = 0

    for j in range(cfg.max_iterations):
        w = trunc(apply_operator(a, basis[j]))
        w = trunc(p_op.apply_tucker(w))
        for _pass in range(2):
            for i in range(j + 1):
                hij = inner(basis[i], w)
                h[i, j] += hij
                w = tucker_axpy(w, -hij, basis[i])
                if max(w.ranks) > internal:
                    w = trunc(w, internal)
        h[j + 1, j] = norm(w)
        n_iter = j + 1
        y, *_ = np.linalg.lstsq(h[:j + 2, :j + 1], g[:j + 2], rcond=None)
        u = _assemble_tucker_combination(basis, y, internal, trunc)
        u = trunc(u)
        relres = _residual_norm(a, b_t, u) / norm_b
        eps_sol = _relative_error_tucker(u, reference) if reference is not None else None
        eps_pre = _preconditioned_residual(a, b_t, u, p_op, pb_exact_norm)
        trace.append(j + 1, relres, eps_sol, eps_pre,
                     1000 * (time.perf_counter() - t0))
        if cfg.residual_tolerance and relres <= cfg.residual_tolerance:
            break
        if _stagnated(trace.relative_residual, cfg):
            break
        if h[j + 1, j] <= 1e-14 * beta:
            break  # happy breakdown: treated as convergence
        if j + 1 < cfg.max_iterations:
            basis.append(trunc(TuckerTensor(w.core / h[j + 1, j], w.factors)))
    return u, trace


def _assemble_tucker_combination(basis, y, internal, trunc):
    acc = None
    for coeff, v in zip(y, basis):
        term = TuckerTensor(coeff * v.core, v.factors)
        if acc is None:
            acc = term
        else:
            acc = _tucker_add(acc, term)
            if max(acc.ranks) > internal:
                acc = trunc(acc, internal)
    return acc


def _tucker_add(x, y):
    factors = [np.concatenate([fx, fy], axis=1) for fx, fy in zip(x.factors, y.factors)]
    core = np.zeros(tuple(i + j for i, j in zip(x.ranks, y.ranks)))
    core[tuple(slice(0, i) for i in x.ranks)] = x.core
    core[tuple(slice(i, None) for i in x.ranks)] = y.core
    return TuckerTensor(core, factors)


def _residual_norm(a, b_t, u):
    au = apply_operator(a, u)
    val = inner(b_t, b_t) - 2.0 * inner(b_t, au) + inner(au, au)
    return float(np.sqrt(max(val, 0.0)))


def _relative_error_tucker(u, reference):
    if isinstance(reference, np.ndarray):
        du = densify(u) - reference
        return float(np.linalg.norm(du) / np.linalg.norm(reference))
    return _relative_error(u, reference)


def _preconditioned_residual(a, b_t, u, p_op, pb_norm):
    resid = _tucker_add(b_t, _scale_tucker(apply_operator(a, u), -1.0))
    pres = p_op.apply_tucker(resid)
    return float(norm(pres) / max(pb_norm, 1e-300))


def _scale_tucker(x, s):
    return TuckerTensor(s * x.core, x.factors)


# ---------------------------------------------------------------------------
# reference solutions and the mean-based preconditioner
# ---------------------------------------------------------------------------

def reference_solution(a: KronSumOperator, b, tol=1e-12, size_cap=200_000):
    """Direct solve of the assembled system (sparse LU); dense-verifiable sizes.

    Returns the solution as a full ndarray of shape ``a.dims``; raises
    SizeExceededError beyond ``size_cap`` unknowns.
    """
    n = int(np.prod(a.dims, dtype=object))
    if n > size_cap:
        raise SizeExceededError(f"{n} unknowns exceed the direct-solve cap {size_cap}")
    mat = None
    for w, term in zip(a.weights, a.terms):
        block = sp.identity(1, format="csr")
        for f in term:
            fs = f if sp.issparse(f) else sp.csr_matrix(f)
            block = sp.kron(fs, block, format="csr")
        mat = w * block if mat is None else mat + w * block
    rhs = densify(b).reshape(-1, order="F")
    if n <= 1500:
        dense = np.asarray(mat.todense())
        solve = lambda v: np.linalg.solve(dense, v)
    else:
        lu = sp.linalg.splu(mat.tocsc())
        solve = lu.solve
    x = solve(rhs)
    resid = np.linalg.norm(mat @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if resid > tol:
        x = x + solve(rhs - mat @ x)  # one round of iterative refinement
        resid = np.linalg.norm(mat @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        assert resid <= 10 * tol, f"direct solve residual {resid:.2e}"
    return x.reshape(a.dims, order="F")


def mean_based_preconditioner(spec: StochasticEllipticSpec, fill_gamma=0.3,
                              pattern_iterations=None):
    """Approximate inverse of the operator frozen at the mean parameters.

    The mean operator is rank one, (kappa_mean K + eta_mean M) x I x I; its
    spatial factor is inverted exactly for fill_gamma >= 1 and by the adaptive
    sparse approximate inverse otherwise.
    """
    k_x, m_x = bilinear_fem_matrices(spec.mesh)
    a1 = np.asarray((KAPPA_MEAN * k_x + ETA_MEAN * m_x).todense())
    n = a1.shape[0]
    if fill_gamma >= 1.0:
        w = np.linalg.solve(a1, np.eye(n))
    else:
        pattern = SparsityPattern.diagonal(n)
        _, w_sp = _adapt_and_solve(a1, np.eye(n), pattern, fill_gamma,
                                   pattern_iterations)
        w = w_sp
    eye_p = np.eye(spec.p)
    return KronSumOperator((n, spec.p, spec.p), [(w, eye_p, eye_p)])
