"""Best rank-one correction of an approximate inverse, by alternating minimization.

One correction step searches W = W^1 x ... x W^d minimizing the star-norm
distance to A^{-1} - P.  Each mode solve is the linear problem

    P^lam( W^lam Q^lam ) = P^lam( H^lam )

where Q^lam collects the operator C = AB restricted to mode lam and H^lam
collects the factored residual R(P) = B - PAB; P^lam is the orthogonal
projector onto the constrained matrix subspace of that mode (none, symmetric,
skew-symmetric, or a sparsity pattern).  The objective is evaluated through its
expanded form, so A^{-1} itself is never needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .operators import (KronSumOperator, StarInnerProduct, factor_trace_inner)
from .tensor_formats import HTTensor, ht_contract_vectors_except_batched

__all__ = [
    "ConstraintKind",
    "ModeConstraint",
    "PropertyConstraint",
    "SparsityPattern",
    "CorrectionConfig",
    "CorrectionResult",
    "ProjectedPrev",
    "SingularModeError",
    "SylvesterDegenerateError",
    "ZeroCorrectionError",
    "assemble_Q_lambda",
    "assemble_H_lambda",
    "solve_mode",
    "solve_sparse_rows",
    "adapt_pattern",
    "correct_rank_one",
]


class SingularModeError(Exception):
    """Q^lam numerically singular; the caller restarts from a fresh init."""


class SylvesterDegenerateError(Exception):
    """Spectra of the Sylvester pencil overlap; same restart contract."""


class ZeroCorrectionError(Exception):
    """Optimal correction is ~0: the residual is orthogonal to rank-one terms."""


class ConstraintKind(Enum):
    NONE = "none"
    SYMMETRIC = "symmetric"
    SKEW = "skew"
    SPARSE = "sparse"


@dataclass
class ModeConstraint:
    kind: ConstraintKind = ConstraintKind.NONE
    fill_gamma: float = 1.0          # sparse: max fill fraction of n^2
    pattern_iterations: int = None   # sparse: adaptation steps, default fills the budget
    initial_pattern: object = "diagonal"  # "diagonal" or explicit list of index sets

    def __post_init__(self):
        if self.kind == ConstraintKind.SPARSE:
            assert 0.0 < self.fill_gamma <= 1.0


class PropertyConstraint:
    """Per-dimension constraint descriptors for a d-way correction."""

    def __init__(self, modes):
        self.modes = list(modes)
        for m in self.modes:
            assert isinstance(m, ModeConstraint)

    @staticmethod
    def none(d):
        return PropertyConstraint([ModeConstraint() for _ in range(d)])

    @staticmethod
    def symmetric(d):
        return PropertyConstraint([ModeConstraint(ConstraintKind.SYMMETRIC) for _ in range(d)])

    def __getitem__(self, mu):
        return self.modes[mu]

    def __len__(self):
        return len(self.modes)

    def project(self, mu, x, pattern=None):
        """Apply the mode-mu orthogonal projector to a dense matrix."""
        kind = self.modes[mu].kind
        if kind == ConstraintKind.NONE:
            return x
        if kind == ConstraintKind.SYMMETRIC:
            return 0.5 * (x + x.T)
        if kind == ConstraintKind.SKEW:
            return 0.5 * (x - x.T)
        assert pattern is not None
        out = np.zeros_like(x)
        for k, idx in enumerate(pattern.rows):
            out[k, idx] = x[k, idx]
        return out


@dataclass
class SparsityPattern:
    """Per-row sorted index sets I_k for one dimension."""

    rows: list
    n: int

    def __post_init__(self):
        self.rows = [np.asarray(sorted(set(map(int, r))), dtype=int) for r in self.rows]
        assert len(self.rows) == self.n

    @staticmethod
    def diagonal(n):
        return SparsityPattern([[k] for k in range(n)], n)

    @staticmethod
    def max_fill(n, gamma):
        return max(1, math.ceil(gamma * n))

    def copy(self):
        return SparsityPattern([r.copy() for r in self.rows], self.n)


@dataclass
class CorrectionConfig:
    max_sweeps: int = 20
    stagnation_tol: float = 1e-8
    init: object = "perturbed_identity"   # or "ones", or explicit list of matrices
    seed: int = 0
    max_restarts: int = 3

    def __post_init__(self):
        assert self.max_sweeps >= 1 and self.stagnation_tol > 0


@dataclass
class CorrectionResult:
    factors: list
    objective_trace: list
    sweeps: int
    restarts: int
    seed: int
    patterns: dict
    stationarity: dict
    converged: bool

    def as_operator(self):
        return KronSumOperator.rank_one(self.factors)


@dataclass
class ProjectedPrev:
    """Approximate inverse in projected form: core coefficients over mode bases.

    Represents sum_i core[i] * Q^1_{i_1} x ... x Q^d_{i_d} with per-mode
    orthonormal operator bases.  The core is a dense ndarray over the basis
    index space or an HTTensor on the same index space.
    """

    bases: list   # per mode: list of (n_mu x n_mu) matrices
    core: object  # ndarray (r_1, ..., r_d) or HTTensor

    @property
    def ranks(self):
        return tuple(len(b) for b in self.bases)


# ---------------------------------------------------------------------------
# assembly of the mode systems
# ---------------------------------------------------------------------------

def _mat_T_mat(a, b):
    """a^T @ b with dense/CSR operands; dense result unless both are sparse."""
    if sp.issparse(a):
        return (a.T @ b)
    if sp.issparse(b):
        return (b.T @ a).T
    return a.T @ b


def _trace(m):
    return float(m.diagonal().sum()) if sp.issparse(m) else float(np.trace(m))


def _dense(m):
    return np.asarray(m.todense()) if sp.issparse(m) else np.asarray(m)


def _dense_core_contract_except(core, vecs, lam):
    x = core
    for mu in reversed(range(core.ndim)):
        if mu == lam:
            continue
        x = np.tensordot(x, vecs[mu], axes=([mu], [0]))
    return x


def _distinct_mode_factors(terms, mu):
    """Unique factor objects of one mode, with the term -> slot mapping."""
    uniq, order, slots = {}, [], []
    for t in terms:
        key = id(t[mu])
        if key not in uniq:
            uniq[key] = len(order)
            order.append(t[mu])
        slots.append(uniq[key])
    return order, np.asarray(slots, dtype=int)


class _Workspace:
    """Cached per-mode scalars for Q/H assembly; refreshed one mode at a time.

    Repeated factor objects (the usual case for structured operators) are
    traced once per distinct matrix and broadcast to their terms.
    """

    def __init__(self, star, p_prev, w_factors):
        self.star = star
        self.d = len(star.dims)
        self.c_terms = star.c.terms
        self.c_weights = star.c.weights
        self.b_terms = star.b.terms
        self.b_weights = star.b.weights
        self.p_prev = p_prev
        self.w = list(w_factors)
        self.c_uniq = [_distinct_mode_factors(self.c_terms, mu) for mu in range(self.d)]
        self.b_uniq = [_distinct_mode_factors(self.b_terms, mu) for mu in range(self.d)]
        self.s_c = [None] * self.d    # per mode: len-R_C weights <W C_k, W>
        self.s_b = [None] * self.d    # per mode: len-R_B weights <B_i, W>
        self.s_p = [None] * self.d    # canonical prev: (R_P, R_C) scalars
        self.zeta = [None] * self.d   # projected prev: (r_mu, R_C) scalars
        for mu in range(self.d):
            self.refresh(mu)

    def _traces_against(self, mats, mu, target):
        order, slots = (self.c_uniq[mu] if target == "c" else self.b_uniq[mu])
        vals = np.array([factor_trace_inner(f, mats) for f in order])
        return vals[slots]

    def refresh(self, mu):
        w = self.w[mu]
        gram = _mat_T_mat(w, w)
        self.s_c[mu] = self._traces_against(gram, mu, "c")
        self.s_b[mu] = self._traces_against(w, mu, "b")
        prev = self.p_prev
        if isinstance(prev, KronSumOperator):
            rows = [self._traces_against(_mat_T_mat(term[mu], w), mu, "c")
                    for term in prev.terms]
            self.s_p[mu] = np.asarray(rows) if rows else np.zeros((0, len(self.c_terms)))
        elif isinstance(prev, ProjectedPrev):
            rows = [self._traces_against(_mat_T_mat(q, w), mu, "c")
                    for q in prev.bases[mu]]
            self.zeta[mu] = np.asarray(rows) if rows else np.zeros((0, len(self.c_terms)))

    def q_lambda(self, lam):
        weights = self.c_weights.copy()
        for mu in range(self.d):
            if mu != lam:
                weights = weights * self.s_c[mu]
        n = self.star.dims[lam]
        q = np.zeros((n, n))
        for wk, term in zip(weights, self.c_terms):
            if wk != 0.0:
                q += wk * _dense(term[lam])
        return q

    def h_lambda(self, lam):
        n = self.star.dims[lam]
        # B part
        wb = self.b_weights.copy()
        for mu in range(self.d):
            if mu != lam:
                wb = wb * self.s_b[mu]
        h_b = np.zeros((n, n))
        for wi, term in zip(wb, self.b_terms):
            if wi != 0.0:
                h_b += wi * _dense(term[lam]).T
        # P C part
        h_pc = np.zeros((n, n))
        prev = self.p_prev
        if isinstance(prev, KronSumOperator) and prev.rank > 0:
            coeff = np.outer(prev.weights, self.c_weights)
            for mu in range(self.d):
                if mu != lam:
                    coeff = coeff * self.s_p[mu]
            for s_idx, term_p in enumerate(prev.terms):
                combo = None
                for k, term_c in enumerate(self.c_terms):
                    ck = coeff[s_idx, k]
                    if ck == 0.0:
                        continue
                    combo = ck * term_c[lam] if combo is None else combo + ck * term_c[lam]
                if combo is not None:
                    h_pc += _dense(term_p[lam] @ combo)
        elif isinstance(prev, ProjectedPrev):
            r_lam = len(prev.bases[lam])
            if isinstance(prev.core, HTTensor):
                stacks = [None if mu == lam else self.zeta[mu].T for mu in range(self.d)]
                coeffs = ht_contract_vectors_except_batched(prev.core, stacks, lam).T
            else:
                coeffs = np.zeros((r_lam, len(self.c_terms)))
                for k in range(len(self.c_terms)):
                    vecs = [self.zeta[mu][:, k] for mu in range(self.d)]
                    coeffs[:, k] = _dense_core_contract_except(prev.core, vecs, lam)
            coeffs = coeffs * self.c_weights[None, :]
            for i in range(r_lam):
                combo = None
                for k, term_c in enumerate(self.c_terms):
                    ck = coeffs[i, k]
                    if ck == 0.0:
                        continue
                    combo = ck * term_c[lam] if combo is None else combo + ck * term_c[lam]
                if combo is not None:
                    h_pc += _dense(prev.bases[lam][i] @ combo)
        return h_b - h_pc, float(np.linalg.norm(h_b)) + float(np.linalg.norm(h_pc))


def assemble_Q_lambda(w_factors, star, constraints, lam):
    """Mode-lam system matrix Q^lam (n_lam x n_lam), built from C = AB."""
    ws = _Workspace(star, None, w_factors)
    return ws.q_lambda(lam)


def assemble_H_lambda(p_prev, w_factors, star, constraints, lam):
    """Mode-lam right-hand side H^lam(P) from the factored residual R(P)."""
    ws = _Workspace(star, p_prev, w_factors)
    return ws.h_lambda(lam)[0]


# ---------------------------------------------------------------------------
# mode solves
# ---------------------------------------------------------------------------

def _solve_unconstrained(q, h):
    try:
        w = np.linalg.solve(q.T, h.T).T
        if np.all(np.isfinite(w)):
            res = np.linalg.norm(w @ q - h)
            if res <= 1e-6 * max(np.linalg.norm(h), 1e-300):
                return w
    except np.linalg.LinAlgError:
        pass
    w, _, rank, _ = np.linalg.lstsq(q.T, h.T, rcond=None)
    w = w.T
    res = np.linalg.norm(w @ q - h)
    if res > 1e-6 * max(np.linalg.norm(h), 1e-300) and np.linalg.norm(h) > 0:
        raise SingularModeError(f"mode system residual {res:.2e}")
    return w


def _solve_sylvester(q, rhs, anti):
    """Solve W Q + Q^T W = rhs; returns the (skew-)symmetric part exactly.

    ``anti=False`` is the symmetric constraint (rhs = H + H^T), ``anti=True``
    the skew one (rhs = H - H^T).  Both reduce to the same Sylvester pencil
    (Q^T, Q); uniqueness needs eigenvalue sums of Q bounded away from zero.
    """
    evals = np.linalg.eigvals(q)
    gaps = np.abs(evals[:, None] + evals[None, :])
    scale = max(np.max(np.abs(evals)), 1e-300)
    if np.min(gaps) <= 1e-12 * scale:
        raise SylvesterDegenerateError("eigenvalue sums of Q vanish")
    try:
        w = scipy.linalg.solve_sylvester(q.T, q, rhs)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SylvesterDegenerateError(str(exc))
    res = np.linalg.norm(q.T @ w + w @ q - rhs)
    if res > 1e-8 * max(np.linalg.norm(rhs), 1e-300) and np.linalg.norm(rhs) > 0:
        raise SylvesterDegenerateError(f"Sylvester residual {res:.2e}")
    return 0.5 * (w - w.T) if anti else 0.5 * (w + w.T)


def solve_mode(q, h, kind, pattern=None):
    """Solve one constrained mode problem; see the module docstring.

    NONE uses LU with a least-squares fallback, SYMMETRIC/SKEW a real-Schur
    Sylvester solve, SPARSE the per-row least squares on ``pattern``.
    """
    if kind == ConstraintKind.NONE:
        return _solve_unconstrained(q, h)
    if kind == ConstraintKind.SYMMETRIC:
        return _solve_sylvester(q, h + h.T, anti=False)
    if kind == ConstraintKind.SKEW:
        return _solve_sylvester(q, h - h.T, anti=True)
    assert pattern is not None
    return solve_sparse_rows(q, h, pattern)


def solve_sparse_rows(q, h, pattern):
    """Row-wise least squares on the pattern; returns a CSR matrix.

    Row k minimizes |w_k Q P_k - h_k P_k| over entries supported on I_k, via
    the reduced square system Q[I_k, I_k]; rank-deficient rows get the
    minimum-norm solution.  Rows sharing a pattern size are solved in one
    stacked call.
    """
    n = q.shape[0]
    by_size = {}
    for k in range(n):
        by_size.setdefault(len(pattern.rows[k]), []).append(k)
    solutions = [None] * n
    for m, rows in by_size.items():
        rows = np.asarray(rows)
        idx = np.stack([pattern.rows[k] for k in rows])
        qhat = q[idx[:, :, None], idx[:, None, :]]
        hhat = h[rows[:, None], idx]
        try:
            sol = np.linalg.solve(np.swapaxes(qhat, 1, 2), hhat[..., None])[..., 0]
            if not np.all(np.isfinite(sol)):
                raise np.linalg.LinAlgError("non-finite row solution")
        except np.linalg.LinAlgError:
            sol = np.stack([np.linalg.lstsq(qhat[i].T, hhat[i], rcond=None)[0]
                            for i in range(len(rows))])
        for i, k in enumerate(rows):
            solutions[k] = sol[i]
    data = np.concatenate(solutions)
    indices = np.concatenate(pattern.rows)
    indptr = np.cumsum([0] + [len(r) for r in pattern.rows])
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def _adapt_and_solve(q, h, pattern, gamma, i_max):
    """Grow the pattern greedily and re-solve; returns (pattern, W).

    Per iteration each unfinished row k adds the column j (not yet in I_k)
    maximizing (rho_k . q_j)^2 / |q_j|^2 for the full-row residual
    rho_k = w_k Q - h_k, the closed form of the rank-one line search.
    """
    n = q.shape[0]
    budget = SparsityPattern.max_fill(n, gamma)
    if i_max is None:
        i_max = n
    pattern = pattern.copy()
    q_row_norms = np.einsum("ij,ij->i", q, q)
    q_row_norms = np.where(q_row_norms > 0, q_row_norms, np.inf)
    w = solve_sparse_rows(q, h, pattern)
    h_row_norms = np.linalg.norm(h, axis=1)
    for _ in range(i_max):
        active = [k for k in range(n) if len(pattern.rows[k]) < budget]
        if not active:
            break
        resid = np.asarray((w @ q) - h)
        resid_norms = np.linalg.norm(resid, axis=1)
        active = [k for k in active if resid_norms[k] > 1e-14 * max(h_row_norms[k], 1e-300)]
        if not active:
            break
        scores = (resid @ q.T) ** 2 / q_row_norms[None, :]
        grew = False
        for k in active:
            row_scores = scores[k].copy()
            row_scores[pattern.rows[k]] = -np.inf
            j = int(np.argmax(row_scores))
            if not np.isfinite(row_scores[j]):
                continue
            pattern.rows[k] = np.asarray(sorted(set(pattern.rows[k]).union({j})), dtype=int)
            grew = True
        if not grew:
            break
        w = solve_sparse_rows(q, h, pattern)
    return pattern, w


def adapt_pattern(q, h, w_current, pattern, gamma, i_max):
    """Adaptive pattern selection; returns the grown SparsityPattern."""
    del w_current  # the row solves are recomputed from (q, h, pattern)
    return _adapt_and_solve(q, h, pattern, gamma, i_max)[0]


# ---------------------------------------------------------------------------
# the alternating minimization driver
# ---------------------------------------------------------------------------

def _init_factors(dims, constraints, config, rng):
    if isinstance(config.init, (list, tuple)):
        w = [np.asarray(m, dtype=float).copy() for m in config.init]
    else:
        w = []
        for n in dims:
            if config.init == "ones":
                base = np.ones((n, n)) / n
            else:
                base = np.eye(n) / np.sqrt(n)
            w.append(base + (1e-2 / n) * rng.standard_normal((n, n)))
    for mu, m in enumerate(constraints.modes):
        if m.kind == ConstraintKind.SYMMETRIC:
            w[mu] = 0.5 * (w[mu] + w[mu].T)
        elif m.kind == ConstraintKind.SKEW:
            w[mu] = 0.5 * (w[mu] - w[mu].T)
    return w


def _init_pattern(n, mode_constraint):
    if mode_constraint.initial_pattern == "diagonal":
        return SparsityPattern.diagonal(n)
    return SparsityPattern([list(r) for r in mode_constraint.initial_pattern], n)


def _apply_initial_patterns(w, constraints, patterns):
    for mu, m in enumerate(constraints.modes):
        if m.kind == ConstraintKind.SPARSE:
            dense = w[mu]
            n = dense.shape[0]
            pat = patterns[mu]
            data, indices, indptr = [], [], [0]
            for k in range(n):
                data.append(dense[k, pat.rows[k]])
                indices.append(pat.rows[k])
                indptr.append(indptr[-1] + len(pat.rows[k]))
            w[mu] = sp.csr_matrix(
                (np.concatenate(data), np.concatenate(indices), np.array(indptr)), shape=(n, n))
    return w


def _rebalance(w):
    norms = []
    for m in w:
        norms.append(float(np.sqrt(m.multiply(m).sum())) if sp.issparse(m)
                     else float(np.linalg.norm(m)))
    if any(x == 0.0 for x in norms):
        raise SingularModeError("a mode factor collapsed to zero")
    log_g = float(np.mean(np.log(norms)))
    for mu in range(len(w)):
        w[mu] = w[mu] * float(np.exp(log_g - np.log(norms[mu])))
    return w


def _mode_objective(w_lam, q, h):
    """<W Q, W> - 2 <H, W> for the current mode; equals the global expanded
    objective up to the constant that drops with the unknown |A^{-1}|_*^2."""
    if sp.issparse(w_lam):
        wq = np.asarray(w_lam @ q)
        wd = np.asarray(w_lam.todense())
        return float(np.vdot(wq, wd) - 2.0 * np.vdot(h, wd))
    return float(np.vdot(w_lam @ q, w_lam) - 2.0 * np.vdot(h, w_lam))


def correct_rank_one(a, star, p_prev, constraints, config):
    """Compute the best rank-one correction of P under the star norm.

    Returns a :class:`CorrectionResult`; raises :class:`ZeroCorrectionError`
    when the optimal correction is indistinguishable from zero (outer greedy
    loops treat that as convergence).
    """
    dims = star.dims
    d = len(dims)
    assert len(constraints) == d
    rng = np.random.default_rng(config.seed)

    last_exc = None
    for attempt in range(config.max_restarts + 1):
        w = _init_factors(dims, constraints, config, rng)
        patterns = {mu: _init_pattern(dims[mu], m)
                    for mu, m in enumerate(constraints.modes)
                    if m.kind == ConstraintKind.SPARSE}
        w = _apply_initial_patterns(w, constraints, patterns)
        try:
            return _alternate(a, star, p_prev, constraints, config, w, patterns, attempt)
        except (SingularModeError, SylvesterDegenerateError) as exc:
            last_exc = exc
            continue
    raise ZeroCorrectionError(f"no usable correction after restarts: {last_exc}")


def _alternate(a, star, p_prev, constraints, config, w, patterns, attempt):
    d = len(star.dims)
    ws = _Workspace(star, p_prev, w)
    obj_trace = []
    w_star_norm_prev = None
    sweeps_done = 0
    converged = False
    zero_like = False

    for sweep in range(config.max_sweeps):
        h_rel_max = 0.0
        last_mode_obj = None
        for lam in range(d):
            q = ws.q_lambda(lam)
            h, h_scale = ws.h_lambda(lam)
            mode = constraints[lam]
            if mode.kind == ConstraintKind.SPARSE:
                budget = SparsityPattern.max_fill(star.dims[lam], mode.fill_gamma)
                if min(len(r) for r in patterns[lam].rows) < budget:
                    patterns[lam], w_new = _adapt_and_solve(
                        q, h, patterns[lam], mode.fill_gamma, mode.pattern_iterations)
                else:
                    w_new = solve_sparse_rows(q, h, patterns[lam])
            else:
                w_new = solve_mode(q, h, mode.kind)
            ws.w[lam] = w_new
            ws.refresh(lam)
            h_rel_max = max(h_rel_max, np.linalg.norm(h) / max(h_scale, 1e-300))
            last_mode_obj = _mode_objective(w_new, q, h)
            obj_trace.append(last_mode_obj)
        sweeps_done = sweep + 1
        ws.w[:] = _rebalance(ws.w)
        for mu in range(d):
            ws.refresh(mu)
        # |W|_*^2 = <W Q, W> at any mode; recover it from the last mode visit
        w_star_sq = last_mode_obj + 2.0 * _h_dot_w(ws, d - 1)
        w_star_norm = float(np.sqrt(max(w_star_sq, 0.0)))
        if h_rel_max <= 1e-12:
            zero_like = True
            break
        if w_star_norm_prev is not None:
            if abs(w_star_norm - w_star_norm_prev) <= config.stagnation_tol * max(w_star_norm, 1e-300):
                converged = True
                break
        w_star_norm_prev = w_star_norm

    if zero_like or _Norm(ws.w) == 0.0:
        raise ZeroCorrectionError("residual orthogonal to the rank-one set")

    stationarity = {}
    for lam in range(d):
        q = ws.q_lambda(lam)
        h, _ = ws.h_lambda(lam)
        res = _dense(ws.w[lam] @ q) - h
        pat = patterns.get(lam)
        pres = constraints.project(lam, res, pat)
        phnorm = np.linalg.norm(constraints.project(lam, h, pat))
        stationarity[lam] = float(np.linalg.norm(pres) / max(phnorm, 1e-300))

    return CorrectionResult(
        factors=list(ws.w), objective_trace=obj_trace, sweeps=sweeps_done,
        restarts=attempt, seed=config.seed, patterns=patterns,
        stationarity=stationarity, converged=converged)


def _h_dot_w(ws, lam):
    h, _ = ws.h_lambda(lam)
    w = ws.w[lam]
    wd = np.asarray(w.todense()) if sp.issparse(w) else w
    return float(np.vdot(h, wd))


def _Norm(w_list):
    tot = 1.0
    for m in w_list:
        nrm = float(np.sqrt(m.multiply(m).sum())) if sp.issparse(m) else float(np.linalg.norm(m))
        tot *= nrm
    return tot
