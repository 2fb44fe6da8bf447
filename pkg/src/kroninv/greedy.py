"""Greedy constructions of low-rank approximate inverses.

Two outer loops around the rank-one correction of :mod:`kroninv.rank_one`:

* ``alg_g`` accumulates corrections, P_r = P_{r-1} + W_r (canonical rank r);
* ``alg_p`` additionally projects A^{-1} onto the tensorized span of all
  correction factors found so far, either exactly (full core) or in a
  hierarchical core format fitted by alternating least squares.

Both emit the relative error eps(P) = |I - P A| / |I|, evaluated through
factorized trace products.  Values whose squared form falls below the
double-precision cancellation floor are flagged as precision-limited.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

from .operators import KronSumOperator, StarInnerProduct, factor_trace_inner
from .rank_one import (CorrectionConfig, ProjectedPrev, PropertyConstraint,
                       ZeroCorrectionError, correct_rank_one)
from .tensor_formats import (CanonicalTensor, DimensionTree, HTTensor,
                             einsum_cached, ht_add, ht_from_canonical,
                             ht_gram_inner, ht_gram_inner_batched,
                             ht_contract_vectors, ht_contract_vectors_batched,
                             ht_identity_leaves, ht_orthogonalize, ht_truncate)

__all__ = [
    "OperatorBasis",
    "ProjectionSpec",
    "GreedyState",
    "GreedyTrace",
    "extend_basis",
    "project_full",
    "project_ht",
    "alg_g",
    "alg_p",
    "error_estimate",
    "EPS_FLOOR_SQ",
]

EPS_FLOOR_SQ = 1e-15  # squared-estimator values below this are cancellation noise

_DUPLICATE_TOL = 1e-10  # directions closer than this to the span are dropped


def _dense(m):
    return np.asarray(m.todense()) if sp.issparse(m) else np.asarray(m)


class OperatorBasis:
    """Per-dimension orthonormal matrix bases spanning the reduced spaces."""

    def __init__(self, dims):
        self.dims = tuple(dims)
        self.mats = [[] for _ in dims]
        self.provenance = []  # one entry per greedy step: per-mode basis index or None

    @property
    def ranks(self):
        return tuple(len(b) for b in self.mats)

    def gram(self, mu):
        r = len(self.mats[mu])
        g = np.empty((r, r))
        for i in range(r):
            for j in range(r):
                g[i, j] = np.vdot(self.mats[mu][i], self.mats[mu][j])
        return g


def extend_basis(basis: OperatorBasis, w_factors):
    """Modified Gram-Schmidt extension of every mode basis by one direction.

    Returns per-mode coordinate vectors of the new rank-one factors in the
    extended bases.  A factor already in the span (residual below 1e-10
    relative) leaves that mode's basis unchanged.
    """
    coords = []
    appended = []
    for mu, w in enumerate(w_factors):
        w = _dense(w).astype(float)
        nrm_w = np.linalg.norm(w)
        c = np.zeros(len(basis.mats[mu]))
        v = w.copy()
        for _ in range(2):  # one reorthogonalization pass
            for i, q in enumerate(basis.mats[mu]):
                h = np.vdot(q, v)
                c[i] += h
                v -= h * q
        res = np.linalg.norm(v)
        if res > _DUPLICATE_TOL * max(nrm_w, 1e-300):
            basis.mats[mu].append(v / res)
            c = np.concatenate([c, [res]])
            appended.append(len(basis.mats[mu]) - 1)
        else:
            appended.append(None)
        coords.append(c)
    basis.provenance.append(appended)
    return coords


class GramCache:
    """Star Gram data for a growing operator basis.

    Per mode mu and term k of C = AB keeps G[k][i, j] = <Q_i C_k, Q_j>_mu, so
    the Gram matrix of the tensorized basis is sum_k w_k (x)_mu G^{mu,k}.
    Right-hand sides <A^{-1}, Q_j>_* = <B, Q_j> are kept as per-mode vectors.
    """

    def __init__(self, star: StarInnerProduct, basis: OperatorBasis):
        self.star = star
        self.basis = basis
        d = len(star.dims)
        rc, rb = star.c.rank, star.b.rank
        self.g = [np.zeros((rc, 0, 0)) for _ in range(d)]
        self.t = [np.zeros((rb, 0)) for _ in range(d)]

    def sync(self):
        """Extend cached entries to cover newly appended basis matrices."""
        for mu in range(len(self.g)):
            mats = self.basis.mats[mu]
            r_old = self.g[mu].shape[1]
            r_new = len(mats)
            if r_new == r_old:
                continue
            order, slots = [], []
            seen = {}
            for term in self.star.c.terms:
                key = id(term[mu])
                if key not in seen:
                    seen[key] = len(order)
                    order.append(term[mu])
                slots.append(seen[key])
            rc = self.star.c.rank
            g = np.zeros((rc, r_new, r_new))
            g[:, :r_old, :r_old] = self.g[mu]
            for j in range(r_old, r_new):
                for i in range(r_new):
                    x = mats[i].T @ mats[j]
                    fwd = np.array([factor_trace_inner(f, x) for f in order])
                    g[:, i, j] = fwd[slots]
                    if i != j:
                        rev = np.array([factor_trace_inner(f, x.T) for f in order])
                        g[:, j, i] = rev[slots]
            self.g[mu] = g
            rb = self.star.b.rank
            t = np.zeros((rb, r_new))
            t[:, :r_old] = self.t[mu]
            for j in range(r_old, r_new):
                for i, term in enumerate(self.star.b.terms):
                    t[i, j] = factor_trace_inner(term[mu], mats[j])
            self.t[mu] = t

    @property
    def ranks(self):
        return tuple(g.shape[1] for g in self.g)

    def dense_gram(self):
        w = self.star.c.weights
        out = None
        for k in range(self.star.c.rank):
            m = np.array([[w[k]]])
            for mu in range(len(self.g)):
                m = np.kron(m, self.g[mu][k])
            out = m if out is None else out + m
        return out

    def dense_rhs(self):
        w = self.star.b.weights
        out = None
        for i in range(self.star.b.rank):
            v = np.array([w[i]])
            for mu in range(len(self.t)):
                v = np.kron(v, self.t[mu][i])
            out = v if out is None else out + v
        return out

    def core_objective(self, core):
        """|P|_*^2 - 2 <A^{-1}, P>_* for a core over the current basis."""
        quad = 0.0
        for k in range(self.star.c.rank):
            grams = [self.g[mu][k] for mu in range(len(self.g))]
            if isinstance(core, HTTensor):
                eff = [f.T @ g @ f for f, g in zip(core.leaf_frames, grams)]
                quad += self.star.c.weights[k] * ht_gram_inner(core, core, eff)
            else:
                red = core
                for mu, g in enumerate(grams):
                    red = np.moveaxis(np.tensordot(g.T, red, axes=([1], [mu])), 0, mu)
                quad += self.star.c.weights[k] * float(np.vdot(red, core))
        lin = 0.0
        for i in range(self.star.b.rank):
            vecs = [self.t[mu][i] for mu in range(len(self.t))]
            if isinstance(core, HTTensor):
                lin += self.star.b.weights[i] * ht_contract_vectors(
                    ht_identity_leaves(core), vecs)
            else:
                red = core
                for mu in reversed(range(core.ndim)):
                    red = np.tensordot(red, vecs[mu], axes=([mu], [0]))
                lin += self.star.b.weights[i] * float(red)
        return quad - 2.0 * lin


@dataclass
class ProjectionSpec:
    """FULL projects exactly in the tensorized span; HT fits a hierarchical core."""

    mode: str = "ht"                 # "full" | "ht"
    tree: DimensionTree = None       # defaults to the balanced tree over modes
    core_rank: int = 10              # interior-node rank cap, min(r, core_rank)
    als_sweeps: int = 5
    ls_fallback_threshold: float = 1e12
    full_cap: int = 10**6

    def __post_init__(self):
        assert self.mode in ("full", "ht")


def project_full(cache: GramCache, cap=10**6, cg_threshold=4000):
    """Galerkin coefficients over the tensorized basis (exact projection).

    Solves the Gram system sum_i <Q_i, Q_j>_* alpha_i = <A^{-1}, Q_j>_*.
    Dense Cholesky-backed solve up to ``cg_threshold`` unknowns, conjugate
    gradients on the Kronecker structure beyond; an ill-conditioned dense Gram
    (estimate above 1e14) falls back to least squares with a warning flag.
    """
    ranks = cache.ranks
    n = math.prod(ranks)
    if n > cap:
        raise ValueError(f"full projection of size {n} exceeds cap {cap}")
    if n <= cg_threshold:
        m = cache.dense_gram()
        rhs = cache.dense_rhs()
        cond = np.linalg.cond(m) if n > 1 else 1.0
        warning = None
        if not np.isfinite(cond) or cond > 1e14:
            alpha = np.linalg.lstsq(m, rhs, rcond=None)[0]
            warning = f"gram condition {cond:.2e}; solved by least squares"
        else:
            alpha = np.linalg.solve(m, rhs)
        resid = float(np.linalg.norm(m @ alpha - rhs) / max(np.linalg.norm(rhs), 1e-300))
        return alpha.reshape(ranks), {"galerkin_residual": resid, "cond": cond,
                                      "warning": warning}

    def matvec(v):
        x = v.reshape(ranks)
        out = np.zeros_like(x)
        for k in range(cache.star.c.rank):
            y = x
            for mu in range(len(ranks)):
                y = np.moveaxis(np.tensordot(cache.g[mu][k].T, y, axes=([1], [mu])), 0, mu)
            out += cache.star.c.weights[k] * y
        return out.ravel()

    rhs = None
    for i in range(cache.star.b.rank):
        v = np.array([cache.star.b.weights[i]])
        for mu in range(len(ranks)):
            v = np.kron(v, cache.t[mu][i])
        rhs = v if rhs is None else rhs + v
    op = scipy.sparse.linalg.LinearOperator((n, n), matvec=matvec)
    alpha, info = scipy.sparse.linalg.cg(op, rhs, rtol=1e-12, maxiter=10 * n)
    resid = float(np.linalg.norm(matvec(alpha) - rhs) / max(np.linalg.norm(rhs), 1e-300))
    return alpha.reshape(ranks), {"galerkin_residual": resid, "cond": None,
                                  "warning": None if info == 0 else f"cg info {info}"}


# ---------------------------------------------------------------------------
# hierarchical core fit
# ---------------------------------------------------------------------------

def _node_caps(tree, leaf_ranks, interior_cap):
    caps = {}
    total = math.prod(leaf_ranks)
    for t in tree.bottom_up():
        if tree.is_leaf(t):
            caps[t] = leaf_ranks[tree.modes[t][0]]
        elif t == tree.root:
            caps[t] = 1
        else:
            a, b = tree.children[t]
            inside = caps[a] * caps[b]
            outside = max(total // math.prod(leaf_ranks[m] for m in tree.modes[t]), 1)
            caps[t] = max(1, min(interior_cap, inside, outside))
    return caps


def _pad_core(core: HTTensor, tree, leaf_ranks, caps):
    """Embed a core into enlarged leaf/interior ranks by zero padding."""
    frames = [np.eye(r) for r in leaf_ranks]
    transfer = {}
    for t in tree.interior_nodes():
        a, b = tree.children[t]
        ra = leaf_ranks[tree.modes[a][0]] if tree.is_leaf(a) else min(core.node_rank(a), caps[a])
        rb = leaf_ranks[tree.modes[b][0]] if tree.is_leaf(b) else min(core.node_rank(b), caps[b])
        old = core.transfer[t]
        rt = 1 if t == tree.root else min(old.shape[2], caps[t])
        beta = np.zeros((max(ra, old.shape[0]), max(rb, old.shape[1]), rt))
        beta[:old.shape[0], :old.shape[1], :] = old[:, :, :rt]
        transfer[t] = beta
    return HTTensor(tree, frames, transfer)


def _cond_from_chol(m, chol):
    """Symmetric condition estimate via extremal eigenvalue iterations."""
    n = m.shape[0]
    if n <= 64:
        ev = np.linalg.eigvalsh(m)
        lo = max(ev[0], 0.0)
        return np.inf if lo == 0 else ev[-1] / lo
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    for _ in range(8):
        v = m @ v
        v /= max(np.linalg.norm(v), 1e-300)
    lmax = float(v @ (m @ v))
    w = rng.standard_normal(n)
    for _ in range(8):
        w = scipy.linalg.cho_solve(chol, w)
        w /= max(np.linalg.norm(w), 1e-300)
    lmin = float(w @ (m @ w))
    return np.inf if lmin <= 0 else lmax / lmin


def project_ht(cache: GramCache, tree, caps, init_core, sweeps, ls_threshold=1e12):
    """Alternating least squares over interior transfer tensors.

    Minimizes the (constant-dropped) star-norm objective over cores of the
    hierarchical format; every node update solves the local system N^t b = S^t
    assembled by contracting the cached mode Grams through the remaining
    network.  Ill-conditioned local systems fall back to least squares.
    Returns the best core found together with the node objective trace.
    """
    core = init_core.copy()
    obj_trace = [cache.core_objective(core)]
    order = tree.interior_nodes()
    schedule = order + order[::-1]

    for _ in range(sweeps):
        # re-parametrize with orthonormal frames; same tensor, better conditioning
        core = ht_identity_leaves(ht_orthogonalize(core), cache.ranks)
        for t in schedule:
            n_mat, s_vec = _ht_normal_system(cache, core, t)
            shape = core.transfer[t].shape
            n_mat = 0.5 * (n_mat + n_mat.T)
            beta = None
            try:
                chol = scipy.linalg.cho_factor(n_mat)
                if _cond_from_chol(n_mat, chol) < ls_threshold:
                    beta = scipy.linalg.cho_solve(chol, s_vec)
            except scipy.linalg.LinAlgError:
                pass
            if beta is None:
                beta = np.linalg.lstsq(n_mat, s_vec, rcond=None)[0]
            core.transfer[t] = beta.reshape(shape)
            # the local quadratic equals the global (constant-dropped) objective
            obj_trace.append(float(beta @ (n_mat @ beta) - 2.0 * (s_vec @ beta)))
    return core, {"objective_trace": obj_trace}


def _ht_normal_system(cache: GramCache, core: HTTensor, node):
    """Assemble (N^t, S^t) for one transfer tensor, all terms stacked."""
    tree = core.tree
    grams, sig = {}, {}

    def gam(t):
        # stacked (R_C, r_t, r_t) downward Gram blocks
        if t in grams:
            return grams[t]
        if tree.is_leaf(t):
            g = cache.g[tree.modes[t][0]]
        else:
            a, b = tree.children[t]
            g = einsum_cached("ijr,sip,sjq,pqm->srm", core.transfer[t], gam(a), gam(b),
                              core.transfer[t])
        grams[t] = g
        return g

    def env(t):
        if t == tree.root:
            return np.ones((cache.star.c.rank, 1, 1))
        p = tree.parent[t]
        e_p = env(p)
        a, b = tree.children[p]
        beta = core.transfer[p]
        if t == a:
            return einsum_cached("kjm,lqn,sjq,smn->skl", beta, beta, gam(b), e_p)
        return einsum_cached("jkm,qln,sjq,smn->skl", beta, beta, gam(a), e_p)

    def sigma(t):
        # stacked (R_B, r_t) downward right-hand-side contractions
        if t in sig:
            return sig[t]
        if tree.is_leaf(t):
            v = cache.t[tree.modes[t][0]]
        else:
            a, b = tree.children[t]
            v = einsum_cached("ijk,si,sj->sk", core.transfer[t], sigma(a), sigma(b))
        sig[t] = v
        return v

    def env_vec(t):
        if t == tree.root:
            return np.ones((cache.star.b.rank, 1))
        p = tree.parent[t]
        e_p = env_vec(p)
        a, b = tree.children[p]
        beta = core.transfer[p]
        if t == a:
            return einsum_cached("kjm,sj,sm->sk", beta, sigma(b), e_p)
        return einsum_cached("jkm,sj,sm->sk", beta, sigma(a), e_p)

    a, b = tree.children[node]
    g1, g2, e = gam(a), gam(b), env(node)
    cw = cache.star.c.weights
    n_out = sum(cw[k] * np.kron(g1[k], np.kron(g2[k], e[k]))
                for k in range(cache.star.c.rank))
    s_out = np.einsum("si,sj,sk,s->ijk", sigma(a), sigma(b), env_vec(node),
                      cache.star.b.weights, optimize=True).ravel()
    return n_out, s_out


# ---------------------------------------------------------------------------
# error estimator
# ---------------------------------------------------------------------------

@dataclass
class EpsEstimate:
    value: float
    floor_flagged: bool
    eps_sq_raw: float

    def __float__(self):
        return self.value


def _matmul_right(m, f):
    """m @ f for dense m and dense or CSR f, always a dense ndarray."""
    if sp.issparse(f):
        return np.asarray((f.T @ m.T).T)
    return m @ f




def error_estimate(p, a: KronSumOperator):
    """Relative error eps(P) = |I - P A| / |I| via factorized trace products.

    ``p`` is a KronSumOperator (canonical form) or a ProjectedPrev (bases plus
    dense or hierarchical core).  Per-mode traces are normalized by n_mu so the
    accumulated products stay O(1)-scaled.  Squared values below the
    cancellation floor are clamped at zero and flagged.
    """
    dims = a.dims
    d = len(dims)
    if isinstance(p, ProjectedPrev):
        mode_mats = p.bases
        core = p.core
        weights = None
    else:
        mode_mats = [[_dense(term[mu]) for term in p.terms] for mu in range(d)]
        core = None
        weights = p.weights
    big_r = a.rank

    # per mode: normalized traces tr(Q_i A_k)/n as (R_A, r) and pairwise
    # products tr((Q_i A_k)^T Q_j A_l)/n as (R_A, R_A, r, r), via one GEMM on
    # the distinct mode factors of A
    cross_vecs, pair_grams = [], []
    for mu in range(d):
        order, slots = [], []
        seen = {}
        for term in a.terms:
            key = id(term[mu])
            if key not in seen:
                seen[key] = len(order)
                order.append(term[mu])
            slots.append(seen[key])
        slots = np.asarray(slots)
        mats = mode_mats[mu]
        r, n = len(mats), dims[mu]
        f_cnt = len(order)
        prods = np.empty((f_cnt, r, n, n))
        for fi, fmat in enumerate(order):
            for i, m in enumerate(mats):
                prods[fi, i] = _matmul_right(m, fmat)
        flat = prods.reshape(f_cnt * r, n * n)
        g_all = (flat @ flat.T).reshape(f_cnt, r, f_cnt, r) / n
        tr_all = np.trace(prods, axis1=2, axis2=3) / n
        cross_vecs.append(tr_all[slots])
        pair_grams.append(g_all[slots][:, :, slots].transpose(0, 2, 1, 3))

    cross = float(a.weights @ _contract_coeff_stack(core, weights, cross_vecs))
    pair_vals = _contract_coeff_pair_stack(core, weights, pair_grams, big_r)
    quad = float(a.weights @ pair_vals @ a.weights)

    eps_sq = 1.0 - 2.0 * cross + quad
    flagged = eps_sq < EPS_FLOOR_SQ
    return EpsEstimate(float(np.sqrt(max(eps_sq, 0.0))), bool(flagged), float(eps_sq))


def _contract_coeff_stack(core, weights, vec_stacks):
    """Per-batch coefficient contractions sum_i alpha_i prod_mu v[b, i_mu]."""
    if core is None:
        out = np.ones((vec_stacks[0].shape[0], len(weights)))
        for v in vec_stacks:
            out = out * v
        return out @ weights
    if isinstance(core, HTTensor):
        return ht_contract_vectors_batched(ht_identity_leaves(core), vec_stacks)
    vals = []
    for b in range(vec_stacks[0].shape[0]):
        red = core
        for mu in reversed(range(core.ndim)):
            red = np.tensordot(red, vec_stacks[mu][b], axes=([mu], [0]))
        vals.append(float(red))
    return np.asarray(vals)


def _contract_coeff_pair_stack(core, weights, gram_stacks, big_r):
    """(R, R) matrix of sum_{i,j} alpha_i alpha_j prod_mu g[k,l,i_mu,j_mu]."""
    if core is None:
        out = np.ones((big_r, big_r, len(weights), len(weights)))
        for g in gram_stacks:
            out = out * g
        return np.einsum("klst,s,t->kl", out, weights, weights)
    flat = [g.reshape(big_r * big_r, g.shape[2], g.shape[3]) for g in gram_stacks]
    if isinstance(core, HTTensor):
        frames = core.leaf_frames
        eff = [np.einsum("ia,sij,jb->sab", f, g, f, optimize=True)
               for f, g in zip(frames, flat)]
        return ht_gram_inner_batched(core, core, eff).reshape(big_r, big_r)
    vals = np.empty(big_r * big_r)
    for b in range(big_r * big_r):
        red = core
        for mu in range(core.ndim):
            red = np.moveaxis(np.tensordot(flat[mu][b].T, red, axes=([1], [mu])), 0, mu)
        vals[b] = float(np.vdot(red, core))
    return vals.reshape(big_r, big_r)


# ---------------------------------------------------------------------------
# outer loops
# ---------------------------------------------------------------------------

@dataclass
class GreedyTrace:
    r: int
    epsilon: float
    floor_flagged: bool
    r_mu: tuple
    wall_ms: float
    correction_sweeps: int = 0
    restarts: int = 0
    projection: dict = field(default_factory=dict)


@dataclass
class GreedyState:
    step: int
    basis: OperatorBasis
    core: object            # ndarray or HTTensor over the basis index space
    epsilon: EpsEstimate

    def as_prev(self):
        return ProjectedPrev(self.basis.mats, self.core)

    def as_kron_operator(self):
        """Canonical expansion; only sensible for small core index spaces."""
        if isinstance(self.core, HTTensor):
            from .tensor_formats import densify
            core = densify(self.core)
        else:
            core = self.core
        terms, weights = [], []
        for idx in np.ndindex(*core.shape):
            w = core[idx]
            if w != 0.0:
                terms.append(tuple(self.basis.mats[mu][idx[mu]] for mu in range(core.ndim)))
                weights.append(w)
        if not terms:
            return KronSumOperator.zero(self.basis.dims)
        return KronSumOperator(self.basis.dims, terms, np.asarray(weights))


def alg_g(a, star, constraints, big_r, p0=None, config=None):
    """Pure greedy accumulation of rank-one corrections.

    Returns (operators, trace): ``operators[r-1]`` is P_r in canonical form.
    A zero correction terminates the sequence early with what was achieved.
    """
    config = config or CorrectionConfig()
    assert big_r >= 1
    p = p0 if p0 is not None else KronSumOperator.zero(a.dims)
    out, trace = [], []
    for r in range(1, big_r + 1):
        t0 = time.perf_counter()
        step_cfg = _step_config(config, r)
        try:
            res = correct_rank_one(a, star, p if p.rank > 0 else None,
                                   constraints, step_cfg)
        except ZeroCorrectionError:
            break
        p = p.concat(res.as_operator())
        eps = error_estimate(p, a)
        out.append(p)
        trace.append(GreedyTrace(r, eps.value, eps.floor_flagged,
                                 (r,) * len(a.dims),
                                 1000 * (time.perf_counter() - t0),
                                 res.sweeps, res.restarts))
    return out, trace


def alg_p(a, star, constraints, big_r, p0=None, proj=None, config=None):
    """Updated greedy: rank-one corrections, basis extension, re-projection.

    Returns (states, trace).  ``states[r-1]`` holds the basis and core after
    step r.  Hierarchical projections are warm-started from the previous core
    plus the new correction expressed in basis coordinates, so the (expanded)
    star objective never degrades from one step to the next.
    """
    config = config or CorrectionConfig()
    proj = proj or ProjectionSpec()
    assert big_r >= 1
    basis = OperatorBasis(a.dims)
    cache = GramCache(star, basis)
    if p0 is not None and p0.rank > 0:
        # seed the subspaces with the factors of the initial guess
        for term in p0.terms:
            extend_basis(basis, list(term))
        cache.sync()
    tree = proj.tree or DimensionTree.balanced(len(a.dims))

    states, trace = [], []
    prev = None
    prev_core = None
    for r in range(1, big_r + 1):
        t0 = time.perf_counter()
        step_cfg = _step_config(config, r)
        if prev is None and p0 is not None and p0.rank > 0:
            corr_prev = p0
        else:
            corr_prev = prev
        try:
            res = correct_rank_one(a, star, corr_prev, constraints, step_cfg)
        except ZeroCorrectionError:
            break
        coords = extend_basis(basis, res.factors)
        cache.sync()
        leaf_ranks = cache.ranks

        if proj.mode == "full":
            core, diag = project_full(cache, cap=proj.full_cap)
        else:
            caps = _node_caps(tree, leaf_ranks, min(r + (p0.rank if p0 is not None else 0),
                                                    proj.core_rank))
            warm = _warm_core(tree, leaf_ranks, caps, prev_core, coords)
            core, diag = project_ht(cache, tree, caps, warm,
                                    proj.als_sweeps, proj.ls_fallback_threshold)
            # never degrade the star objective relative to the previous step
            candidates = [core, warm]
            if prev_core is not None:
                candidates.append(_pad_core(prev_core, tree, leaf_ranks, caps))
            core = min(candidates, key=cache.core_objective)
        prev_core = core
        prev = ProjectedPrev(basis.mats, core)
        eps = error_estimate(prev, a)
        states.append(GreedyState(r, basis, core, eps))
        trace.append(GreedyTrace(r, eps.value, eps.floor_flagged, cache.ranks,
                                 1000 * (time.perf_counter() - t0),
                                 res.sweeps, res.restarts, diag))
    return states, trace


def _step_config(config, r):
    return CorrectionConfig(max_sweeps=config.max_sweeps,
                            stagnation_tol=config.stagnation_tol,
                            init=config.init, seed=config.seed + 997 * r,
                            max_restarts=config.max_restarts)


def _warm_core(tree, leaf_ranks, caps, prev_core, coords):
    """Previous core zero-padded into the grown space, plus the new correction."""
    rank_one = ht_from_canonical(
        tree, CanonicalTensor([c.reshape(-1, 1) for c in coords]))
    if prev_core is None:
        warm = rank_one
    else:
        warm = ht_add(_pad_core(prev_core, tree, leaf_ranks, caps), rank_one)
    if any(warm.node_rank(t) > caps[t] for t in tree.interior_nodes() if t != tree.root):
        warm = ht_truncate(warm, caps)
    return ht_identity_leaves(warm, leaf_ranks)

