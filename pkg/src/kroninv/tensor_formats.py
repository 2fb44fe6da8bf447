"""Low-rank tensor formats and truncation algorithms.

Full tensors are plain ``numpy.ndarray`` objects of shape ``dims``.  Whenever a
flat (vectorized) view is needed, the convention is column-major by mode:
mode 0 runs fastest, which is ``order='F'`` in numpy.  Low-rank formats are

* :class:`CanonicalTensor` -- a weighted sum of elementary (rank-one) products,
* :class:`TuckerTensor`   -- core tensor contracted with per-mode factors,
* :class:`HTTensor`       -- hierarchical format organized by a binary
  :class:`DimensionTree`, parametrized by leaf frames and transfer tensors.

Inner products between any pair of formats are computed factor-wise through
per-mode Gram matrices; densification is only used as a guarded fallback for
pairs involving a full ndarray.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionTree",
    "CanonicalTensor",
    "TuckerTensor",
    "HTTensor",
    "TruncationSpec",
    "inner",
    "norm",
    "densify",
    "t_matricization_rank",
    "hosvd",
    "hooi_refine",
    "hsvd",
    "ht_orthogonalize",
    "ht_gramians",
    "ht_truncate",
    "ht_add",
    "ht_scale",
    "ht_gram_inner",
    "ht_gram_inner_batched",
    "ht_from_canonical",
    "ht_identity_leaves",
    "ht_contract_vectors",
    "ht_contract_vectors_batched",
    "ht_contract_vectors_except",
    "ht_contract_vectors_except_batched",
    "einsum_cached",
]

DENSIFY_CAP = 10**7  # entries; densification beyond this is a bug, not a path

# Singular values below max(tol_rel * smax, SVD_FLOOR * smax) are discarded.
SVD_FLOOR = 1e-14

_EINSUM_PATHS = {}


def einsum_cached(expr, *operands):
    """np.einsum with the contraction path memoized per (expr, shapes).

    The tree contractions issue thousands of small einsums with recurring
    shapes; recomputing the greedy path each call dominates their cost.
    """
    key = (expr, tuple(op.shape for op in operands))
    path = _EINSUM_PATHS.get(key)
    if path is None:
        path = np.einsum_path(expr, *operands, optimize="greedy")[0]
        _EINSUM_PATHS[key] = path
    return np.einsum(expr, *operands, optimize=path)


# ---------------------------------------------------------------------------
# dimension trees
# ---------------------------------------------------------------------------

class DimensionTree:
    """Full binary tree over the mode set {0, ..., d-1} with root {0,...,d-1}.

    Node ``i`` carries ``modes[i]``, a tuple of modes in *tree order* (the
    concatenation of its children's orders), and ``children[i]`` which is a
    pair of node ids or None for leaves.  Node 0 is the root.
    """

    def __init__(self, modes, children):
        self.modes = [tuple(m) for m in modes]
        self.children = list(children)
        self.parent = [None] * len(self.modes)
        for i, ch in enumerate(self.children):
            if ch is not None:
                for c in ch:
                    self.parent[c] = i
        self.leaf_of_mode = {}
        for i, ch in enumerate(self.children):
            if ch is None:
                assert len(self.modes[i]) == 1, "leaves must be singletons"
                self.leaf_of_mode[self.modes[i][0]] = i
        self._check()

    def _check(self):
        d = len(self.leaf_of_mode)
        assert sorted(self.modes[0]) == list(range(d))
        for i, ch in enumerate(self.children):
            if ch is None:
                continue
            a, b = ch
            assert self.modes[i] == self.modes[a] + self.modes[b]

    @property
    def ndim(self):
        return len(self.leaf_of_mode)

    @property
    def root(self):
        return 0

    def is_leaf(self, node):
        return self.children[node] is None

    def interior_nodes(self):
        """Interior node ids in root-first (BFS) order."""
        order, queue = [], [self.root]
        while queue:
            t = queue.pop(0)
            if not self.is_leaf(t):
                order.append(t)
                queue.extend(self.children[t])
        return order

    def bottom_up(self):
        """All node ids, children always before parents, root last."""
        order, queue = [], [self.root]
        while queue:
            t = queue.pop(0)
            order.append(t)
            if not self.is_leaf(t):
                queue.extend(self.children[t])
        return order[::-1]

    @staticmethod
    def balanced(d):
        """Balanced tree splitting mode ranges at their midpoints."""
        assert d >= 1
        modes, children = [], []

        def build(lo, hi):
            idx = len(modes)
            modes.append(tuple(range(lo, hi)))
            children.append(None)
            if hi - lo > 1:
                mid = lo + (hi - lo + 1) // 2
                a = build(lo, mid)
                b = build(mid, hi)
                children[idx] = (a, b)
            return idx

        build(0, d)
        return DimensionTree(modes, children)

    @staticmethod
    def from_nested(spec):
        """Build from a nested pair structure, e.g. ``[[0, 1], [2, [3, 4]]]``.

        An int is a leaf; a two-element list is an interior node.
        """
        modes, children = [], []

        def build(node):
            idx = len(modes)
            modes.append(None)
            children.append(None)
            if isinstance(node, int):
                modes[idx] = (node,)
            else:
                assert len(node) == 2, "interior nodes have exactly two successors"
                a = build(node[0])
                b = build(node[1])
                children[idx] = (a, b)
                modes[idx] = modes[a] + modes[b]
            return idx

        build(spec)
        return DimensionTree(modes, children)

    def to_nested(self):
        def rec(t):
            if self.is_leaf(t):
                return self.modes[t][0]
            a, b = self.children[t]
            return [rec(a), rec(b)]

        return rec(self.root)

    def __eq__(self, other):
        return isinstance(other, DimensionTree) and self.to_nested() == other.to_nested()


# ---------------------------------------------------------------------------
# formats
# ---------------------------------------------------------------------------

@dataclass
class CanonicalTensor:
    """Weighted sum of rank-one products; rank 0 is the zero tensor."""

    factors: list  # per mode, (n_mu x r) arrays sharing the column count r
    weights: np.ndarray = None

    def __post_init__(self):
        self.factors = [np.asarray(f, dtype=float) for f in self.factors]
        r = self.factors[0].shape[1]
        assert all(f.shape[1] == r for f in self.factors)
        if self.weights is None:
            self.weights = np.ones(r)
        self.weights = np.asarray(self.weights, dtype=float)
        assert self.weights.shape == (r,)

    @property
    def dims(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def ndim(self):
        return len(self.factors)

    @property
    def rank(self):
        return self.factors[0].shape[1]

    @staticmethod
    def zero(dims):
        return CanonicalTensor([np.zeros((n, 0)) for n in dims], np.zeros(0))

    @staticmethod
    def rank_one(vectors, weight=1.0):
        return CanonicalTensor([np.asarray(v, float).reshape(-1, 1) for v in vectors],
                               np.array([float(weight)]))

    def scale(self, s):
        return CanonicalTensor(self.factors, self.weights * s)

    def concat(self, other):
        assert self.dims == other.dims
        return CanonicalTensor(
            [np.hstack([a, b]) for a, b in zip(self.factors, other.factors)],
            np.concatenate([self.weights, other.weights]))


@dataclass
class TuckerTensor:
    """Core tensor plus per-mode factor matrices.

    Factors are orthonormal for outputs of hosvd/hooi; intermediate results of
    tensor arithmetic may carry non-orthonormal factors until re-compressed.
    """

    core: np.ndarray
    factors: list

    def __post_init__(self):
        self.core = np.asarray(self.core, dtype=float)
        self.factors = [np.asarray(f, dtype=float) for f in self.factors]
        assert self.core.ndim == len(self.factors)
        assert all(f.shape[1] == r for f, r in zip(self.factors, self.core.shape))

    @property
    def dims(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def ndim(self):
        return len(self.factors)

    @property
    def ranks(self):
        return self.core.shape

    def orthonormalize(self):
        """Equivalent tensor with orthonormal factors (QR pushed into the core)."""
        qs, core = [], self.core
        for mu, f in enumerate(self.factors):
            q, r = np.linalg.qr(f)
            qs.append(q)
            core = _mode_mult(core, mu, r)
        return TuckerTensor(core, qs)


@dataclass
class HTTensor:
    """Hierarchical format: leaf frames plus one transfer tensor per interior node.

    ``transfer[t]`` has shape (r_child1, r_child2, r_t); the root is stored with
    r_root = 1 so all interior nodes look alike.
    """

    tree: DimensionTree
    leaf_frames: list              # per mode, (n_mu x r_leaf)
    transfer: dict = field(default_factory=dict)   # node id -> 3-way array

    def __post_init__(self):
        self.leaf_frames = [np.asarray(f, dtype=float) for f in self.leaf_frames]
        self.transfer = {t: np.asarray(b, dtype=float) for t, b in self.transfer.items()}
        for t in self.tree.interior_nodes():
            a, b = self.tree.children[t]
            beta = self.transfer[t]
            assert beta.ndim == 3
            assert beta.shape[0] == self.node_rank(a) and beta.shape[1] == self.node_rank(b)
        assert self.transfer[self.tree.root].shape[2] == 1

    def node_rank(self, node):
        if self.tree.is_leaf(node):
            return self.leaf_frames[self.tree.modes[node][0]].shape[1]
        return self.transfer[node].shape[2]

    @property
    def dims(self):
        return tuple(self.leaf_frames[m].shape[0] for m in range(self.tree.ndim))

    @property
    def ndim(self):
        return self.tree.ndim

    @property
    def ranks(self):
        return {t: self.node_rank(t) for t in range(len(self.tree.modes))}

    def copy(self):
        return HTTensor(self.tree, [f.copy() for f in self.leaf_frames],
                        {t: b.copy() for t, b in self.transfer.items()})


@dataclass
class TruncationSpec:
    """Target ranks (Tucker tuple or HT per-node dict) plus refinement controls."""

    target: object
    refine_iterations: int = 0
    tolerance: float = None

    def __post_init__(self):
        assert self.refine_iterations >= 0
        if self.tolerance is not None:
            assert 0.0 < self.tolerance < 1.0


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------

def _mode_mult(x, k, mat):
    """Mode-k product of ndarray x with matrix mat acting on that mode."""
    y = np.tensordot(mat, x, axes=([1], [k]))
    return np.moveaxis(y, 0, k)


def _unfold(x, row_modes):
    """Matricize x with ``row_modes`` (in the given order) as rows.

    Flattening is Fortran-style: the first listed mode runs fastest.
    """
    d = x.ndim
    col_modes = [m for m in range(d) if m not in row_modes]
    perm = list(row_modes) + col_modes
    nr = int(np.prod([x.shape[m] for m in row_modes], dtype=object))
    return np.transpose(x, perm).reshape(nr, -1, order="F")


def _svd_rank(s, max_rank, tol_rel=None):
    """Number of singular values kept under the rank cap and thresholds."""
    if s.size == 0 or s[0] == 0.0:
        return 0
    thresh = SVD_FLOOR * s[0]
    if tol_rel is not None:
        thresh = max(thresh, tol_rel * s[0])
    r = int(np.sum(s > thresh))
    return max(min(r, max_rank), 0)


def densify(x, cap=DENSIFY_CAP):
    """Expand any format to a full ndarray.  Guarded by an entry cap."""
    if isinstance(x, np.ndarray):
        return x
    n_entries = int(np.prod(x.dims, dtype=object))
    if n_entries > cap:
        raise ValueError(f"refusing to densify {x.dims}: {n_entries} entries > cap {cap}")
    if isinstance(x, CanonicalTensor):
        out = np.zeros(x.dims)
        for i in range(x.rank):
            term = x.weights[i]
            for f in x.factors:
                term = np.multiply.outer(term, f[:, i])
            out += term
        return out
    if isinstance(x, TuckerTensor):
        out = x.core
        for mu, f in enumerate(x.factors):
            out = _mode_mult(out, mu, f)
        return out
    if isinstance(x, HTTensor):
        return _ht_densify(x)
    raise TypeError(f"unknown tensor type {type(x)}")


def _ht_densify(x):
    tree = x.tree

    def frame(t):
        # returns (prod of subtree dims, r_t) with the subtree's modes in tree
        # order, first mode fastest
        if tree.is_leaf(t):
            return x.leaf_frames[tree.modes[t][0]]
        a, b = tree.children[t]
        fa, fb = frame(a), frame(b)
        out = np.einsum("ai,bj,ijk->abk", fa, fb, x.transfer[t])
        return out.reshape(fa.shape[0] * fb.shape[0], -1, order="F")

    flat = frame(tree.root)[:, 0]
    order = tree.modes[tree.root]
    shaped = flat.reshape([x.dims[m] for m in order], order="F")
    return np.transpose(shaped, np.argsort(order))


# ---------------------------------------------------------------------------
# inner products
# ---------------------------------------------------------------------------

def inner(x, y):
    """Canonical inner product between tensors in any pair of formats."""
    dx = x.shape if isinstance(x, np.ndarray) else x.dims
    dy = y.shape if isinstance(y, np.ndarray) else y.dims
    if tuple(dx) != tuple(dy):
        raise ValueError(f"dimension mismatch: {dx} vs {dy}")

    if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
        if not isinstance(x, np.ndarray):
            x, y = y, x
        if isinstance(y, np.ndarray):
            return float(np.vdot(x, y))
        return float(np.vdot(x, densify(y)))

    if isinstance(x, HTTensor) or isinstance(y, HTTensor):
        if not isinstance(x, HTTensor):
            x, y = y, x
        if isinstance(y, CanonicalTensor):
            y = ht_from_canonical(x.tree, y)
        if isinstance(y, TuckerTensor):
            # reduce the HT tensor onto the Tucker factor spaces, then densify
            # the small reduced tensor and contract with the core
            grams = [u.T @ f for u, f in zip(y.factors, x.leaf_frames)]
            reduced = HTTensor(x.tree, [g.T for g in grams], x.transfer)
            return float(np.vdot(densify(reduced), y.core))
        leaf_grams = [fx.T @ fy for fx, fy in zip(x.leaf_frames, y.leaf_frames)]
        return ht_gram_inner(x, y, leaf_grams)

    if isinstance(x, TuckerTensor) and isinstance(y, TuckerTensor):
        red = x.core
        for mu in range(x.ndim):
            red = _mode_mult(red, mu, y.factors[mu].T @ x.factors[mu])
        return float(np.vdot(red, y.core))

    if isinstance(x, CanonicalTensor) and isinstance(y, CanonicalTensor):
        if x.rank == 0 or y.rank == 0:
            return 0.0
        g = np.ones((x.rank, y.rank))
        for fx, fy in zip(x.factors, y.factors):
            g *= fx.T @ fy
        return float(x.weights @ g @ y.weights)

    if isinstance(x, TuckerTensor):
        x, y = y, x
    # canonical vs tucker
    if y.core.size == 0 or x.rank == 0:
        return 0.0
    d = x.ndim
    args = [y.core, list(range(d))]
    for mu in range(d):
        args += [y.factors[mu].T @ x.factors[mu], [mu, d]]
    v = np.einsum(*args, [d])
    return float(v @ x.weights)


def norm(x):
    return float(np.sqrt(max(inner(x, x), 0.0)))


def t_matricization_rank(x, t):
    """Numerical rank of the matricization of dense ``x`` separating modes ``t``."""
    x = np.asarray(x, dtype=float)
    t = tuple(sorted(t))
    if len(t) == 0 or len(t) >= x.ndim:
        raise ValueError("t must be a nonempty proper subset of the modes")
    s = np.linalg.svd(_unfold(x, t), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > 1e-10 * s[0]))


# ---------------------------------------------------------------------------
# Tucker compression: HOSVD and HOOI
# ---------------------------------------------------------------------------

def _mode_frame_dense(x, mu, max_rank, tol_rel=None):
    u, s, _ = np.linalg.svd(_unfold(x, (mu,)), full_matrices=False)
    r = max(_svd_rank(s, max_rank, tol_rel), 1 if min(u.shape) else 0)
    return u[:, :r]

def _mode_frame_canonical(x, mu, max_rank, tol_rel=None):
    # Gram trick: the mode-mu unfolding is X^mu diag(w) Z^T where the Gram of Z
    # is the Hadamard product of the other modes' factor Grams.
    s_mat = np.outer(x.weights, x.weights)
    for nu in range(x.ndim):
        if nu != mu:
            f = x.factors[nu]
            s_mat = s_mat * (f.T @ f)
    s_mat = 0.5 * (s_mat + s_mat.T)
    evals, evecs = np.linalg.eigh(s_mat)
    evals = np.clip(evals, 0.0, None)
    y = x.factors[mu] @ (evecs * np.sqrt(evals))
    u, s, _ = np.linalg.svd(y, full_matrices=False)
    r = max(_svd_rank(s, max_rank, tol_rel), 1 if min(u.shape) else 0)
    return u[:, :r]


def _tucker_core_from_frames(x, frames):
    d = len(frames)
    if isinstance(x, np.ndarray):
        core = x
        for mu, u in enumerate(frames):
            core = _mode_mult(core, mu, u.T)
        return core
    if isinstance(x, CanonicalTensor):
        args = []
        for mu in range(d):
            args += [frames[mu].T @ x.factors[mu], [mu, d]]
        args += [x.weights, [d]]
        return np.einsum(*args, list(range(d)))
    if isinstance(x, TuckerTensor):
        core = x.core
        for mu in range(d):
            core = _mode_mult(core, mu, frames[mu].T @ x.factors[mu])
        return core
    raise TypeError(type(x))


def hosvd(x, ranks, tol_rel=None):
    """Quasi-best Tucker approximation from dominant mode subspaces.

    ``x`` may be a full ndarray, a CanonicalTensor, or a TuckerTensor (the
    latter is re-compressed through its orthonormalized core).  Error is within
    a factor sqrt(d) of the best rank-``ranks`` approximation.
    """
    if isinstance(x, TuckerTensor):
        xo = x.orthonormalize()
        inner_t = hosvd(xo.core, ranks, tol_rel)
        return TuckerTensor(inner_t.core,
                            [q @ u for q, u in zip(xo.factors, inner_t.factors)])
    dims = x.shape if isinstance(x, np.ndarray) else x.dims
    assert len(ranks) == len(dims)
    frames = []
    for mu, r in enumerate(ranks):
        assert r <= dims[mu], "target rank exceeds mode dimension"
        if isinstance(x, np.ndarray):
            frames.append(_mode_frame_dense(x, mu, r, tol_rel))
        else:
            frames.append(_mode_frame_canonical(x, mu, r, tol_rel))
    return TuckerTensor(_tucker_core_from_frames(x, frames), frames)


def _hooi_projected_matrix(x, mu, frames):
    """Mode-mu unfolding of x contracted with the other modes' frames."""
    if isinstance(x, np.ndarray):
        y = x
        for nu in range(x.ndim):
            if nu != mu:
                y = _mode_mult(y, nu, frames[nu].T)
        return _unfold(y, (mu,))
    if isinstance(x, TuckerTensor):
        red = x.core
        for nu in range(x.ndim):
            if nu != mu:
                red = _mode_mult(red, nu, frames[nu].T @ x.factors[nu])
        return x.factors[mu] @ _unfold(red, (mu,))
    # canonical: Khatri-Rao of the small reduced factors
    small = [frames[nu].T @ x.factors[nu] for nu in range(x.ndim) if nu != mu]
    kr = x.weights[None, :].copy()
    for m in small:
        kr = (kr[:, None, :] * m[None, :, :]).reshape(-1, m.shape[1])
    return x.factors[mu] @ kr.T


def hooi_refine(x, ranks, sweeps, init=None):
    """Alternating refinement of a Tucker approximation, starting from HOSVD.

    With ``sweeps=0`` the initializer is returned unchanged.  The approximation
    error is non-increasing over sweeps; iteration stops early once the
    relative improvement drops below 1e-12.
    """
    t = init if init is not None else hosvd(x, ranks)
    if sweeps == 0:
        return t
    frames = list(t.factors)
    norm_x_sq = inner(x, x)
    prev_err = None
    for _ in range(sweeps):
        for mu in range(len(ranks)):
            mat = _hooi_projected_matrix(x, mu, frames)
            u, s, _ = np.linalg.svd(mat, full_matrices=False)
            frames[mu] = u[:, :ranks[mu]]
        core = _tucker_core_from_frames(x, frames)
        err = np.sqrt(max(norm_x_sq - float(np.vdot(core, core)), 0.0))
        if prev_err is not None and prev_err - err < 1e-12 * max(np.sqrt(norm_x_sq), 1.0):
            break
        prev_err = err
    return TuckerTensor(core, frames)


# ---------------------------------------------------------------------------
# hierarchical format: construction, orthogonalization, truncation
# ---------------------------------------------------------------------------

def ht_from_canonical(tree, x):
    """Exact HT representation of a canonical tensor (diagonal transfers)."""
    r = x.rank
    if r == 0:
        return ht_zero(tree, x.dims)
    transfer = {}
    for t in tree.interior_nodes():
        if t == tree.root:
            beta = np.zeros((r, r, 1))
            beta[np.arange(r), np.arange(r), 0] = x.weights
        else:
            beta = np.zeros((r, r, r))
            beta[np.arange(r), np.arange(r), np.arange(r)] = 1.0
        transfer[t] = beta
    return HTTensor(tree, [f.copy() for f in x.factors], transfer)


def ht_zero(tree, dims):
    transfer = {}
    for t in tree.interior_nodes():
        rt = 1 if t == tree.root else 1
        transfer[t] = np.zeros((1, 1, rt))
    return HTTensor(tree, [np.zeros((n, 1)) for n in dims], transfer)


def ht_scale(x, s):
    out = x.copy()
    out.transfer[x.tree.root] = out.transfer[x.tree.root] * s
    return out


def ht_add(x, y):
    """Formatted sum; node ranks add (root stays rank one)."""
    assert x.tree == y.tree and x.dims == y.dims
    tree = x.tree
    frames = [np.hstack([fx, fy]) for fx, fy in zip(x.leaf_frames, y.leaf_frames)]
    transfer = {}
    for t in tree.interior_nodes():
        bx, by = x.transfer[t], y.transfer[t]
        if t == tree.root:
            beta = np.zeros((bx.shape[0] + by.shape[0], bx.shape[1] + by.shape[1], 1))
            beta[:bx.shape[0], :bx.shape[1], 0] = bx[:, :, 0]
            beta[bx.shape[0]:, bx.shape[1]:, 0] = by[:, :, 0]
        else:
            beta = np.zeros((bx.shape[0] + by.shape[0],
                             bx.shape[1] + by.shape[1],
                             bx.shape[2] + by.shape[2]))
            beta[:bx.shape[0], :bx.shape[1], :bx.shape[2]] = bx
            beta[bx.shape[0]:, bx.shape[1]:, bx.shape[2]:] = by
        transfer[t] = beta
    return HTTensor(tree, frames, transfer)


def ht_orthogonalize(x):
    """Equivalent representation with orthonormal non-root frames."""
    tree = x.tree
    frames = [f.copy() for f in x.leaf_frames]
    transfer = {t: b.copy() for t, b in x.transfer.items()}

    def push_into_parent(node, r_mat):
        p = tree.parent[node]
        axis = tree.children[p].index(node)
        if axis == 0:
            transfer[p] = np.einsum("ai,ijk->ajk", r_mat, transfer[p])
        else:
            transfer[p] = np.einsum("bj,ijk->ibk", r_mat, transfer[p])

    for t in tree.bottom_up():
        if t == tree.root:
            continue
        if tree.is_leaf(t):
            mu = tree.modes[t][0]
            q, r = np.linalg.qr(frames[mu])
            frames[mu] = q
            push_into_parent(t, r)
        else:
            b = transfer[t]
            r1, r2, rt = b.shape
            q, r = np.linalg.qr(b.reshape(r1 * r2, rt, order="F"))
            transfer[t] = q.reshape(r1, r2, q.shape[1], order="F")
            push_into_parent(t, r)
    return HTTensor(tree, frames, transfer)


def ht_gramians(x):
    """Reduced Gramians of an *orthogonalized* HT tensor, keyed by node id."""
    tree = x.tree
    grams = {tree.root: np.ones((1, 1))}
    for t in tree.interior_nodes():
        a, b = tree.children[t]
        beta, g = x.transfer[t], grams[t]
        grams[a] = einsum_cached("ijk,pjq,kq->ip", beta, beta, g)
        grams[b] = einsum_cached("ijk,iqp,kp->jq", beta, beta, g)
    return grams


def ht_truncate(x, ranks, tol_rel=None):
    """Truncate an HT tensor to per-node ranks (dict or scalar cap).

    Hierarchical SVD on the reduced Gramians; the error is within a factor
    sqrt(2d-3) of the best approximation at these ranks.
    """
    tree = x.tree
    xo = ht_orthogonalize(x)
    grams = ht_gramians(xo)

    def cap(t):
        if isinstance(ranks, dict):
            return ranks[t]
        return int(ranks)

    proj = {}
    for t in range(len(tree.modes)):
        if t == tree.root:
            continue
        g = 0.5 * (grams[t] + grams[t].T)
        evals, evecs = np.linalg.eigh(g)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        sigma = np.sqrt(np.clip(evals, 0.0, None))
        r = max(_svd_rank(sigma, cap(t), tol_rel), 1)
        proj[t] = evecs[:, :r]

    frames = list(xo.leaf_frames)
    transfer = {}
    for t in tree.interior_nodes():
        a, b = tree.children[t]
        ua, ub = proj[a], proj[b]
        beta = einsum_cached("ijk,ia,jb->abk", xo.transfer[t], ua, ub)
        if t != tree.root:
            beta = einsum_cached("abk,kc->abc", beta, proj[t])
        transfer[t] = beta
    for mu, leaf in tree.leaf_of_mode.items():
        frames[mu] = frames[mu] @ proj[leaf]
    return HTTensor(tree, frames, transfer)


def hsvd(x, tree, ranks, tol_rel=None):
    """Hierarchical approximation of ``x`` at per-node ranks.

    Dense and canonical inputs build the format from scratch; HT inputs are
    truncated in place (no densification).  ``ranks`` is a dict node->rank or a
    scalar cap applied at every node.
    """
    if isinstance(x, HTTensor):
        assert x.tree == tree
        return ht_truncate(x, ranks, tol_rel)
    if isinstance(x, CanonicalTensor):
        return ht_truncate(ht_from_canonical(tree, x), ranks, tol_rel)
    x = np.asarray(x, dtype=float)

    def cap(t):
        if isinstance(ranks, dict):
            return ranks[t]
        return int(ranks)

    # frames for every non-root node from SVDs of the tree-ordered unfoldings
    frames = {}
    for t in range(len(tree.modes)):
        if t == tree.root:
            continue
        m = _unfold(x, tree.modes[t])
        feasible = min(m.shape)
        if cap(t) > feasible and isinstance(ranks, dict):
            raise ValueError(f"infeasible rank {cap(t)} at node {t} (max {feasible})")
        u, s, _ = np.linalg.svd(m, full_matrices=False)
        r = max(_svd_rank(s, min(cap(t), feasible), tol_rel), 1)
        frames[t] = u[:, :r]

    def as3(v, t):
        a, b = tree.children[t]
        na = int(np.prod([x.shape[m] for m in tree.modes[a]], dtype=object))
        return v.reshape(na, -1, v.shape[1], order="F")

    transfer = {}
    for t in tree.interior_nodes():
        a, b = tree.children[t]
        if t == tree.root:
            vec = _unfold(x, tree.modes[t])  # (prod dims, 1)
            v3 = as3(vec, t)
        else:
            v3 = as3(frames[t], t)
        transfer[t] = einsum_cached("abk,ai,bj->ijk", v3, frames[a], frames[b])
    leaf_frames = [frames[tree.leaf_of_mode[mu]] for mu in range(tree.ndim)]
    return HTTensor(tree, leaf_frames, transfer)


# ---------------------------------------------------------------------------
# weighted inner products and structured contractions on the HT format
# ---------------------------------------------------------------------------

def ht_gram_inner(x, y, leaf_grams):
    """<x, y> under per-mode weights given as leaf-frame Gram matrices.

    ``leaf_grams[mu]`` must equal F_x(mu)^T W_mu F_y(mu) for the weight
    operators W_mu defining the inner product.  Contraction runs leaves to
    root, cost linear in the tree size.
    """
    if x.tree != y.tree:
        raise ValueError("trees differ")
    tree = x.tree

    def rec(t):
        if tree.is_leaf(t):
            return np.asarray(leaf_grams[tree.modes[t][0]])
        a, b = tree.children[t]
        ga, gb = rec(a), rec(b)
        return einsum_cached("ijk,ip,jq,pql->kl", x.transfer[t], ga, gb, y.transfer[t])

    return float(rec(tree.root)[0, 0])


def ht_identity_leaves(x, leaf_dims=None):
    """Equivalent tensor with identity leaf frames (absorbed into parents).

    ``leaf_dims`` may enlarge mode sizes; frames are zero-padded before being
    absorbed, which embeds the tensor in the bigger space.
    """
    tree = x.tree
    dims = leaf_dims or x.dims
    transfer = {t: b.copy() for t, b in x.transfer.items()}
    for m, r in enumerate(dims):
        leaf = tree.leaf_of_mode[m]
        f = x.leaf_frames[m]
        pad = np.zeros((r, f.shape[1]))
        pad[:f.shape[0], :] = f
        p = tree.parent[leaf]
        axis = tree.children[p].index(leaf)
        if axis == 0:
            transfer[p] = np.einsum("ai,ijk->ajk", pad, transfer[p])
        else:
            transfer[p] = np.einsum("bj,ijk->ibk", pad, transfer[p])
    return HTTensor(tree, [np.eye(r) for r in dims], transfer)


def ht_gram_inner_batched(x, y, leaf_gram_stacks):
    """Stacked ht_gram_inner: ``leaf_gram_stacks[mu]`` is (B, r_x, r_y).

    Returns the length-B vector of weighted inner products, one contraction
    pass for the whole stack.
    """
    if x.tree != y.tree:
        raise ValueError("trees differ")
    tree = x.tree

    def rec(t):
        if tree.is_leaf(t):
            return np.asarray(leaf_gram_stacks[tree.modes[t][0]])
        a, b = tree.children[t]
        return einsum_cached("ijk,sip,sjq,pql->skl", x.transfer[t], rec(a), rec(b),
                             y.transfer[t])

    return rec(tree.root)[:, 0, 0]


def ht_contract_vectors_batched(x, vec_stacks):
    """Stacked ht_contract_vectors: ``vec_stacks[mu]`` is (B, n_mu)."""
    tree = x.tree

    def rec(t):
        if tree.is_leaf(t):
            mu = tree.modes[t][0]
            return vec_stacks[mu] @ x.leaf_frames[mu]
        a, b = tree.children[t]
        return einsum_cached("ijk,si,sj->sk", x.transfer[t], rec(a), rec(b))

    return rec(tree.root)[:, 0]


def ht_contract_vectors(x, vectors):
    """Scalar <x, v_1 x ... x v_d> for per-mode vectors."""
    tree = x.tree

    def rec(t):
        if tree.is_leaf(t):
            mu = tree.modes[t][0]
            return x.leaf_frames[mu].T @ np.asarray(vectors[mu])
        a, b = tree.children[t]
        return np.einsum("ijk,i,j->k", x.transfer[t], rec(a), rec(b))

    return float(rec(tree.root)[0])


def ht_contract_vectors_except(x, vectors, skip_mode):
    """Contract every mode but ``skip_mode`` with the given vectors.

    Returns the length-n_skip vector v with
    v[i] = <x, v_1 x ... x e_i x ... x v_d>.
    """
    stacks = [None if mu == skip_mode else np.asarray(vectors[mu]).reshape(1, -1)
              for mu in range(x.tree.ndim)]
    return ht_contract_vectors_except_batched(x, stacks, skip_mode)[0]


def ht_contract_vectors_except_batched(x, vec_stacks, skip_mode):
    """Batched form: ``vec_stacks[mu]`` holds rows of mode-mu vectors.

    Returns a (batch, n_skip) array; one contraction pass serves every batch
    entry (used for multi-term operator assemblies).
    """
    tree = x.tree

    def rec(t):
        # subtrees containing skip_mode yield (batch, n_skip, r_t) arrays
        # (or the raw (n_skip, r_t) frame at the skip leaf); others (batch, r_t)
        if tree.is_leaf(t):
            mu = tree.modes[t][0]
            if mu == skip_mode:
                return x.leaf_frames[mu]
            return vec_stacks[mu] @ x.leaf_frames[mu]
        a, b = tree.children[t]
        ra, rb = rec(a), rec(b)
        beta = x.transfer[t]
        if skip_mode in tree.modes[a]:
            if ra.ndim == 2:
                return einsum_cached("ijk,ni,sj->snk", beta, ra, rb)
            return einsum_cached("ijk,sni,sj->snk", beta, ra, rb)
        if skip_mode in tree.modes[b]:
            if rb.ndim == 2:
                return einsum_cached("ijk,si,nj->snk", beta, ra, rb)
            return einsum_cached("ijk,si,snj->snk", beta, ra, rb)
        return einsum_cached("ijk,si,sj->sk", beta, ra, rb)

    return rec(tree.root)[:, :, 0]
