"""Kronecker-structured operators and the star inner products on operator space.

A :class:`KronSumOperator` is a weighted sum of d-fold Kronecker products of
square per-mode matrices (dense or CSR).  It acts on tensors in any of the
formats from :mod:`kroninv.tensor_formats`.  The star inner products
``<X, Y>_* = <X C, Y>`` with C = A (A symmetric positive definite) or
C = A A^T (A definite) make projections of the unknown inverse computable:
``<A^{-1}, Q>_*`` reduces to ``<B, Q>`` with B = I or B = A^T.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tensor_formats import CanonicalTensor, HTTensor, TuckerTensor, ht_add, ht_scale

__all__ = [
    "KronSumOperator",
    "StarMode",
    "StarInnerProduct",
    "apply_operator",
    "compose",
    "adjoint",
    "frobenius_inner_ops",
    "star_inner",
    "star_inner_with_inverse",
    "residual_operator",
    "factor_trace_inner",
    "factor_apply",
]

# dense/sparse products promote to dense above this fill fraction
_DENSE_FILL = 0.5


def _is_sparse(m):
    return sp.issparse(m)


def factor_apply(m, x):
    """Matrix times (matrix or vector), dense or CSR."""
    return m @ x


def _csr_row_index(m):
    rows = getattr(m, "_kroninv_rows", None)
    if rows is None or rows.shape[0] != m.nnz:
        rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))
        try:
            m._kroninv_rows = rows
        except AttributeError:
            pass
    return rows


def factor_trace_inner(x, y):
    """trace(x^T y) for any mix of dense and CSR factors."""
    if _is_sparse(x):
        if _is_sparse(y):
            return float(x.multiply(y).sum())
        x = x.tocsr()
        return float(x.data @ y[_csr_row_index(x), x.indices])
    if _is_sparse(y):
        y = y.tocsr()
        return float(y.data @ x[_csr_row_index(y), y.indices])
    return float(np.vdot(x, y))


def _factor_matmul(a, b):
    out = a @ b
    if _is_sparse(out) and out.nnz > _DENSE_FILL * out.shape[0] * out.shape[1]:
        return np.asarray(out.todense())
    return out


def _factor_T(m):
    if _is_sparse(m):
        return m.T.tocsr()
    return np.ascontiguousarray(m.T)


def _as_dense(m):
    return np.asarray(m.todense()) if _is_sparse(m) else np.asarray(m)


class KronSumOperator:
    """Rank-R sum of Kronecker products of square matrices, with term weights."""

    def __init__(self, dims, terms, weights=None):
        self.dims = tuple(int(n) for n in dims)
        self.terms = [tuple(t) for t in terms]
        for t in self.terms:
            assert len(t) == len(self.dims)
            for m, n in zip(t, self.dims):
                assert m.shape == (n, n), f"factor shape {m.shape} != ({n},{n})"
        if weights is None:
            weights = np.ones(len(self.terms))
        self.weights = np.asarray(weights, dtype=float)
        assert self.weights.shape == (len(self.terms),)

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def rank(self):
        return len(self.terms)

    @staticmethod
    def identity(dims):
        return KronSumOperator(dims, [tuple(sp.identity(n, format="csr") for n in dims)])

    @staticmethod
    def zero(dims):
        return KronSumOperator(dims, [], np.zeros(0))

    @staticmethod
    def rank_one(factors, weight=1.0):
        dims = [m.shape[0] for m in factors]
        return KronSumOperator(dims, [tuple(factors)], [weight])

    def scale(self, s):
        return KronSumOperator(self.dims, self.terms, self.weights * s)

    def concat(self, other):
        assert self.dims == other.dims
        return KronSumOperator(self.dims, self.terms + other.terms,
                               np.concatenate([self.weights, other.weights]))

    def to_dense_matrix(self, cap=10**7):
        """Full matrix on the Fortran-vectorized tensor space (oracle use only)."""
        n = math.prod(self.dims)
        if n * n > cap:
            raise ValueError("operator too large to densify")
        out = np.zeros((n, n))
        for w, term in zip(self.weights, self.terms):
            block = np.ones((1, 1))
            # mode 0 fastest in vec order means mode 0 is the innermost kron factor
            for m in term:
                block = np.kron(_as_dense(m), block)
            out += w * block
        return out


def apply_operator(a: KronSumOperator, x):
    """Apply the operator to a tensor; the output stays in the input's family.

    Canonical rank r maps to canonical rank R*r.  Tucker inputs return a Tucker
    tensor with ranks multiplied by R (block core).  HT inputs return the
    formatted sum over terms (node ranks multiplied by R); callers needing
    bounded ranks should apply term by term and truncate.
    """
    dims = x.shape if isinstance(x, np.ndarray) else x.dims
    if tuple(dims) != a.dims:
        raise ValueError(f"dimension mismatch: {dims} vs {a.dims}")

    if isinstance(x, np.ndarray):
        out = np.zeros(a.dims)
        for w, term in zip(a.weights, a.terms):
            y = x
            for mu, m in enumerate(term):
                y = np.moveaxis(np.tensordot(_as_dense(m), y, axes=([1], [mu])), 0, mu)
            out += w * y
        return out

    if isinstance(x, CanonicalTensor):
        if a.rank == 0 or x.rank == 0:
            return CanonicalTensor.zero(a.dims)
        factors = [np.hstack([_as_dense(factor_apply(term[mu], x.factors[mu]))
                              for term in a.terms])
                   for mu in range(a.ndim)]
        weights = np.concatenate([w * x.weights for w in a.weights])
        return CanonicalTensor(factors, weights)

    if isinstance(x, TuckerTensor):
        if a.rank == 0:
            return TuckerTensor(np.zeros((0,) * a.ndim), [np.zeros((n, 0)) for n in a.dims])
        factors = [np.hstack([_as_dense(factor_apply(term[mu], x.factors[mu]))
                              for term in a.terms])
                   for mu in range(a.ndim)]
        r = x.ranks
        core = np.zeros(tuple(a.rank * rr for rr in r))
        for i, w in enumerate(a.weights):
            idx = tuple(slice(i * rr, (i + 1) * rr) for rr in r)
            core[idx] = w * x.core
        return TuckerTensor(core, factors)

    if isinstance(x, HTTensor):
        out = None
        for i in range(a.rank):
            y = apply_operator_term(a, i, x)
            out = y if out is None else ht_add(out, y)
        if out is None:
            from .tensor_formats import ht_zero
            return ht_zero(x.tree, a.dims)
        return out

    raise TypeError(type(x))


def apply_operator_term(a: KronSumOperator, i, x: HTTensor):
    """Apply a single Kronecker term to an HT tensor (ranks unchanged)."""
    term, w = a.terms[i], a.weights[i]
    frames = [_as_dense(factor_apply(term[mu], x.leaf_frames[mu]))
              for mu in range(a.ndim)]
    return ht_scale(HTTensor(x.tree, frames, x.transfer), w)


def compose(a: KronSumOperator, b: KronSumOperator):
    """Operator product AB in factored form with R_A * R_B terms."""
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")
    terms, weights = [], []
    for wa, ta in zip(a.weights, a.terms):
        for wb, tb in zip(b.weights, b.terms):
            terms.append(tuple(_factor_matmul(ma, mb) for ma, mb in zip(ta, tb)))
            weights.append(wa * wb)
    return KronSumOperator(a.dims, terms, np.asarray(weights))


def adjoint(a: KronSumOperator):
    return KronSumOperator(a.dims, [tuple(_factor_T(m) for m in t) for t in a.terms],
                           a.weights.copy())


def frobenius_inner_ops(x: KronSumOperator, y: KronSumOperator):
    """<X, Y> on operator space: sum over term pairs of per-mode trace products."""
    if x.dims != y.dims:
        raise ValueError(f"dimension mismatch: {x.dims} vs {y.dims}")
    total = 0.0
    for wx, tx in zip(x.weights, x.terms):
        for wy, ty in zip(y.weights, y.terms):
            p = wx * wy
            for mx, my in zip(tx, ty):
                p *= factor_trace_inner(mx, my)
                if p == 0.0:
                    break
            total += p
    return total


class StarMode(enum.Enum):
    SPD = "spd"
    GENERAL = "general"


@dataclass
class StarInnerProduct:
    """Operator-space inner product <X, Y>_* = <X C, Y> with C = A B.

    SPD mode uses B = I (so C = A); GENERAL uses B = A^T (so C = A A^T with
    R_A^2 factored terms).  B is kept because <A^{-1}, Q>_* = <B, Q>.
    """

    mode: StarMode
    a: KronSumOperator
    c: KronSumOperator
    b: KronSumOperator

    @staticmethod
    def build(a: KronSumOperator, mode: StarMode):
        if mode == StarMode.SPD:
            return StarInnerProduct(mode, a, a, KronSumOperator.identity(a.dims))
        at = adjoint(a)
        return StarInnerProduct(mode, a, compose(a, at), at)

    @property
    def dims(self):
        return self.a.dims


def star_inner(x: KronSumOperator, y: KronSumOperator, star: StarInnerProduct):
    """<X, Y>_* evaluated through factored trace products, never densified."""
    return frobenius_inner_ops(compose(x, star.c), y)


def star_inner_with_inverse(q: KronSumOperator, star: StarInnerProduct):
    """<A^{-1}, Q>_* without A^{-1}: equals <B, Q> for B = I or A^T."""
    return frobenius_inner_ops(star.b, q)


def residual_operator(p: KronSumOperator, a: KronSumOperator, star: StarInnerProduct):
    """R(P) = B - P A B in factored form (1 + R_P * R_C terms in SPD mode)."""
    if p.dims != a.dims:
        raise ValueError(f"dimension mismatch: {p.dims} vs {a.dims}")
    return star.b.concat(compose(p, star.c).scale(-1.0))
