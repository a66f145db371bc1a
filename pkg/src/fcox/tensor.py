"""Tensor-product designs and penalties for functional coefficient surfaces.

Coefficients of a surface ``gamma(u, t) = sum_jk xi_jk B_j(u) B_k(t)`` are
stored with the ``u`` index running fastest, so column ``k * K_u + j``
multiplies ``B_k(t) * int Z(u) B_j(u) du``.

Large designs are held in factored form by :class:`KroneckerDesign`: rows
are grouped so that every row in a group shares the same time-basis vector,
and a row is ``kron(c_group, a_row)``. This keeps the cost of the
likelihood kernels linear in ``rows * K_u`` instead of ``rows * K_u * K_s``.
"""

from __future__ import annotations

import numpy as np


def tensor_design(Bu: np.ndarray, Bt: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Dense tensor design for a functional term.

    Parameters
    ----------
    Bu : ndarray (J, K_u)
        Functional-margin basis evaluated on the predictor grid.
    Bt : ndarray (n, K_s)
        Time-margin basis evaluated at each row's time.
    weights : ndarray (n, J)
        Predictor values times quadrature weights for each row.

    Returns
    -------
    ndarray (n, K_u * K_s)
        Row ``r``, column ``k * K_u + j`` equals
        ``Bt[r, k] * sum_v weights[r, v] * Bu[v, j]``.
    """
    A = np.asarray(weights, float) @ np.asarray(Bu, float)
    Bt = np.asarray(Bt, float)
    n = A.shape[0]
    return np.einsum("rk,rj->rkj", Bt, A).reshape(n, Bt.shape[1] * A.shape[1])


def tensor_penalties(Pu: np.ndarray, Pt: np.ndarray):
    """Penalties for the two margins in the ``u``-fastest column order.

    Returns
    -------
    (ndarray, ndarray)
        ``kron(I_Ks, Pu)`` penalizing roughness in ``u`` and
        ``kron(Pt, I_Ku)`` penalizing roughness in ``t``.
    """
    Ku, Ks = Pu.shape[0], Pt.shape[0]
    return np.kron(np.eye(Ks), Pu), np.kron(Pt, np.eye(Ku))


def _grouped_gram(F: np.ndarray, w: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Per-group weighted Gram matrices ``sum_r w_r F_r F_r^T``."""
    G = starts.size - 1
    m = F.shape[1]
    out = np.empty((G, m, m))
    for g in range(G):
        s, e = starts[g], starts[g + 1]
        Fg = F[s:e]
        out[g] = Fg.T @ (w[s:e, None] * Fg)
    return out


def _segment_sums(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Sums of consecutive row segments; empty segments give zero."""
    n = values.shape[0]
    csum = np.zeros((n + 1,) + values.shape[1:])
    np.cumsum(values, axis=0, out=csum[1:])
    return csum[starts[1:]] - csum[starts[:-1]]


class KroneckerDesign:
    """Design matrix whose rows factor as ``kron(c_group, a_row)`` per block.

    Parameters
    ----------
    features : ndarray (n, m)
        Row-level feature vectors. Rows must be sorted by group.
    group_starts : ndarray (G + 1,)
        Row offsets delimiting the groups.
    blocks : list of (ndarray (G, q_b), ndarray of int)
        For each block, the per-group vector ``c`` and the feature columns
        it multiplies. The block contributes ``q_b * m_b`` columns ordered
        with the feature index fastest.
    """

    def __init__(self, features, group_starts, blocks, source=None):
        self.group_starts = np.asarray(group_starts, dtype=np.int64)
        self.blocks = [(np.asarray(c, float), np.asarray(idx, dtype=np.int64)) for c, idx in blocks]
        G = self.group_starts.size - 1
        for c, idx in self.blocks:
            if c.shape[0] != G:
                raise ValueError("block table must have one row per group")
        self.row_group = np.repeat(np.arange(G), np.diff(self.group_starts))
        self._features = None if features is None else np.ascontiguousarray(features, dtype=float)
        self._source = None
        if source is not None:
            base, index = source
            base = np.ascontiguousarray(base, dtype=float)
            index = np.asarray(index, dtype=np.int64)
            flat = index * G + self.row_group
            if np.unique(flat).size != flat.size:
                raise ValueError("a source row may appear at most once per group")
            m = base.shape[1]
            outer = np.einsum("ni,nj->nij", base, base).reshape(base.shape[0], m * m)
            self._source = (base, index, flat, outer)
        n = self.row_group.size
        if self.group_starts[0] != 0 or (self._features is not None and self._features.shape[0] != n):
            raise ValueError("group_starts must cover all rows")
        sizes = [c.shape[1] * idx.size for c, idx in self.blocks]
        self.block_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @classmethod
    def from_source(cls, base, index, group_starts, blocks):
        """Design whose row ``r`` features are ``base[index[r]]``.

        Group sums and Gram matrices are then formed through a dense
        ``(n_source, n_groups)`` weight matrix, which is much faster than
        row-level accumulation when each source row recurs in many groups.
        """
        return cls(None, group_starts, blocks, source=(base, index))

    @property
    def features(self) -> np.ndarray:
        if self._features is None:
            base, index, _, _ = self._source
            self._features = base[index]
        return self._features

    @classmethod
    def from_dense(cls, X):
        """Wrap an ordinary dense matrix as a single-group design."""
        X = np.atleast_2d(np.asarray(X, float))
        return cls(X, [0, X.shape[0]], [(np.ones((1, 1)), np.arange(X.shape[1]))])

    @property
    def n_rows(self) -> int:
        return self.row_group.size

    @property
    def n_cols(self) -> int:
        return int(self.block_offsets[-1])

    @property
    def n_groups(self) -> int:
        return self.group_starts.size - 1

    def _block_coefs(self, theta, b):
        c, idx = self.blocks[b]
        lo, hi = self.block_offsets[b], self.block_offsets[b + 1]
        return theta[lo:hi].reshape(c.shape[1], idx.size)

    def dot(self, theta: np.ndarray) -> np.ndarray:
        """Linear predictor ``X @ theta``."""
        theta = np.asarray(theta, float)
        if self._source is not None:
            base, _, flat, _ = self._source
            V = np.zeros((self.n_groups, base.shape[1]))
            for b, (c, idx) in enumerate(self.blocks):
                V[:, idx] += c @ self._block_coefs(theta, b)
            return (base @ V.T).ravel()[flat]
        eta = np.zeros(self.n_rows)
        F = self.features
        for b, (c, idx) in enumerate(self.blocks):
            V = c @ self._block_coefs(theta, b)
            if self.n_groups == 1:
                eta += F[:, idx] @ V[0]
            else:
                eta += np.einsum("rj,rj->r", F[:, idx], V[self.row_group])
        return eta

    def _scatter(self, v):
        base, _, flat, _ = self._source
        W = np.zeros(base.shape[0] * self.n_groups)
        W[flat] = v
        return W.reshape(base.shape[0], self.n_groups)

    def group_sums(self, v: np.ndarray) -> np.ndarray:
        """Per-group sums ``sum_r v_r a_r``, shape ``(G, m)``."""
        v = np.asarray(v, float)
        if self._source is not None:
            return self._scatter(v).T @ self._source[0]
        return _segment_sums(self.features * v[:, None], self.group_starts)

    def group_grams(self, w: np.ndarray) -> np.ndarray:
        """Per-group Grams ``sum_r w_r a_r a_r'``, shape ``(G, m, m)``."""
        w = np.asarray(w, float)
        if self._source is not None:
            base, _, _, outer = self._source
            m = base.shape[1]
            return (self._scatter(w).T @ outer).reshape(self.n_groups, m, m)
        return _grouped_gram(self.features, w, self.group_starts)

    def lift_vector(self, S: np.ndarray) -> np.ndarray:
        """Map per-group feature sums ``(G, m)`` to a coefficient-space vector."""
        return np.concatenate([(c.T @ S[:, idx]).ravel() for c, idx in self.blocks])

    def lift_gram(self, Gm: np.ndarray) -> np.ndarray:
        """Map per-group feature Grams ``(G, m, m)`` to a ``(p, p)`` matrix."""
        p = self.n_cols
        out = np.empty((p, p))
        G = Gm.shape[0]
        for b1, (c1, i1) in enumerate(self.blocks):
            for b2, (c2, i2) in enumerate(self.blocks):
                if b2 < b1:
                    continue
                q1, q2, m1, m2 = c1.shape[1], c2.shape[1], i1.size, i2.size
                cc = np.einsum("gk,gl->gkl", c1, c2).reshape(G, q1 * q2)
                sub = Gm[:, i1][:, :, i2].reshape(G, m1 * m2)
                blk = (cc.T @ sub).reshape(q1, q2, m1, m2).transpose(0, 2, 1, 3)
                blk = blk.reshape(q1 * m1, q2 * m2)
                r1 = slice(self.block_offsets[b1], self.block_offsets[b1 + 1])
                r2 = slice(self.block_offsets[b2], self.block_offsets[b2 + 1])
                out[r1, r2] = blk
                if b2 != b1:
                    out[r2, r1] = blk.T
        return out

    def tdot(self, v: np.ndarray) -> np.ndarray:
        """``X.T @ v``."""
        return self.lift_vector(self.group_sums(v))

    def gram(self, w: np.ndarray) -> np.ndarray:
        """``X.T @ diag(w) @ X``."""
        return self.lift_gram(self.group_grams(w))

    def outer_sum(self, vectors: np.ndarray, groups: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """``sum_e weights_e * L_e L_e^T`` with ``L_e`` the lift of ``vectors[e]``.

        ``groups`` must be nondecreasing.
        """
        groups = np.asarray(groups, dtype=np.int64)
        starts = np.searchsorted(groups, np.arange(self.n_groups + 1), side="left")
        return self.lift_gram(_grouped_gram(np.asarray(vectors, float), np.asarray(weights, float), starts))

    def toarray(self) -> np.ndarray:
        """Materialize the dense design."""
        cols = []
        for c, idx in self.blocks:
            cr = c[self.row_group]
            a = self.features[:, idx]
            cols.append(np.einsum("rk,rj->rkj", cr, a).reshape(self.n_rows, -1))
        return np.hstack(cols)


def centered_gram(design: KroneckerDesign, strata_starts: np.ndarray) -> np.ndarray:
    """Gram matrix of the design after removing stratum means from each row.

    Strata must be unions of consecutive rows nested within groups.
    """
    strata_starts = np.asarray(strata_starts, dtype=np.int64)
    sizes = np.diff(strata_starts)
    keep = sizes > 0
    if np.array_equal(strata_starts, design.group_starts):
        sums = design.group_sums(np.ones(design.n_rows))[keep]
    else:
        sums = _segment_sums(design.features, strata_starts)[keep]
    sgroup = design.row_group[strata_starts[:-1][keep]]
    return design.gram(np.ones(design.n_rows)) - design.outer_sum(sums, sgroup, 1.0 / sizes[keep])


def apply_sum_to_zero_constraint(design: KroneckerDesign, strata_starts, penalties, tol: float = 1e-10):
    """Remove coefficient directions absorbed by the stratified baseline.

    A direction ``d`` is removed when ``X d`` is constant within every
    stratum, i.e. when the functional term it generates sums to a
    stratum-level constant that the baseline hazard already carries. After
    within-stratum centering of the predictors no direction qualifies and
    the transform is the identity.

    Parameters
    ----------
    design : KroneckerDesign
    strata_starts : ndarray
        Row offsets of the strata.
    penalties : list of ndarray
        Penalty matrices in the original coefficients.
    tol : float
        Relative eigenvalue threshold for the removed directions.

    Returns
    -------
    T : ndarray (p, p - r)
        Orthonormal columns spanning the retained directions.
    penalties : list of ndarray
        ``T.T @ P @ T`` for each input penalty.
    r : int
        Number of removed directions.
    """
    Gc = centered_gram(design, strata_starts)
    Gc = 0.5 * (Gc + Gc.T)
    vals, vecs = np.linalg.eigh(Gc)
    top = max(vals.max(), 0.0)
    drop = vals <= tol * top if top > 0 else np.ones(vals.size, bool)
    r = int(drop.sum())
    if r == 0:
        T = np.eye(design.n_cols)
    else:
        T = vecs[:, ~drop]
    return T, [T.T @ P @ T for P in penalties], r
