"""Sparse symmetric eigensolver, PageRank, and graph Laplacian helpers."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ConvergenceError",
    "normalized_laplacian",
    "symmetric_eigs_smallest",
    "pagerank",
]

# Dense decomposition below this dimension; Lanczos above.
DENSE_CUTOFF = 512


class ConvergenceError(RuntimeError):
    """Iteration cap reached; carries the residual achieved so far."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (achieved residual {residual:.3e})")
        self.residual = residual


def _to_sparse(mat) -> sp.csr_matrix:
    if sp.issparse(mat):
        return mat.tocsr()
    return sp.csr_matrix(np.asarray(mat, dtype=np.float64))


def normalized_laplacian(adj: sp.spmatrix) -> sp.csr_matrix:
    """D^{-1/2} (D - A) D^{-1/2} with the zero-for-isolated-node convention.

    Isolated nodes get an all-zero row, so the zero eigenvalue has
    multiplicity equal to the number of connected components (counting
    singletons).
    """
    a = _to_sparse(adj)
    deg = np.asarray(a.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        dinv = 1.0 / np.sqrt(deg)
    dinv[~np.isfinite(dinv)] = 0.0
    dhalf = sp.diags(dinv)
    lap = sp.diags((deg > 0).astype(np.float64)) - dhalf @ a @ dhalf
    return lap.tocsr()


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry (first on ties) is positive."""
    out = vecs.copy()
    for j in range(out.shape[1]):
        lead = np.argmax(np.abs(out[:, j]))
        if out[lead, j] < 0:
            out[:, j] = -out[:, j]
    return out


def _check_symmetric(a: sp.csr_matrix, tol: float = 1e-12):
    diff = a - a.T
    worst = np.abs(diff.data).max() if diff.nnz else 0.0
    if worst > tol:
        raise ValueError(f"matrix not symmetric (max asymmetry {worst:.3e})")


def symmetric_eigs_smallest(mat, k: int, tol: float = 1e-10,
                            method: str = "auto", max_basis: int | None = None,
                            seed: int = 0):
    """Smallest-k eigenpairs of a sparse symmetric matrix.

    Returns (eigenvalues ascending, column-orthonormal eigenvectors) with
    every residual ||M v - lambda v|| <= tol * ||M||_1 and sign-fixed
    columns.  `method` is "auto" (dense below DENSE_CUTOFF), "dense" or
    "lanczos".
    """
    a = _to_sparse(mat)
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for dimension {n}")
    _check_symmetric(a)

    if method == "auto":
        method = "dense" if n <= DENSE_CUTOFF else "lanczos"
    if method == "dense":
        vals, vecs = np.linalg.eigh(a.toarray())
        vals, vecs = vals[:k], vecs[:, :k]
    elif method == "lanczos":
        vals, vecs = _lanczos_smallest(a, k, tol, seed, max_basis)
    else:
        raise ValueError(f"unknown method {method!r}")

    norm_a = _one_norm(a)
    resid = _residuals(a, vals, vecs)
    if resid.max() > tol * max(norm_a, 1e-300):
        raise ConvergenceError("eigensolver residual above tolerance", float(resid.max()))
    return vals, _fix_signs(vecs)


def _one_norm(a: sp.csr_matrix) -> float:
    if a.nnz == 0:
        return 0.0
    return float(np.asarray(abs(a).sum(axis=0)).max())


def _residuals(a, vals, vecs) -> np.ndarray:
    r = a @ vecs - vecs * vals[None, :]
    return np.linalg.norm(r, axis=0)


def _orthonormalize(v: np.ndarray, basis: np.ndarray, j: int) -> tuple[np.ndarray, float]:
    """Two rounds of classical Gram-Schmidt against the first j basis columns."""
    for _ in range(2):
        if j:
            v = v - basis[:, :j] @ (basis[:, :j].T @ v)
    return v, float(np.linalg.norm(v))


def _lanczos_smallest(a: sp.csr_matrix, k: int, tol: float, seed: int,
                      max_basis: int | None):
    """Lanczos recurrence with full reorthogonalization and Rayleigh-Ritz
    extraction.

    Repeated eigenvalues live outside a single Krylov space, so after the
    k smallest Ritz pairs first converge a fresh random direction is
    injected and convergence is required again with stable values before
    accepting.  With the default cap (the full dimension) the extraction
    becomes exact in the worst case.
    """
    n = a.shape[0]
    cap = n if max_basis is None else min(max_basis, n)
    rng = np.random.default_rng(seed)
    norm_a = max(_one_norm(a), 1e-300)
    q_basis = np.zeros((n, cap))
    aq = np.zeros((n, cap))

    def fresh_direction(j: int) -> np.ndarray | None:
        for _ in range(50):
            v, nrm = _orthonormalize(rng.standard_normal(n), q_basis, j)
            if nrm > 1e-8:
                return v / nrm
        return None

    j = 0
    v = fresh_direction(0)
    best_resid = np.inf
    accepted_vals: np.ndarray | None = None
    check_every = max(8, k)
    while j < cap:
        q_basis[:, j] = v
        aq[:, j] = a @ v
        j += 1
        # next Krylov direction; re-inject randomly on breakdown
        nxt, nrm = _orthonormalize(aq[:, j - 1].copy(), q_basis, j)
        if nrm <= 1e-10 * norm_a:
            nxt = fresh_direction(j)
            if nxt is None:
                break
            v = nxt
        else:
            v = nxt / nrm

        if j >= k and (j % check_every == 0 or j == cap):
            b = q_basis[:, :j].T @ aq[:, :j]
            b = 0.5 * (b + b.T)
            ritz_vals, ritz_vecs = np.linalg.eigh(b)
            cand_vals = ritz_vals[:k]
            cand_vecs = q_basis[:, :j] @ ritz_vecs[:, :k]
            resid = _residuals(a, cand_vals, cand_vecs)
            best_resid = min(best_resid, float(resid.max()))
            if resid.max() <= tol * norm_a:
                if accepted_vals is not None and np.abs(cand_vals - accepted_vals).max() <= max(tol * norm_a, 1e-12):
                    return cand_vals, cand_vecs
                # first convergence: probe for missed multiplicities
                accepted_vals = cand_vals
                probe = fresh_direction(j)
                if probe is None or j == cap:
                    return cand_vals, cand_vecs
                v = probe

    if j == cap == n:
        # basis spans the whole space: extraction is exact
        b = q_basis.T @ aq
        b = 0.5 * (b + b.T)
        ritz_vals, ritz_vecs = np.linalg.eigh(b)
        return ritz_vals[:k], q_basis @ ritz_vecs[:, :k]
    raise ConvergenceError("Lanczos basis cap reached before convergence", best_resid)


def pagerank(graph, damping: float = 0.85, tol: float = 1e-12,
             max_iter: int = 1000) -> np.ndarray:
    """Damped random-walk fixed point on an undirected graph.

    Accepts a square symmetric sparse/dense matrix or any object with a
    `full_adjacency()` method.  Dangling nodes redistribute uniformly.
    Returns a probability vector (entries >= 0, sum 1).
    """
    if hasattr(graph, "full_adjacency"):
        a = graph.full_adjacency()
    else:
        a = _to_sparse(graph)
    n = a.shape[0]
    if n == 0:
        raise ValueError("empty graph")
    deg = np.asarray(a.sum(axis=1)).ravel()
    dangling = deg == 0.0
    with np.errstate(divide="ignore"):
        inv_deg = np.where(dangling, 0.0, 1.0 / deg)
    # column-stochastic transition: walk leaves node j along its edges
    trans = a.multiply(inv_deg[None, :]).tocsr()

    v = np.full(n, 1.0 / n)
    base = (1.0 - damping) / n
    err = np.inf
    for _ in range(max_iter):
        nxt = damping * (trans @ v) + damping * v[dangling].sum() / n + base
        err = np.abs(nxt - v).sum()
        v = nxt
        if err < tol:
            return v
    raise ConvergenceError("PageRank power iteration did not converge", float(err))
