"""Interaction data: loading, bipartite graph construction, splits, noise."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DataError",
    "InteractionDataset",
    "BipartiteGraph",
    "SplitSpec",
    "NoiseSpec",
    "load_interactions",
    "save_interactions",
    "save_remap",
    "build_graph",
    "one_sided_adjacency",
    "split_by_ratio",
    "inject_noise",
]

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


def _round_half_up(x: float) -> int:
    """round-half-away-from-zero for nonnegative x (Python round() is banker's)."""
    return int(np.floor(x + 0.5))


@dataclass
class InteractionDataset:
    """Deduplicated implicit-feedback records over contiguous integer ids.

    `users[i]` interacted with `items[i]`.  Raw-id remap tables (index ->
    original token) are kept when the data came from a file.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    user_raw_ids: list[int] | None = None
    item_raw_ids: list[int] | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        if self.users.shape != self.items.shape:
            raise DataError("users/items length mismatch")
        if self.users.size:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise DataError("item index out of range")

    def __len__(self) -> int:
        return int(self.users.size)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def items_of_user(self) -> list[np.ndarray]:
        """Per-user sorted item arrays."""
        order = np.lexsort((self.items, self.users))
        u_sorted = self.users[order]
        i_sorted = self.items[order]
        bounds = np.searchsorted(u_sorted, np.arange(self.n_users + 1))
        return [i_sorted[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]

    def subset(self, mask: np.ndarray) -> "InteractionDataset":
        return InteractionDataset(self.n_users, self.n_items,
                                  self.users[mask], self.items[mask],
                                  self.user_raw_ids, self.item_raw_ids)


def load_interactions(path) -> InteractionDataset:
    """Parse whitespace- or comma-separated (user, item) integer lines.

    Raw ids are remapped to contiguous indices in first-seen order and
    duplicate pairs are collapsed.  Lines starting with '#' and blank
    lines are skipped.
    """
    path = Path(path)
    user_index: dict[int, int] = {}
    item_index: dict[int, int] = {}
    seen: set[tuple[int, int]] = set()
    users: list[int] = []
    items: list[int] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            tokens = text.replace(",", " ").split()
            if len(tokens) != 2:
                raise DataError(f"{path}:{lineno}: expected two integer tokens, got {text!r}")
            try:
                raw_u, raw_i = int(tokens[0]), int(tokens[1])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: non-integer token in {text!r}") from e
            u = user_index.setdefault(raw_u, len(user_index))
            i = item_index.setdefault(raw_i, len(item_index))
            if (u, i) in seen:
                continue
            seen.add((u, i))
            users.append(u)
            items.append(i)
    if not users:
        raise DataError(f"{path}: no interactions found")
    return InteractionDataset(
        n_users=len(user_index), n_items=len(item_index),
        users=np.array(users), items=np.array(items),
        user_raw_ids=list(user_index), item_raw_ids=list(item_index))


def save_interactions(ds: InteractionDataset, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i in zip(ds.users.tolist(), ds.items.tolist()):
            fh.write(f"{u} {i}\n")


def save_remap(ds: InteractionDataset, path):
    """Sidecar raw_id -> index tables, users then items."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("# user raw_id index\n")
        for idx, raw in enumerate(ds.user_raw_ids or range(ds.n_users)):
            fh.write(f"{raw} {idx}\n")
        fh.write("# item raw_id index\n")
        for idx, raw in enumerate(ds.item_raw_ids or range(ds.n_items)):
            fh.write(f"{raw} {idx}\n")


class BipartiteGraph:
    """Compressed sparse user-item adjacency with both orientations."""

    def __init__(self, ds: InteractionDataset):
        if len(ds) == 0:
            raise DataError("cannot build a graph from an empty dataset")
        self.n_users = ds.n_users
        self.n_items = ds.n_items
        data = np.ones(len(ds), dtype=np.float64)
        m = sp.csr_matrix((data, (ds.users, ds.items)),
                          shape=(ds.n_users, ds.n_items))
        m.sum_duplicates()
        m.data[:] = 1.0
        m.sort_indices()
        self.user_adj = m                       # users x items
        self.item_adj = m.T.tocsr()             # items x users
        self.item_adj.sort_indices()
        self.user_degree = np.diff(self.user_adj.indptr)
        self.item_degree = np.diff(self.item_adj.indptr)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def user_neighbors(self, u: int) -> np.ndarray:
        return self.user_adj.indices[self.user_adj.indptr[u]:self.user_adj.indptr[u + 1]]

    def item_neighbors(self, i: int) -> np.ndarray:
        return self.item_adj.indices[self.item_adj.indptr[i]:self.item_adj.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        """All node degrees, users then items."""
        return np.concatenate([self.user_degree, self.item_degree]).astype(np.float64)

    def full_adjacency(self) -> sp.csr_matrix:
        """(N+M) x (N+M) symmetric 0/1 adjacency, users then items."""
        n, m = self.n_users, self.n_items
        upper = sp.hstack([sp.csr_matrix((n, n)), self.user_adj])
        lower = sp.hstack([self.item_adj, sp.csr_matrix((m, m))])
        return sp.vstack([upper, lower]).tocsr()


def build_graph(ds: InteractionDataset) -> BipartiteGraph:
    return BipartiteGraph(ds)


def one_sided_adjacency(g: BipartiteGraph, side: str) -> sp.csr_matrix:
    """Square 0/1 matrix linking same-side nodes that share a neighbor."""
    if side == "user":
        r = g.user_adj
    elif side == "item":
        r = g.item_adj
    else:
        raise ValueError(f"side must be 'user' or 'item', got {side!r}")
    prod = (r @ r.T).tocsr()
    prod.setdiag(0)
    prod.eliminate_zeros()
    prod.data[:] = 1.0
    return prod


@dataclass
class SplitSpec:
    train_fraction: float
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError("train_fraction must lie in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise DataError("val_fraction must lie in [0, 1)")


def split_by_ratio(ds: InteractionDataset, spec: SplitSpec):
    """Per-user split into (train_fit, validation, test).

    Each user's records are shuffled; `train_fraction` of them (rounded
    half away from zero, floor 1) form the training pool, the rest go to
    test; `val_fraction` of the pool (same rounding, keeping >= 1 fit
    record) is carved out as validation.
    """
    rng = np.random.default_rng(spec.seed)
    per_user = _records_by_user(ds)
    fit_idx, val_idx, test_idx = [], [], []
    for u in range(ds.n_users):
        idx = per_user[u]
        k = idx.size
        if k == 0:
            continue
        idx = idx[rng.permutation(k)]
        n_pool = min(k, max(1, _round_half_up(k * spec.train_fraction)))
        n_val = _round_half_up(n_pool * spec.val_fraction)
        if n_pool - n_val < 1:
            n_val = n_pool - 1
        fit_idx.append(idx[:n_pool - n_val])
        val_idx.append(idx[n_pool - n_val:n_pool])
        test_idx.append(idx[n_pool:])

    def gather(chunks):
        sel = np.concatenate(chunks) if chunks else np.array([], dtype=np.int64)
        return ds.subset(np.sort(sel))

    return gather(fit_idx), gather(val_idx), gather(test_idx)


def _records_by_user(ds: InteractionDataset) -> list[np.ndarray]:
    order = np.argsort(ds.users, kind="stable")
    u_sorted = ds.users[order]
    bounds = np.searchsorted(u_sorted, np.arange(ds.n_users + 1))
    return [order[bounds[u]:bounds[u + 1]] for u in range(ds.n_users)]


@dataclass
class NoiseSpec:
    proportion: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.proportion < 1.0:
            raise DataError("noise proportion must lie in (0, 1)")


def inject_noise(train: InteractionDataset, full: InteractionDataset,
                 spec: NoiseSpec) -> InteractionDataset:
    """Add round(rho * k) fake items per user, sampled outside `full`.

    Users already adjacent to every item are skipped (a warning reports
    how many).
    """
    rng = np.random.default_rng(spec.seed)
    full_items = full.items_of_user()
    train_per_user = _records_by_user(train)
    all_items = np.arange(train.n_items)
    add_users, add_items = [], []
    skipped = 0
    for u in range(train.n_users):
        k = train_per_user[u].size
        n_add = _round_half_up(spec.proportion * k)
        if n_add == 0:
            continue
        candidates = np.setdiff1d(all_items, full_items[u], assume_unique=False)
        if candidates.size == 0:
            skipped += 1
            continue
        n_add = min(n_add, candidates.size)
        chosen = rng.choice(candidates, size=n_add, replace=False)
        add_users.extend([u] * n_add)
        add_items.extend(chosen.tolist())
    if skipped:
        log.warning("inject_noise: skipped %d user(s) adjacent to every item", skipped)
    return InteractionDataset(
        train.n_users, train.n_items,
        np.concatenate([train.users, np.array(add_users, dtype=np.int64)]),
        np.concatenate([train.items, np.array(add_items, dtype=np.int64)]),
        train.user_raw_ids, train.item_raw_ids)
