"""Desk-scale synthetic datasets with known structure, for tests and demos."""

from __future__ import annotations

import numpy as np

from .data import Dataset


def _split_train_test(positives: list[np.ndarray], test_fraction: float,
                      rng: np.random.Generator) -> tuple[list, list]:
    train, test = [], []
    for pos in positives:
        pos = np.asarray(pos, dtype=np.int64)
        if pos.size < 2 or test_fraction <= 0:
            train.append(pos)
            test.append(np.empty(0, dtype=np.int64))
            continue
        n_test = max(1, int(round(test_fraction * pos.size)))
        n_test = min(n_test, pos.size - 1)  # keep at least one training item
        held = rng.choice(pos, size=n_test, replace=False)
        train.append(np.setdiff1d(pos, held))
        test.append(np.sort(held))
    return train, test


def planted_clusters(n_users: int = 200, n_items: int = 100,
                     n_user_clusters: int = 2, n_item_clusters: int = 2,
                     p_in: float = 0.3, p_out: float = 0.01,
                     test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Block-structured interactions: users prefer their own item cluster.

    Users and items are split into contiguous equal clusters; user u
    interacts with item i independently with probability ``p_in`` when their
    clusters match (cyclically) and ``p_out`` otherwise. A fraction of each
    user's positives is held out for testing.
    """
    rng = np.random.default_rng(seed)
    user_cluster = np.arange(n_users) * n_user_clusters // n_users
    item_cluster = np.arange(n_items) * n_item_clusters // n_items
    match = user_cluster[:, None] == (item_cluster[None, :] % n_user_clusters)
    probs = np.where(match, p_in, p_out)
    interact = rng.random((n_users, n_items)) < probs
    positives = [np.flatnonzero(interact[u]) for u in range(n_users)]
    train, test = _split_train_test(positives, test_fraction, rng)
    return Dataset.from_positive_lists(train, test, n_users=n_users, n_items=n_items)


def item_cluster_of(n_items: int, n_item_clusters: int) -> np.ndarray:
    """Cluster assignment used by :func:`planted_clusters` (for oracles)."""
    return np.arange(n_items) * n_item_clusters // n_items


def zipf_preferences(n_users: int = 200, n_items: int = 150,
                     n_clusters: int = 4, interactions_per_user: int = 24,
                     zipf_exponent: float = 1.0, cluster_boost: float = 4.0,
                     test_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """Cluster preferences on top of a heavy-tailed item attractiveness.

    Item i carries base weight 1 / (i + 1)^zipf_exponent; a user samples
    items without replacement with probability proportional to that weight,
    multiplied by ``cluster_boost`` for items in the user's own cluster. Head
    items end up popular across all users while tail items stay
    cluster-specific, giving the popularity skew that fairness analyses need.
    """
    rng = np.random.default_rng(seed)
    base = 1.0 / np.power(np.arange(1, n_items + 1, dtype=np.float64), zipf_exponent)
    user_cluster = np.arange(n_users) * n_clusters // n_users
    item_cluster = np.arange(n_items) * n_clusters // n_items
    positives = []
    for u in range(n_users):
        w = base * np.where(item_cluster == user_cluster[u], cluster_boost, 1.0)
        w = w / w.sum()
        k = min(interactions_per_user, n_items)
        positives.append(rng.choice(n_items, size=k, replace=False, p=w))
    train, test = _split_train_test(positives, test_fraction, rng)
    return Dataset.from_positive_lists(train, test, n_users=n_users, n_items=n_items)


def random_interactions(n_users: int, n_items: int, per_user: int,
                        test_fraction: float = 0.3, seed: int = 0,
                        cover_all_items: bool = False) -> Dataset:
    """Uniform random positives, optionally touching every item at least once."""
    rng = np.random.default_rng(seed)
    positives = [rng.choice(n_items, size=min(per_user, n_items), replace=False)
                 for _ in range(n_users)]
    if cover_all_items:
        seen = np.unique(np.concatenate(positives))
        for i in np.setdiff1d(np.arange(n_items), seen):
            u = int(rng.integers(0, n_users))
            positives[u] = np.union1d(positives[u], [i])
    train, test = _split_train_test(positives, test_fraction, rng)
    return Dataset.from_positive_lists(train, test, n_users=n_users, n_items=n_items)


def dataset_with_popularity(counts, seed: int = 0) -> Dataset:
    """Build a dataset whose training popularity equals ``counts`` exactly.

    Item i is assigned to ``counts[i]`` distinct users chosen at random; the
    user count is max(counts). Test lists are left empty.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    n_users = int(counts.max()) if counts.size else 0
    rng = np.random.default_rng(seed)
    lists: list[list[int]] = [[] for _ in range(n_users)]
    for item, c in enumerate(counts):
        for u in rng.choice(n_users, size=int(c), replace=False):
            lists[u].append(item)
    return Dataset.from_positive_lists(lists, [[] for _ in range(n_users)],
                                       n_users=max(n_users, 1), n_items=counts.size)
