"""Dataset ingestion and popularity bucketing for implicit-feedback training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DataFormatError(ValueError):
    """Raised when an interaction file or positive-list payload is malformed."""


def _as_sorted_unique(items, *, what: str) -> np.ndarray:
    arr = np.asarray(items, dtype=np.int64).ravel()
    if arr.size and arr.min() < 0:
        raise DataFormatError(f"negative id in {what}")
    return np.unique(arr)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable train/test split of implicit user-item interactions.

    ``train_pos`` and ``test_pos`` hold one strictly sorted, duplicate-free
    array of item ids per user, disjoint per user. ``item_popularity[i]`` is
    the number of users whose training list contains item ``i``.
    """

    n_users: int
    n_items: int
    train_pos: tuple[np.ndarray, ...]
    test_pos: tuple[np.ndarray, ...]
    item_popularity: np.ndarray

    @classmethod
    def from_positive_lists(cls, train, test, n_users: int | None = None,
                            n_items: int | None = None) -> "Dataset":
        """Build a validated Dataset from per-user item-id collections.

        Input lists are normalized (sorted, de-duplicated). ``n_users`` and
        ``n_items`` default to the tightest bounds that fit the data; passing
        larger values keeps trailing users/items with no interactions.
        """
        if len(test) < len(train):
            test = list(test) + [[] for _ in range(len(train) - len(test))]
        if len(train) < len(test):
            train = list(train) + [[] for _ in range(len(test) - len(train))]
        train_arrs = [_as_sorted_unique(t, what=f"train list of user {u}")
                      for u, t in enumerate(train)]
        test_arrs = [_as_sorted_unique(t, what=f"test list of user {u}")
                     for u, t in enumerate(test)]

        min_users = len(train_arrs)
        n_users = min_users if n_users is None else int(n_users)
        if n_users < min_users:
            raise DataFormatError(
                f"n_users={n_users} smaller than number of user lists {min_users}")
        train_arrs += [np.empty(0, dtype=np.int64)] * (n_users - min_users)
        test_arrs += [np.empty(0, dtype=np.int64)] * (n_users - min_users)

        max_item = -1
        for arr in train_arrs + test_arrs:
            if arr.size:
                max_item = max(max_item, int(arr[-1]))
        min_items = max_item + 1
        n_items = min_items if n_items is None else int(n_items)
        if n_items < min_items:
            raise DataFormatError(
                f"n_items={n_items} smaller than max item id + 1 ({min_items})")

        for u in range(n_users):
            if np.intersect1d(train_arrs[u], test_arrs[u]).size:
                raise DataFormatError(
                    f"user {u} has overlapping train/test items")

        if train_arrs:
            all_train = np.concatenate(train_arrs) if n_users else np.empty(0, np.int64)
        else:
            all_train = np.empty(0, dtype=np.int64)
        popularity = np.bincount(all_train, minlength=n_items).astype(np.int64)

        return cls(n_users=n_users, n_items=n_items,
                   train_pos=tuple(train_arrs), test_pos=tuple(test_arrs),
                   item_popularity=popularity)

    @property
    def n_train_interactions(self) -> int:
        return int(sum(a.size for a in self.train_pos))

    def train_pairs(self) -> np.ndarray:
        """All (user, item) training interactions as an (n, 2) array."""
        if self.n_train_interactions == 0:
            return np.empty((0, 2), dtype=np.int64)
        users = np.repeat(np.arange(self.n_users, dtype=np.int64),
                          [a.size for a in self.train_pos])
        items = np.concatenate([a for a in self.train_pos if a.size]
                               or [np.empty(0, np.int64)])
        return np.stack([users, items], axis=1)

    def equals(self, other: "Dataset") -> bool:
        if (self.n_users, self.n_items) != (other.n_users, other.n_items):
            return False
        return (
            all(np.array_equal(a, b) for a, b in zip(self.train_pos, other.train_pos))
            and all(np.array_equal(a, b) for a, b in zip(self.test_pos, other.test_pos))
            and np.array_equal(self.item_popularity, other.item_popularity)
        )


def _parse_adjacency(path) -> dict[int, list[int]]:
    """Parse `user item item ...` lines; repeated user lines are merged."""
    per_user: dict[int, list[int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                ids = [int(t) for t in tokens]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer token") from exc
            if any(i < 0 for i in ids):
                raise DataFormatError(f"{path}:{lineno}: negative id")
            user, items = ids[0], ids[1:]
            per_user.setdefault(user, []).extend(items)
    return per_user


def load_dataset(train_path, test_path) -> Dataset:
    """Load a train/test split from whitespace-separated adjacency files.

    Each nonempty line reads ``user item item ...`` with dense 0-based ids.
    Users that appear only in the test file get an empty training list; item
    ids seen only in the test file extend the item count.
    """
    train_map = _parse_adjacency(train_path)
    test_map = _parse_adjacency(test_path)
    max_user = max(list(train_map) + list(test_map), default=-1)
    n_users = max_user + 1
    train = [train_map.get(u, []) for u in range(n_users)]
    test = [test_map.get(u, []) for u in range(n_users)]
    return Dataset.from_positive_lists(train, test)


def save_dataset(ds: Dataset, train_path, test_path) -> None:
    """Write a Dataset back to adjacency files.

    Every user gets a line in the train file (bare ``user`` if it has no
    training items) so the user count survives a reload. Items that occur in
    neither split are not representable in this format.
    """
    with open(train_path, "w", encoding="utf-8") as fh:
        for u in range(ds.n_users):
            fh.write(" ".join([str(u)] + [str(i) for i in ds.train_pos[u]]) + "\n")
    with open(test_path, "w", encoding="utf-8") as fh:
        for u in range(ds.n_users):
            if ds.test_pos[u].size:
                fh.write(" ".join([str(u)] + [str(i) for i in ds.test_pos[u]]) + "\n")


def popularity_groups(ds: Dataset, n_groups: int) -> np.ndarray:
    """Assign every item to one of ``n_groups`` popularity buckets.

    Items are sorted by ascending training popularity (ties by item id) and
    split into contiguous buckets whose sizes differ by at most one. Larger
    group ids hold more popular items.
    """
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    if n_groups > ds.n_items:
        raise ValueError(f"n_groups={n_groups} exceeds n_items={ds.n_items}")
    order = np.lexsort((np.arange(ds.n_items), ds.item_popularity))
    groups = np.empty(ds.n_items, dtype=np.int64)
    for gid, chunk in enumerate(np.array_split(order, n_groups)):
        groups[chunk] = gid
    return groups
