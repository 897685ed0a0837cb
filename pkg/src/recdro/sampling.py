"""Seed-deterministic negative samplers and noise-injection utilities."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import NegSampler
from .data import Dataset

logger = logging.getLogger(__name__)


@dataclass
class SamplerState:
    """Mutable sampler bound to one RNG stream.

    ``r_noise`` is the relative weight at which a user's own positives leak
    into their negative draws: each draw picks a positive with probability
    r_noise * W+ / (r_noise * W+ + W-), where W+/W- are the base-sampler
    weights of the positive/negative item sets (set sizes in uniform mode).

    A state caches each user's negative item array, so it must not outlive
    the dataset it first sampled from.
    """

    rng: np.random.Generator
    mode: NegSampler = NegSampler.UNIFORM
    r_noise: float = 0.0
    popularity_weights: np.ndarray | None = None
    _neg_cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.r_noise < 0:
            raise ValueError("r_noise must be >= 0")
        has_weights = self.popularity_weights is not None
        if (self.mode is NegSampler.POPULARITY) != has_weights:
            raise ValueError("popularity_weights must be given exactly in popularity mode")
        if has_weights:
            w = np.asarray(self.popularity_weights, dtype=np.float64)
            if np.any(w < 0) or not np.any(w > 0):
                raise ValueError("popularity weights must be nonnegative and not all zero")
            self.popularity_weights = w

    @classmethod
    def create(cls, seed: int, mode: NegSampler = NegSampler.UNIFORM,
               r_noise: float = 0.0,
               popularity_weights: np.ndarray | None = None) -> "SamplerState":
        return cls(rng=np.random.default_rng(seed), mode=mode,
                   r_noise=r_noise, popularity_weights=popularity_weights)


def _user_negatives(st: SamplerState, ds: Dataset, user: int) -> np.ndarray:
    cached = st._neg_cache.get(user)
    if cached is None:
        mask = np.ones(ds.n_items, dtype=bool)
        mask[ds.train_pos[user]] = False
        cached = np.flatnonzero(mask).astype(np.int64)
        st._neg_cache[user] = cached
    return cached


def sample_negatives(st: SamplerState, ds: Dataset, user: int, n: int) -> np.ndarray:
    """Draw ``n`` items i.i.d. (with replacement) as negatives for ``user``.

    Draws mix the user's true negatives with their positives at relative
    weight ``st.r_noise`` (see :class:`SamplerState`); with ``r_noise = 0``
    no training positive is ever returned.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pos = ds.train_pos[user]
    neg = _user_negatives(st, ds, user)
    r = st.r_noise
    if neg.size == 0 and r == 0:
        raise ValueError(f"user {user} has no negatives and r_noise is 0")

    if st.mode is NegSampler.UNIFORM:
        w_pos = float(pos.size)
        w_neg = float(neg.size)
        pos_p = None
        neg_p = None
    else:
        weights = st.popularity_weights
        if weights.shape[0] != ds.n_items:
            raise ValueError("popularity_weights length must equal n_items")
        pos_w = weights[pos]
        neg_w = weights[neg]
        w_pos = float(pos_w.sum())
        w_neg = float(neg_w.sum())
        pos_p = pos_w / w_pos if w_pos > 0 else None
        neg_p = neg_w / w_neg if w_neg > 0 else None

    denom = r * w_pos + w_neg
    if denom <= 0:
        raise ValueError(f"user {user} has zero total sampling weight")
    p_take_pos = (r * w_pos) / denom

    take_pos = st.rng.random(n) < p_take_pos
    k = int(take_pos.sum())
    out = np.empty(n, dtype=np.int64)
    if k:
        if st.mode is NegSampler.UNIFORM:
            out[take_pos] = pos[st.rng.integers(0, pos.size, size=k)]
        else:
            out[take_pos] = st.rng.choice(pos, size=k, replace=True, p=pos_p)
    if k < n:
        if neg_p is None and st.mode is NegSampler.POPULARITY:
            raise ValueError(f"user {user} has zero-weight negatives")
        if st.mode is NegSampler.UNIFORM:
            out[~take_pos] = neg[st.rng.integers(0, neg.size, size=n - k)]
        else:
            out[~take_pos] = st.rng.choice(neg, size=n - k, replace=True, p=neg_p)
    return out


def positive_fraction(r_noise: float, n_pos: int, n_neg: int) -> float:
    """Closed-form probability that a single uniform-mode draw is a positive."""
    if r_noise < 0:
        raise ValueError("r_noise must be >= 0")
    denom = r_noise * n_pos + n_neg
    if denom <= 0:
        raise ValueError("empty sampling support")
    return (r_noise * n_pos) / denom


def contaminate_positives(ds: Dataset, ratio: float, seed: int) -> Dataset:
    """Inject false positives into every user's training list.

    For each user, ceil(ratio * |train positives|) items are drawn uniformly
    without replacement from the user's negatives (test items excluded) and
    added to the training list. Popularity counts are recomputed; the input
    dataset is untouched. Users with too few available negatives get as many
    as exist; the total shortfall is logged as a warning.
    """
    if not 0 <= ratio < 1:
        raise ValueError("ratio must lie in [0, 1)")
    if ratio == 0:
        return Dataset.from_positive_lists(
            [a.copy() for a in ds.train_pos], [a.copy() for a in ds.test_pos],
            n_users=ds.n_users, n_items=ds.n_items)

    rng = np.random.default_rng(seed)
    all_items = np.arange(ds.n_items, dtype=np.int64)
    new_train = []
    shortfall = 0
    for u in range(ds.n_users):
        pos = ds.train_pos[u]
        # target count: exact integer products must not round up twice
        want = math.ceil(ratio * pos.size - 1e-9)
        if want == 0:
            new_train.append(pos.copy())
            continue
        blocked = np.union1d(pos, ds.test_pos[u])
        avail = np.setdiff1d(all_items, blocked, assume_unique=False)
        take = min(want, avail.size)
        shortfall += want - take
        injected = rng.choice(avail, size=take, replace=False) if take else np.empty(0, np.int64)
        new_train.append(np.union1d(pos, injected))
    if shortfall:
        logger.warning("contamination shortfall: %d injections skipped "
                       "(users with too few free negatives)", shortfall)
    return Dataset.from_positive_lists(new_train, [a.copy() for a in ds.test_pos],
                                       n_users=ds.n_users, n_items=ds.n_items)


def in_batch_negatives(batch_users, batch_items) -> np.ndarray:
    """Negative mask for in-batch training: everything but the diagonal.

    Example ``i`` uses every other example's item as a negative, even when
    that item happens to be one of user i's positives; only the example's own
    positive (the diagonal) is masked out.
    """
    users = np.asarray(batch_users)
    items = np.asarray(batch_items)
    if users.shape != items.shape or users.ndim != 1:
        raise ValueError("batch_users and batch_items must be equal-length vectors")
    b = users.shape[0]
    if b < 2:
        raise ValueError("in-batch mode needs at least 2 examples")
    return ~np.eye(b, dtype=bool)


def popularity_weights_from_counts(counts: np.ndarray, exponent: float = 1.0) -> np.ndarray:
    """Raise training interaction counts to ``exponent`` for popularity sampling."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    return counts ** exponent
