"""Matrix-factorization backbone: embeddings, cosine scoring, Adam, training."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import BslForm, LossKind, LossSpec, NegSampler, SamplingMode, TrainConfig
from .data import Dataset
from .losses import ScoreBatch, bsl_loss, loss_fn_from_spec
from .sampling import (SamplerState, in_batch_negatives,
                       popularity_weights_from_counts, sample_negatives)

#: Added to every row norm before dividing; keeps zero vectors finite.
NORM_EPS = 1e-12


class TrainingDivergedError(RuntimeError):
    def __init__(self, batch_index: int):
        super().__init__(f"non-finite loss at batch index {batch_index}")
        self.batch_index = batch_index


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file cannot be read back."""


@dataclass
class EmbeddingTable:
    user_vecs: np.ndarray
    item_vecs: np.ndarray

    @property
    def d(self) -> int:
        return self.user_vecs.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_vecs.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_vecs.shape[0]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_vecs.copy(), self.item_vecs.copy())


def init_embeddings(n_users: int, n_items: int, d: int, seed: int) -> EmbeddingTable:
    """Xavier-uniform init: entries in +-sqrt(6 / (d + d)), deterministic per seed."""
    if d < 1:
        raise ValueError("d must be >= 1")
    bound = math.sqrt(6.0 / (d + d))
    rng = np.random.default_rng(seed)
    user_vecs = rng.uniform(-bound, bound, size=(n_users, d))
    item_vecs = rng.uniform(-bound, bound, size=(n_items, d))
    return EmbeddingTable(user_vecs, item_vecs)


def _normalize_rows(x: np.ndarray):
    """Return (unit rows, true norms, shifted norms) with the NORM_EPS guard."""
    norms = np.linalg.norm(x, axis=-1)
    shifts = norms + NORM_EPS
    return x / shifts[..., None], norms, shifts


def _normalize_backward(x_raw, norms, shifts, grad_hat) -> np.ndarray:
    """Chain a gradient on unit rows back to the raw rows.

    For v_hat = v / (|v| + eps): dv = g/(|v|+eps) - v (v.g) / (|v| (|v|+eps)^2).
    """
    dot = np.sum(x_raw * grad_hat, axis=-1)
    # the floor only engages for zero rows, where x_raw makes the term vanish
    denom = np.maximum(norms, 1e-100) * shifts * shifts
    return grad_hat / shifts[..., None] - x_raw * (dot / denom)[..., None]


@dataclass
class CosineContext:
    """Enough state to push score gradients back to raw embedding rows."""

    user: int
    items: np.ndarray
    u_raw: np.ndarray
    u_hat: np.ndarray
    u_norm: float
    u_shift: float
    i_raw: np.ndarray
    i_hat: np.ndarray
    i_norms: np.ndarray
    i_shifts: np.ndarray

    def backward(self, grad_scores: np.ndarray):
        grad_scores = np.asarray(grad_scores, dtype=np.float64)
        g_uhat = grad_scores @ self.i_hat
        grad_u = _normalize_backward(self.u_raw[None, :], np.array([self.u_norm]),
                                     np.array([self.u_shift]), g_uhat[None, :])[0]
        g_ihat = grad_scores[:, None] * self.u_hat[None, :]
        grad_items = _normalize_backward(self.i_raw, self.i_norms, self.i_shifts, g_ihat)
        return grad_u, grad_items


def cosine_score(emb: EmbeddingTable, user: int, items) -> tuple[np.ndarray, CosineContext]:
    """Cosine similarity between a user and a set of items, with Jacobian state."""
    items = np.asarray(items, dtype=np.int64).ravel()
    u_raw = emb.user_vecs[user]
    u_hat, u_norm, u_shift = _normalize_rows(u_raw[None, :])
    i_raw = emb.item_vecs[items]
    i_hat, i_norms, i_shifts = _normalize_rows(i_raw)
    scores = i_hat @ u_hat[0]
    ctx = CosineContext(user=user, items=items, u_raw=u_raw, u_hat=u_hat[0],
                        u_norm=float(u_norm[0]), u_shift=float(u_shift[0]),
                        i_raw=i_raw, i_hat=i_hat, i_norms=i_norms, i_shifts=i_shifts)
    return scores, ctx


def score_all_items(emb: EmbeddingTable, user: int,
                    inner_product: bool = False) -> np.ndarray:
    """Scores for a user against every item; no gradient state.

    Cosine by default; ``inner_product=True`` skips the normalization (a
    non-default test-time alternative, never used during training here).
    """
    if inner_product:
        return emb.item_vecs @ emb.user_vecs[user]
    u_hat, _, _ = _normalize_rows(emb.user_vecs[user][None, :])
    i_hat, _, _ = _normalize_rows(emb.item_vecs)
    return i_hat @ u_hat[0]


@dataclass
class AdamState:
    m_user: np.ndarray
    v_user: np.ndarray
    m_item: np.ndarray
    v_item: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_table(cls, emb: EmbeddingTable, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m_user=np.zeros_like(emb.user_vecs),
                   v_user=np.zeros_like(emb.user_vecs),
                   m_item=np.zeros_like(emb.item_vecs),
                   v_item=np.zeros_like(emb.item_vecs),
                   beta1=beta1, beta2=beta2, eps=eps)

    def _update_rows(self, param, m, v, rows, grads, lr):
        b1, b2 = self.beta1, self.beta2
        m[rows] = b1 * m[rows] + (1.0 - b1) * grads
        v[rows] = b2 * v[rows] + (1.0 - b2) * grads * grads
        m_hat = m[rows] / (1.0 - b1 ** self.step)
        v_hat = v[rows] / (1.0 - b2 ** self.step)
        param[rows] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def apply(self, emb: EmbeddingTable, user_rows, user_grads,
              item_rows, item_grads, lr: float) -> None:
        """One optimizer step touching only the given (unique) rows."""
        self.step += 1
        if len(user_rows):
            self._update_rows(emb.user_vecs, self.m_user, self.v_user,
                              user_rows, user_grads, lr)
        if len(item_rows):
            self._update_rows(emb.item_vecs, self.m_item, self.v_item,
                              item_rows, item_grads, lr)


def _scatter_rows(inv: np.ndarray, grads: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum gradient rows that share a target row (bincount per column)."""
    out = np.empty((n_rows, grads.shape[1]))
    for col in range(grads.shape[1]):
        out[:, col] = np.bincount(inv, weights=grads[:, col], minlength=n_rows)
    return out


def sampled_batch_grads(emb: EmbeddingTable, users, pos_items, neg_items, loss_fn):
    """Forward + backward for a (user, positive, negatives-row) batch.

    Returns (loss value, unique user rows, their grads, unique item rows,
    their grads); gradients include the cosine normalization Jacobian but not
    regularization. Rows are normalized once per unique id; hat-space
    gradients are accumulated per unique row before the Jacobian chain (the
    chain is linear in the gradient, so this matches per-occurrence work).
    """
    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    neg_items = np.asarray(neg_items, dtype=np.int64)
    b, m = neg_items.shape

    uniq_users, u_inv = np.unique(users, return_inverse=True)
    all_items = np.concatenate([pos_items, neg_items.ravel()])
    uniq_items, i_inv = np.unique(all_items, return_inverse=True)
    p_inv, j_inv = i_inv[:b], i_inv[b:].reshape(b, m)

    uu_raw = emb.user_vecs[uniq_users]
    ii_raw = emb.item_vecs[uniq_items]
    uu_hat, uu_norms, uu_shifts = _normalize_rows(uu_raw)
    ii_hat, ii_norms, ii_shifts = _normalize_rows(ii_raw)

    u_hat = uu_hat[u_inv]
    p_hat = ii_hat[p_inv]
    j_hat = ii_hat[j_inv]

    pos_scores = np.sum(u_hat * p_hat, axis=1)
    neg_scores = np.einsum("bd,bmd->bm", u_hat, j_hat)
    res = loss_fn(ScoreBatch(pos_scores, neg_scores))

    g_uhat = res.grad_pos[:, None] * p_hat + np.einsum("bm,bmd->bd", res.grad_neg, j_hat)
    g_phat = res.grad_pos[:, None] * u_hat
    g_jhat_flat = (res.grad_neg[:, :, None] * u_hat[:, None, :]).reshape(b * m, emb.d)

    user_hat_grads = _scatter_rows(u_inv, g_uhat, uniq_users.size)
    item_hat_grads = _scatter_rows(i_inv, np.concatenate([g_phat, g_jhat_flat]),
                                   uniq_items.size)

    user_grads = _normalize_backward(uu_raw, uu_norms, uu_shifts, user_hat_grads)
    item_grads = _normalize_backward(ii_raw, ii_norms, ii_shifts, item_hat_grads)
    return res.value, uniq_users, user_grads, uniq_items, item_grads


def inbatch_batch_grads(emb: EmbeddingTable, users, items, loss_fn):
    """Forward + backward for an in-batch minibatch of (user, item) pairs.

    Each example's positive is its own item; its negatives are every other
    example's item (the off-diagonal of the pairwise similarity matrix).
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    mask = in_batch_negatives(users, items)
    b = users.size

    u_raw = emb.user_vecs[users]
    i_raw = emb.item_vecs[items]
    u_hat, u_norms, u_shifts = _normalize_rows(u_raw)
    i_hat, i_norms, i_shifts = _normalize_rows(i_raw)

    sim = u_hat @ i_hat.T
    pos_scores = np.diag(sim).copy()
    neg_scores = sim[mask].reshape(b, b - 1)
    res = loss_fn(ScoreBatch(pos_scores, neg_scores))

    g_sim = np.zeros_like(sim)
    g_sim[np.arange(b), np.arange(b)] = res.grad_pos
    g_sim[mask] = res.grad_neg.ravel()

    g_uhat = g_sim @ i_hat
    g_ihat = g_sim.T @ u_hat
    g_u = _normalize_backward(u_raw, u_norms, u_shifts, g_uhat)
    g_i = _normalize_backward(i_raw, i_norms, i_shifts, g_ihat)

    uniq_users, u_inv = np.unique(users, return_inverse=True)
    user_grads = _scatter_rows(u_inv, g_u, uniq_users.size)
    uniq_items, i_inv = np.unique(items, return_inverse=True)
    item_grads = _scatter_rows(i_inv, g_i, uniq_items.size)

    return res.value, uniq_users, user_grads, uniq_items, item_grads


def _gather_negatives(sampler: SamplerState, ds: Dataset, users: np.ndarray,
                      m: int) -> np.ndarray:
    """Sample an (B, m) negative block, one sampler call per distinct user."""
    out = np.empty((users.size, m), dtype=np.int64)
    for u in np.unique(users):
        idx = np.flatnonzero(users == u)
        draws = sample_negatives(sampler, ds, int(u), idx.size * m)
        out[idx] = draws.reshape(idx.size, m)
    return out


def train(ds: Dataset, cfg: TrainConfig, spec: LossSpec,
          epoch_callback=None) -> tuple[EmbeddingTable, list[dict]]:
    """Run the full training loop and return the table plus per-epoch stats.

    One epoch is a seed-shuffled pass over all (user, item) training pairs.
    Per batch: sample negatives (or build the in-batch mask), score with
    cosine similarity, compute the configured loss, chain gradients through
    the normalization Jacobian, add the L2 term on touched rows, and apply
    one Adam step. Everything is driven by ``cfg.rng_seed``; two runs with
    the same inputs produce bit-identical tables.

    In negative-sampling mode the canonical bilateral loss groups each
    batch's rows by user so that a user's positives share one log-mean-exp
    positive term; every other configuration (including the pseudocode
    bilateral form and the in-batch mode) treats rows independently.

    ``epoch_callback(epoch, emb) -> dict | None`` may attach extra metrics to
    an epoch's log entry (the table must be treated as read-only inside).
    """
    cfg.validate()
    spec.validate()
    emb = init_embeddings(ds.n_users, ds.n_items, cfg.embedding_dim, seed=cfg.rng_seed)
    adam = AdamState.for_table(emb)
    loss_fn = loss_fn_from_spec(spec)
    rng = np.random.default_rng(cfg.rng_seed)

    if cfg.neg_sampler is NegSampler.POPULARITY:
        weights = popularity_weights_from_counts(ds.item_popularity,
                                                 cfg.popularity_exponent)
    else:
        weights = None
    sampler = SamplerState.create(seed=cfg.rng_seed + 1, mode=cfg.neg_sampler,
                                  r_noise=cfg.r_noise, popularity_weights=weights)

    pairs = ds.train_pairs()
    if pairs.shape[0] == 0:
        raise ValueError("dataset has no training interactions")

    grouped_bsl = (spec.kind is LossKind.BSL and spec.bsl_form is BslForm.CANONICAL)

    log: list[dict] = []
    batch_index = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(pairs.shape[0])
        loss_sum = 0.0
        n_seen = 0
        for start in range(0, pairs.shape[0], cfg.batch_size):
            chunk = pairs[order[start:start + cfg.batch_size]]
            users, pos_items = chunk[:, 0], chunk[:, 1]
            if cfg.sampling_mode is SamplingMode.NEGATIVE_SAMPLING:
                batch_loss_fn = loss_fn
                if grouped_bsl:
                    by_user = np.argsort(users, kind="stable")
                    users, pos_items = users[by_user], pos_items[by_user]
                    sizes = np.unique(users, return_counts=True)[1]
                    batch_loss_fn = lambda b: bsl_loss(  # noqa: E731
                        b, spec.tau_pos, spec.tau_neg, BslForm.CANONICAL,
                        pos_group_sizes=sizes)
                negs = _gather_negatives(sampler, ds, users, cfg.n_negatives)
                value, urows, ugrads, irows, igrads = sampled_batch_grads(
                    emb, users, pos_items, negs, batch_loss_fn)
            else:
                if chunk.shape[0] < 2:
                    continue  # a trailing singleton has no in-batch negatives
                value, urows, ugrads, irows, igrads = inbatch_batch_grads(
                    emb, users, pos_items, loss_fn)
            if not np.isfinite(value):
                raise TrainingDivergedError(batch_index)
            if cfg.l2_reg:
                ugrads = ugrads + cfg.l2_reg * emb.user_vecs[urows]
                igrads = igrads + cfg.l2_reg * emb.item_vecs[irows]
            adam.apply(emb, urows, ugrads, irows, igrads, cfg.learning_rate)
            loss_sum += value * chunk.shape[0]
            n_seen += chunk.shape[0]
            batch_index += 1
        entry = {"epoch": epoch, "mean_loss": loss_sum / max(n_seen, 1)}
        if epoch_callback is not None:
            extra = epoch_callback(epoch, emb)
            if extra:
                entry.update(extra)
        log.append(entry)
    return emb, log


CHECKPOINT_VERSION = "1"


def save_checkpoint(path, emb: EmbeddingTable, *, epoch: int, seed: int,
                    adam: AdamState | None = None) -> None:
    """Write a bit-exact snapshot of the table (and optionally Adam state)."""
    payload = {
        "version": np.array(CHECKPOINT_VERSION),
        "user_vecs": emb.user_vecs,
        "item_vecs": emb.item_vecs,
        "epoch": np.array(int(epoch)),
        "seed": np.array(int(seed)),
    }
    if adam is not None:
        payload.update(m_user=adam.m_user, v_user=adam.v_user,
                       m_item=adam.m_item, v_item=adam.v_item,
                       adam_step=np.array(adam.step),
                       adam_hyper=np.array([adam.beta1, adam.beta2, adam.eps]))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


@dataclass
class Checkpoint:
    emb: EmbeddingTable
    epoch: int
    seed: int
    adam: AdamState | None


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as data:
            version = str(data["version"])
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version!r}")
            emb = EmbeddingTable(data["user_vecs"].copy(), data["item_vecs"].copy())
            epoch = int(data["epoch"])
            seed = int(data["seed"])
            adam = None
            if "m_user" in data.files:
                b1, b2, eps = data["adam_hyper"]
                adam = AdamState(m_user=data["m_user"].copy(), v_user=data["v_user"].copy(),
                                 m_item=data["m_item"].copy(), v_item=data["v_item"].copy(),
                                 step=int(data["adam_step"]),
                                 beta1=float(b1), beta2=float(b2), eps=float(eps))
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint(emb=emb, epoch=epoch, seed=seed, adam=adam)
