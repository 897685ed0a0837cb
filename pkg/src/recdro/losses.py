"""Ranking losses over batches of prediction scores, with exact gradients.

Every loss is a pure map from a :class:`ScoreBatch` to a scalar value plus
the analytic gradient with respect to each score. The score function itself
(and its Jacobian) lives in :mod:`recdro.model`, so these functions stay
backbone-agnostic.

Conventions shared by the softmax family:

* the denominator sums (not averages) over the sampled negatives, so a batch
  with ``m`` negatives per row carries an additive ``tau * log(m)`` constant
  relative to the expectation form;
* the positive score is not included in the denominator;
* log-sum-exp is always evaluated max-shifted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import BslForm, LossKind, LossSpec

#: Temperatures below this are rejected; the tilt exp(score / tau) is no
#: longer meaningful in float64 once tau underflows the score resolution.
MIN_TAU = 1e-8


@dataclass
class ScoreBatch:
    """One score per positive example plus a row of negative scores each.

    ``pos_scores`` has shape (n,), ``neg_scores`` shape (n, m). All entries
    must be finite.
    """

    pos_scores: np.ndarray
    neg_scores: np.ndarray

    def __post_init__(self):
        self.pos_scores = np.asarray(self.pos_scores, dtype=np.float64)
        self.neg_scores = np.asarray(self.neg_scores, dtype=np.float64)
        if self.pos_scores.ndim != 1:
            raise ValueError("pos_scores must be 1-D")
        if self.neg_scores.ndim != 2:
            raise ValueError("neg_scores must be 2-D")
        if self.neg_scores.shape[0] != self.pos_scores.shape[0]:
            raise ValueError("neg_scores row count must equal pos_scores length")
        if self.pos_scores.shape[0] < 1 or self.neg_scores.shape[1] < 1:
            raise ValueError("batch needs at least one example and one negative")
        if not (np.isfinite(self.pos_scores).all() and np.isfinite(self.neg_scores).all()):
            raise ValueError("scores must be finite")

    @property
    def n_examples(self) -> int:
        return self.pos_scores.shape[0]

    @property
    def n_negatives(self) -> int:
        return self.neg_scores.shape[1]


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_pos: np.ndarray
    grad_neg: np.ndarray


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow on either tail."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -softplus(-x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.sum(np.exp(x - m), axis=axis))
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_tau(tau: float, name: str = "tau") -> float:
    tau = float(tau)
    if not tau >= MIN_TAU:
        raise ValueError(f"{name} must be >= {MIN_TAU}")
    return tau


def bpr_loss(batch: ScoreBatch) -> LossResult:
    """Pairwise log-sigmoid ranking loss.

    value = -mean over all (positive, negative) pairs of
    log sigmoid(pos - neg).
    """
    diff = batch.pos_scores[:, None] - batch.neg_scores
    value = float(-np.mean(log_sigmoid(diff)))
    n_pairs = diff.size
    # d(-log sigmoid(d))/dd = -sigmoid(-d)
    s = sigmoid(-diff)
    grad_pos = -s.sum(axis=1) / n_pairs
    grad_neg = s / n_pairs
    return LossResult(value, grad_pos, grad_neg)


def bce_loss(batch: ScoreBatch, balance: float) -> LossResult:
    """Binary cross-entropy with labels 1 (positives) and 0 (negatives).

    value = mean[-log sigmoid(pos)] + balance * mean[-log(1 - sigmoid(neg))].
    """
    balance = float(balance)
    if balance < 0:
        raise ValueError("balance must be >= 0")
    n, m = batch.n_examples, batch.n_negatives
    value = float(np.mean(softplus(-batch.pos_scores))
                  + balance * np.mean(softplus(batch.neg_scores)))
    grad_pos = -sigmoid(-batch.pos_scores) / n
    grad_neg = balance * sigmoid(batch.neg_scores) / (n * m)
    return LossResult(value, grad_pos, grad_neg)


def mse_loss(batch: ScoreBatch, balance: float) -> LossResult:
    """Squared-error regression toward labels 1 (positives) and 0 (negatives)."""
    balance = float(balance)
    if balance < 0:
        raise ValueError("balance must be >= 0")
    n, m = batch.n_examples, batch.n_negatives
    value = float(np.mean((batch.pos_scores - 1.0) ** 2)
                  + balance * np.mean(batch.neg_scores ** 2))
    grad_pos = 2.0 * (batch.pos_scores - 1.0) / n
    grad_neg = 2.0 * balance * batch.neg_scores / (n * m)
    return LossResult(value, grad_pos, grad_neg)


def softmax_loss(batch: ScoreBatch, tau: float) -> LossResult:
    """Temperature-scaled sampled softmax ranking loss.

    Per example: -pos + tau * log sum_j exp(neg_j / tau), averaged over the
    batch. The gradient over a row of negatives is exactly the softmax weight
    vector of that row at temperature ``tau`` (divided by the batch size), so
    hard negatives receive proportionally more pressure.
    """
    tau = _check_tau(tau)
    n = batch.n_examples
    lse = logsumexp(batch.neg_scores / tau, axis=1)
    value = float(np.mean(-batch.pos_scores + tau * lse))
    grad_pos = np.full(n, -1.0 / n)
    grad_neg = softmax(batch.neg_scores / tau, axis=1) / n
    return LossResult(value, grad_pos, grad_neg)


def softmax_loss_no_variance(batch: ScoreBatch, tau: float) -> LossResult:
    """First-order surrogate of the softmax loss with its spread penalty removed.

    Per example: -pos + mean_j neg_j. Expanding the log-sum-exp of
    :func:`softmax_loss` in 1/tau gives, up to score-independent constants,
    mean_j neg_j plus Var_j[neg] / (2 tau); this surrogate keeps only the
    linear term, so every negative receives the same uniform gradient
    regardless of its score.
    """
    tau = _check_tau(tau)
    n, m = batch.n_examples, batch.n_negatives
    value = float(np.mean(-batch.pos_scores + batch.neg_scores.mean(axis=1)))
    grad_pos = np.full(n, -1.0 / n)
    grad_neg = np.full((n, m), 1.0 / (n * m))
    return LossResult(value, grad_pos, grad_neg)


def bsl_loss(batch: ScoreBatch, tau_pos: float, tau_neg: float,
             form: BslForm = BslForm.PSEUDOCODE,
             pos_group_sizes=None) -> LossResult:
    """Bilateral softmax loss with separate positive/negative temperatures.

    Two algebraic forms are supported:

    * ``CANONICAL``: per group of positives,
      -tau_pos * log mean_i exp(pos_i / tau_pos)
      + tau_neg * log sum_j exp(neg_j / tau_neg),
      averaged over groups. ``pos_group_sizes`` partitions the batch rows
      into per-user groups (default: every row its own group); a group's
      negative part pools the negative entries of all its rows. With a
      single positive the positive part reduces exactly to ``-pos``.
    * ``PSEUDOCODE``: one positive per row,
      -pos / tau_pos + (tau_pos / tau_neg) * log sum_j exp(neg_j / tau_neg),
      averaged over rows. With ``tau_pos == tau_neg`` this is the softmax
      loss scaled by ``1 / tau_pos``, so gradient directions coincide.
    """
    tau_pos = _check_tau(tau_pos, "tau_pos")
    tau_neg = _check_tau(tau_neg, "tau_neg")
    n = batch.n_examples

    if form is BslForm.PSEUDOCODE:
        if pos_group_sizes is not None and any(s != 1 for s in pos_group_sizes):
            raise ValueError("pseudocode form takes one positive per example")
        lse = logsumexp(batch.neg_scores / tau_neg, axis=1)
        value = float(np.mean(-batch.pos_scores / tau_pos + (tau_pos / tau_neg) * lse))
        grad_pos = np.full(n, -1.0 / (tau_pos * n))
        grad_neg = (tau_pos / tau_neg ** 2) * softmax(batch.neg_scores / tau_neg, axis=1) / n
        return LossResult(value, grad_pos, grad_neg)

    if form is not BslForm.CANONICAL:
        raise ValueError(f"unknown form {form!r}")

    if pos_group_sizes is None:
        sizes = [1] * n
    else:
        sizes = [int(s) for s in pos_group_sizes]
        if any(s < 1 for s in sizes):
            raise ValueError("every positive group needs at least one positive")
        if sum(sizes) != n:
            raise ValueError("pos_group_sizes must sum to the batch size")

    n_groups = len(sizes)
    grad_pos = np.zeros(n)
    grad_neg = np.zeros_like(batch.neg_scores)
    total = 0.0
    start = 0
    for size in sizes:
        rows = slice(start, start + size)
        p = batch.pos_scores[rows]
        negs = batch.neg_scores[rows]
        # -tau_pos * log mean exp(p/tau_pos) = -tau_pos * (lse(p/tau_pos) - log size)
        pos_part = -tau_pos * (logsumexp(p / tau_pos) - np.log(size))
        neg_part = tau_neg * logsumexp(negs.ravel() / tau_neg)
        total += pos_part + neg_part
        grad_pos[rows] = -softmax(p / tau_pos) / n_groups
        w = softmax(negs.ravel() / tau_neg).reshape(negs.shape)
        grad_neg[rows] = w / n_groups
        start += size
    return LossResult(total / n_groups, grad_pos, grad_neg)


def loss_fn_from_spec(spec: LossSpec):
    """Bind a LossSpec to a `batch -> LossResult` callable."""
    kind = spec.kind
    if kind is LossKind.BPR:
        return bpr_loss
    if kind is LossKind.BCE:
        return lambda b: bce_loss(b, spec.bce_mse_balance)
    if kind is LossKind.MSE:
        return lambda b: mse_loss(b, spec.bce_mse_balance)
    if kind is LossKind.SL:
        return lambda b: softmax_loss(b, spec.tau)
    if kind is LossKind.SL_NOVAR:
        return lambda b: softmax_loss_no_variance(b, spec.tau)
    if kind is LossKind.BSL:
        return lambda b: bsl_loss(b, spec.tau_pos, spec.tau_neg, spec.bsl_form)
    raise ValueError(f"unknown loss kind {kind!r}")
