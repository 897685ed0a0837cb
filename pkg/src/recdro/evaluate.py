"""Full-ranking evaluation: Recall@K, NDCG@K, popularity groups, sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import (DEFAULT_TAU_GRID, LossKind, LossSpec, NegSampler,
                     TrainConfig, spec_with_tau)
from .data import Dataset, popularity_groups
from .dro import estimate_eta
from .model import EmbeddingTable, score_all_items, train
from .sampling import SamplerState, popularity_weights_from_counts, sample_negatives


@dataclass(frozen=True)
class EvalReport:
    """Ranking metrics averaged over users with test interactions.

    ``group_ndcg[g]`` is the average per-user NDCG mass contributed by hits
    on items of popularity group ``g`` (larger ids = more popular items), so
    the entries sum to the overall NDCG at the grouping cutoff.
    """

    recall: dict[int, float]
    ndcg: dict[int, float]
    group_ndcg: np.ndarray
    group_cutoff: int
    neg_score_variance: float
    n_eval_users: int


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def rank_items(scores: np.ndarray, exclude_items=None) -> np.ndarray:
    """Full item ranking by descending score, ties broken by ascending id.

    ``exclude_items`` are pushed to the bottom (used to drop training items
    from the candidate list). Only relative score order matters, so any
    strictly increasing transform of the scores yields the same ranking.
    """
    masked = np.asarray(scores, dtype=np.float64).copy()
    if exclude_items is not None:
        masked[np.asarray(exclude_items, dtype=np.int64)] = -np.inf
    return np.argsort(-masked, kind="stable")


def evaluate(emb: EmbeddingTable, ds: Dataset, ks, n_groups: int = 10,
             neg_samples_per_user: int = 100, seed: int = 0,
             inner_product: bool = False) -> EvalReport:
    """Rank every item per user (training items excluded) and score the split.

    Ties are broken by ascending item id. Users with empty test sets are
    skipped entirely; it is an error if no user has test items.
    ``neg_score_variance`` pools ``neg_samples_per_user`` uniformly sampled
    non-training items per evaluated user and reports the population variance
    of their scores. ``inner_product`` switches test-time scoring away from
    the default cosine.
    """
    ks = sorted(int(k) for k in ks)
    if not ks or ks[0] < 1:
        raise ValueError("ks must be nonempty positive integers")
    kmax = ks[-1]
    group_cutoff = 20 if 20 in ks else kmax
    groups = popularity_groups(ds, n_groups)

    eval_users = [u for u in range(ds.n_users) if ds.test_pos[u].size]
    if not eval_users:
        raise ValueError("no user has test items")

    rng = np.random.default_rng(seed)
    discounts = _discounts(kmax)

    recall_acc = {k: [] for k in ks}
    ndcg_acc = {k: [] for k in ks}
    group_acc = np.zeros(n_groups)
    pooled_scores = []

    for u in eval_users:
        scores = score_all_items(emb, u, inner_product=inner_product)
        test_items = ds.test_pos[u]
        order = rank_items(scores, exclude_items=ds.train_pos[u])
        topk = order[:kmax]
        is_hit = np.isin(topk, test_items)

        n_test = test_items.size
        for k in ks:
            kk = min(k, topk.size)
            hits_k = int(is_hit[:kk].sum())
            recall_acc[k].append(hits_k / n_test)
            idcg = discounts[:min(k, n_test)].sum()
            dcg = float(discounts[:kk][is_hit[:kk]].sum())
            ndcg_acc[k].append(dcg / idcg)

        idcg_g = discounts[:min(group_cutoff, n_test)].sum()
        hit_ranks = np.flatnonzero(is_hit[:min(group_cutoff, topk.size)])
        for r in hit_ranks:
            group_acc[groups[topk[r]]] += discounts[r] / idcg_g

        candidate = np.ones(ds.n_items, dtype=bool)
        candidate[ds.train_pos[u]] = False
        neg_pool = np.flatnonzero(candidate)
        take = min(neg_samples_per_user, neg_pool.size)
        if take:
            sampled = rng.choice(neg_pool, size=take, replace=False)
            pooled_scores.append(scores[sampled])

    n_eval = len(eval_users)
    pooled = np.concatenate(pooled_scores) if pooled_scores else np.empty(0)
    return EvalReport(
        recall={k: float(np.mean(recall_acc[k])) for k in ks},
        ndcg={k: float(np.mean(ndcg_acc[k])) for k in ks},
        group_ndcg=group_acc / n_eval,
        group_cutoff=group_cutoff,
        neg_score_variance=float(np.var(pooled)) if pooled.size else float("nan"),
        n_eval_users=n_eval,
    )


def report_as_dict(report: EvalReport) -> dict:
    return {
        "recall": {str(k): v for k, v in report.recall.items()},
        "ndcg": {str(k): v for k, v in report.ndcg.items()},
        "group_ndcg": [float(v) for v in report.group_ndcg],
        "group_cutoff": report.group_cutoff,
        "neg_score_variance": report.neg_score_variance,
        "n_eval_users": report.n_eval_users,
    }


def report_rows(report: EvalReport) -> list[tuple[str, str, str]]:
    """Flatten a report to (metric, key, value) CSV rows."""
    rows = [("recall", str(k), repr(v)) for k, v in report.recall.items()]
    rows += [("ndcg", str(k), repr(v)) for k, v in report.ndcg.items()]
    rows += [("group_ndcg", str(g), repr(float(v)))
             for g, v in enumerate(report.group_ndcg)]
    rows.append(("neg_score_variance", "", repr(report.neg_score_variance)))
    rows.append(("n_eval_users", "", str(report.n_eval_users)))
    return rows


def default_tau_param(kind: LossKind, positive_side: bool = False) -> str | None:
    """Which LossSpec temperature a grid search should vary for this loss."""
    if kind in (LossKind.SL, LossKind.SL_NOVAR):
        return "tau"
    if kind is LossKind.BSL:
        return "tau_pos" if positive_side else "tau_neg"
    return None


@dataclass(frozen=True)
class GridSearchResult:
    best_tau: float
    best_spec: LossSpec
    emb: EmbeddingTable
    report: EvalReport
    cells: tuple[tuple[float, float], ...]  # (tau, ndcg at selection cutoff)


def grid_search_train(ds: Dataset, cfg: TrainConfig, spec: LossSpec,
                      tau_grid=None, tau_param: str | None = "auto",
                      eval_ks=(20,), n_groups: int = 10) -> GridSearchResult:
    """Train once per grid temperature and keep the best NDCG model.

    ``tau_param`` picks which LossSpec field the grid drives ("tau",
    "tau_pos" or "tau_neg"); "auto" resolves it from the loss kind, and
    ``None`` (or a temperature-free loss) collapses the grid to one run.
    """
    if tau_param == "auto":
        tau_param = default_tau_param(spec.kind)
    grid = tuple(tau_grid) if tau_grid else DEFAULT_TAU_GRID
    if tau_param is None:
        grid = (math.nan,)
    select_k = max(eval_ks)
    if 20 in eval_ks:
        select_k = 20

    best = None
    cells = []
    for tau in grid:
        cell_spec = spec if tau_param is None else spec_with_tau(spec, tau_param, tau)
        emb, _ = train(ds, cfg, cell_spec)
        report = evaluate(emb, ds, eval_ks, n_groups=n_groups)
        score = report.ndcg[select_k]
        cells.append((tau, score))
        if best is None or score > best[0]:
            best = (score, tau, cell_spec, emb, report)
    _, best_tau, best_spec, emb, report = best
    return GridSearchResult(best_tau=best_tau, best_spec=best_spec, emb=emb,
                            report=report, cells=tuple(cells))


def negative_radius_estimates(emb: EmbeddingTable, ds: Dataset, cfg: TrainConfig,
                              tau: float, n_users: int = 100,
                              seed: int = 7) -> np.ndarray:
    """Per-user implied KL radius of sampled negative-score batches.

    For each of the first ``n_users`` users with training items, sample the
    configured number of negatives, score them, and convert the score
    variance into a radius at temperature ``tau`` (uniform base).
    """
    weights = None
    if cfg.neg_sampler is NegSampler.POPULARITY:
        weights = popularity_weights_from_counts(ds.item_popularity,
                                                 cfg.popularity_exponent)
    sampler = SamplerState.create(seed=seed, mode=cfg.neg_sampler,
                                  r_noise=cfg.r_noise, popularity_weights=weights)
    out = []
    for u in range(ds.n_users):
        if len(out) >= n_users:
            break
        if not ds.train_pos[u].size:
            continue
        items = sample_negatives(sampler, ds, u, cfg.n_negatives)
        scores = score_all_items(emb, u)[items]
        base = np.full(items.size, 1.0 / items.size)
        out.append(estimate_eta(scores, base, tau))
    return np.asarray(out)


@dataclass(frozen=True)
class NoiseSweepRow:
    r_noise: float
    best_tau: float
    recall: float
    ndcg: float
    eta_mean: float
    eta_median: float


def noise_sweep(ds: Dataset, cfg: TrainConfig, spec: LossSpec, r_values,
                tau_grid=None, eval_ks=(20,)) -> list[NoiseSweepRow]:
    """Grid-search the temperature at each false-negative noise level.

    Each row reports the best-temperature metrics at the selection cutoff and
    the mean/median implied radius of negative batches under that model.
    Temperature-free losses train once per noise level and report NaN radii.
    """
    if any(r < 0 for r in r_values):
        raise ValueError("r_values must be nonnegative")
    select_k = 20 if 20 in eval_ks else max(eval_ks)
    rows = []
    for r in r_values:
        cfg_r = replace(cfg, r_noise=float(r))
        result = grid_search_train(ds, cfg_r, spec, tau_grid=tau_grid,
                                   eval_ks=eval_ks)
        tau_param = default_tau_param(spec.kind)
        if tau_param is None:
            eta_mean = eta_median = float("nan")
        else:
            tau_used = getattr(result.best_spec, "tau_neg"
                               if spec.kind is LossKind.BSL else "tau")
            etas = negative_radius_estimates(result.emb, ds, cfg_r, tau_used)
            eta_mean = float(np.mean(etas))
            eta_median = float(np.median(etas))
        rows.append(NoiseSweepRow(
            r_noise=float(r), best_tau=result.best_tau,
            recall=result.report.recall[select_k],
            ndcg=result.report.ndcg[select_k],
            eta_mean=eta_mean, eta_median=eta_median))
    return rows
