"""Acceptance gate: one test per release criterion, each printing PASS/FAIL.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines. The heavy desk-scale reproductions (criteria 9 and 10) train dozens of
small models and take a few minutes combined; everything else is seconds.
"""

import functools
import time

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from recdro.cli import main as cli_main
from recdro.config import (BslForm, LossKind, LossSpec, TrainConfig)
from recdro.data import Dataset
from recdro.dro import (base_mean_and_variance, dual_value, estimate_eta,
                        kl_ball_sup, taylor_negative_part, tau_star,
                        worst_case_weights)
from recdro.evaluate import evaluate
from recdro.losses import (ScoreBatch, bce_loss, bpr_loss, bsl_loss, mse_loss,
                           softmax_loss, softmax_loss_no_variance)
from recdro.model import EmbeddingTable, sampled_batch_grads, train
from recdro.losses import loss_fn_from_spec
from recdro.sampling import (SamplerState, contaminate_positives,
                             positive_fraction, sample_negatives)
from recdro.synthetic import planted_clusters, random_interactions, zipf_preferences

from test_evaluate import brute_force_metrics


#: (number, description, passed) per executed criterion; the conftest
#: terminal-summary hook prints these so they survive output capture.
CRITERION_RESULTS: list[tuple[int, str, bool]] = []


def criterion(number, description):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                CRITERION_RESULTS.append((number, description, False))
                print(f"criterion {number:02d} FAIL: {description}")
                raise
            CRITERION_RESULTS.append((number, description, True))
            print(f"criterion {number:02d} PASS: {description}")
        return wrapper
    return deco


def flat_grads(res):
    return np.concatenate([res.grad_pos, res.grad_neg.ravel()])


def fd_relative_error(loss_fn, batch, h=1e-5):
    """Gradient-vector relative error against central finite differences."""
    res = loss_fn(batch)
    pos, neg = batch.pos_scores, batch.neg_scores
    fd_pos = np.zeros_like(res.grad_pos)
    for i in range(pos.size):
        p1, p2 = pos.copy(), pos.copy()
        p1[i] += h
        p2[i] -= h
        fd_pos[i] = (loss_fn(ScoreBatch(p1, neg)).value
                     - loss_fn(ScoreBatch(p2, neg)).value) / (2 * h)
    fd_neg = np.zeros_like(res.grad_neg)
    for i in range(neg.shape[0]):
        for j in range(neg.shape[1]):
            n1, n2 = neg.copy(), neg.copy()
            n1[i, j] += h
            n2[i, j] -= h
            fd_neg[i, j] = (loss_fn(ScoreBatch(pos, n1)).value
                            - loss_fn(ScoreBatch(pos, n2)).value) / (2 * h)
    fd = np.concatenate([fd_pos, fd_neg.ravel()])
    an = flat_grads(res)
    return float(np.linalg.norm(fd - an) / max(np.linalg.norm(an), 1e-12))


@criterion(1, "dual minimum over temperature equals KL-ball supremum (<1e-5)")
def test_c01_duality():
    rng = np.random.default_rng(101)
    started = time.perf_counter()
    coarse_taus = np.geomspace(1e-3, 1e3, 240)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 9))
        scores = rng.uniform(-1, 1, n)
        base = rng.dirichlet(np.ones(n) * 4)
        log_base = np.log(base)
        # vectorized log-E-exp term over the whole temperature grid
        z = log_base[None, :] + scores[None, :] / coarse_taus[:, None]
        zmax = z.max(axis=1, keepdims=True)
        lee = coarse_taus * (zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1)))
        for eta in (0.01, 0.1, 0.5):
            sup = kl_ball_sup(scores, base, eta).value
            duals = lee + coarse_taus * eta
            i = int(np.argmin(duals))
            lo = coarse_taus[max(i - 1, 0)]
            hi = coarse_taus[min(i + 1, coarse_taus.size - 1)]
            refined = minimize_scalar(
                lambda t: dual_value(scores, base, t, eta),
                bounds=(lo, hi), method="bounded",
                options={"xatol": 1e-10})
            best = min(refined.fun, duals[i])
            worst = max(worst, abs(best - sup))
            assert abs(best - sup) < 1e-5
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0, f"duality sweep took {elapsed:.1f}s"


@criterion(2, "analytic gradients match finite differences "
              "(losses <1e-5, end-to-end <1e-4)")
def test_c02_gradients():
    rng = np.random.default_rng(102)
    started = time.perf_counter()

    def make_bpr(r):
        return bpr_loss

    def make_bce(r):
        c = r.uniform(0.3, 2.0)
        return lambda b: bce_loss(b, c)

    def make_mse(r):
        c = r.uniform(0.3, 2.0)
        return lambda b: mse_loss(b, c)

    def make_sl(r):
        tau = r.uniform(0.05, 1.0)
        return lambda b: softmax_loss(b, tau)

    def make_sl_novar(r):
        tau = r.uniform(0.05, 1.0)
        return lambda b: softmax_loss_no_variance(b, tau)

    def make_bsl(form):
        def make(r):
            t1, t2 = r.uniform(0.05, 1.0), r.uniform(0.05, 1.0)
            return lambda b: bsl_loss(b, t1, t2, form)
        return make

    makers = [("bpr", make_bpr), ("bce", make_bce), ("mse", make_mse),
              ("sl", make_sl), ("sl_novar", make_sl_novar),
              ("bsl_pseudocode", make_bsl(BslForm.PSEUDOCODE)),
              ("bsl_canonical", make_bsl(BslForm.CANONICAL))]
    for name, make in makers:
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 5))
            m = int(rng.integers(2, 7))
            batch = ScoreBatch(rng.uniform(-1, 1, n), rng.uniform(-1, 1, (n, m)))
            worst = max(worst, fd_relative_error(make(rng), batch))
        assert worst < 1e-5, f"{name} gradient rel err {worst}"

    specs = [LossSpec(kind=LossKind.BPR),
             LossSpec(kind=LossKind.BCE, bce_mse_balance=1.3),
             LossSpec(kind=LossKind.MSE, bce_mse_balance=0.7),
             LossSpec(kind=LossKind.SL, tau=0.2),
             LossSpec(kind=LossKind.SL_NOVAR, tau=0.2),
             LossSpec(kind=LossKind.BSL, tau_pos=0.3, tau_neg=0.2),
             LossSpec(kind=LossKind.BSL, tau_pos=0.3, tau_neg=0.2,
                      bsl_form=BslForm.CANONICAL)]
    h = 1e-6
    for case in range(100):
        spec = specs[case % len(specs)]
        fn = loss_fn_from_spec(spec)
        emb = EmbeddingTable(rng.normal(scale=0.5, size=(2, 3)),
                             rng.normal(scale=0.5, size=(4, 3)))
        users = rng.integers(0, 2, size=3)
        pos = rng.integers(0, 4, size=3)
        negs = rng.integers(0, 4, size=(3, 2))
        _, ur, ug, ir, ig = sampled_batch_grads(emb, users, pos, negs, fn)
        analytic = np.zeros(18)
        full_u = np.zeros_like(emb.user_vecs)
        full_u[ur] = ug
        full_i = np.zeros_like(emb.item_vecs)
        full_i[ir] = ig
        analytic = np.concatenate([full_u.ravel(), full_i.ravel()])
        fd = np.zeros_like(analytic)
        k = 0
        for mat in ("user_vecs", "item_vecs"):
            shape = getattr(emb, mat).shape
            for r in range(shape[0]):
                for a in range(shape[1]):
                    e1, e2 = emb.copy(), emb.copy()
                    getattr(e1, mat)[r, a] += h
                    getattr(e2, mat)[r, a] -= h
                    fd[k] = (sampled_batch_grads(e1, users, pos, negs, fn)[0]
                             - sampled_batch_grads(e2, users, pos, negs, fn)[0]) / (2 * h)
                    k += 1
        rel = np.linalg.norm(fd - analytic) / max(np.linalg.norm(analytic), 1e-12)
        assert rel < 1e-4, f"end-to-end rel err {rel} for {spec.kind}"
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"gradient checks took {elapsed:.1f}s"


@criterion(3, "bilateral loss at equal temperatures points along the "
              "softmax-loss gradient (cosine 1 within 1e-12)")
def test_c03_bilateral_softmax_consistency():
    rng = np.random.default_rng(103)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(2, 8))
        batch = ScoreBatch(rng.uniform(-1, 1, n), rng.uniform(-1, 1, (n, m)))
        tau = rng.uniform(0.05, 1.0)
        g_sl = flat_grads(softmax_loss(batch, tau))
        for form in (BslForm.PSEUDOCODE, BslForm.CANONICAL):
            g_b = flat_grads(bsl_loss(batch, tau, tau, form))
            cos = float(g_sl @ g_b / (np.linalg.norm(g_sl) * np.linalg.norm(g_b)))
            assert abs(cos - 1.0) < 1e-12


@criterion(4, "second-order expansion error decays at least quadratically "
              "in temperature (err(20) <= 0.30 err(10))")
def test_c04_taylor_order():
    rng = np.random.default_rng(104)
    for _ in range(50):
        n = int(rng.integers(3, 10))
        scores = rng.uniform(-1, 1, n)
        base = rng.dirichlet(np.ones(n) * 4)
        err = {tau: abs(dual_value(scores, base, tau, 0.0)
                        - taylor_negative_part(scores, base, tau))
               for tau in (10.0, 20.0)}
        assert err[20.0] <= 0.30 * err[10.0] + 1e-15


@criterion(5, "temperature/radius closed form round-trips (1e-12) and "
              "matches the dual grid argmin within 10% for small radii")
def test_c05_temperature_radius_link():
    rng = np.random.default_rng(105)
    for _ in range(50):
        n = int(rng.integers(3, 9))
        scores = rng.uniform(-1, 1, n)
        base = rng.dirichlet(np.ones(n) * 4)
        tau = rng.uniform(0.05, 5.0)
        _, var = base_mean_and_variance(scores, base)
        if var < 1e-12:
            continue
        eta = estimate_eta(scores, base, tau)
        assert tau_star(var, eta) == pytest.approx(tau, abs=1e-12)

    taus = np.geomspace(0.05, 1000, 6000)
    for idx in range(10):
        scores = rng.uniform(-1, 1, 5)
        base = rng.dirichlet(np.ones(5) * 4)
        _, var = base_mean_and_variance(scores, base)
        for eta in (1e-3, 1e-2):
            duals = [dual_value(scores, base, t, eta) for t in taus]
            t_grid = float(taus[int(np.argmin(duals))])
            t_closed = tau_star(var, eta)
            assert abs(t_grid - t_closed) / t_closed < 0.10


@criterion(6, "ranking metrics equal the brute-force evaluator exactly on "
              "50 random fixtures")
def test_c06_metric_oracle():
    rng = np.random.default_rng(106)
    for case in range(50):
        n_users = int(rng.integers(3, 21))
        n_items = int(rng.integers(10, 51))
        ds = random_interactions(n_users, n_items,
                                 per_user=int(rng.integers(3, 9)),
                                 test_fraction=0.4, seed=case)
        if not any(a.size for a in ds.test_pos):
            continue
        emb = EmbeddingTable(rng.normal(size=(ds.n_users, 5)),
                             rng.normal(size=(ds.n_items, 5)))
        ks = [1, 5, 20]
        report = evaluate(emb, ds, ks, n_groups=min(10, ds.n_items))
        recall, ndcg = brute_force_metrics(emb, ds, ks)
        for k in ks:
            assert report.recall[k] == recall[k]
            assert report.ndcg[k] == ndcg[k]


@criterion(7, "worst-case weights sharpen as temperature drops and equal the "
              "softmax-loss negative gradients under a uniform base")
def test_c07_worst_case_weights():
    rng = np.random.default_rng(107)

    def entropy(w):
        w = w[w > 0]
        return float(-(w * np.log(w)).sum())

    for _ in range(20):
        m = int(rng.integers(4, 12))
        scores = rng.uniform(-1, 1, m)
        base = np.full(m, 1.0 / m)
        ents = [entropy(worst_case_weights(scores, base, t).weights)
                for t in (0.5, 0.2, 0.1, 0.05)]
        assert all(a > b for a, b in zip(ents, ents[1:]))

    for _ in range(20):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(3, 9))
        batch = ScoreBatch(rng.uniform(-1, 1, n), rng.uniform(-1, 1, (n, m)))
        tau = rng.uniform(0.05, 0.5)
        grad_neg = softmax_loss(batch, tau).grad_neg
        base = np.full(m, 1.0 / m)
        for i in range(n):
            weights = worst_case_weights(batch.neg_scores[i], base, tau).weights
            assert np.max(np.abs(n * grad_neg[i] - weights)) < 1e-10


@criterion(8, "sampled positive fraction matches the closed-form mixture "
              "within +-0.01 over 1e5 draws")
def test_c08_noise_mixture():
    ds = Dataset.from_positive_lists([list(range(10))], [[]], n_items=100)
    for r, seed in ((0.0, 1), (1.0, 2), (3.0, 3)):
        st = SamplerState.create(seed=seed, r_noise=r)
        draws = sample_negatives(st, ds, 0, 100_000)
        frac = float(np.isin(draws, ds.train_pos[0]).mean())
        expected = positive_fraction(r, 10, 90)
        assert abs(frac - expected) <= 0.01, (r, frac, expected)


def _train_ndcg(ds, spec, seed, epochs=60):
    cfg = TrainConfig(embedding_dim=16, learning_rate=1e-2, epochs=epochs,
                      batch_size=1024, n_negatives=64, rng_seed=seed,
                      l2_reg=1e-6)
    emb, _ = train(ds, cfg, spec)
    return evaluate(emb, ds, [20], n_groups=10)


@criterion(9, "under 40% positive contamination the bilateral loss (best "
              "tau_pos of 3) degrades strictly less than the softmax loss "
              "on most seeds")
def test_c09_contamination_robustness():
    started = time.perf_counter()
    tau2 = 0.2
    grid = (0.14, 0.2, 0.28)
    wins = 0
    seeds = (0, 1, 2)
    for seed in seeds:
        ds = planted_clusters(n_users=200, n_items=160, n_user_clusters=4,
                              n_item_clusters=4, p_in=0.25, p_out=0.005,
                              seed=seed)
        noisy = contaminate_positives(ds, 0.4, seed=seed + 100)
        sl = LossSpec(kind=LossKind.SL, tau=tau2)
        sl_clean = _train_ndcg(ds, sl, seed).ndcg[20]
        sl_noisy = _train_ndcg(noisy, sl, seed).ndcg[20]
        sl_deg = (sl_clean - sl_noisy) / sl_clean

        def best(dataset):
            return max(
                _train_ndcg(dataset,
                            LossSpec(kind=LossKind.BSL, tau_pos=t1,
                                     tau_neg=tau2), seed).ndcg[20]
                for t1 in grid)

        b_clean, b_noisy = best(ds), best(noisy)
        b_deg = (b_clean - b_noisy) / b_clean
        if b_deg < sl_deg:
            wins += 1
    assert wins * 2 > len(seeds), f"bilateral won only {wins}/{len(seeds)} seeds"
    elapsed = time.perf_counter() - started
    assert elapsed < 600.0, f"contamination reproduction took {elapsed:.0f}s"


@criterion(10, "softmax loss shifts ranking mass toward unpopular items "
               "versus pairwise loss, and the variance-ablated surrogate "
               "shifts it back, on most seeds")
def test_c10_fairness_decomposition():
    started = time.perf_counter()
    seeds = (0, 1, 2)
    sl_beats_bpr = ablation_more_popular = variance_drops = 0
    for seed in seeds:
        ds = zipf_preferences(seed=seed)
        reports = {
            "bpr": _train_ndcg(ds, LossSpec(kind=LossKind.BPR), seed),
            "sl": _train_ndcg(ds, LossSpec(kind=LossKind.SL, tau=0.2), seed),
            "novar": _train_ndcg(ds, LossSpec(kind=LossKind.SL_NOVAR, tau=0.2),
                                 seed),
        }
        share = {}
        for name, rep in reports.items():
            g = rep.group_ndcg
            share[name] = float(g[:5].sum() / g.sum())
        if share["sl"] > share["bpr"]:
            sl_beats_bpr += 1
        if (1 - share["novar"]) > (1 - share["sl"]):
            ablation_more_popular += 1
        if reports["sl"].neg_score_variance < reports["bpr"].neg_score_variance:
            variance_drops += 1
    assert sl_beats_bpr * 2 > len(seeds)
    assert ablation_more_popular * 2 > len(seeds)
    assert variance_drops * 2 > len(seeds)
    elapsed = time.perf_counter() - started
    assert elapsed < 600.0, f"fairness reproduction took {elapsed:.0f}s"


@criterion(11, "two identical training runs emit byte-identical metric CSVs")
def test_c11_determinism(tmp_path):
    from recdro.data import save_dataset

    ds = planted_clusters(n_users=50, n_items=30, seed=0)
    save_dataset(ds, tmp_path / "train.txt", tmp_path / "test.txt")
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        f"train_file = {tmp_path / 'train.txt'}\n"
        f"test_file = {tmp_path / 'test.txt'}\n"
        "loss = sl\ntau = 0.2\nembedding_dim = 8\nlearning_rate = 0.01\n"
        "epochs = 6\nbatch_size = 256\nn_negatives = 8\neval_every = 3\n"
        "rng_seed = 7\n")
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert cli_main(["train", "--config", str(cfg), "--out", str(out1)]) == 0
    assert cli_main(["train", "--config", str(cfg), "--out", str(out2)]) == 0
    assert (out1 / "epochs.csv").read_bytes() == (out2 / "epochs.csv").read_bytes()
