"""Command-line surface: reproducible training, evaluation, and sweeps.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
All tabular output is RFC-4180-style CSV with a header row; plotting is left
to external tools.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluate import (default_tau_param, evaluate, grid_search_train,
                       negative_radius_estimates, report_as_dict, report_rows)
from .config import (CONFIG_KEYS, ConfigError, ExperimentConfig, LossKind,
                     load_config, override_config, config_as_dict)
from .data import DataFormatError, Dataset, load_dataset, save_dataset
from .dro import estimate_eta, worst_case_weights
from .model import (CheckpointError, TrainingDivergedError, load_checkpoint,
                    save_checkpoint, score_all_items, train)
from .sampling import SamplerState, contaminate_positives, sample_negatives

ARTIFACT_VERSION = "recdro-0.1.0"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out_dir: Path, cfg: ExperimentConfig, timing=None) -> None:
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "seed": cfg.train.rng_seed,
        "config": config_as_dict(cfg),
        "datasets": {
            "train": {"path": cfg.train_file, "sha256": _sha256(Path(cfg.train_file))},
            "test": {"path": cfg.test_file, "sha256": _sha256(Path(cfg.test_file))},
        },
        "timing": timing,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _check_resume(out_dir: Path, cfg: ExperimentConfig) -> None:
    """Abort before touching outputs if an old manifest hashes differently."""
    path = out_dir / "manifest.json"
    if not path.exists():
        return
    with open(path, "r", encoding="utf-8") as fh:
        old = json.load(fh)
    for split, data_path in (("train", cfg.train_file), ("test", cfg.test_file)):
        recorded = old.get("datasets", {}).get(split, {}).get("sha256")
        if recorded and recorded != _sha256(Path(data_path)):
            raise RuntimeError(
                f"{split} dataset hash mismatch against existing manifest in {out_dir}; "
                "refusing to overwrite outputs")


def _load_split(cfg: ExperimentConfig) -> Dataset:
    if not cfg.train_file or not cfg.test_file:
        raise ConfigError("train_file and test_file must be set")
    return load_dataset(cfg.train_file, cfg.test_file)


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    for key in CONFIG_KEYS:
        value = getattr(args, f"opt_{key}", None)
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["rng_seed"] = str(args.seed)
    if overrides:
        cfg = override_config(cfg, overrides)
    return cfg


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _metric_columns(ks):
    cols = [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]
    return cols


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _check_resume(out_dir, cfg)
    _write_manifest(out_dir, cfg)

    ds = _load_split(cfg)
    if cfg.train.pos_noise_ratio > 0:
        ds = contaminate_positives(ds, cfg.train.pos_noise_ratio, cfg.train.rng_seed)

    ks = cfg.eval_ks
    best = {"ndcg": -1.0, "epoch": -1}
    epoch_times: list[float] = []
    last_tick = time.perf_counter()

    def callback(epoch, emb):
        nonlocal last_tick
        epoch_times.append(time.perf_counter() - last_tick)
        last_tick = time.perf_counter()
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            report = evaluate(emb, ds, ks, n_groups=min(10, ds.n_items))
            select_k = 20 if 20 in ks else max(ks)
            if report.ndcg[select_k] > best["ndcg"]:
                best.update(ndcg=report.ndcg[select_k], epoch=epoch)
                save_checkpoint(out_dir / "best.npz", emb,
                                epoch=epoch, seed=cfg.train.rng_seed)
            out = {}
            for k in ks:
                out[f"recall@{k}"] = report.recall[k]
                out[f"ndcg@{k}"] = report.ndcg[k]
            return out
        return None

    started = time.perf_counter()
    emb, log = train(ds, cfg.train, cfg.loss, epoch_callback=callback)
    wall = time.perf_counter() - started

    save_checkpoint(out_dir / "last.npz", emb,
                    epoch=cfg.train.epochs - 1, seed=cfg.train.rng_seed)
    if not (out_dir / "best.npz").exists():
        save_checkpoint(out_dir / "best.npz", emb,
                        epoch=cfg.train.epochs - 1, seed=cfg.train.rng_seed)

    metric_cols = _metric_columns(ks)
    rows = []
    for entry in log:
        row = [entry["epoch"], repr(entry["mean_loss"])]
        row += [repr(entry[c]) if c in entry else "" for c in metric_cols]
        rows.append(row)
    _write_csv(out_dir / "epochs.csv", ["epoch", "mean_loss"] + metric_cols, rows)
    _write_manifest(out_dir, cfg, timing={"wall_clock_s": wall,
                                          "per_epoch_s": epoch_times})
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.train, args.test)
    ks = [int(k) for k in args.ks.replace(",", " ").split()]
    report = evaluate(ckpt.emb, ds, ks, n_groups=min(args.n_groups, ds.n_items))
    print(json.dumps(report_as_dict(report), indent=2, sort_keys=True))
    if args.out:
        _write_csv(Path(args.out), ["metric", "key", "value"], report_rows(report))
    return 0


def _sweep_cells(args):
    r_values = [float(v) for v in (args.r_noise_values or "").replace(",", " ").split()]
    n_values = [int(v) for v in (args.n_negatives_values or "").replace(",", " ").split()]
    p_values = [float(v) for v in (args.pos_noise_values or "").replace(",", " ").split()]
    if not (r_values or n_values or p_values):
        raise ConfigError("empty sweep: give at least one of --r-noise-values, "
                          "--n-negatives-values, --pos-noise-values")
    return (r_values or [None], n_values or [None], p_values or [None])


def cmd_noise_sweep(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_ds = _load_split(cfg)
    r_values, n_values, p_values = _sweep_cells(args)
    tau_grid = cfg.tau_grid
    ks = cfg.eval_ks
    select_k = 20 if 20 in ks else max(ks)

    rows = []
    for p_ratio in p_values:
        ds = base_ds
        if p_ratio:
            ds = contaminate_positives(base_ds, p_ratio, cfg.train.rng_seed)
        # positive-side noise is countered by the positive temperature
        positive_side = p_ratio is not None
        for r in r_values:
            for n_neg in n_values:
                tc = cfg.train
                if r is not None:
                    tc = replace(tc, r_noise=r)
                if n_neg is not None:
                    tc = replace(tc, n_negatives=n_neg)
                tau_param = default_tau_param(cfg.loss.kind, positive_side)
                result = grid_search_train(ds, tc, cfg.loss, tau_grid=tau_grid,
                                              tau_param=tau_param, eval_ks=ks,
                                              n_groups=min(10, ds.n_items))
                if cfg.loss.kind in (LossKind.SL, LossKind.SL_NOVAR, LossKind.BSL):
                    eta_tau = (result.best_spec.tau_neg
                               if cfg.loss.kind is LossKind.BSL else result.best_spec.tau)
                    etas = negative_radius_estimates(result.emb, ds, tc, eta_tau)
                    eta_mean, eta_median = repr(float(np.mean(etas))), repr(float(np.median(etas)))
                else:
                    eta_mean = eta_median = ""
                rows.append([
                    "" if r is None else repr(float(r)),
                    "" if p_ratio is None else repr(float(p_ratio)),
                    "" if n_neg is None else n_neg,
                    cfg.loss.kind.value,
                    "" if np.isnan(result.best_tau) else repr(float(result.best_tau)),
                    repr(result.report.recall[select_k]),
                    repr(result.report.ndcg[select_k]),
                    eta_mean, eta_median,
                ])
    _write_csv(out_dir / "sweep.csv",
               ["r_noise", "pos_noise_ratio", "n_negatives", "loss", "best_tau",
                f"recall@{select_k}", f"ndcg@{select_k}", "eta_mean", "eta_median"],
               rows)
    return 0


def cmd_dro_diagnose(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.train, args.test)
    taus = [float(t) for t in args.taus.replace(",", " ").split()]
    if not taus or any(t <= 0 for t in taus):
        raise ConfigError("--taus must be positive reals")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    sampler = SamplerState.create(seed=args.seed if args.seed is not None else 0)
    rng = np.random.default_rng(sampler.rng.integers(2 ** 32))
    users_with_train = [u for u in range(ds.n_users) if ds.train_pos[u].size
                        and ds.train_pos[u].size < ds.n_items]
    if not users_with_train:
        raise RuntimeError("no user has both positives and negatives")

    weight_rows = []
    eta_rows = []
    for b in range(args.batches):
        user = int(rng.choice(users_with_train))
        items = sample_negatives(sampler, ds, user, args.n_negatives)
        scores = score_all_items(ckpt.emb, user)[items]
        base = np.full(items.size, 1.0 / items.size)
        for tau in taus:
            wc = worst_case_weights(scores, base, tau)
            for item, s, w in zip(items, scores, wc.weights):
                weight_rows.append([b, repr(tau), int(item), repr(float(s)),
                                    repr(float(w))])
            eta_rows.append([b, repr(tau),
                             repr(estimate_eta(scores, base, tau)),
                             repr(wc.kl_radius)])
    _write_csv(out_dir / "weights.csv",
               ["batch", "tau", "item", "score", "weight"], weight_rows)
    _write_csv(out_dir / "eta.csv",
               ["batch", "tau", "eta_estimate", "achieved_kl"], eta_rows)
    return 0


def cmd_fairness_report(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.train, args.test)
    n_groups = min(args.n_groups, ds.n_items)
    report = evaluate(ckpt.emb, ds, [20], n_groups=n_groups)
    columns = {"group": list(range(n_groups)),
               "ndcg_contribution": [repr(float(v)) for v in report.group_ndcg]}
    summary = {"neg_score_variance": report.neg_score_variance,
               "ndcg@20": report.ndcg[20]}
    if args.baseline_checkpoint:
        other = load_checkpoint(args.baseline_checkpoint)
        base_report = evaluate(other.emb, ds, [20], n_groups=n_groups)
        columns["ndcg_contribution_baseline"] = [repr(float(v))
                                                 for v in base_report.group_ndcg]
        summary["baseline_neg_score_variance"] = base_report.neg_score_variance
        summary["baseline_ndcg@20"] = base_report.ndcg[20]
    rows = list(zip(*columns.values()))
    if args.out:
        _write_csv(Path(args.out), list(columns.keys()), rows)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_ingest(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.remap:
        ds = _load_remapped(args.train, args.test, out_dir)
    else:
        ds = load_dataset(args.train, args.test)
    save_dataset(ds, out_dir / "train.txt", out_dir / "test.txt")
    stats = {"n_users": ds.n_users, "n_items": ds.n_items,
             "n_train_interactions": ds.n_train_interactions,
             "n_test_interactions": int(sum(a.size for a in ds.test_pos))}
    with open(out_dir / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


def _load_remapped(train_path, test_path, out_dir: Path) -> Dataset:
    """Densify arbitrary integer ids and persist the mapping tables."""
    from .data import _parse_adjacency

    train_map = _parse_adjacency(train_path)
    test_map = _parse_adjacency(test_path)
    users = sorted(set(train_map) | set(test_map))
    items = sorted({i for lst in list(train_map.values()) + list(test_map.values())
                    for i in lst})
    user_id = {u: n for n, u in enumerate(users)}
    item_id = {i: n for n, i in enumerate(items)}
    _write_csv(out_dir / "user_map.csv", ["raw", "dense"],
               [[u, user_id[u]] for u in users])
    _write_csv(out_dir / "item_map.csv", ["raw", "dense"],
               [[i, item_id[i]] for i in items])
    train = [[item_id[i] for i in train_map.get(u, [])] for u in users]
    test = [[item_id[i] for i in test_map.get(u, [])] for u in users]
    return Dataset.from_positive_lists(train, test)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recdro",
        description="Matrix-factorization training, ranking evaluation, and "
                    "KL-ball robustness diagnostics.")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the configured rng seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="reserved; this build runs single-threaded")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate/normalize raw interaction files")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--remap", action="store_true",
                   help="densify arbitrary integer ids and write mapping tables")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    for key in CONFIG_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}",
                       default=None, metavar="V",
                       help=f"override config key {key}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--ks", default="20", help="comma-separated cutoffs")
    p.add_argument("--n-groups", type=int, default=10)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("noise-sweep",
                       help="train/evaluate over noise levels and sample counts")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--r-noise-values", default=None)
    p.add_argument("--n-negatives-values", default=None)
    p.add_argument("--pos-noise-values", default=None)
    for key in CONFIG_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}",
                       default=None, metavar="V")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("dro-diagnose",
                       help="emit worst-case weights and radius estimates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--taus", default="0.05,0.1,0.2,0.5")
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--n-negatives", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dro_diagnose)

    p = sub.add_parser("fairness-report",
                       help="per-popularity-group metric contributions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline-checkpoint", default=None)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--n-groups", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fairness_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, CheckpointError, TrainingDivergedError,
            RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
