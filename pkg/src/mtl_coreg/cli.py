"""Command-line pipeline: ``mtl-coreg <command> --config FILE [options]``.

Commands
    synth      write train/val/noisy datasets from the config
    train      train a two-view model (optionally pretrain on filtered
               noisy data, then finetune on the clean training set)
    filter     keep noisy labels the trained model confidently agrees with
    select     per-task best checkpoints and decision thresholds
    ensemble   fit per-task logistic blends over several trained models
    eval       score a trained model on a dataset (strategy ladder rows)
    ablate     baseline vs. no-decorrelation / no-consistency / no-balancing
               over a seed list

Every command reads one JSON config, writes its artifacts atomically under
``--out``, and records a manifest (config snapshot, seed, input/artifact
paths with SHA-256 checksums, wall-clock timings). Re-running a command
with identical inputs and seed reproduces every artifact bitwise in
single-threaded mode.

Exit codes: 0 success, 1 runtime failure (e.g. training divergence),
2 missing input file, 3 unparseable input, 4 contract violation.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ContractError, FormatError, TrainingDivergedError
from .fileio import atomic_write_text, sha256_file
from .model import TwoViewModel
from .selection import (
    SelectionResult,
    ensemble_probs,
    evaluate,
    fit_ensemble,
    select_checkpoints,
    select_thresholds,
)
from .synthdata import (
    GeneratorConfig,
    LabeledDataset,
    corrupt_labels,
    generate,
    split,
)
from .trainloop import CheckpointHistory, filter_noisy, pretrain_finetune, train

# Purpose tags for deriving independent sub-seeds from the master seed.
_TAG_DATA, _TAG_SPLIT, _TAG_POOL, _TAG_FLIP = 101, 102, 103, 104
_TAG_MODEL, _TAG_TRAIN, _TAG_PRETRAIN, _TAG_FINETUNE = 105, 106, 107, 108

ABLATION_VARIANTS = (
    ("no_multiview", {"lambda_mv": 0.0}),
    ("no_coregularization", {"lambda_cr": 0.0}),
    ("no_balancing", {"balancing_enabled": False}),
    ("baseline", {}),
)


def derive_seed(seed: int, *tags: int) -> int:
    state = np.random.SeedSequence([seed & (2**64 - 1), *tags])
    return int(state.generate_state(1, np.uint64)[0])


def make_datasets(config: ExperimentConfig, seed: int):
    """Synthesize the clean train/val split plus the noisy pool."""
    data = config.data
    base = dict(
        task_count=data.task_count,
        latent_dim=data.latent_dim,
        input_dim=data.input_dim,
        target_positive_rates=data.rates(),
        task_correlation=tuple(map(tuple, data.correlation().tolist())),
        feature_noise_std=data.feature_noise_std,
    )
    clean = generate(GeneratorConfig(sample_count=data.sample_count,
                                     seed=derive_seed(seed, _TAG_DATA), **base))
    train_ds, val_ds = split(clean, data.train_fraction, derive_seed(seed, _TAG_SPLIT))
    pool = generate(GeneratorConfig(sample_count=data.noisy_sample_count,
                                    seed=derive_seed(seed, _TAG_POOL), **base))
    noisy = corrupt_labels(pool, data.flip_rate, derive_seed(seed, _TAG_FLIP))
    if config.task_subset is not None:
        train_ds = train_ds.select_tasks(config.task_subset)
        val_ds = val_ds.select_tasks(config.task_subset)
        noisy = noisy.select_tasks(config.task_subset)
    return train_ds, val_ds, noisy


def build_model(config: ExperimentConfig, seed: int, task_count: int) -> TwoViewModel:
    return TwoViewModel.initialize(
        input_dim=config.data.input_dim,
        hidden_dims=config.model.hidden_dims,
        feature_dim=config.model.feature_dim,
        task_count=task_count,
        seed=derive_seed(seed, _TAG_MODEL),
        activation=config.model.activation,
    )


class _Manifest:
    def __init__(self, command: str, config: ExperimentConfig, seed: int, threads: int):
        self.doc = {
            "command": command,
            "tool_version": __version__,
            "seed": seed,
            "threads": threads,
            "config": config.to_dict(),
            "inputs": {},
            "artifacts": {},
            "timings_s": {},
        }
        self._start = time.perf_counter()

    def add_input(self, label: str, path) -> None:
        self.doc["inputs"][label] = {"path": str(path), "sha256": sha256_file(path)}

    def add_artifact(self, label: str, path) -> None:
        self.doc["artifacts"][label] = {"path": str(path), "sha256": sha256_file(path)}

    def write(self, out_dir: Path) -> None:
        self.doc["timings_s"]["total"] = time.perf_counter() - self._start
        path = out_dir / f"{self.doc['command']}_manifest.json"
        atomic_write_text(path, json.dumps(self.doc, sort_keys=True, indent=2) + "\n")


def _load_dataset(path) -> LabeledDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return LabeledDataset.load(path)


def _load_history(path) -> CheckpointHistory:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"history file not found: {path}")
    return CheckpointHistory.load(path)


def _csv_text(header, rows) -> str:
    def cell(v):
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [",".join(header)]
    lines.extend(",".join(cell(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> None:
    config, seed, out = args.config_obj, args.seed_val, args.out_dir
    manifest = _Manifest("synth", config, seed, args.threads)
    train_ds, val_ds, noisy_ds = make_datasets(config, seed)
    for label, ds in (("train", train_ds), ("val", val_ds), ("noisy", noisy_ds)):
        path = out / f"{label}.bin"
        ds.save(path)
        manifest.add_artifact(label, path)
        if args.csv:
            csv_path = out / f"{label}.csv"
            ds.to_csv(csv_path)
            manifest.add_artifact(f"{label}_csv", csv_path)
    manifest.write(out)


def cmd_train(args) -> None:
    config, seed, out = args.config_obj, args.seed_val, args.out_dir
    manifest = _Manifest("train", config, seed, args.threads)
    train_path = Path(args.train_data) if args.train_data else out / "train.bin"
    val_path = Path(args.val_data) if args.val_data else out / "val.bin"
    train_ds = _load_dataset(train_path)
    val_ds = _load_dataset(val_path)
    manifest.add_input("train", train_path)
    manifest.add_input("val", val_path)
    model = build_model(config, seed, train_ds.task_count)
    if args.filtered:
        filtered_path = Path(args.filtered)
        ds_c = _load_dataset(filtered_path)
        manifest.add_input("filtered", filtered_path)
        pre_epochs, fine_epochs = config.train.budget_split()
        history = pretrain_finetune(
            model,
            train_ds,
            ds_c,
            val_ds,
            pre_config=config.train.train_config(
                seed=derive_seed(seed, _TAG_PRETRAIN), epochs=pre_epochs
            ),
            fine_config=config.train.train_config(
                seed=derive_seed(seed, _TAG_FINETUNE), epochs=fine_epochs
            ),
        )
        default_name = "history_finetuned.bin"
    else:
        history = train(
            model,
            train_ds,
            val_ds,
            config.train.train_config(seed=derive_seed(seed, _TAG_TRAIN)),
        )
        default_name = "history.bin"
    history_path = Path(args.output) if args.output else out / default_name
    history.save(history_path)
    metrics_path = history_path.with_name(history_path.stem + "_metrics.csv")
    atomic_write_text(metrics_path, history.metrics_csv())
    manifest.add_artifact("history", history_path)
    manifest.add_artifact("metrics", metrics_path)
    manifest.write(out)


def cmd_filter(args) -> None:
    config, seed, out = args.config_obj, args.seed_val, args.out_dir
    manifest = _Manifest("filter", config, seed, args.threads)
    history_path = Path(args.history) if args.history else out / "history.bin"
    noisy_path = Path(args.noisy_data) if args.noisy_data else out / "noisy.bin"
    history = _load_history(history_path)
    noisy_ds = _load_dataset(noisy_path)
    manifest.add_input("history", history_path)
    manifest.add_input("noisy", noisy_path)
    if len(history) == 0:
        raise ContractError("cannot filter with an empty checkpoint history")
    model = history.checkpoints[history.best_mean_epoch()].restore_model()
    filtered = filter_noisy(model, noisy_ds, config.filter.threshold)
    out_path = Path(args.output) if args.output else out / "filtered.bin"
    filtered.save(out_path)
    manifest.add_artifact("filtered", out_path)
    manifest.doc["kept_rows"] = int(filtered.n_samples)
    manifest.doc["kept_labels"] = int(filtered.mask.sum())
    manifest.doc["filter_epoch"] = history.best_mean_epoch()
    manifest.write(out)


def _chosen_epoch_probs(history: CheckpointHistory, epochs) -> np.ndarray:
    """Per-task fused validation probabilities at each task's chosen epoch."""
    if any(cp.val_probs is None for cp in history.checkpoints):
        raise ContractError("history lacks stored validation probabilities")
    cols = [history.checkpoints[int(epochs[j])].val_probs[:, j]
            for j in range(history.task_count)]
    return np.stack(cols, axis=1)


def cmd_select(args) -> None:
    config, seed, out = args.config_obj, args.seed_val, args.out_dir
    manifest = _Manifest("select", config, seed, args.threads)
    history_path = Path(args.history) if args.history else out / "history.bin"
    val_path = Path(args.val_data) if args.val_data else out / "val.bin"
    history = _load_history(history_path)
    val_ds = _load_dataset(val_path)
    manifest.add_input("history", history_path)
    manifest.add_input("val", val_path)
    if len(history) == 0:
        raise ContractError("cannot select from an empty checkpoint history")
    ckpt = select_checkpoints(history)
    probs = _chosen_epoch_probs(history, ckpt.epochs)
    if probs.shape[0] != val_ds.n_samples:
        raise ContractError(
            "stored validation probabilities do not match the validation set"
        )
    thr = select_thresholds(
        probs,
        val_ds.labels,
        config.selection.threshold_grid,
        mask=val_ds.mask,
        degenerate_f1=config.selection.degenerate_f1,
    )
    result = SelectionResult(
        scores=thr.scores,
        composite=thr.composite,
        epochs=ckpt.epochs,
        thresholds=thr.thresholds,
        extra={
            "checkpoint_composite": float(ckpt.composite),
            "checkpoint_scores": [float(s) for s in ckpt.scores],
            "single_epoch_mean_scores": [
                float(m) for m in history.scores_matrix().mean(axis=1)
            ],
            "selection_data_sha256": sha256_file(val_path),
        },
    )
    out_path = Path(args.output) if args.output else out / "selection.json"
    atomic_write_text(out_path, result.to_json())
    manifest.add_artifact("selection", out_path)
    manifest.write(out)


def cmd_ensemble(args) -> None:
    config, seed, out = args.config_obj, args.seed_val, args.out_dir
    manifest = _Manifest("ensemble", config, seed, args.threads)
    val_path = Path(args.val_data) if args.val_data else out / "val.bin"
    val_ds = _load_dataset(val_path)
    manifest.add_input("val", val_path)
    member_probs = []
    for i, raw in enumerate(args.histories):
        path = Path(raw)
        history = _load_history(path)
        manifest.add_input(f"member_{i}", path)
        if len(history) == 0:
            raise ContractError(f"member history {path} is empty")
        ckpt = select_checkpoints(history)
        probs = _chosen_epoch_probs(history, ckpt.epochs)
        if probs.shape[0] != val_ds.n_samples:
            raise ContractError(f"member {path} probabilities do not match the fit set")
        member_probs.append(probs)
    fit = fit_ensemble(
        member_probs, val_ds.labels, degenerate_f1=config.selection.degenerate_f1
    )
    result = SelectionResult(
        scores=fit.scores,
        composite=fit.composite,
        ensemble_weights=fit.weights,
        ensemble_fallback=fit.fallback,
        extra={"fit_data_sha256": sha256_file(val_path),
               "members": [str(Path(p)) for p in args.histories]},
    )
    out_path = Path(args.output) if args.output else out / "ensemble.json"
    atomic_write_text(out_path, result.to_json())
    rows = []
    for i, probs in enumerate(member_probs):
        rep = evaluate(probs, 0.5, val_ds.labels, mask=val_ds.mask,
                       degenerate_f1=config.selection.degenerate_f1)
        rows.append((f"member_{i}", rep.mean_f1, rep.mean_acc, rep.final))
    avg = np.mean(np.stack(member_probs), axis=0)
    rep = evaluate(avg, 0.5, val_ds.labels, mask=val_ds.mask,
                   degenerate_f1=config.selection.degenerate_f1)
    rows.append(("uniform_average", rep.mean_f1, rep.mean_acc, rep.final))
    blend = ensemble_probs(member_probs, fit)
    rep = evaluate(blend, 0.5, val_ds.labels, mask=val_ds.mask,
                   degenerate_f1=config.selection.degenerate_f1)
    rows.append(("fitted", rep.mean_f1, rep.mean_acc, rep.final))
    report_path = out / "ensemble_report.csv"
    atomic_write_text(
        report_path,
        _csv_text(("strategy", "f1", "accuracy", "final_score"),
                  [(r[0], r[1], r[2], r[3]) for r in rows]),
    )
    manifest.add_artifact("ensemble", out_path)
    manifest.add_artifact("report", report_path)
    manifest.write(out)


def cmd_eval(args) -> None:
    config, seed, out = args.config_obj, args.seed_val, args.out_dir
    manifest = _Manifest("eval", config, seed, args.threads)
    history_path = Path(args.history) if args.history else out / "history.bin"
    data_path = Path(args.data) if args.data else out / "val.bin"
    history = _load_history(history_path)
    data_ds = _load_dataset(data_path)
    manifest.add_input("history", history_path)
    manifest.add_input("data", data_path)
    if len(history) == 0:
        raise ContractError("cannot evaluate an empty checkpoint history")
    deg = config.selection.degenerate_f1
    data_sha = sha256_file(data_path)

    def fused_at(epoch: int) -> np.ndarray:
        if not 0 <= epoch < len(history):
            raise ContractError(f"epoch {epoch} not present in history")
        model = history.checkpoints[epoch].restore_model()
        return model.forward(data_ds.features).fused

    rows = []
    per_task_rows = []

    def add_row(strategy, probs, thresholds, epochs, in_sample):
        report = evaluate(probs, thresholds, data_ds.labels, mask=data_ds.mask,
                          degenerate_f1=deg)
        rows.append((strategy, report.mean_f1, report.mean_acc, report.final, in_sample))
        thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64),
                              (data_ds.task_count,))
        for j, cc in enumerate(report.counts):
            per_task_rows.append(
                (strategy, j, int(epochs[j]), float(thr[j]), cc.tp, cc.fp, cc.tn, cc.fn,
                 float(report.f1s[j]), float(report.accs[j]), float(report.scores[j]))
            )

    fixed_epoch = args.epoch if args.epoch is not None else history.best_mean_epoch()
    add_row("fixed", fused_at(fixed_epoch), 0.5,
            np.full(data_ds.task_count, fixed_epoch), "")

    if args.selection:
        sel_path = Path(args.selection)
        if not sel_path.exists():
            raise FileNotFoundError(f"selection file not found: {sel_path}")
        sel = SelectionResult.from_json(sel_path.read_text())
        manifest.add_input("selection", sel_path)
        if sel.epochs is None or sel.thresholds is None:
            raise ContractError("selection document lacks epochs or thresholds")
        if sel.task_count != data_ds.task_count:
            raise ContractError("selection task count does not match the dataset")
        in_sample = "yes" if sel.extra.get("selection_data_sha256") == data_sha else "no"
        chosen = np.stack([fused_at(int(e))[:, j] for j, e in enumerate(sel.epochs)], axis=1)
        add_row("chosen", chosen, 0.5, sel.epochs, in_sample)
        add_row("chosen_threshold", chosen, sel.thresholds, sel.epochs, in_sample)

    report_path = Path(args.output) if args.output else out / "eval_report.csv"
    atomic_write_text(
        report_path,
        _csv_text(("strategy", "f1", "accuracy", "final_score", "in_sample"), rows),
    )
    per_task_path = report_path.with_name(report_path.stem + "_per_task.csv")
    atomic_write_text(
        per_task_path,
        _csv_text(
            ("strategy", "task", "epoch", "threshold", "tp", "fp", "tn", "fn",
             "f1", "acc", "score"),
            per_task_rows,
        ),
    )
    manifest.add_artifact("report", report_path)
    manifest.add_artifact("per_task", per_task_path)
    manifest.write(out)


def _ablation_run(config: ExperimentConfig, seed: int, overrides: dict) -> dict:
    train_ds, val_ds, _ = make_datasets(config, seed)
    model = build_model(config, seed, train_ds.task_count)
    history = train(
        model,
        train_ds,
        val_ds,
        config.train.train_config(seed=derive_seed(seed, _TAG_TRAIN),
                                  store_val_probs=False, **overrides),
    )
    epoch = history.best_mean_epoch()
    cp = history.checkpoints[epoch]
    return {
        "epoch": epoch,
        "final": float(cp.scores.mean()),
        "counts": cp.counts,
        "f1s": cp.f1s,
        "accs": cp.accs,
        "scores": cp.scores,
    }


def cmd_ablate(args) -> None:
    config, seed, out = args.config_obj, args.seed_val, args.out_dir
    manifest = _Manifest("ablate", config, seed, args.threads)
    seeds = tuple(args.seeds) if args.seeds else config.ablation.seeds
    jobs = [(name, overrides, s) for name, overrides in ABLATION_VARIANTS for s in seeds]

    def run(job):
        name, overrides, s = job
        return (name, s), _ablation_run(config, s, overrides)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = dict(pool.map(run, jobs))
    else:
        results = dict(run(job) for job in jobs)

    summary_rows = []
    run_rows = []
    detail_rows = []
    for name, _ in ABLATION_VARIANTS:
        finals = np.array([results[(name, s)]["final"] for s in seeds])
        std = float(finals.std(ddof=1)) if len(seeds) > 1 else 0.0
        summary_rows.append((name, float(finals.mean()), std, len(seeds)))
        for s in seeds:
            outcome = results[(name, s)]
            run_rows.append((name, s, outcome["epoch"], outcome["final"]))
            for j in range(len(outcome["scores"])):
                tp, fp, tn, fn = (int(v) for v in outcome["counts"][j])
                detail_rows.append(
                    (name, s, j, tp, fp, tn, fn, float(outcome["f1s"][j]),
                     float(outcome["accs"][j]), float(outcome["scores"][j]))
                )
    atomic_write_text(out / "ablation_summary.csv",
                      _csv_text(("variant", "mean_final", "std_final", "n_seeds"),
                                summary_rows))
    atomic_write_text(out / "ablation_runs.csv",
                      _csv_text(("variant", "seed", "chosen_epoch", "final_score"),
                                run_rows))
    atomic_write_text(out / "ablation_details.csv",
                      _csv_text(("variant", "seed", "task", "tp", "fp", "tn", "fn",
                                 "f1", "acc", "score"), detail_rows))
    for label in ("ablation_summary", "ablation_runs", "ablation_details"):
        manifest.add_artifact(label, out / f"{label}.csv")
    manifest.write(out)


# --- argument parsing --------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", required=True, help="JSON experiment config")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker threads (1 guarantees bitwise reproducibility)")
    sub.add_argument("--out", default="out", help="artifact directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtl-coreg",
        description="Two-view co-regularized multi-task training pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("synth", help="synthesize train/val/noisy datasets")
    _add_common(sub)
    sub.add_argument("--csv", action="store_true", help="also export CSV copies")
    sub.set_defaults(func=cmd_synth)

    sub = subs.add_parser("train", help="train a two-view model")
    _add_common(sub)
    sub.add_argument("--train-data", default=None)
    sub.add_argument("--val-data", default=None)
    sub.add_argument("--filtered", default=None,
                     help="filtered noisy dataset; enables pretrain+finetune")
    sub.add_argument("--output", default=None, help="history file path")
    sub.set_defaults(func=cmd_train)

    sub = subs.add_parser("filter", help="filter the noisy pool with a trained model")
    _add_common(sub)
    sub.add_argument("--history", default=None)
    sub.add_argument("--noisy-data", default=None)
    sub.add_argument("--output", default=None)
    sub.set_defaults(func=cmd_filter)

    sub = subs.add_parser("select", help="per-task checkpoint and threshold selection")
    _add_common(sub)
    sub.add_argument("--history", default=None)
    sub.add_argument("--val-data", default=None)
    sub.add_argument("--output", default=None)
    sub.set_defaults(func=cmd_select)

    sub = subs.add_parser("ensemble", help="fit per-task blends over trained models")
    _add_common(sub)
    sub.add_argument("--histories", nargs="+", required=True)
    sub.add_argument("--val-data", default=None)
    sub.add_argument("--output", default=None)
    sub.set_defaults(func=cmd_ensemble)

    sub = subs.add_parser("eval", help="score a trained model on a dataset")
    _add_common(sub)
    sub.add_argument("--history", default=None)
    sub.add_argument("--data", default=None)
    sub.add_argument("--selection", default=None)
    sub.add_argument("--epoch", type=int, default=None,
                     help="fixed epoch (default: best mean-score epoch)")
    sub.add_argument("--output", default=None)
    sub.set_defaults(func=cmd_eval)

    sub = subs.add_parser("ablate", help="run the ablation grid over seeds")
    _add_common(sub)
    sub.add_argument("--seeds", type=int, nargs="+", default=None)
    sub.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config_path = Path(args.config)
        if not config_path.exists():
            raise FileNotFoundError(f"config file not found: {config_path}")
        args.config_obj = load_config(config_path)
        args.seed_val = args.seed if args.seed is not None else args.config_obj.seed
        if args.threads < 1:
            raise ContractError("--threads must be >= 1")
        args.out_dir = Path(args.out)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
