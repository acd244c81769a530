"""Command-line interface: gen, train, protect, eval, sweep, report.

Every command is deterministic given the resolved configuration (which is
echoed into the output directory); reruns produce byte-identical artifacts.
Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 format
errors, 5 training divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dataio, evalkit, gaae, plotting
from .dpmech import BudgetLedger, NoiseSource
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    PrivembedError,
    TrainingDivergenceError,
    exit_code_for,
)

log = logging.getLogger("privembed")

LEDGER_FILENAME = "privacy_ledger.txt"
SPLIT_FILES = {
    "aae_train": "aae_train.emb",
    "attacker_train": "attacker_train.emb",
    "eval_enroll": "eval_enroll.emb",
    "eval_test": "eval_test.emb",
}
TRIALS_FILENAME = "trials.txt"
MANIFEST_FILENAME = "manifest.txt"

AGGREGATE_COLUMNS = (
    "epsilon_tr", "epsilon_ts", "n_seeds",
    "auc_clean_mean", "auc_protected_mean", "auc_protected_std",
    "eer_clean_mean", "eer_protected_mean", "eer_protected_std",
)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(paths: list[Path], root: Path, manifest_path: Path) -> None:
    lines = []
    for p in sorted(paths, key=lambda q: q.name):
        lines.append(f"{_sha256(p)}  {p.relative_to(root).as_posix()}")
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _eps_from_string(raw: str) -> float:
    raw = raw.strip().lower()
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"invalid privacy budget {raw!r}") from None
    if math.isnan(value) or not value > 0:
        raise ConfigError(f"privacy budget must be positive, got {raw!r}")
    return value


def _eps_list_from_string(raw: str) -> list[float]:
    parts = [p for p in (s.strip() for s in raw.split(",")) if p]
    if not parts:
        raise ConfigError(f"expected a comma-separated budget list, got {raw!r}")
    return [_eps_from_string(p) for p in parts]


def _eps_tag(value: float) -> str:
    if math.isinf(value):
        return "inf"
    if float(value).is_integer():
        return str(int(value))
    return format(value, "g")


def _resolve(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.resolve_config(args.config, args.set or [])
    if args.seed is not None:
        cfg = cfgmod.with_seed(cfg, args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- ledger file ------------------------------------------------------------

def read_ledger_file(path: Path) -> BudgetLedger:
    ledger = BudgetLedger()
    if not path.exists():
        return ledger
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}: malformed ledger line {ln}: {line!r}")
        try:
            epsilon = float(parts[1])
        except ValueError:
            raise FormatError(f"{path}: bad budget on ledger line {ln}: {line!r}") from None
        ledger.record(epsilon, release_id=parts[0])
    return ledger


def append_ledger_file(path: Path, release_id: str, epsilon: float) -> float:
    """Record one release; returns the new total spend."""
    ledger = read_ledger_file(path)
    ledger.record(epsilon, release_id=release_id)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"{release_id}\t{evalkit.format_value(epsilon)}\n")
    return ledger.total


# -- data plumbing ----------------------------------------------------------

def _generate_and_split(cfg: cfgmod.ExperimentConfig):
    synth = dataio.SynthConfig(
        n_speakers=cfg.data.n_speakers,
        segments_per_speaker=cfg.data.segments_per_speaker,
        dim=cfg.data.dim,
        gender_gap=cfg.data.gender_gap,
        speaker_spread=cfg.data.speaker_spread,
        segment_noise=cfg.data.segment_noise,
        seed=cfg.data.seed,
    )
    spec = dataio.SplitSpec(
        aae_fraction=cfg.data.aae_fraction,
        attacker_fraction=cfg.data.attacker_fraction,
        enroll_fraction=cfg.data.enroll_fraction,
        n_target_trials=cfg.data.n_target_trials,
        n_nontarget_trials=cfg.data.n_nontarget_trials,
    )
    full = dataio.generate_synthetic(synth)
    splits, trials = dataio.make_splits(full, spec, seed=cfg.data.seed)
    return splits, trials


def _load_data_dir(data_dir: Path):
    splits = {}
    for role, name in SPLIT_FILES.items():
        path = data_dir / name
        if not path.exists():
            raise DataError(f"missing split file {path}")
        splits[role] = dataio.read_embedding_file(path)
    trials = dataio.read_trial_list(data_dir / TRIALS_FILENAME)
    return splits, trials


def _train_model(cfg: cfgmod.ExperimentConfig, aae_train: dataio.EmbeddingSet,
                 epsilon_tr: float | None = None, seed: int | None = None):
    train_cfg = gaae.TrainConfig(
        lr=cfg.train.lr,
        batch_size=cfg.train.batch_size,
        epochs=cfg.train.epochs,
        warmup_epochs=cfg.train.warmup_epochs,
        seed=cfg.train.seed if seed is None else seed,
        epsilon_tr=cfg.train.epsilon_tr if epsilon_tr is None else epsilon_tr,
        adv_weight=cfg.train.adv_weight,
    )
    model = gaae.GaaeModel(
        input_dim=aae_train.dim,
        latent_dim=cfg.model.latent_dim,
        disc_hidden=cfg.model.disc_hidden,
        seed=train_cfg.seed,
    )
    return gaae.train(model, aae_train.vectors, aae_train.genders, train_cfg)


def _write_trace_csv(trace: gaae.TrainTrace, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["phase", "epoch", "n_steps", "loss_disc", "loss_adv",
                         "loss_rec", "z_l1_median"])
        for rec in trace.epochs:
            writer.writerow([
                rec.phase, rec.epoch, rec.n_steps,
                evalkit.format_value(rec.loss_disc),
                evalkit.format_value(rec.loss_adv),
                evalkit.format_value(rec.loss_rec),
                evalkit.format_value(rec.z_l1_median),
            ])


def _train_attacker_for(cfg: cfgmod.ExperimentConfig, attacker_train: dataio.EmbeddingSet,
                        seed: int | None = None) -> evalkit.AttackerClassifier:
    attacker_seed = cfg.eval.attacker_seed if seed is None else seed
    clf = evalkit.AttackerClassifier(
        input_dim=attacker_train.dim,
        hidden_dim=cfg.eval.attacker_hidden,
        seed=attacker_seed,
    )
    return evalkit.train_attacker(
        clf, attacker_train.vectors, attacker_train.genders,
        evalkit.AttackerTrainConfig(
            lr=cfg.eval.attacker_lr,
            batch_size=cfg.eval.attacker_batch_size,
            epochs=cfg.eval.attacker_epochs,
            seed=attacker_seed,
        ),
    )


def _evaluate_rows(cfg, model, splits, trials, epsilon_ts_list, noise_seed, seed_label):
    """One metrics row per requested test budget, in the requested order."""
    attacker = _train_attacker_for(cfg, splits["attacker_train"], seed=noise_seed)
    rows = []
    for k, epsilon_ts in enumerate(epsilon_ts_list):
        source = NoiseSource(noise_seed, spawn_key=(3, k))
        if cfg.eval.retrain_attacker_on_protected:
            prot = splits["attacker_train"].with_vectors(
                gaae.protect(model, splits["attacker_train"].vectors, epsilon_ts,
                             NoiseSource(noise_seed, spawn_key=(4, k)))
            )
            row_attacker = _train_attacker_for(cfg, prot, seed=noise_seed)
        else:
            row_attacker = attacker
        rows.append(
            evalkit.evaluate_cell(
                model, row_attacker,
                splits["eval_enroll"], splits["eval_test"], trials,
                epsilon_ts, source=source, seed=seed_label,
            )
        )
    return rows


# -- subcommands ------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    splits, trials = _generate_and_split(cfg)
    written = []
    for role, name in SPLIT_FILES.items():
        path = out / name
        dataio.write_embedding_file(splits[role], path)
        written.append(path)
        log.info("wrote %s (%d records)", path, len(splits[role]))
    trials_path = out / TRIALS_FILENAME
    dataio.write_trial_list(trials, trials_path)
    written.append(trials_path)
    cfgmod.write_resolved_config(cfg, out / "resolved.cfg")
    written.append(out / "resolved.cfg")
    _write_manifest(written, out, out / MANIFEST_FILENAME)
    log.info("wrote %s", out / MANIFEST_FILENAME)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    data_dir = Path(args.data)
    aae_train = dataio.read_embedding_file(data_dir / SPLIT_FILES["aae_train"])
    try:
        model, trace = _train_model(cfg, aae_train)
    except TrainingDivergenceError as exc:
        if exc.trace is not None:
            _write_trace_csv(exc.trace, out / "divergence_trace.csv")
            log.error("training diverged; trace dumped to %s", out / "divergence_trace.csv")
        raise
    ckpt = out / "checkpoint.gaae"
    gaae.save_checkpoint(model, ckpt)
    _write_trace_csv(trace, out / "trace.csv")
    cfgmod.write_resolved_config(cfg, out / "resolved.cfg")
    log.info("clipping threshold estimate: %s", evalkit.format_value(trace.clip_threshold))
    log.info("wrote %s and %s", ckpt, out / "trace.csv")
    return 0


def cmd_protect(args) -> int:
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model = gaae.load_checkpoint(args.checkpoint)
    es = dataio.read_embedding_file(args.input)
    if es.dim != model.input_dim:
        raise FormatError(
            f"{args.input}: embedding dimension {es.dim} does not match "
            f"checkpoint dimension {model.input_dim}"
        )
    epsilon_ts = _eps_from_string(args.epsilon_ts)
    source = NoiseSource(args.noise_seed, spawn_key=(5,))
    protected = gaae.protect(model, es.vectors, epsilon_ts, source)
    dataio.write_embedding_file(es.with_vectors(protected), out_path)
    log.info("wrote %s (%d records)", out_path, len(es))
    if math.isfinite(epsilon_ts):
        ledger_path = Path(args.ledger) if args.ledger else out_path.parent / LEDGER_FILENAME
        total = append_ledger_file(ledger_path, out_path.name, epsilon_ts)
        log.info("ledger %s total spend: %s", ledger_path, evalkit.format_value(total))
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    splits, trials = _load_data_dir(Path(args.data))
    model = gaae.load_checkpoint(args.checkpoint)
    if splits["eval_test"].dim != model.input_dim:
        raise FormatError(
            f"evaluation data dimension {splits['eval_test'].dim} does not match "
            f"checkpoint dimension {model.input_dim}"
        )
    eps_list = (
        _eps_list_from_string(args.epsilon_ts) if args.epsilon_ts
        else list(cfg.eval.epsilon_ts)
    )
    rows = _evaluate_rows(cfg, model, splits, trials, eps_list,
                          cfg.eval.noise_seed, seed_label=cfg.eval.noise_seed)
    metrics_path = out / "metrics.csv"
    evalkit.write_metrics_csv(rows, metrics_path)
    cfgmod.write_resolved_config(cfg, out / "resolved.cfg")
    log.info("wrote %s (%d rows)", metrics_path, len(rows))
    return 0


def _aggregate_rows(rows: list[dict]) -> list[dict]:
    cells: dict[tuple[float, float], list[dict]] = {}
    for row in rows:
        cells.setdefault((row["epsilon_tr"], row["epsilon_ts"]), []).append(row)
    out = []
    for (tr, ts) in sorted(cells):
        group = cells[(tr, ts)]
        auc = np.array([g["auc_protected"] for g in group])
        err = np.array([g["eer_protected"] for g in group])
        out.append({
            "epsilon_tr": tr,
            "epsilon_ts": ts,
            "n_seeds": len(group),
            "auc_clean_mean": float(np.mean([g["auc_clean"] for g in group])),
            "auc_protected_mean": float(auc.mean()),
            "auc_protected_std": float(auc.std()),
            "eer_clean_mean": float(np.mean([g["eer_clean"] for g in group])),
            "eer_protected_mean": float(err.mean()),
            "eer_protected_std": float(err.std()),
        })
    return out


def _write_aggregate_csv(aggregates: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_COLUMNS)
        for row in aggregates:
            writer.writerow([
                evalkit.format_value(row["epsilon_tr"]),
                evalkit.format_value(row["epsilon_ts"]),
                str(row["n_seeds"]),
                evalkit.format_value(row["auc_clean_mean"]),
                evalkit.format_value(row["auc_protected_mean"]),
                evalkit.format_value(row["auc_protected_std"]),
                evalkit.format_value(row["eer_clean_mean"]),
                evalkit.format_value(row["eer_protected_mean"]),
                evalkit.format_value(row["eer_protected_std"]),
            ])


def _read_aggregate_or_sweep_csv(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty CSV")
        rows = [{k: float(v) for k, v in raw.items()} for raw in reader]
    if not rows:
        raise DataError(f"{path}: no rows to plot")
    if tuple(reader.fieldnames) == evalkit.REPORT_COLUMNS:
        return _aggregate_rows(rows)
    if tuple(reader.fieldnames) == AGGREGATE_COLUMNS:
        return rows
    raise FormatError(f"{path}: unrecognized CSV header {reader.fieldnames}")


def _run_sweep_cell(cfg, cell_dir: Path, epsilon_tr: float, seed: int,
                    ts_grid: list[float]) -> list[evalkit.MetricsReport]:
    """Train and evaluate one (train budget, seed) cell, or reuse its outputs."""
    metrics_path = cell_dir / "metrics.csv"
    done_path = cell_dir / "done.txt"
    if done_path.exists() and metrics_path.exists():
        recorded = done_path.read_text(encoding="utf-8").strip()
        if recorded == _sha256(metrics_path):
            log.info("cell %s already complete, skipping", cell_dir.name)
            rows = evalkit.read_metrics_csv(metrics_path)
            return [evalkit.MetricsReport(
                epsilon_tr=r["epsilon_tr"], epsilon_ts=r["epsilon_ts"],
                clip_threshold=r["C"], auc_clean=r["auc_clean"],
                auc_protected=r["auc_protected"], eer_clean=r["eer_clean"],
                eer_protected=r["eer_protected"], n_trials=int(r["n_trials"]),
                seed=int(r["seed"]),
            ) for r in rows]
        log.warning("cell %s marker does not match outputs; recomputing", cell_dir.name)

    cell_dir.mkdir(parents=True, exist_ok=True)
    seeded = cfgmod.with_seed(cfg, seed)
    splits, trials = _generate_and_split(seeded)
    model, _ = _train_model(seeded, splits["aae_train"], epsilon_tr=epsilon_tr, seed=seed)
    gaae.save_checkpoint(model, cell_dir / "checkpoint.gaae")
    rows = _evaluate_rows(seeded, model, splits, trials, ts_grid,
                          noise_seed=seed, seed_label=seed)
    evalkit.write_metrics_csv(rows, metrics_path)
    done_path.write_text(_sha256(metrics_path) + "\n", encoding="utf-8")
    return rows


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    tr_grid = (_eps_list_from_string(args.epsilon_tr) if args.epsilon_tr
               else list(cfg.sweep.epsilon_tr_grid))
    ts_grid = (_eps_list_from_string(args.epsilon_ts) if args.epsilon_ts
               else list(cfg.sweep.epsilon_ts_grid))
    seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds
             else list(cfg.sweep.seeds))
    if any(math.isinf(v) for v in tr_grid):
        raise ConfigError("training budgets in the sweep grid must be finite")

    cells_dir = out / "cells"
    all_rows: list[evalkit.MetricsReport] = []
    failures: list[tuple[str, Exception]] = []
    for epsilon_tr in tr_grid:
        for seed in seeds:
            cell = f"tr{_eps_tag(epsilon_tr)}_s{seed}"
            try:
                all_rows.extend(
                    _run_sweep_cell(cfg, cells_dir / cell, epsilon_tr, seed, ts_grid)
                )
            except PrivembedError as exc:
                log.error("cell %s failed: %s", cell, exc)
                failures.append((cell, exc))

    if all_rows:
        sweep_path = out / "sweep.csv"
        evalkit.write_metrics_csv(all_rows, sweep_path)
        aggregates = _aggregate_rows([
            {
                "epsilon_tr": r.epsilon_tr, "epsilon_ts": r.epsilon_ts,
                "auc_clean": r.auc_clean, "auc_protected": r.auc_protected,
                "eer_clean": r.eer_clean, "eer_protected": r.eer_protected,
            }
            for r in all_rows
        ])
        _write_aggregate_csv(aggregates, out / "sweep_aggregate.csv")
        figures = plotting.render_sweep_figures(aggregates, out)
        cfgmod.write_resolved_config(cfg, out / "resolved.cfg")
        log.info("wrote %s (%d rows), %s, and %d figure(s)",
                 sweep_path, len(all_rows), out / "sweep_aggregate.csv", len(figures))
    if failures:
        log.error("%d sweep cell(s) failed: %s", len(failures),
                  ", ".join(name for name, _ in failures))
        return 1
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    aggregates = _read_aggregate_or_sweep_csv(Path(args.metrics_csv))
    figures = plotting.render_sweep_figures(aggregates, out)
    if not figures:
        raise DataError("not enough distinct budget values to draw any figure")
    for p in figures:
        log.info("wrote %s", p)
    return 0


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="experiment config file")
    common.add_argument("--seed", type=int, default=None,
                        help="override every stage seed in the config")
    common.add_argument("--out", default="privembed_out", help="output directory")
    common.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="config override, may be repeated")

    parser = argparse.ArgumentParser(
        prog="privembed",
        description="train and evaluate a privacy-preserving speaker-embedding protector",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common],
                       help="generate synthetic embeddings, splits, and trials")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common],
                       help="train the protector on a generated data directory")
    p.add_argument("--data", required=True, help="directory produced by gen")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protect", parents=[common],
                       help="apply a trained checkpoint to an embedding file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="EMB1 file to protect")
    p.add_argument("--epsilon-ts", required=True,
                   help="test-time privacy budget (a number or 'inf')")
    p.add_argument("--output", required=True, help="protected EMB1 output path")
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--ledger", default=None,
                   help=f"budget ledger file (default: {LEDGER_FILENAME} next to the output)")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint over a list of test budgets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory produced by gen")
    p.add_argument("--epsilon-ts", default=None,
                   help="comma-separated test budgets (default: from config)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common],
                       help="full factorial sweep over budgets and seeds")
    p.add_argument("--epsilon-tr", default=None,
                   help="comma-separated training budgets (default: from config)")
    p.add_argument("--epsilon-ts", default=None,
                   help="comma-separated test budgets (default: from config)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common],
                       help="re-render figures from an existing sweep CSV")
    p.add_argument("--metrics-csv", required=True,
                   help="sweep.csv or sweep_aggregate.csv from a previous run")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return int(args.func(args))
    except PrivembedError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exit_code_for(exc)


if __name__ == "__main__":
    raise SystemExit(main())
