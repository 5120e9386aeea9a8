"""Experiment orchestration: generate, pre-train, fine-tune, sweep, report.

Every command is deterministic given (config, seed): randomness flows
through the named substreams in `seeding`, metrics CSVs format floats
with `repr` (shortest round-trip), and checkpoints are bit-exact.  Wall
-clock timing is recorded only when explicitly requested, since timing
would break byte-identical reruns.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dumps_config
from .encoder import init_encoder_params
from .errors import CompatError, ContractError, FormatError, ParseError
from .finetune import run_finetuning, transfer_parameters
from .graphs import generate_synthetic_dataset, load_dataset, save_dataset, split_indices
from .metrics import estimate_epoch_mi
from .pretrain import run_pretraining
from .seeding import named_stream

METRICS_VERSION_LINE = "# DBPMETRICS v1"
SPLITS_HEADER = "DBPSPLITS v1"

# Checkpoint/config fields that must agree when resuming from a checkpoint.
COMPAT_FIELDS = ("layer_kind", "num_layers", "hidden_dim", "gin_eps",
                 "node_channels", "node_cardinality", "edge_channels",
                 "edge_cardinality")


@dataclass
class MetricsRow:
    """One per-epoch record; absent quantities stay None and serialize
    as empty CSV fields."""

    epoch: int
    phase: str
    loss_total: float | None = None
    loss_con: float | None = None
    loss_pi: float | None = None
    loss_cls: float | None = None
    loss_fi: float | None = None
    mi_xz_bits: float | None = None
    mi_yz_bits: float | None = None
    train_auc: float | None = None
    test_auc: float | None = None
    gen_gap: float | None = None
    lr: float | None = None
    wall_ms: float | None = None


_COLUMNS = [f.name for f in fields(MetricsRow)]


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(METRICS_VERSION_LINE + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_COLUMNS)
    for row in rows:
        record = []
        for col in _COLUMNS:
            v = getattr(row, col)
            if v is None:
                record.append("")
            elif col == "epoch":
                record.append(str(v))
            elif col == "phase":
                record.append(v)
            else:
                record.append(repr(float(v)))
        writer.writerow(record)
    return buf.getvalue()


def csv_to_rows(text: str):
    lines = text.splitlines()
    if not lines or lines[0] != METRICS_VERSION_LINE:
        raise ParseError("line 1: missing metrics version line")
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if header != _COLUMNS:
        raise ParseError("line 2: metrics header does not match the schema")
    rows = []
    for record in reader:
        if len(record) != len(_COLUMNS):
            raise ParseError(f"line {reader.line_num + 1}: wrong field count")
        kwargs = {}
        for col, raw in zip(_COLUMNS, record):
            if col == "epoch":
                kwargs[col] = int(raw)
            elif col == "phase":
                kwargs[col] = raw
            else:
                kwargs[col] = None if raw == "" else float(raw)
        rows.append(MetricsRow(**kwargs))
    return rows


def write_metrics(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(rows_to_csv(rows))


def read_metrics(path):
    with open(path, "r", encoding="utf-8") as fh:
        return csv_to_rows(fh.read())


# ---------------------------------------------------------------------------
# dataset + split files
# ---------------------------------------------------------------------------

def splits_path(data_path) -> str:
    return str(data_path) + ".splits"


def cmd_generate(config: ExperimentConfig, out_path) -> None:
    """Write the dataset file and its split manifest."""
    config.validate()
    spec = config.dataset_spec()
    graphs = generate_synthetic_dataset(spec, named_stream(config.seed, "data"))
    save_dataset(graphs, out_path, schema=spec.schema())
    labels = [g.label for g in graphs]
    parts = split_indices(labels, config.split_fractions(),
                          named_stream(config.seed, "split"))
    lines = [SPLITS_HEADER]
    for name, idx in zip(("train", "valid", "test"), parts):
        for i in idx:
            lines.append(f"{i} {name}")
    with open(splits_path(out_path), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset_with_splits(data_path):
    graphs = load_dataset(data_path)
    with open(splits_path(data_path), "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != SPLITS_HEADER:
        raise ParseError("line 1: bad split manifest header")
    parts = {"train": [], "valid": [], "test": []}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            raw_idx, name = line.split()
            parts[name].append(int(raw_idx))
        except (ValueError, KeyError):
            raise ParseError(f"line {lineno}: bad split record {line!r}") from None
    seen = sorted(i for p in parts.values() for i in p)
    if seen != list(range(len(graphs))):
        raise ParseError("split manifest does not partition the dataset")
    return (graphs,
            [graphs[i] for i in parts["train"]],
            [graphs[i] for i in parts["valid"]],
            [graphs[i] for i in parts["test"]])


# ---------------------------------------------------------------------------
# pre-training command
# ---------------------------------------------------------------------------

def _rng_summary(config: ExperimentConfig) -> str:
    return f"seed={config.seed} streams=data,split,init,mask,epsilon,shuffle"


def cmd_pretrain(config: ExperimentConfig, data_path, ckpt_out, metrics_out=None,
                 timing: bool = False):
    """Pre-train on the train split; returns the metrics rows."""
    config.validate()
    _, train, _, _ = load_dataset_with_splits(data_path)
    enc_cfg = config.encoder_config()
    schema = config.dataset_spec().schema()
    rows = []
    last_wall = time.monotonic()

    def on_epoch(epoch, enc_params, parts):
        nonlocal last_wall
        now = time.monotonic()
        mi_xz = mi_yz = None
        if epoch % config.mi_every == 0 or epoch == config.epochs_pretrain:
            mi_xz, mi_yz = estimate_epoch_mi(train, enc_params, enc_cfg,
                                             config.mi_bins)
        rows.append(MetricsRow(
            epoch=epoch, phase="pretrain", loss_total=parts.l_pre,
            loss_con=parts.l_con, loss_pi=parts.l_pi,
            mi_xz_bits=mi_xz, mi_yz_bits=mi_yz, lr=config.lr,
            wall_ms=((now - last_wall) * 1000.0 if timing else None)))
        last_wall = now

    enc_params, dec_params, _ = run_pretraining(
        train, enc_cfg, schema, alpha=config.alpha, mask_ratio=config.mask_ratio,
        lr=config.lr, epochs=config.epochs_pretrain, batch_size=config.batch_size,
        init_rng=named_stream(config.seed, "init"),
        mask_rng=named_stream(config.seed, "mask"),
        shuffle_rng=named_stream(config.seed, "shuffle"),
        on_epoch=on_epoch)

    ckpt = Checkpoint.from_params("pretrain", {"enc": enc_params, "dec": dec_params},
                                  dumps_config(config), _rng_summary(config))
    save_checkpoint(ckpt, ckpt_out)
    if metrics_out is not None:
        write_metrics(rows, metrics_out)
    return rows


# ---------------------------------------------------------------------------
# fine-tuning command
# ---------------------------------------------------------------------------

def check_compat(config: ExperimentConfig, ckpt: Checkpoint) -> None:
    from .config import parse_config

    if ckpt.phase != "pretrain":
        raise CompatError(f"checkpoint phase is {ckpt.phase!r}, expected 'pretrain'")
    try:
        ckpt_config = parse_config(ckpt.config_text)
    except Exception as exc:
        raise FormatError(f"checkpoint carries an unreadable config: {exc}") from None
    differing = [name for name in COMPAT_FIELDS
                 if getattr(ckpt_config, name) != getattr(config, name)]
    if differing:
        detail = ", ".join(
            f"{n}: checkpoint={getattr(ckpt_config, n)!r} requested={getattr(config, n)!r}"
            for n in differing)
        raise CompatError(f"checkpoint/config mismatch on: {detail}")


def cmd_finetune(config: ExperimentConfig, data_path, ckpt_in, ckpt_out,
                 metrics_out=None, no_transfer: bool = False,
                 timing: bool = False):
    """Fine-tune from a pre-trained checkpoint (or fresh with no_transfer)."""
    config.validate()
    _, train, valid, test = load_dataset_with_splits(data_path)
    enc_cfg = config.encoder_config()
    schema = config.dataset_spec().schema()
    if no_transfer:
        enc_params = init_encoder_params(enc_cfg, schema,
                                         named_stream(config.seed, "init"))
    else:
        ckpt = load_checkpoint(ckpt_in)
        check_compat(config, ckpt)
        enc_params = transfer_parameters(ckpt.group("enc"))

    rows = []
    last_wall = time.monotonic()

    def on_epoch(epoch, enc_p, comp_p, clf_p, parts, metrics, lr_now):
        nonlocal last_wall
        now = time.monotonic()
        mi_xz = mi_yz = None
        if epoch % config.mi_every == 0 or epoch == config.epochs_finetune:
            mi_xz, mi_yz = estimate_epoch_mi(train, enc_p, enc_cfg, config.mi_bins,
                                             compression_params=comp_p)
        rows.append(MetricsRow(
            epoch=epoch, phase="finetune", loss_total=parts.l_fine,
            loss_cls=parts.l_cls, loss_fi=parts.l_fi,
            mi_xz_bits=mi_xz, mi_yz_bits=mi_yz,
            train_auc=metrics.train_auc, test_auc=metrics.test_auc,
            gen_gap=metrics.generalization_gap, lr=lr_now,
            wall_ms=((now - last_wall) * 1000.0 if timing else None)))
        last_wall = now

    enc_params, comp_params, clf_params, _, _ = run_finetuning(
        train, valid, test, enc_params, enc_cfg, beta=config.beta,
        lr=config.lr, epochs=config.epochs_finetune, batch_size=config.batch_size,
        scheduler_factor=config.scheduler_factor,
        scheduler_period=config.scheduler_period,
        reparam_scale=config.reparam_scale,
        init_rng=named_stream(config.seed, "init"),
        epsilon_rng=named_stream(config.seed, "epsilon"),
        shuffle_rng=named_stream(config.seed, "shuffle"),
        on_epoch=on_epoch)

    ckpt = Checkpoint.from_params(
        "finetune", {"enc": enc_params, "comp": comp_params, "clf": clf_params},
        dumps_config(config), _rng_summary(config))
    save_checkpoint(ckpt, ckpt_out)
    if metrics_out is not None:
        write_metrics(rows, metrics_out)
    return rows


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    alpha: float
    beta: float
    seed: int
    status: str
    final_test_auc: float | None = None
    final_gen_gap: float | None = None
    final_mi_xz: float | None = None
    final_mi_yz: float | None = None


_SWEEP_COLUMNS = [f.name for f in fields(SweepRow)]


def sweep_rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_SWEEP_COLUMNS)
    for row in rows:
        record = []
        for col in _SWEEP_COLUMNS:
            v = getattr(row, col)
            if v is None:
                record.append("")
            elif col == "seed":
                record.append(str(v))
            elif col == "status":
                record.append(v)
            else:
                record.append(repr(float(v)))
        writer.writerow(record)
    return buf.getvalue()


def _in_memory_pipeline(config: ExperimentConfig, data_path, alpha, beta, seed):
    """One sweep cell: pre-train at alpha (seeded), fine-tune at beta."""
    from dataclasses import replace

    cell_cfg = replace(config, alpha=alpha, beta=beta, seed=seed)
    _, train, valid, test = load_dataset_with_splits(data_path)
    enc_cfg = cell_cfg.encoder_config()
    schema = cell_cfg.dataset_spec().schema()
    enc_params, _, _ = run_pretraining(
        train, enc_cfg, schema, alpha=alpha, mask_ratio=cell_cfg.mask_ratio,
        lr=cell_cfg.lr, epochs=cell_cfg.epochs_pretrain,
        batch_size=cell_cfg.batch_size,
        init_rng=named_stream(seed, "init"),
        mask_rng=named_stream(seed, "mask"),
        shuffle_rng=named_stream(seed, "shuffle"))
    final = {}

    def on_epoch(epoch, enc_p, comp_p, clf_p, parts, metrics, lr_now):
        if epoch == cell_cfg.epochs_finetune:
            mi_xz, mi_yz = estimate_epoch_mi(train, enc_p, enc_cfg,
                                             cell_cfg.mi_bins,
                                             compression_params=comp_p)
            final.update(test_auc=metrics.test_auc,
                         gen_gap=metrics.generalization_gap,
                         mi_xz=mi_xz, mi_yz=mi_yz)

    run_finetuning(
        train, valid, test, transfer_parameters(enc_params), enc_cfg,
        beta=beta, lr=cell_cfg.lr, epochs=cell_cfg.epochs_finetune,
        batch_size=cell_cfg.batch_size,
        scheduler_factor=cell_cfg.scheduler_factor,
        scheduler_period=cell_cfg.scheduler_period,
        reparam_scale=cell_cfg.reparam_scale,
        init_rng=named_stream(seed, "init"),
        epsilon_rng=named_stream(seed, "epsilon"),
        shuffle_rng=named_stream(seed, "shuffle"),
        on_epoch=on_epoch)
    return final


def _sweep_cell(args):
    config, data_path, alpha, beta, seed = args
    try:
        final = _in_memory_pipeline(config, data_path, alpha, beta, seed)
        return SweepRow(alpha=alpha, beta=beta, seed=seed, status="ok",
                        final_test_auc=final["test_auc"],
                        final_gen_gap=final["gen_gap"],
                        final_mi_xz=final["mi_xz"], final_mi_yz=final["mi_yz"])
    except Exception as exc:  # failed cells are recorded, never fatal
        return SweepRow(alpha=alpha, beta=beta, seed=seed,
                        status=f"failed:{type(exc).__name__}")


def cmd_sweep(config: ExperimentConfig, data_path, alphas, betas, n_seeds: int,
              out_path, jobs: int = 1):
    """Grid-major sweep over alpha x beta, n_seeds runs per cell."""
    if not alphas or not betas or n_seeds < 1:
        raise ContractError("sweep needs nonempty alpha/beta grids and seeds >= 1")
    cells = [(config, data_path, a, b, config.seed + i)
             for a in alphas for b in betas for i in range(n_seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(sweep_rows_to_csv(rows))
    return rows


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(metrics_paths, sweep_path, out_dir):
    """Render per-figure CSV extracts from run metrics and sweep summaries.

    mi_dynamics: epoch vs I(Y;Z) per run        (label, epoch, mi_yz_bits)
    auc_curves:  epoch vs test AUC per run      (label, epoch, test_auc)
    gen_gap:     epoch vs train-test gap        (label, epoch, gen_gap)
    sweep_mean:  per (alpha, beta) mean +/- std final test AUC
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    extracts = {
        "mi_dynamics.csv": ("mi_yz_bits", lambda r: r.mi_yz_bits),
        "auc_curves.csv": ("test_auc", lambda r: r.test_auc),
        "gen_gap.csv": ("gen_gap", lambda r: r.gen_gap),
    }
    for fname, (column, getter) in extracts.items():
        lines = [f"label,epoch,{column}"]
        for path in metrics_paths:
            label = os.path.splitext(os.path.basename(path))[0]
            for row in read_metrics(path):
                value = getter(row)
                if row.phase == "finetune" and value is not None:
                    lines.append(f"{label},{row.epoch},{value!r}")
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    if sweep_path is not None:
        with open(sweep_path, "r", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            grouped = {}
            for rec in reader:
                if rec["status"] != "ok":
                    continue
                key = (rec["alpha"], rec["beta"])
                grouped.setdefault(key, []).append(float(rec["final_test_auc"]))
        lines = ["alpha,beta,mean_test_auc,std_test_auc,n_seeds"]
        for (alpha, beta), vals in grouped.items():
            arr = np.array(vals)
            lines.append(f"{alpha},{beta},{arr.mean()!r},{arr.std()!r},{len(vals)}")
        with open(os.path.join(out_dir, "sweep_mean.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
