"""Command-line surface: pretrain / eval / export / report.

Exit codes are stable: 0 success, 2 configuration or flag errors, 3
runtime/NaN aborts, 4 I/O and data-format failures, 5 corrupt checkpoints,
6 malformed metrics CSVs.
"""

from __future__ import annotations

import csv
import os
import sys

import click

from . import config as cfgmod
from . import evaluate
from . import metrics as metricsmod
from . import slimnet
from . import svgplot
from . import trainer
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    MetricsError,
    NonFiniteError,
)

_EXIT_CODES = (
    (ConfigError, 2),
    (NonFiniteError, 3),
    (ContractError, 3),
    (DimensionError, 3),
    (CheckpointError, 5),
    (MetricsError, 6),
    (FormatError, 4),
    (OSError, 4),
)


def _run(fn):
    try:
        fn()
    except tuple(cls for cls, _ in _EXIT_CODES) as exc:
        click.echo(f"error: {exc}", err=True)
        for cls, code in _EXIT_CODES:
            if isinstance(exc, cls):
                sys.exit(code)
    sys.exit(0)


@click.group()
def main():
    """Slimmable self-supervised pretraining toolkit."""


@main.command()
@click.argument("config_path")
@click.option("--mode", type=click.Choice(["dspnet", "byol"]), default="dspnet",
              show_default=True, help="Slimmable pretraining or one-network baseline.")
@click.option("--cfg", "dn_index", type=int, default=None,
              help="DN index for --mode byol.")
@click.option("--out", "out_dir", default=None, help="Override output directory.")
def pretrain(config_path, mode, dn_index, out_dir):
    """Pretrain from CONFIG_PATH; writes checkpoint + metrics CSVs."""

    def body():
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        config = cfgmod.load_config(config_path)
        if mode == "byol":
            if dn_index is None:
                raise ConfigError("--mode byol requires --cfg <dn-index>")
            if not 0 <= dn_index < len(config.family.dn_list):
                raise ConfigError(f"--cfg {dn_index} out of range "
                                  f"(family has {len(config.family.dn_list)} DNs)")
            _, _, final = trainer.pretrain_byol_individual(
                config, config.family.dn_list[dn_index], out_dir=out_dir)
        else:
            _, _, final = trainer.pretrain_dspnet(config, out_dir=out_dir)
        click.echo(f"checkpoint: {final}")

    _run(body)


def _load_any_checkpoint(path):
    """(store, family, is_train_state). Accepts training or exported files."""
    from . import checkpoint as ckptmod
    meta, _ = ckptmod.load_checkpoint(path)
    if meta.get("kind") == "train_state":
        _, state = trainer.load_train_state(path)
        return state.online, state.online.family, True
    if meta.get("kind") == "dn_export":
        store = trainer.load_dn_export(path)
        return store, store.family, False
    raise CheckpointError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")


@main.command("eval")
@click.argument("ckpt_path")
@click.option("--config", "config_path", required=True,
              help="Run config providing the dataset and probe settings.")
@click.option("--protocol", type=click.Choice(["linear", "knn", "semi", "sweep"]),
              default="linear", show_default=True)
@click.option("--dn", "dn_index", type=int, default=None,
              help="DN index (defaults to the full network).")
@click.option("--k", type=int, default=None, help="Neighbors for knn.")
@click.option("--fraction", type=float, default=0.1, show_default=True,
              help="Labeled fraction for semi.")
@click.option("--out", "out_csv", default=None, help="CSV to append results to.")
def eval_cmd(ckpt_path, config_path, protocol, dn_index, k, fraction, out_csv):
    """Evaluate a checkpoint under one protocol; prints top-1 to stdout."""

    def body():
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        config = cfgmod.load_config(config_path)
        store, family, _ = _load_any_checkpoint(ckpt_path)
        train_ds, test_ds = trainer.build_datasets(config)
        probe = config.probe
        out_path = out_csv or os.path.join(
            os.path.dirname(os.path.abspath(ckpt_path)), "eval.csv")

        if protocol == "sweep":
            rows = evaluate.dn_sweep(store, "linear", train_ds, test_ds, probe,
                                     seed=config.seed, augment_spec=config.augment)
            new_file = not os.path.exists(out_path)
            with open(out_path, "a", newline="") as fh:
                w = csv.writer(fh)
                if new_file:
                    w.writerow(["cfg", "params", "flops", "metric"])
                for r in rows:
                    w.writerow([r["cfg"], r["params"], r["flops"], repr(r["metric"])])
                    click.echo(f"{r['cfg']} params={r['params']} flops={r['flops']} "
                               f"top1={r['metric']:.4f}")
            return

        if dn_index is None:
            cfg = slimnet.find_full(family)
        elif 0 <= dn_index < len(family.dn_list):
            cfg = family.dn_list[dn_index]
        else:
            raise ConfigError(f"--dn {dn_index} out of range")
        if protocol == "linear":
            metric = evaluate.linear_probe(store, cfg, train_ds, test_ds, probe,
                                           seed=config.seed,
                                           augment_spec=config.augment)
        elif protocol == "knn":
            metric = evaluate.knn_eval(store, cfg, train_ds, test_ds,
                                       k or probe.knn_k)
        else:
            metric = evaluate.semi_finetune(store, cfg, train_ds, test_ds,
                                            fraction, probe, seed=config.seed,
                                            batch_size=config.batch_size)
        click.echo(f"{protocol} top1 {metric:.4f}")
        new_file = not os.path.exists(out_path)
        with open(out_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new_file:
                w.writerow(["protocol", "cfg", "metric"])
            w.writerow([protocol, cfg.key(), repr(metric)])

    _run(body)


@main.command()
@click.argument("ckpt_path")
@click.option("--dn", "dn_index", type=int, required=True, help="DN index to slice out.")
@click.option("--out", "out_path", required=True, help="Output checkpoint path.")
def export(ckpt_path, dn_index, out_path):
    """Slice one DN out of a training checkpoint as a standalone network."""

    def body():
        store, family, is_train = _load_any_checkpoint(ckpt_path)
        if not is_train:
            raise ConfigError("export needs a training checkpoint, not an export")
        if not 0 <= dn_index < len(family.dn_list):
            raise ConfigError(f"--dn {dn_index} out of range "
                              f"(family has {len(family.dn_list)} DNs)")
        trainer.export_dn(store, family.dn_list[dn_index], out_path)
        click.echo(f"exported: {out_path}")

    _run(body)


@main.command()
@click.argument("csv_paths", nargs=-1, required=True)
@click.option("--out", "out_prefix", required=True,
              help="Prefix for the emitted SVG/text files.")
@click.option("--dspnet-timing", default=None, help="timing.csv of the DSPNet run.")
@click.option("--individual-timing", multiple=True,
              help="timing.csv of each individual baseline run.")
@click.option("--baseline-timing", default=None,
              help="timing.csv of the full-network baseline run.")
@click.option("--config", "config_path", default=None,
              help="Config carrying reference cost ratios for the summary.")
def report(csv_paths, out_prefix, dspnet_timing, individual_timing,
           baseline_timing, config_path):
    """Render metric CSVs into SVG plots plus a text cost summary."""

    def body():
        sweep_series = []
        curve_series = []
        for path in csv_paths:
            rows = metricsmod.read_csv(path)
            label = os.path.splitext(os.path.basename(path))[0]
            header = list(rows[0].keys())
            if header == ["cfg", "params", "flops", "metric"]:
                xs = [float(r["flops"]) for r in rows]
                ys = [float(r["metric"]) for r in rows]
                sweep_series.append((label, xs, ys))
            elif header == metricsmod.METRICS_COLUMNS:
                xs = [float(r["step"]) for r in rows]
                ys = [float(r["total_loss"]) for r in rows]
                curve_series.append((label, xs, ys))
            else:
                raise MetricsError(f"{path}: unrecognized CSV schema {header}")
        written = []
        if sweep_series:
            written.append(svgplot.line_chart(
                sweep_series, "Top-1 accuracy vs FLOPs", "FLOPs", "top-1 accuracy",
                f"{out_prefix}_sweep.svg", markers=True))
        if curve_series:
            written.append(svgplot.line_chart(
                curve_series, "Training loss", "step", "total loss",
                f"{out_prefix}_curves.svg"))

        lines = []
        if dspnet_timing and baseline_timing:
            cost = trainer.measure_cost(dspnet_timing, list(individual_timing),
                                        baseline_timing)
            ref_once, ref_ind = 2.11, 4.42
            if config_path:
                cfg = cfgmod.load_config(config_path)
                ref_once = cfg.reference_once_ratio
                ref_ind = cfg.reference_individual_ratio
            lines.append(f"train-once cost ratio: {cost['dspnet_ratio']:.2f}x "
                         f"(reference {ref_once:.2f}x)")
            if individual_timing:
                lines.append(
                    f"individual-sum cost ratio: {cost['individual_sum_ratio']:.2f}x "
                    f"(reference {ref_ind:.2f}x)")
            lines.append(f"dspnet wall-clock: {cost['dspnet_seconds']:.1f}s; "
                         f"baseline: {cost['baseline_seconds']:.1f}s")
        summary = f"{out_prefix}_summary.txt"
        with open(summary, "w") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        written.append(summary)
        for w in written:
            click.echo(f"wrote: {w}")

    _run(body)


if __name__ == "__main__":
    main()
