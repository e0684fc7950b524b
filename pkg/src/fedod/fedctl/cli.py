"""fedctl: dataset generation, training, federation, evaluation, reporting.

Subcommands: gen, train-local, fed, eval, report, modelcard.
Shared flags: --config PATH (JSON, schema fedod-exp/1), --seed N, --out DIR.
Precedence: CLI flags > config file > scenario preset defaults.
FEDOD_BIND overrides the TCP bind address.

Exit codes (stable): 2 config invalid, 3 dataset missing/corrupt,
4 protocol/transport failure, 5 checkpoint schema mismatch, 6 report
inputs missing, 7 experiment incomplete for the model card. Stdout carries
only tables/reports; diagnostics go to stderr.

Every command is deterministic given config + seed, and never mutates an
existing output: when --out is omitted a fresh timestamped directory is
created under the config's out_dir; an explicit --out must be empty.
"""

from __future__ import annotations

import datetime
import json
import os
import sys
from dataclasses import replace

import click

from .. import params, synthdata, tinydet
from ..detmetrics import EvalReport, evaluate
from ..fedcore import ProtocolViolation, TransportFailure, run_federation
from ..params import MalformedPayload, Rng
from ..synthdata import IoFailure, MalformedLabelLine, read_yolo
from ..tinydet import Detection
from .experiment import (
    evaluate_model,
    generate_datasets,
    load_client_data,
    save_fed_outputs,
    train_baseline,
    write_json,
)
from .modelcard import IncompleteExperiment, build_card
from .presets import ConfigError, ExperimentConfig, load_config_file, resolve_config
from .report import FED_MODEL, MissingEval, build_report, eval_path

EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_FEDERATION = 4
EXIT_SCHEMA = 5
EXIT_REPORT_INPUTS = 6
EXIT_INCOMPLETE = 7


def _fail(code: int, message: str):
    click.echo(f"fedctl: {message}", err=True)
    sys.exit(code)


def _resolved(config_path, **overrides) -> ExperimentConfig:
    try:
        data = load_config_file(config_path) if config_path else None
        return resolve_config(data, **overrides)
    except ConfigError as e:
        _fail(EXIT_CONFIG, f"config: {e}")


def _out_dir(cfg: ExperimentConfig, out, command: str) -> str:
    if out is None:
        stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%d-%H%M%S")
        base = os.path.join(cfg.out_dir, f"{command}-{stamp}")
        path, n = base, 0
        while os.path.exists(path):
            n += 1
            path = f"{base}-{n}"
    else:
        path = os.fspath(out)
        if os.path.isdir(path) and os.listdir(path):
            _fail(EXIT_CONFIG, f"output directory {path} exists and is not empty")
    os.makedirs(path, exist_ok=True)
    return path


@click.group()
def main():
    """Desk-scale federated object detection toolkit."""


config_opt = click.option("--config", "config_path", type=click.Path(), default=None,
                          help="experiment config JSON (schema fedod-exp/1)")
seed_opt = click.option("--seed", type=int, default=None, help="override the seed")
out_opt = click.option("--out", type=click.Path(), default=None,
                       help="output directory (must not exist or be empty)")


@main.command()
@config_opt
@seed_opt
@out_opt
def gen(config_path, seed, out):
    """Generate the per-client, cross-combination, swap and domain-shift
    datasets."""
    cfg = _resolved(config_path, seed=seed)
    path = _out_dir(cfg, out, "gen")
    counts = generate_datasets(cfg, path)
    click.echo(f"wrote {sum(counts.values())} samples across "
               f"{len(counts)} sets under {path}", err=True)


@main.command("train-local")
@config_opt
@seed_opt
@out_opt
@click.option("--data", "data_dir", type=click.Path(), required=True,
              help="dataset root written by gen")
@click.option("--client", "client_id", required=True)
@click.option("--epochs", type=int, default=None,
              help="override baseline_epochs (0 = keep the init weights)")
def train_local_cmd(config_path, seed, out, data_dir, client_id, epochs):
    """Train one client's local baseline for baseline_epochs epochs."""
    cfg = _resolved(config_path, seed=seed)
    if client_id not in cfg.client_ids:
        _fail(EXIT_CONFIG, f"unknown client {client_id!r}; have {list(cfg.client_ids)}")
    try:
        train = read_yolo(os.path.join(data_dir, "clients", client_id, "train"))
    except (IoFailure, MalformedLabelLine) as e:
        _fail(EXIT_DATASET, f"dataset: {e}")
    path = _out_dir(cfg, out, f"baseline-{client_id}")
    weights, stats = train_baseline(cfg, client_id, train, epochs=epochs)
    params.save(weights, os.path.join(path, "checkpoint.fdw"))
    with open(os.path.join(path, "stats.jsonl"), "w") as f:
        f.write(stats.to_json_lines())
    write_json(os.path.join(path, "config.json"), cfg.echo())
    click.echo(f"trained {client_id} for {len(stats.epoch_losses)} epochs "
               f"-> {path}/checkpoint.fdw", err=True)


@main.command()
@config_opt
@seed_opt
@out_opt
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--transport", type=click.Choice(["inprocess", "tcp"]), default=None)
@click.option("--bind", default=None, help="TCP bind address, host:port")
def fed(config_path, seed, out, data_dir, transport, bind):
    """Run the whole federation and persist per-round checkpoints."""
    cfg = _resolved(config_path, seed=seed, transport=transport, bind=bind)
    try:
        client_data = load_client_data(cfg, data_dir)
    except (IoFailure, MalformedLabelLine) as e:
        _fail(EXIT_DATASET, f"dataset: {e}")
    path = _out_dir(cfg, out, "fed")
    try:
        result = run_federation(cfg.fed, client_data)
    except (ProtocolViolation, TransportFailure) as e:
        _fail(EXIT_FEDERATION, f"federation failed: {e}")
    sizes = {cid: len(client_data[cid].train) for cid in cfg.client_ids}
    save_fed_outputs(result, cfg, sizes, path)
    click.echo(f"federation done: {result.rounds_used} rounds "
               f"(stopped by {result.stopped_by}) -> {path}", err=True)


def _oracle_detections(samples):
    return [
        [Detection(b, b.class_id, 1.0) for b in s.boxes]
        for s in samples
    ]


@main.command("eval")
@config_opt
@seed_opt
@click.option("--checkpoint", required=True,
              help=".fdw file, or 'oracle' to echo ground truth (test hook)")
@click.option("--data", "data_dir", type=click.Path(), required=True,
              help="one dataset directory (images/, labels/, manifest.json)")
@click.option("--model-name", default=None)
@click.option("--dataset-name", default=None)
@click.option("--out", "out_file", type=click.Path(), default=None,
              help="also write the eval JSON here")
@click.option("--conf", "conf_threshold", type=float, default=None)
@click.option("--nms", "nms_iou", type=float, default=None)
def eval_cmd(config_path, seed, checkpoint, data_dir, model_name, dataset_name,
             out_file, conf_threshold, nms_iou):
    """Evaluate a checkpoint on a dataset; prints the metrics table."""
    cfg = _resolved(config_path, seed=seed)
    if conf_threshold is not None or nms_iou is not None:
        cfg = replace(cfg,
                      conf_threshold=cfg.conf_threshold if conf_threshold is None else conf_threshold,
                      nms_iou=cfg.nms_iou if nms_iou is None else nms_iou)
    try:
        samples = read_yolo(data_dir)
    except (IoFailure, MalformedLabelLine) as e:
        _fail(EXIT_DATASET, f"dataset: {e}")
    model_name = model_name or (
        "oracle" if checkpoint == "oracle"
        else os.path.splitext(os.path.basename(checkpoint))[0]
    )
    dataset_name = dataset_name or os.path.basename(os.path.normpath(data_dir))

    if checkpoint == "oracle":
        report = evaluate(_oracle_detections(samples), [s.boxes for s in samples])
    else:
        try:
            weights = params.load(checkpoint)
        except (OSError, MalformedPayload) as e:
            _fail(EXIT_SCHEMA, f"checkpoint: {e}")
        expected = tinydet.init_params(cfg.detector, Rng(0)).schema_hash
        if weights.schema_hash != expected:
            _fail(EXIT_SCHEMA,
                  f"checkpoint schema {weights.schema_hash:#018x} does not match "
                  f"the configured architecture ({expected:#018x})")
        report = evaluate_model(weights, samples, cfg)

    click.echo(report.to_table(model_name, dataset_name), nl=False)
    if out_file:
        doc = {"schema": "fedod-eval/1", "model": model_name,
               "dataset": dataset_name, "metrics": report.to_dict()}
        os.makedirs(os.path.dirname(os.path.abspath(out_file)), exist_ok=True)
        write_json(out_file, doc)


def _load_exp_config(exp_dir) -> ExperimentConfig:
    for rel in ("config.json", os.path.join("data", "config.json")):
        path = os.path.join(exp_dir, rel)
        if os.path.exists(path):
            return resolve_config(load_config_file(path))
    raise MissingEval(os.path.join(exp_dir, "config.json"))


@main.command()
@click.option("--exp", "exp_dir", type=click.Path(), required=True,
              help="experiment directory holding evals/")
@click.option("--out", "out_file", type=click.Path(), default=None)
def report(exp_dir, out_file):
    """Render the local-vs-federated comparison markdown."""
    try:
        cfg = _load_exp_config(exp_dir)
        text = build_report(exp_dir, cfg)
    except MissingEval as e:
        _fail(EXIT_REPORT_INPUTS, str(e))
    except ConfigError as e:
        _fail(EXIT_CONFIG, f"config: {e}")
    click.echo(text, nl=False)
    if out_file:
        with open(out_file, "w") as f:
            f.write(text)


@main.command()
@click.option("--exp", "exp_dir", type=click.Path(), required=True)
@click.option("--out", "out_file", type=click.Path(), default=None,
              help="default: <exp>/modelcard.json")
def modelcard(exp_dir, out_file):
    """Export the model's self-description card (validated JSON)."""
    history_path = os.path.join(exp_dir, "fed", "history.json")
    try:
        cfg = _load_exp_config(exp_dir)
    except MissingEval as e:
        _fail(EXIT_INCOMPLETE, str(e))
    except ConfigError as e:
        _fail(EXIT_CONFIG, f"config: {e}")
    if not os.path.exists(history_path):
        _fail(EXIT_INCOMPLETE, f"missing federation history: {history_path}")
    with open(history_path) as f:
        history = json.load(f)
    evaluations = []
    for ds in ["cross_test", *[f"swap_{c}" for c in cfg.client_ids], "domain_shift"]:
        path = eval_path(exp_dir, FED_MODEL, ds)
        if not os.path.exists(path):
            continue
        with open(path) as f:
            doc = json.load(f)
        evaluations.append({
            "dataset": ds,
            "map50": doc["metrics"]["map50"],
            "ap_5095": doc["metrics"]["ap_5095"],
            "report_path": os.path.join("evals", f"{FED_MODEL}__{ds}.json"),
        })
    if not evaluations:
        _fail(EXIT_INCOMPLETE,
              f"no federated evaluations under {os.path.join(exp_dir, 'evals')}")
    try:
        card = build_card(cfg, history, evaluations)
    except IncompleteExperiment as e:
        _fail(EXIT_INCOMPLETE, str(e))
    out_file = out_file or os.path.join(exp_dir, "modelcard.json")
    write_json(out_file, card)
    click.echo(f"wrote {out_file}", err=True)


if __name__ == "__main__":
    main()
