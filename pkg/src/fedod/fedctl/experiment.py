"""Library experiment runner: compose gen / baselines / federation / evals
into one canonical experiment directory.

    EXP/
      config.json               resolved config echo
      data/clients/<id>/{train,val,test}/   PPM + YOLO labels + manifest
      data/{cross_test,swap_<id>,domain_shift}/
      baselines/<id>/{checkpoint.fdw, stats.jsonl}
      fed/{round_NN.fdw, final.fdw, history.json}
      evals/<model>__<dataset>.json
      report.md
      modelcard.json

The CLI subcommands produce the same artifacts one step at a time; this
module is the programmatic equivalent (used by the acceptance suite).
"""

from __future__ import annotations

import json
import os
from dataclasses import replace

from .. import detmetrics, params, synthdata, tinydet
from ..fedcore import FederationResult, run_federation
from ..params import Rng
from ..synthdata import read_yolo, write_yolo
from .modelcard import build_card
from .presets import ExperimentConfig
from .report import FED_MODEL, build_report, eval_path


def write_json(path, payload: dict) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def generate_datasets(cfg: ExperimentConfig, data_dir) -> dict:
    """Write every dataset directory; returns per-set sample counts."""
    parts = synthdata.build_partitions(cfg.partition)
    echo = cfg.echo()
    counts = {}

    def emit(rel, samples, split):
        path = os.path.join(data_dir, rel)
        write_yolo(path, samples, split=split, spec_echo=echo["partition"],
                   seed=cfg.seed)
        counts[rel.replace(os.sep, "/")] = len(samples)

    for cid, data in sorted(parts.clients.items()):
        emit(os.path.join("clients", cid, "train"), data.train, "train")
        emit(os.path.join("clients", cid, "val"), data.val, "val")
        emit(os.path.join("clients", cid, "test"), data.test, "test")
    emit("cross_test", parts.cross_test, "cross_test")
    for cid in sorted(parts.clients):
        emit(f"swap_{cid}", parts.swap_set(cid), f"swap_{cid}")
    emit("domain_shift", parts.domain_shift, "domain_shift")

    write_json(os.path.join(data_dir, "manifest.json"), {
        "schema": "fedod-datasets/1",
        "config": echo,
        "counts": counts,
        "cross_empty": parts.cross_empty,
        "cross_combos": [list(c) for c in parts.cross_combos],
    })
    write_json(os.path.join(data_dir, "config.json"), echo)
    return counts


def load_client_data(cfg: ExperimentConfig, data_dir) -> dict[str, synthdata.ClientData]:
    out = {}
    for cid in cfg.client_ids:
        base = os.path.join(data_dir, "clients", cid)
        out[cid] = synthdata.ClientData(
            train=read_yolo(os.path.join(base, "train")),
            val=read_yolo(os.path.join(base, "val")),
            test=read_yolo(os.path.join(base, "test")),
        )
    return out


def train_baseline(cfg: ExperimentConfig, client_id: str, train, epochs=None):
    """Locally trained reference model for one client, from a fresh init."""
    epochs = cfg.baseline_epochs if epochs is None else epochs
    det = replace(cfg.detector, local_epochs=epochs)
    init = tinydet.init_params(cfg.detector, Rng(cfg.seed).child(f"baseline/{client_id}"))
    if epochs == 0:
        return init, tinydet.TrainStats()
    return tinydet.train_local(init, train, det,
                               Rng(cfg.seed).child(f"baseline-train/{client_id}"))


def save_fed_outputs(result: FederationResult, cfg: ExperimentConfig,
                     sizes: dict[str, int], fed_dir) -> None:
    os.makedirs(fed_dir, exist_ok=True)
    for i, weights in enumerate(result.round_globals):
        params.save(weights, os.path.join(fed_dir, f"round_{i:02d}.fdw"))
    params.save(result.final_weights, os.path.join(fed_dir, "final.fdw"))
    write_json(os.path.join(fed_dir, "history.json"), {
        "schema": "fedod-history/1",
        "rounds_used": result.rounds_used,
        "stopped_by": result.stopped_by,
        "rounds": [
            {"round": i, "accuracies": entry.accuracies, "mean": entry.mean}
            for i, entry in enumerate(result.accuracy_history)
        ],
        "client_sample_counts": dict(sorted(sizes.items())),
        "config": cfg.echo(),
    })
    write_json(os.path.join(fed_dir, "config.json"), cfg.echo())


def evaluate_model(weights, samples, cfg: ExperimentConfig) -> detmetrics.EvalReport:
    dets = [
        tinydet.infer(weights, s.image, cfg.detector, cfg.conf_threshold, cfg.nms_iou)
        for s in samples
    ]
    return detmetrics.evaluate(dets, [s.boxes for s in samples])


def save_eval(report: detmetrics.EvalReport, model: str, dataset: str, exp_dir) -> dict:
    doc = {
        "schema": "fedod-eval/1",
        "model": model,
        "dataset": dataset,
        "metrics": report.to_dict(),
    }
    write_json(eval_path(exp_dir, model, dataset), doc)
    return doc


def run_experiment(cfg: ExperimentConfig, exp_dir, baseline_epochs=None) -> dict:
    """Full pipeline; returns the headline metrics used by the acceptance
    generalization check."""
    data_dir = os.path.join(exp_dir, "data")
    generate_datasets(cfg, data_dir)
    write_json(os.path.join(exp_dir, "config.json"), cfg.echo())
    client_data = load_client_data(cfg, data_dir)
    cross = read_yolo(os.path.join(data_dir, "cross_test"))
    shift = read_yolo(os.path.join(data_dir, "domain_shift"))
    swaps = {
        cid: read_yolo(os.path.join(data_dir, f"swap_{cid}"))
        for cid in cfg.client_ids
    }

    baselines = {}
    for cid in cfg.client_ids:
        weights, stats = train_baseline(cfg, cid, client_data[cid].train,
                                        epochs=baseline_epochs)
        baselines[cid] = weights
        base_dir = os.path.join(exp_dir, "baselines", cid)
        os.makedirs(base_dir, exist_ok=True)
        params.save(weights, os.path.join(base_dir, "checkpoint.fdw"))
        with open(os.path.join(base_dir, "stats.jsonl"), "w") as f:
            f.write(stats.to_json_lines())

    result = run_federation(cfg.fed, client_data)
    sizes = {cid: len(client_data[cid].train) for cid in cfg.client_ids}
    save_fed_outputs(result, cfg, sizes, os.path.join(exp_dir, "fed"))

    summary = {"rounds_used": result.rounds_used, "stopped_by": result.stopped_by,
               "baseline_own_test": {}, "baseline_cross": {}, "fed_cross": None}
    for cid in cfg.client_ids:
        own = evaluate_model(baselines[cid], client_data[cid].test, cfg)
        save_eval(own, cid, f"test_{cid}", exp_dir)
        summary["baseline_own_test"][cid] = own.map50
        on_cross = evaluate_model(baselines[cid], cross, cfg)
        save_eval(on_cross, cid, "cross_test", exp_dir)
        summary["baseline_cross"][cid] = on_cross.map50
        save_eval(evaluate_model(baselines[cid], swaps[cid], cfg), cid,
                  f"swap_{cid}", exp_dir)
        save_eval(evaluate_model(baselines[cid], shift, cfg), cid,
                  "domain_shift", exp_dir)

    fed_cross = evaluate_model(result.final_weights, cross, cfg)
    save_eval(fed_cross, FED_MODEL, "cross_test", exp_dir)
    summary["fed_cross"] = fed_cross.map50
    for cid in cfg.client_ids:
        save_eval(evaluate_model(result.final_weights, swaps[cid], cfg),
                  FED_MODEL, f"swap_{cid}", exp_dir)
    save_eval(evaluate_model(result.final_weights, shift, cfg),
              FED_MODEL, "domain_shift", exp_dir)

    report_md = build_report(exp_dir, cfg)
    with open(os.path.join(exp_dir, "report.md"), "w") as f:
        f.write(report_md)

    with open(os.path.join(exp_dir, "fed", "history.json")) as f:
        history = json.load(f)
    evaluations = []
    for ds in ["cross_test", *[f"swap_{c}" for c in cfg.client_ids], "domain_shift"]:
        with open(eval_path(exp_dir, FED_MODEL, ds)) as f:
            doc = json.load(f)
        evaluations.append({
            "dataset": ds,
            "map50": doc["metrics"]["map50"],
            "ap_5095": doc["metrics"]["ap_5095"],
            "report_path": f"evals/{FED_MODEL}__{ds}.json",
        })
    card = build_card(cfg, history, evaluations)
    write_json(os.path.join(exp_dir, "modelcard.json"), card)
    return summary
