"""Markdown comparison report: local baselines vs the federated model.

Two required sections mirror the comparison tables of the original
federated cabin-inspection study: every model on the cross-combination
test set, then each local model against the global model on its own
swapped-combination set. The study's published numbers appear alongside
in a "Paper reported" column for context (they come from ~600-photo
datasets per client and are not expected to match desk-scale synthetic
runs). A domain-shift section is added when those evals exist.
"""

from __future__ import annotations

import json
import os

from ..detmetrics import ABSENT, format_metric
from ..errors import FedodError
from .presets import ExperimentConfig

FED_MODEL = "fedod"

COLUMNS = ("Model", "Test Dataset", "mAP", "AP@[.50:.05:.95]",
           "APm", "APl", "ARm", "ARl", "Paper reported")

# published mAP / AP@[.50:.05:.95] pairs for the two-client cabin scenario
PAPER_REPORTED = {
    ("client1", "cross_test"): "mAP 0.42, AP 0.35",
    ("client2", "cross_test"): "mAP 0.49, AP 0.42",
    (FED_MODEL, "cross_test"): "mAP 1.0, AP 0.93",
    ("client1", "swap_client1"): "mAP 0.83, AP 0.70",
    (FED_MODEL, "swap_client1"): "mAP 1.0, AP 0.96",
    ("client2", "swap_client2"): "mAP 0.97, AP 0.83",
    (FED_MODEL, "swap_client2"): "mAP 1.0, AP 0.91",
}


class MissingEval(FedodError):
    """A required evaluation artifact is absent."""

    def __init__(self, path):
        self.path = path
        super().__init__(f"missing evaluation file: {path}")


def eval_path(exp_dir, model: str, dataset: str) -> str:
    return os.path.join(exp_dir, "evals", f"{model}__{dataset}.json")


def load_eval(exp_dir, model: str, dataset: str, required: bool = True) -> dict | None:
    path = eval_path(exp_dir, model, dataset)
    if not os.path.exists(path):
        if required:
            raise MissingEval(path)
        return None
    with open(path) as f:
        return json.load(f)


def _row(model: str, dataset: str, metrics: dict) -> str:
    cells = [
        model,
        dataset,
        format_metric(metrics["map50"]),
        format_metric(metrics["ap_5095"]),
        format_metric(metrics["ap_medium"]),
        format_metric(metrics["ap_large"]),
        format_metric(metrics["ar_medium"]),
        format_metric(metrics["ar_large"]),
        PAPER_REPORTED.get((model, dataset), ABSENT),
    ]
    return "| " + " | ".join(cells) + " |"


def _table(rows: list[str]) -> str:
    head = "| " + " | ".join(COLUMNS) + " |"
    sep = "|" + "|".join(["---"] * len(COLUMNS)) + "|"
    return "\n".join([head, sep, *rows])


def build_report(exp_dir, cfg: ExperimentConfig) -> str:
    clients = cfg.client_ids
    lines = [
        "# Local vs federated detection models",
        "",
        f"Scenario `{cfg.scenario}`, seed {cfg.seed}. Baselines trained "
        f"{cfg.baseline_epochs} epochs locally; the federated run allows up to "
        f"{cfg.fed.max_rounds} rounds x {cfg.fed.local_epochs} local epochs = "
        f"{cfg.fed.max_rounds * cfg.fed.local_epochs} epochs per client "
        f"(comparability note; not enforced).",
        "",
        "Absent size buckets render as `__`. The \"Paper reported\" column "
        "quotes the original study's numbers for context; those came from "
        "real photographs, not this synthetic corpus.",
        "",
        "## Cross-combination test set (unseen by every client)",
        "",
    ]
    rows = []
    for model in [*clients, FED_MODEL]:
        data = load_eval(exp_dir, model, "cross_test")
        rows.append(_row(model, "cross_test", data["metrics"]))
    lines.append(_table(rows))

    lines += ["", "## Swapped combinations (each maker's color with the other "
                  "windshield types)", ""]
    rows = []
    for client in clients:
        dataset = f"swap_{client}"
        own = load_eval(exp_dir, client, dataset)
        fed = load_eval(exp_dir, FED_MODEL, dataset)
        rows.append(_row(client, dataset, own["metrics"]))
        rows.append(_row(FED_MODEL, dataset, fed["metrics"]))
    lines.append(_table(rows))

    shift_rows = []
    for model in [*clients, FED_MODEL]:
        data = load_eval(exp_dir, model, "domain_shift", required=False)
        if data is not None:
            shift_rows.append(_row(model, "domain_shift", data["metrics"]))
    if shift_rows:
        lines += ["", "## Domain shift (same combinations, new backgrounds "
                      "and lighting)", "", _table(shift_rows)]

    lines.append("")
    return "\n".join(lines)
