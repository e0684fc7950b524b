"""Machine-readable self-description of a trained federated model.

The card carries the task, class nomenclature, architecture summary,
training provenance (rounds, epochs, client count and sample counts — no
raw data, no images), and references to evaluation reports. It validates
against the shipped schema (schemas/fedod-card-1.schema.json), whose
`additionalProperties: false` everywhere keeps payloads like images out
by construction.
"""

from __future__ import annotations

import importlib.resources
import json

import jsonschema

from .. import __version__
from ..errors import FedodError
from .presets import ExperimentConfig

CARD_SCHEMA_ID = "fedod-card/1"


class IncompleteExperiment(FedodError):
    """An artifact required for the card is missing."""


def card_schema() -> dict:
    ref = importlib.resources.files("fedod.fedctl") / "schemas" / "fedod-card-1.schema.json"
    return json.loads(ref.read_text())


def build_card(cfg: ExperimentConfig, history: dict, evaluations: list[dict]) -> dict:
    """Assemble the card from the resolved config, a fed history document,
    and eval summaries [{dataset, map50, ap_5095, report_path}, ...]."""
    det = cfg.detector
    architecture = (
        f"single-shot grid detector: {det.image_size}px input, "
        f"conv3x3({det.conv1_channels}) + conv3x3({det.conv2_channels}) with "
        f"2x2 average pooling down to a {det.grid_s}x{det.grid_s} map, "
        f"1x1 head with {5 + det.num_classes} channels per cell"
    )
    sizes = history.get("client_sample_counts")
    if not sizes:
        raise IncompleteExperiment("history lacks client_sample_counts")
    card = {
        "schema": CARD_SCHEMA_ID,
        "name": f"fedod-{cfg.scenario}",
        "version": __version__,
        "task": (
            "detect and localize one object per image and classify it as "
            + " vs ".join(cfg.classes)
        ),
        "classes": list(cfg.classes),
        "architecture": architecture,
        "training": {
            "method": "sample-weighted federated averaging, full participation, "
                      "average-accuracy stopping rule",
            "rounds_used": int(history["rounds_used"]),
            "local_epochs": int(cfg.fed.local_epochs),
            "num_clients": len(sizes),
            "client_sample_counts": {k: int(v) for k, v in sorted(sizes.items())},
            "stop_threshold": cfg.fed.stop_threshold,
            "seed": cfg.seed,
        },
        "evaluations": evaluations,
        "intended_use": (
            "quality inspection on the synthetic desk-scale corpus this model "
            "was federated on; a self-description artifact for catalog listings"
        ),
        "limitations": (
            "trained on 32px synthetic rasters, not photographs; single object "
            "per image; accuracy figures hold only for the referenced datasets"
        ),
    }
    validate_card(card)
    return card


def validate_card(card: dict) -> None:
    try:
        jsonschema.validate(card, card_schema())
    except jsonschema.ValidationError as e:
        raise IncompleteExperiment(f"model card invalid: {e.message}") from e
