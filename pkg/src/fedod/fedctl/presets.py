"""Experiment configuration: scenario presets, JSON config files, merging.

A config file is one JSON document with schema "fedod-exp/1"; any field it
omits falls back to the scenario preset, and CLI flags override the file
(precedence: CLI > file > preset defaults). The resolved config is echoed
into every output directory so runs are reproducible from their artifacts.

Scenarios:
    cabin2  two cabin makers with disjoint body colors and windshield
            types; the acceptance scenario.
    usb3    three USB-stick makers, one error-glyph type each, mapped onto
            the same two-class machinery (class 1 = error glyph present).
            Provided as a preset only.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from ..errors import FedodError
from ..fedcore import FedConfig
from ..synthdata import PartitionSpec
from ..tinydet import DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU, DetectorConfig

CONFIG_SCHEMA = "fedod-exp/1"


class ConfigError(FedodError):
    """An experiment config file or preset is invalid."""


PRESETS: dict[str, dict] = {
    "cabin2": {
        "classes": ["Cabin_without_windshield", "Cabin_with_windshield"],
        "partition": {
            "clients": {
                "client1": [["blue", "none"], ["blue", "A"], ["blue", "B"]],
                "client2": [["red", "none"], ["red", "C"], ["red", "D"]],
            },
            "samples_per_client": 200,
            "cross_samples": 60,
            "shift_samples": 60,
        },
    },
    "usb3": {
        "classes": ["Okay", "Not_Okay"],
        "partition": {
            "clients": {
                "client1": [["gray", "none"], ["gray", "A"]],
                "client2": [["blue", "none"], ["blue", "B"]],
                "client3": [["red", "none"], ["red", "C"]],
            },
            "samples_per_client": 200,
            "cross_samples": 60,
            "shift_samples": 60,
        },
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    seed: int
    classes: tuple[str, ...]
    partition: PartitionSpec
    detector: DetectorConfig
    fed: FedConfig
    baseline_epochs: int = 150
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    nms_iou: float = DEFAULT_NMS_IOU
    out_dir: str = "runs"

    def validate(self) -> None:
        if len(self.classes) != self.detector.num_classes:
            raise ConfigError(
                f"detector.num_classes={self.detector.num_classes} but "
                f"{len(self.classes)} class names are declared"
            )
        if self.baseline_epochs < 0:
            raise ConfigError("baseline_epochs must be >= 0")
        try:
            self.partition.validate()
            self.detector.validate()
            self.fed.validate()
        except (FedodError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def echo(self) -> dict:
        """JSON-serializable resolved config (no output paths, no host state)."""
        part = dataclasses.asdict(self.partition)
        part["clients"] = {
            cid: [list(c) for c in combos]
            for cid, combos in self.partition.clients.items()
        }
        fed = dataclasses.asdict(self.fed)
        fed.pop("detector", None)
        fed.pop("clients", None)
        return {
            "schema": CONFIG_SCHEMA,
            "scenario": self.scenario,
            "seed": self.seed,
            "classes": list(self.classes),
            "partition": part,
            "detector": dataclasses.asdict(self.detector),
            "fed": fed,
            "baseline_epochs": self.baseline_epochs,
            "conf_threshold": self.conf_threshold,
            "nms_iou": self.nms_iou,
        }

    @property
    def client_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.partition.clients))


def _take(dst: dict, src: dict, keys) -> None:
    for k in keys:
        if k in src:
            dst[k] = src[k]


def resolve_config(file_data: dict | None = None, **overrides) -> ExperimentConfig:
    """Merge preset defaults, a parsed config file, and keyword overrides
    (seed, transport, bind, out_dir) into a validated ExperimentConfig."""
    file_data = dict(file_data or {})
    if file_data and file_data.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(
            f"config schema {file_data.get('schema')!r}, expected {CONFIG_SCHEMA!r}"
        )
    scenario = file_data.get("scenario", "cabin2")
    if scenario not in PRESETS:
        raise ConfigError(f"unknown scenario {scenario!r}; have {sorted(PRESETS)}")
    preset = PRESETS[scenario]

    seed = overrides.get("seed")
    if seed is None:
        seed = file_data.get("seed", 0)

    part_fields: dict = dict(preset["partition"])
    _take(part_fields, file_data.get("partition", {}),
          ("clients", "samples_per_client", "train_frac", "val_frac", "test_frac",
           "cross_samples", "shift_samples", "image_size", "cross_combos"))
    clients = {
        cid: tuple(tuple(c) for c in combos)
        for cid, combos in part_fields.pop("clients").items()
    }
    cross = part_fields.pop("cross_combos", None)
    if cross is not None:
        cross = tuple(tuple(c) for c in cross)
    try:
        partition = PartitionSpec(clients=clients, seed=seed, cross_combos=cross,
                                  **part_fields)
    except TypeError as e:
        raise ConfigError(f"partition: {e}") from e

    det_fields: dict = {}
    _take(det_fields, file_data.get("detector", {}),
          ("image_size", "grid_s", "num_classes", "conv1_channels", "conv2_channels",
           "lambda_coord", "lambda_noobj", "learning_rate", "batch_size",
           "local_epochs", "momentum"))
    det_fields.setdefault("image_size", partition.image_size)
    try:
        detector = DetectorConfig(**det_fields)
    except TypeError as e:
        raise ConfigError(f"detector: {e}") from e
    if detector.image_size != partition.image_size:
        raise ConfigError(
            f"detector.image_size={detector.image_size} but partition generates "
            f"{partition.image_size}px images"
        )

    fed_fields: dict = {}
    _take(fed_fields, file_data.get("fed", {}),
          ("stop_threshold", "max_rounds", "local_epochs", "transport", "bind",
           "timeout_s"))
    if overrides.get("transport") is not None:
        fed_fields["transport"] = overrides["transport"]
    if overrides.get("bind") is not None:
        fed_fields["bind"] = overrides["bind"]
    conf_threshold = float(file_data.get("conf_threshold", DEFAULT_CONF_THRESHOLD))
    nms_iou = float(file_data.get("nms_iou", DEFAULT_NMS_IOU))
    try:
        fed = FedConfig(clients=tuple(sorted(clients)), seed=seed, detector=detector,
                        conf_threshold=conf_threshold, nms_iou=nms_iou, **fed_fields)
    except TypeError as e:
        raise ConfigError(f"fed: {e}") from e

    cfg = ExperimentConfig(
        scenario=scenario,
        seed=seed,
        classes=tuple(preset["classes"] if "classes" not in file_data
                      else file_data["classes"]),
        partition=partition,
        detector=detector,
        fed=fed,
        baseline_epochs=int(file_data.get("baseline_epochs", 150)),
        conf_threshold=conf_threshold,
        nms_iou=nms_iou,
        out_dir=str(overrides.get("out_dir") or file_data.get("out_dir", "runs")),
    )
    cfg.validate()
    return cfg


def load_config_file(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
