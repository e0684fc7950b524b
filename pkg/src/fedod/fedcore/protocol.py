"""Server-side protocol: FedAvg aggregation and the communication-round
state machine.

One communication round: the server broadcasts the global weights, every
client trains locally and uploads (weights, sample count, accuracy of the
received global model on its local test split), the server aggregates with
a sample-weighted mean, then decides whether to stop.

Stopping rule: the mean of the reported accuracies must STRICTLY exceed
the threshold; since those accuracies were measured on the weights
broadcast this round, a threshold stop returns that broadcast (the
previous aggregate), discarding the just-uploaded local updates. Hitting
max_rounds instead returns the freshly computed aggregate.

Full participation is required: aggregation never happens with a proper
subset of the expected clients, and duplicate / unknown / stale updates
raise ProtocolViolation without changing state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import FedodError
from ..params import ParamSet, SchemaMismatch, Tensor
from ..tinydet import DetectorConfig


class ProtocolViolation(FedodError):
    """A message broke the communication-round contract."""


class EmptyUpdateSet(FedodError):
    """fedavg needs at least one client update."""


class TransportFailure(FedodError):
    """A transport broke mid-round; the federation aborts."""


class Phase(enum.Enum):
    BROADCASTING = "broadcasting"
    WAITING_FOR_UPDATES = "waiting_for_updates"
    AGGREGATING = "aggregating"
    CHECKING_STOP = "checking_stop"
    DONE = "done"


@dataclass(frozen=True)
class FedConfig:
    stop_threshold: float = 0.96
    max_rounds: int = 10
    local_epochs: int = 15
    clients: tuple[str, ...] = ()
    transport: str = "inprocess"
    seed: int = 0
    detector: DetectorConfig = DetectorConfig()
    conf_threshold: float = 0.25
    nms_iou: float = 0.45
    bind: str = "127.0.0.1:0"
    timeout_s: float = 300.0

    def validate(self) -> None:
        if not 0 < self.stop_threshold <= 1:
            raise ValueError(f"stop_threshold must be in (0, 1], got {self.stop_threshold}")
        if self.max_rounds < 1:
            raise ValueError(f"max_rounds must be >= 1, got {self.max_rounds}")
        if self.transport not in ("inprocess", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if len(set(self.clients)) != len(self.clients):
            raise ValueError("client ids must be unique")
        self.detector.validate()

    @property
    def training_config(self) -> DetectorConfig:
        """Detector config with the federation's local epoch count."""
        return replace(self.detector, local_epochs=self.local_epochs)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    round: int
    weights: ParamSet
    num_samples: int
    reported_accuracy: float | None = None  # absent in round 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.reported_accuracy is not None and not 0 <= self.reported_accuracy <= 1:
            raise ValueError(f"accuracy {self.reported_accuracy} outside [0, 1]")


@dataclass(frozen=True)
class RoundAccuracy:
    """Per-round feedback: client id -> accuracy, plus their mean (None
    when any client did not report, e.g. round 0)."""

    accuracies: dict[str, float]
    mean: float | None


# events accepted by server_step
@dataclass(frozen=True)
class BroadcastComplete:
    pass


@dataclass(frozen=True)
class UpdateArrived:
    update: ClientUpdate


@dataclass(frozen=True)
class StopDecision:
    pass


@dataclass(frozen=True)
class Outgoing:
    """A message the server wants delivered to every client."""

    kind: str  # "broadcast" | "stop"
    round: int
    weights: ParamSet
    rounds_used: int | None = None


@dataclass(frozen=True)
class RoundState:
    round_index: int
    phase: Phase
    expected_clients: frozenset[str]
    declared_sizes: dict[str, int]
    global_weights: ParamSet  # weights broadcast this round
    config: FedConfig
    received: dict[str, ClientUpdate] = field(default_factory=dict)
    aggregate: ParamSet | None = None  # fedavg result of this round
    accuracy_history: tuple[RoundAccuracy, ...] = ()
    final_weights: ParamSet | None = None
    stopped_by: str | None = None  # "threshold" | "cap"

    @property
    def rounds_used(self) -> int:
        return self.round_index + 1 if self.phase is Phase.DONE else self.round_index


def fedavg(updates) -> ParamSet:
    """Sample-weighted mean of client weights: sum_k (n_k/n) * w_k.

    Accumulates in float64 in ascending client_id order and rounds to
    float32 once, so any permutation of `updates` gives bit-identical
    output. A single update returns its weights bit-exactly.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise EmptyUpdateSet("fedavg needs at least one update")
    schema = updates[0].weights.schema_hash
    for u in updates[1:]:
        if u.weights.schema_hash != schema:
            raise SchemaMismatch(
                f"update from {u.client_id!r} has schema {u.weights.schema_hash:#018x}, "
                f"expected {schema:#018x}"
            )
    total = float(sum(u.num_samples for u in updates))
    out = []
    for i, t in enumerate(updates[0].weights):
        acc = np.zeros(t.dims, np.float64)
        for u in updates:
            acc += u.num_samples * u.weights.tensors[i].values.astype(np.float64)
        out.append(Tensor(t.name, t.dims, (acc / total).astype(np.float32)))
    return ParamSet(out)


def new_federation(cfg: FedConfig, clients, declared_sizes: dict[str, int],
                   init_weights: ParamSet):
    """Round-0 state plus the initial broadcast messages."""
    cfg.validate()
    clients = tuple(clients)
    if not clients:
        raise ValueError("at least one client required")
    missing = [c for c in clients if c not in declared_sizes]
    if missing:
        raise ProtocolViolation(f"no declared sample count for {missing}")
    state = RoundState(
        round_index=0,
        phase=Phase.BROADCASTING,
        expected_clients=frozenset(clients),
        declared_sizes=dict(declared_sizes),
        global_weights=init_weights,
        config=cfg,
    )
    return state, [Outgoing("broadcast", 0, init_weights)]


def server_step(state: RoundState, event):
    """Apply one event; returns (new state, messages to emit).

    Raises ProtocolViolation (state unchanged) for events that are illegal
    in the current phase or updates that break the round contract.
    """
    if state.phase is Phase.DONE:
        raise ProtocolViolation(f"round {state.round_index}: federation already done")

    if isinstance(event, BroadcastComplete):
        if state.phase is not Phase.BROADCASTING:
            raise ProtocolViolation(
                f"round {state.round_index}: broadcast-complete in phase {state.phase.value}"
            )
        return replace(state, phase=Phase.WAITING_FOR_UPDATES), []

    if isinstance(event, UpdateArrived):
        if state.phase is not Phase.WAITING_FOR_UPDATES:
            raise ProtocolViolation(
                f"round {state.round_index}: update in phase {state.phase.value}"
            )
        u = event.update
        if u.client_id not in state.expected_clients:
            raise ProtocolViolation(f"round {state.round_index}: unknown client {u.client_id!r}")
        if u.round != state.round_index:
            raise ProtocolViolation(
                f"round {state.round_index}: update carries round {u.round}"
            )
        if u.client_id in state.received:
            raise ProtocolViolation(
                f"round {state.round_index}: duplicate update from {u.client_id!r}"
            )
        if u.num_samples != state.declared_sizes[u.client_id]:
            raise ProtocolViolation(
                f"round {state.round_index}: {u.client_id!r} declared "
                f"{state.declared_sizes[u.client_id]} samples but sent {u.num_samples}"
            )
        if u.weights.schema_hash != state.global_weights.schema_hash:
            raise ProtocolViolation(
                f"round {state.round_index}: weight schema mismatch from {u.client_id!r}"
            )
        received = dict(state.received)
        received[u.client_id] = u
        if frozenset(received) == state.expected_clients:
            # full participation reached: enter Aggregating, computing fedavg
            agg = fedavg(received.values())
            return replace(state, phase=Phase.AGGREGATING, received=received,
                           aggregate=agg), []
        return replace(state, received=received), []

    if isinstance(event, StopDecision):
        if state.phase is not Phase.AGGREGATING:
            raise ProtocolViolation(
                f"round {state.round_index}: stop-decision in phase {state.phase.value}"
            )
        accuracies = {
            cid: state.received[cid].reported_accuracy
            for cid in sorted(state.received)
            if state.received[cid].reported_accuracy is not None
        }
        mean = (
            sum(accuracies.values()) / len(accuracies)
            if len(accuracies) == len(state.expected_clients)
            else None
        )
        history = state.accuracy_history + (RoundAccuracy(accuracies, mean),)
        cfg = state.config
        if mean is not None and mean > cfg.stop_threshold:
            done = replace(state, phase=Phase.DONE, accuracy_history=history,
                           final_weights=state.global_weights, stopped_by="threshold")
            return done, [Outgoing("stop", state.round_index,
                                   state.global_weights, done.rounds_used)]
        if state.round_index + 1 == cfg.max_rounds:
            done = replace(state, phase=Phase.DONE, accuracy_history=history,
                           final_weights=state.aggregate, stopped_by="cap")
            return done, [Outgoing("stop", state.round_index,
                                   state.aggregate, done.rounds_used)]
        nxt = replace(
            state,
            round_index=state.round_index + 1,
            phase=Phase.BROADCASTING,
            global_weights=state.aggregate,
            aggregate=None,
            received={},
            accuracy_history=history,
        )
        return nxt, [Outgoing("broadcast", nxt.round_index, nxt.global_weights)]

    raise ProtocolViolation(f"unknown event {event!r}")
