"""Federated protocol: FedAvg, the round state machine, transports."""

from .protocol import (
    BroadcastComplete,
    ClientUpdate,
    EmptyUpdateSet,
    FedConfig,
    Outgoing,
    Phase,
    ProtocolViolation,
    RoundAccuracy,
    RoundState,
    StopDecision,
    TransportFailure,
    UpdateArrived,
    fedavg,
    new_federation,
    server_step,
)
from .run import FederationResult, client_step, model_accuracy, run_federation

__all__ = [
    "BroadcastComplete",
    "ClientUpdate",
    "EmptyUpdateSet",
    "FedConfig",
    "FederationResult",
    "Outgoing",
    "Phase",
    "ProtocolViolation",
    "RoundAccuracy",
    "RoundState",
    "StopDecision",
    "TransportFailure",
    "UpdateArrived",
    "client_step",
    "fedavg",
    "model_accuracy",
    "new_federation",
    "run_federation",
    "server_step",
]
