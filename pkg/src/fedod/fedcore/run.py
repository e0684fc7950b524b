"""Client behavior and the end-to-end federation driver.

A client's round: evaluate the received global weights on the local test
split (skipped in round 0, when the weights are the server's fresh init),
train for the agreed number of local epochs starting from those weights,
then upload the new weights together with the training-set size.

The per-round training Rng stream is derived from the federation seed and
the label "train/<client_id>/<round>", so results do not depend on the
transport, thread scheduling, or message arrival order; combined with the
sorted 64-bit aggregation in fedavg, an in-process run and a TCP run with
the same seed produce bit-identical results.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass

from .. import detmetrics, tinydet
from ..params import ParamSet, Rng, SchemaMismatch
from ..synthdata import Sample
from ..tinydet import EmptyDataset
from . import transport as tp
from .protocol import (
    BroadcastComplete,
    ClientUpdate,
    FedConfig,
    Outgoing,
    Phase,
    ProtocolViolation,
    RoundAccuracy,
    StopDecision,
    TransportFailure,
    UpdateArrived,
    new_federation,
    server_step,
)


@dataclass
class FederationResult:
    final_weights: ParamSet
    accuracy_history: tuple[RoundAccuracy, ...]
    rounds_used: int
    round_globals: list[ParamSet]  # weights broadcast per round + last aggregate
    stopped_by: str


def model_accuracy(weights: ParamSet, samples: list[Sample], cfg: FedConfig) -> float:
    """The stopping metric: mAP@0.5 of the weights on `samples`.

    Kept behind one function so a different notion of "accuracy" can be
    swapped in without touching the protocol.
    """
    dets = [
        tinydet.infer(weights, s.image, cfg.detector, cfg.conf_threshold, cfg.nms_iou)
        for s in samples
    ]
    truths = [s.boxes for s in samples]
    return detmetrics.evaluate(dets, truths).map50


def client_step(client_id: str, round_index: int, incoming: ParamSet,
                train: list[Sample], test: list[Sample], cfg: FedConfig) -> ClientUpdate:
    """One client round: evaluate the incoming global weights (round > 0),
    train local_epochs from them, emit the update."""
    if not train or not test:
        raise EmptyDataset(f"client {client_id!r} needs non-empty train and test splits")
    expected = tinydet.init_params(cfg.detector, Rng(0)).schema_hash
    if incoming.schema_hash != expected:
        raise SchemaMismatch(
            f"client {client_id!r}: incoming weights do not match the agreed architecture"
        )
    accuracy = model_accuracy(incoming, test, cfg) if round_index > 0 else None
    rng = Rng(cfg.seed).child(f"train/{client_id}/{round_index}")
    trained, _ = tinydet.train_local(incoming, train, cfg.training_config, rng)
    return ClientUpdate(client_id, round_index, trained, len(train), accuracy)


def _client_loop(endpoint: tp.ClientEndpoint, client_id: str, train, test,
                 cfg: FedConfig, client_fn) -> None:
    endpoint.send(tp.encode_join(client_id, len(train)))
    while True:
        msg = endpoint.recv(cfg.timeout_s)
        if msg.kind is tp.MessageKind.BROADCAST:
            weights = tp.decode_broadcast(msg)
            update = client_fn(client_id, msg.round, weights, train, test, cfg)
            endpoint.send(tp.encode_update(update))
        elif msg.kind is tp.MessageKind.STOP_NOTICE:
            return
        elif msg.kind is tp.MessageKind.ERROR:
            code, text = tp.decode_error(msg)
            raise TransportFailure(f"server error {code}: {text}")
        else:
            raise TransportFailure(f"unexpected message kind {msg.kind}")


def _emit(hub: tp.ServerHub, keys: dict[str, object], out: Outgoing) -> None:
    if out.kind == "broadcast":
        msg = tp.encode_broadcast(out.round, out.weights)
    else:
        msg = tp.encode_stop(out.round, out.rounds_used, out.weights)
    for cid in sorted(keys):
        hub.send(keys[cid], msg)


def _serve(hub: tp.ServerHub, cfg: FedConfig, clients: tuple[str, ...],
           init_weights: ParamSet) -> FederationResult:
    # collect one JoinReq per client; the connection that sent it becomes
    # that client's address
    keys: dict[str, object] = {}
    sizes: dict[str, int] = {}
    while len(keys) < len(clients):
        key, msg = hub.recv(cfg.timeout_s)
        if msg.kind is not tp.MessageKind.JOIN_REQ:
            raise ProtocolViolation(f"expected JoinReq during join, got {msg.kind}")
        cid, n = tp.decode_join(msg)
        if cid not in clients or cid in keys:
            hub.send(key, tp.encode_error(0, tp.ERR_PROTOCOL_VIOLATION,
                                          f"unknown or duplicate client {cid!r}"))
            raise ProtocolViolation(f"join from unknown or duplicate client {cid!r}")
        keys[cid] = key
        sizes[cid] = n

    state, outs = new_federation(cfg, clients, sizes, init_weights)
    round_globals = [init_weights]
    for out in outs:
        _emit(hub, keys, out)
    state, _ = server_step(state, BroadcastComplete())

    while state.phase is not Phase.DONE:
        try:
            key, msg = hub.recv(cfg.timeout_s)
        except TransportFailure as e:
            raise TransportFailure(f"round {state.round_index}: {e}") from e
        if msg.kind is not tp.MessageKind.UPDATE:
            hub.send(key, tp.encode_error(state.round_index, tp.ERR_PROTOCOL_VIOLATION,
                                          f"unexpected {msg.kind.name} mid-round"))
            continue
        try:
            update = tp.decode_update(msg)
            state, outs = server_step(state, UpdateArrived(update))
        except ProtocolViolation as e:
            hub.send(key, tp.encode_error(state.round_index,
                                          tp.ERR_PROTOCOL_VIOLATION, str(e)))
            continue
        if state.phase is Phase.AGGREGATING:
            state, outs = server_step(state, StopDecision())
            if state.phase is Phase.BROADCASTING:
                round_globals.append(state.global_weights)
                for out in outs:
                    _emit(hub, keys, out)
                state, _ = server_step(state, BroadcastComplete())
            else:  # DONE
                round_globals.append(state.aggregate)
                for out in outs:
                    _emit(hub, keys, out)

    return FederationResult(
        final_weights=state.final_weights,
        accuracy_history=state.accuracy_history,
        rounds_used=state.rounds_used,
        round_globals=round_globals,
        stopped_by=state.stopped_by,
    )


def run_federation(cfg: FedConfig, client_data: dict, client_fn=client_step) -> FederationResult:
    """Run a whole federation over the configured transport.

    `client_data` maps client id -> object with .train/.test sample lists
    (synthdata.ClientData fits). The result is bit-identical across
    transports for a given cfg. Raises TransportFailure or
    ProtocolViolation with round context on a broken run.
    """
    cfg.validate()
    clients = cfg.clients or tuple(sorted(client_data))
    for cid in clients:
        if cid not in client_data:
            raise EmptyDataset(f"no dataset for client {cid!r}")
    init = tinydet.init_params(cfg.detector, Rng(cfg.seed).child("init"))

    if cfg.transport == "tcp":
        bind = os.environ.get("FEDOD_BIND", cfg.bind)
        hub: tp.ServerHub = tp.TcpServerHub(bind, expected_connections=len(clients))
        endpoints = [tp.TcpClientEndpoint(hub.address, cfg.timeout_s) for _ in clients]
    else:
        hub = tp.InProcessHub()
        endpoints = [hub.connect() for _ in clients]

    failures: list[BaseException] = []

    def worker(endpoint, cid):
        try:
            _client_loop(endpoint, cid, client_data[cid].train,
                         client_data[cid].test, cfg, client_fn)
        except BaseException as e:  # surface client crashes after the run
            failures.append(e)

    threads = [
        threading.Thread(target=worker, args=(ep, cid), daemon=True)
        for ep, cid in zip(endpoints, clients)
    ]
    for t in threads:
        t.start()
    try:
        result = _serve(hub, cfg, clients, init)
    finally:
        hub.close()
        for t in threads:
            t.join(timeout=10.0)
        for ep in endpoints:
            ep.close()
    if failures:
        raise failures[0]
    return result
