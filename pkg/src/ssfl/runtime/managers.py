"""Server and client managers that run federated rounds over a transport.

The managers only move frames; aggregation, sampling and metrics are the same
``FederatedServer`` / ``ClientRunner`` objects used by the in-process loop, so a run over
the loopback transport reproduces ``run_training`` exactly.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
import threading
from typing import Callable, Mapping, Optional, Sequence

from ..fed.core import ConfigError, PersonalState, RoundConfig, RoundMetrics
from ..fed.loop import ClientFailure, ClientRunner, Evaluator, FederatedServer, TrainingResult
from ..params import ParameterSet
from .transport import ALL, LoopbackTransport, SocketClient, SocketServer, TransportTimeout
from .wire import SERVER_ID, Kind, Message, deserialize, serialize

log = logging.getLogger(__name__)


class RoundTimeout(RuntimeError):
    pass


class ProtocolError(RuntimeError):
    pass


class ServerManager:
    def __init__(self, server: FederatedServer, endpoint, *, timeout: Optional[float] = None,
                 states_provider: Optional[Callable[[], Mapping[int, PersonalState]]] = None,
                 on_round: Optional[Callable] = None):
        self.server = server
        self.endpoint = endpoint
        self.timeout = timeout
        self.states_provider = states_provider or (lambda: {})
        self.on_round = on_round

    def _collect(self, t: int, participants: Sequence[int]):
        pending = set(participants)
        updates = []
        while pending:
            try:
                msg = deserialize(self.endpoint.recv(self.timeout))
            except TransportTimeout:
                raise RoundTimeout(f"round {t}: no update from clients {sorted(pending)} "
                                   f"within {self.timeout}s") from None
            if msg.kind != Kind.CLIENT_UPDATE or msg.round != t:
                raise ProtocolError(f"round {t}: unexpected {msg.kind.name} for round {msg.round} "
                                    f"from {msg.sender}")
            if msg.sender not in pending:
                raise ProtocolError(f"round {t}: unsolicited or duplicate update from {msg.sender}")
            if msg.error is not None:
                raise ClientFailure(msg.sender, t, RuntimeError(msg.error))
            pending.discard(msg.sender)
            updates.append(msg.payload)
        return updates

    def run(self) -> list[RoundMetrics]:
        cfg = self.server.config
        try:
            for t in range(cfg.rounds):
                participants = self.server.begin_round(t)
                frame = serialize(Message(Kind.BROADCAST_MODEL, t, SERVER_ID, self.server.params))
                for k in participants:
                    self.endpoint.send(frame, k)
                updates = self._collect(t, participants)
                states = self.states_provider()
                m = self.server.finish_round(t, participants, updates, states)
                if self.on_round is not None:
                    self.on_round(m, self.server.params, states)
        finally:
            self.endpoint.send(serialize(Message(Kind.SHUTDOWN, cfg.rounds, SERVER_ID)), ALL)
        return self.server.log


class ClientManager:
    def __init__(self, runner: ClientRunner, endpoint, timeout: Optional[float] = None):
        self.runner = runner
        self.endpoint = endpoint
        self.timeout = timeout

    def serve(self) -> None:
        cid = self.runner.client_id
        while True:
            msg = deserialize(self.endpoint.recv(self.timeout))
            if msg.kind == Kind.SHUTDOWN:
                return
            if msg.kind != Kind.BROADCAST_MODEL:
                raise ProtocolError(f"client {cid}: unexpected {msg.kind.name}")
            try:
                update = self.runner.train(msg.round, msg.payload)
                reply = Message(Kind.CLIENT_UPDATE, msg.round, cid, update)
            except ClientFailure as exc:
                log.warning("%s", exc)
                reply = Message(Kind.CLIENT_UPDATE, msg.round, cid, error=repr(exc.cause))
            self.endpoint.send(serialize(reply))


def run_loopback(method, clients: Sequence, config: RoundConfig, init_params: ParameterSet, *,
                 evaluator: Optional[Evaluator] = None, eval_every: int = 1,
                 timeout: Optional[float] = None,
                 initial_states: Optional[Mapping[int, PersonalState]] = None,
                 on_round: Optional[Callable] = None,
                 transport: Optional[LoopbackTransport] = None) -> TrainingResult:
    """Federated training with one thread per client exchanging serialised frames."""
    if len(clients) != config.num_clients:
        raise ConfigError(f"got {len(clients)} client datasets for num_clients={config.num_clients}")
    initial_states = initial_states or {}
    hub = transport or LoopbackTransport(range(config.num_clients))
    runners = [ClientRunner(k, method, clients[k], config, initial_states.get(k))
               for k in range(config.num_clients)]
    errors: list[BaseException] = []

    def client_main(runner):
        try:
            ClientManager(runner, hub.client(runner.client_id)).serve()
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=client_main, args=(r,), daemon=True) for r in runners]
    for th in threads:
        th.start()

    def states():
        return {r.client_id: r.state for r in runners if r.state is not None}

    server = FederatedServer(config, init_params, evaluator, eval_every)
    try:
        ServerManager(server, hub.server(), timeout=timeout, states_provider=states,
                      on_round=on_round).run()
    finally:
        for th in threads:
            th.join(timeout=timeout)
    if errors:
        raise errors[0]
    return TrainingResult(server.params, states(), server.log)


def _client_process(address, client_id, method, data, config, state, timeout):
    import torch
    torch.set_num_threads(1)
    endpoint = SocketClient(address, client_id)
    try:
        ClientManager(ClientRunner(client_id, method, data, config, state), endpoint,
                      timeout=timeout).serve()
    finally:
        endpoint.close()


def run_multiprocess(method, clients: Sequence, config: RoundConfig, init_params: ParameterSet, *,
                     evaluator: Optional[Evaluator] = None, eval_every: int = 1,
                     timeout: float = 600.0,
                     initial_states: Optional[Mapping[int, PersonalState]] = None,
                     on_round: Optional[Callable] = None) -> TrainingResult:
    """One OS process per client, connected to the server over localhost TCP.

    Personal states live in the client processes and are not returned; the evaluator
    receives an empty state mapping.
    """
    if len(clients) != config.num_clients:
        raise ConfigError(f"got {len(clients)} client datasets for num_clients={config.num_clients}")
    if timeout is None or timeout <= 0:
        raise ConfigError("multi-process runs need a finite positive timeout")
    initial_states = initial_states or {}
    ctx = mp.get_context("fork")
    endpoint = SocketServer()
    procs = [ctx.Process(target=_client_process,
                         args=(endpoint.address, k, method, clients[k], config,
                               initial_states.get(k), timeout), daemon=True)
             for k in range(config.num_clients)]
    for p in procs:
        p.start()
    server = FederatedServer(config, init_params, evaluator, eval_every)
    try:
        endpoint.accept(range(config.num_clients), timeout=timeout)
        ServerManager(server, endpoint, timeout=timeout, on_round=on_round).run()
    finally:
        for p in procs:
            p.join(timeout=10)
            if p.is_alive():
                p.terminate()
        endpoint.close()
    return TrainingResult(server.params, {}, server.log)
