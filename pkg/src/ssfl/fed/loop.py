"""The federated training loop: sample, broadcast, local solve, aggregate."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Protocol, Sequence

from .. import params as P
from ..params import ParameterSet
from .core import (ClientUpdate, ConfigError, LocalContext, PersonalState, RoundConfig,
                   RoundMetrics, client_generator, sample_clients, weighted_aggregate)

Evaluator = Callable[[int, ParameterSet, Mapping[int, PersonalState]], Optional[float]]


class ClientFailure(RuntimeError):
    def __init__(self, client_id: int, round_idx: int, cause: BaseException):
        super().__init__(f"client {client_id} failed in round {round_idx}: {cause!r}")
        self.client_id = client_id
        self.round = round_idx
        self.cause = cause


class ClientSSLOpt(Protocol):
    """Local solver run on each sampled client.

    Returns the client's update for the server and its (possibly new) personal state.
    Must only read ``data``'s images, never labels.
    """

    name: str

    def local_update(self, global_params: ParameterSet, data, state: Optional[PersonalState],
                     ctx: LocalContext) -> tuple[ClientUpdate, Optional[PersonalState]]:
        ...


class ClientRunner:
    """Client-side half of a round; owns the client's data and personal state."""

    def __init__(self, client_id: int, method: ClientSSLOpt, data, config: RoundConfig,
                 state: Optional[PersonalState] = None):
        self.client_id = client_id
        self.method = method
        self.data = data
        self.config = config
        self.state = state

    def train(self, round_idx: int, global_params: ParameterSet) -> ClientUpdate:
        ctx = LocalContext(round=round_idx, client_id=self.client_id,
                           lr=self.config.lr_at(round_idx), config=self.config,
                           rng=client_generator(self.config.seed, round_idx, self.client_id))
        try:
            update, state = self.method.local_update(global_params, self.data, self.state, ctx)
        except Exception as exc:
            raise ClientFailure(self.client_id, round_idx, exc) from exc
        if update.client_id != self.client_id:
            raise ClientFailure(self.client_id, round_idx,
                                ValueError(f"update carries client id {update.client_id}"))
        self.state = state
        return update


class FederatedServer:
    """Server-side half: owns the global parameters and the metrics log."""

    def __init__(self, config: RoundConfig, init_params: ParameterSet,
                 evaluator: Optional[Evaluator] = None, eval_every: int = 1):
        self.config = config
        self.params = P.clone(init_params)
        self.evaluator = evaluator
        self.eval_every = max(1, eval_every)
        self.log: list[RoundMetrics] = []
        self._t0 = 0.0

    def begin_round(self, round_idx: int) -> list[int]:
        self._t0 = time.perf_counter()
        return sample_clients(round_idx, self.config)

    def finish_round(self, round_idx: int, participants: Sequence[int],
                     updates: Sequence[ClientUpdate],
                     states: Mapping[int, PersonalState]) -> RoundMetrics:
        got = sorted(u.client_id for u in updates)
        if got != sorted(participants):
            raise RuntimeError(f"round {round_idx}: expected updates from {sorted(participants)}, got {got}")
        self.params = weighted_aggregate(self.params, updates)
        if not P.all_finite(self.params):
            raise FloatingPointError(f"round {round_idx}: aggregated parameters are not finite")
        # clients that took no step report NaN and are left out of the mean
        scored = [u for u in sorted(updates, key=lambda u: u.client_id) if math.isfinite(u.train_loss)]
        total = sum(u.num_samples for u in scored)
        loss = sum(u.num_samples * u.train_loss for u in scored) / total if total else float("nan")
        knn = None
        last = round_idx == self.config.rounds - 1
        if self.evaluator is not None and ((round_idx + 1) % self.eval_every == 0 or last):
            knn = self.evaluator(round_idx, self.params, states)
        m = RoundMetrics(round=round_idx, participants=sorted(participants),
                         mean_train_loss=float(loss), knn_accuracy=knn,
                         wall_time_s=time.perf_counter() - self._t0)
        self.log.append(m)
        return m


@dataclass
class TrainingResult:
    params: ParameterSet
    states: Dict[int, PersonalState]
    metrics: list[RoundMetrics] = field(default_factory=list)


def run_training(method: ClientSSLOpt, clients: Sequence, config: RoundConfig,
                 init_params: ParameterSet, *, evaluator: Optional[Evaluator] = None,
                 eval_every: int = 1, max_workers: int = 1,
                 initial_states: Optional[Mapping[int, PersonalState]] = None,
                 on_round: Optional[Callable[[RoundMetrics, ParameterSet, Mapping], None]] = None,
                 transport: str = "direct", timeout: Optional[float] = None,
                 ) -> TrainingResult:
    """Run ``config.rounds`` synchronous rounds of federated training.

    ``clients[k]`` is client k's unlabeled local data. Clients of one round may run on a
    thread pool (``max_workers > 1``); every client draws from its own RNG stream and
    updates are merged in client order, so the result is the same either way.

    ``transport`` selects in-process calls (``"direct"``), the message-passing runtime
    over in-memory queues (``"loopback"``) or one process per client over local sockets
    (``"multiprocess"``). ``timeout`` bounds the wait for client updates in the latter two.
    """
    if transport != "direct":
        from ..runtime import managers
        if transport == "loopback":
            return managers.run_loopback(method, clients, config, init_params, evaluator=evaluator,
                                         eval_every=eval_every, timeout=timeout,
                                         initial_states=initial_states, on_round=on_round)
        if transport == "multiprocess":
            return managers.run_multiprocess(method, clients, config, init_params,
                                             evaluator=evaluator, eval_every=eval_every,
                                             timeout=timeout or 600.0, initial_states=initial_states,
                                             on_round=on_round)
        raise ConfigError(f"unknown transport {transport!r}")
    if len(clients) != config.num_clients:
        raise ConfigError(f"got {len(clients)} client datasets for num_clients={config.num_clients}")
    initial_states = initial_states or {}
    runners = [ClientRunner(k, method, clients[k], config, initial_states.get(k))
               for k in range(config.num_clients)]
    server = FederatedServer(config, init_params, evaluator, eval_every)

    pool = ThreadPoolExecutor(max_workers) if max_workers > 1 else None
    try:
        for t in range(config.rounds):
            participants = server.begin_round(t)
            broadcast = server.params
            if pool is None:
                updates = [runners[k].train(t, broadcast) for k in participants]
            else:
                futures = [pool.submit(runners[k].train, t, broadcast) for k in participants]
                updates = [f.result() for f in futures]
            states = {r.client_id: r.state for r in runners if r.state is not None}
            m = server.finish_round(t, participants, updates, states)
            if on_round is not None:
                on_round(m, server.params, states)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    states = {r.client_id: r.state for r in runners if r.state is not None}
    return TrainingResult(server.params, states, server.log)


def metrics_lines(metrics: Sequence[RoundMetrics], include_time: bool = False) -> str:
    return "".join(json.dumps(m.to_record(include_time), sort_keys=True) + "\n" for m in metrics)


def write_metrics(path, metrics: Sequence[RoundMetrics], include_time: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_lines(metrics, include_time))
    return path


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
