"""Round configuration, client sampling, updates and sample-weighted aggregation."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
import torch

from .. import params as P
from ..params import ParameterSet
from ..ssl.augment import make_generator

_SAMPLING_STREAM = 0x5A17


class ConfigError(ValueError):
    pass


class AggregationError(ValueError):
    pass


@dataclass
class RoundConfig:
    num_clients: int
    clients_per_round: int
    rounds: int
    lr: float = 0.1
    lr_schedule: str = "cosine"          # cosine | constant
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32                 # micro-batch
    accumulation_steps: int = 8          # effective batch = batch_size * accumulation_steps
    local_epochs: int = 1
    local_iterations: Optional[int] = None   # overrides local_epochs when set
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError(
                f"clients_per_round must be in [1, {self.num_clients}], got {self.clients_per_round}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise ConfigError("batch_size and accumulation_steps must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.local_iterations is not None and self.local_iterations < 1:
            raise ConfigError("local_iterations must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation_steps

    def lr_at(self, round_idx: int) -> float:
        if self.lr_schedule == "constant" or self.rounds <= 1:
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * round_idx / self.rounds))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClientUpdate:
    client_id: int
    delta: ParameterSet
    num_samples: int
    train_loss: float = float("nan")

    def __post_init__(self):
        if self.num_samples < 0:
            raise AggregationError("num_samples must be >= 0")


@dataclass
class PersonalState:
    """Client-resident personalised parameters; never aggregated."""

    client_id: int
    theta: ParameterSet
    optimizer_state: dict = field(default_factory=dict)
    lam: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")


@dataclass
class LocalContext:
    """Everything a client needs for one round besides the model and its data."""

    round: int
    client_id: int
    lr: float
    config: RoundConfig
    rng: torch.Generator

    def substream(self, tag: int) -> torch.Generator:
        """An independent generator for a secondary consumer (personal branch, B' batches)."""
        return make_generator((self.config.seed, self.round, self.client_id, tag))


def client_generator(seed: int, round_idx: int, client_id: int) -> torch.Generator:
    """Per-(seed, round, client) stream so scheduling order cannot change results."""
    return make_generator((seed, round_idx, client_id))


def sample_clients(round_idx: int, config: RoundConfig) -> list[int]:
    """Uniform subset of ``clients_per_round`` clients, sorted, reproducible per (seed, round)."""
    if config.clients_per_round == config.num_clients:
        return list(range(config.num_clients))
    rng = np.random.default_rng([config.seed, round_idx, _SAMPLING_STREAM])
    picked = rng.choice(config.num_clients, size=config.clients_per_round, replace=False)
    return sorted(int(k) for k in picked)


def weighted_aggregate(base: ParameterSet, updates: Sequence[ClientUpdate]) -> ParameterSet:
    """base + sum_k (n_k / sum_j n_j) * delta_k over the round's participants.

    Updates are summed in ascending client order in float64 and cast back, so the
    result does not depend on arrival order.
    """
    if not updates:
        raise AggregationError("no updates to aggregate")
    total = sum(u.num_samples for u in updates)
    if total <= 0:
        raise AggregationError("total sample count is zero")
    ordered = sorted(updates, key=lambda u: u.client_id)
    for u in ordered:
        try:
            P.check_compatible(base, u.delta)
        except P.IncompatibleParameters as exc:
            raise AggregationError(f"client {u.client_id}: {exc}") from exc
    out = OrderedDict()
    for name, t in base.items():
        acc = t.to(torch.float64).clone()
        for u in ordered:
            acc += (u.num_samples / total) * u.delta[name].to(torch.float64)
        out[name] = acc.to(t.dtype)
    return out


@dataclass
class RoundMetrics:
    round: int
    participants: list
    mean_train_loss: float
    knn_accuracy: Optional[float] = None
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_record(self, include_time: bool = False) -> dict[str, Any]:
        loss = self.mean_train_loss
        rec = {"round": self.round, "participants": list(self.participants),
               "mean_train_loss": loss if math.isfinite(loss) else None, "knn_accuracy": self.knn_accuracy}
        if include_time:
            rec["wall_time_s"] = self.wall_time_s
        rec.update(self.extra)
        return rec
