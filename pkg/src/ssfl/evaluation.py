"""Representation quality: online KNN indicator and linear probes on frozen encoders.

Encoders enter this module as feature functions ``images -> (N, D) features``. They are
only ever called under ``torch.no_grad``; :func:`frozen_features` wraps a network so the
call also runs in eval mode and restores the previous mode afterwards.
"""
from __future__ import annotations

import copy
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import params as P
from .data import LabeledImages, UnlabeledImages
from .fed.core import ClientUpdate, LocalContext, RoundConfig
from .fed.loop import run_training
from .partitioning import ClientShard
from .runtime.trainer import Trainer, accumulated_step, local_batches
from .ssl.losses import simsiam_loss

FeatureFn = Callable[[torch.Tensor], torch.Tensor]

PROTOCOLS = ("knn", "fed_linear", "personalized_linear", "naive_fed_linear")


class ProbeError(ValueError):
    pass


@dataclass
class ProbeResult:
    protocol: str
    client_ids: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    global_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ProbeError(f"unknown protocol {self.protocol!r}")
        if len(self.client_ids) != len(self.accuracies):
            raise ProbeError("client_ids and accuracies differ in length")
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ProbeError("accuracies must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    def to_record(self) -> dict:
        return {"protocol": self.protocol, "mean_accuracy": self.mean,
                "global_accuracy": self.global_accuracy,
                "per_client": [{"client_id": c, "accuracy": a}
                               for c, a in zip(self.client_ids, self.accuracies)]}


# ----------------------------------------------------------------------------- features

class Normalize:
    def __init__(self, mean, std):
        self.mean = torch.tensor(mean).view(1, -1, 1, 1)
        self.std = torch.tensor(std).view(1, -1, 1, 1)

    def __call__(self, x):
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)


@contextmanager
def eval_mode(module: nn.Module):
    was_training = module.training
    module.eval()
    try:
        yield module
    finally:
        module.train(was_training)


def frozen_features(net: nn.Module, preprocess: Optional[Callable] = None,
                    output: str = "backbone") -> FeatureFn:
    """Feature function of a SiameseNet: backbone features or projector outputs z."""
    if output not in ("backbone", "projection"):
        raise ValueError(f"unknown output {output!r}")

    def fn(x):
        with torch.no_grad(), eval_mode(net):
            if preprocess is not None:
                x = preprocess(x)
            return net.encoder.features(x) if output == "backbone" else net.encoder(x)

    return fn


def embed(fn: FeatureFn, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    with torch.no_grad():
        if images.shape[0] == 0:
            raise ProbeError("nothing to embed")
        return torch.cat([fn(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)])


# ----------------------------------------------------------------------------- KNN

def knn_predict(train_feats: torch.Tensor, train_labels: torch.Tensor, test_feats: torch.Tensor,
                k: int = 200, temperature: float = 0.1, num_classes: Optional[int] = None,
                chunk: int = 1024) -> torch.Tensor:
    """Similarity-weighted k-nearest-neighbour vote on L2-normalised features.

    Each neighbour votes for its label with weight exp(cos / temperature). Equal
    similarities are ordered by train index, lowest first.
    """
    n = train_feats.shape[0]
    if n == 0:
        raise ProbeError("KNN needs a non-empty train set")
    if k < 1:
        raise ProbeError("k must be >= 1")
    if k > n:
        warnings.warn(f"k={k} exceeds train size {n}; using k={n}", stacklevel=2)
        k = n
    C = int(train_labels.max()) + 1 if num_classes is None else num_classes
    tr = F.normalize(train_feats.double(), dim=1)
    te = F.normalize(test_feats.double(), dim=1)
    labels = train_labels.long()
    preds = []
    for i in range(0, te.shape[0], chunk):
        sim = te[i:i + chunk] @ tr.T
        top_sim, top_idx = torch.sort(sim, dim=1, descending=True, stable=True)
        top_sim, top_idx = top_sim[:, :k], top_idx[:, :k]
        w = torch.exp((top_sim - 1.0) / temperature)      # shifted for range; argmax unchanged
        scores = torch.zeros(top_idx.shape[0], C, dtype=w.dtype)
        scores.scatter_add_(1, labels[top_idx], w)
        preds.append(scores.argmax(dim=1))
    return torch.cat(preds) if preds else torch.empty(0, dtype=torch.long)


def knn_indicator(encoder: FeatureFn, train_images: torch.Tensor, train_labels: torch.Tensor,
                  test_images: torch.Tensor, test_labels: torch.Tensor, k: int = 200,
                  temperature: float = 0.1, num_classes: Optional[int] = None) -> float:
    """Fraction of test images whose KNN label (over embedded train images) is correct."""
    if test_images.shape[0] == 0:
        raise ProbeError("KNN needs a non-empty test set")
    pred = knn_predict(embed(encoder, train_images), train_labels, embed(encoder, test_images),
                       k, temperature, num_classes)
    return float((pred == test_labels.long()).double().mean())


def _local_test(shard: ClientShard, train: LabeledImages, test: Optional[LabeledImages]):
    if not shard.test_indices:
        return None
    pool = train if shard.test_pool == "train" else test
    if pool is None:
        raise ProbeError(f"client {shard.client_id}: local test indices point at a missing test set")
    return pool.subset(shard.test_indices)


def global_knn_evaluator(template: nn.Module, train: LabeledImages, test: LabeledImages,
                         preprocess=None, k: int = 200, temperature: float = 0.1,
                         output: str = "backbone"):
    """Round callback: KNN of the global model on the global train/test sets."""
    net = copy.deepcopy(template)

    def evaluate(round_idx, global_params, states):
        P.load_into(net, global_params)
        fn = frozen_features(net, preprocess, output)
        return knn_indicator(fn, train.images, train.labels, test.images, test.labels,
                             min(k, len(train)), temperature, train.num_classes)

    return evaluate


def personal_knn_evaluator(template: nn.Module, train: LabeledImages, test: Optional[LabeledImages],
                           shards: Sequence[ClientShard], init_params, preprocess=None,
                           k: int = 200, temperature: float = 0.1, output: str = "backbone"):
    """Round callback: mean over clients of KNN accuracy of each client's personal encoder,
    with the client's own training data as the neighbour bank and its local test data as queries."""
    net = copy.deepcopy(template)
    C = train.num_classes

    def evaluate(round_idx, global_params, states):
        accs = []
        for shard in shards:
            local_test = _local_test(shard, train, test)
            if local_test is None:
                continue
            state = states.get(shard.client_id)
            P.load_into(net, state.theta if state is not None else init_params)
            fn = frozen_features(net, preprocess, output)
            bank = train.subset(shard.train_indices)
            accs.append(knn_indicator(fn, bank.images, bank.labels, local_test.images,
                                      local_test.labels, min(k, len(bank)), temperature, C))
        return float(np.mean(accs)) if accs else None

    return evaluate


# ----------------------------------------------------------------------------- linear probes

@dataclass
class ProbeConfig:
    epochs: int = 100              # central probes
    rounds: int = 50               # federated probes
    local_epochs: int = 1
    clients_per_round: Optional[int] = None
    lr: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 256
    normalize: bool = True
    seed: int = 0


@dataclass(frozen=True)
class LabeledFeatures:
    features: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return self.features.shape[0]


def _prep(feats: torch.Tensor, cfg: ProbeConfig) -> torch.Tensor:
    feats = feats.float()
    return F.normalize(feats, dim=1) if cfg.normalize else feats


def _linear(dim: int, num_classes: int) -> nn.Linear:
    lin = nn.Linear(dim, num_classes)
    nn.init.zeros_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


def _accuracy(lin: nn.Module, feats: torch.Tensor, labels: torch.Tensor) -> float:
    with torch.no_grad():
        return float((lin(feats).argmax(dim=1) == labels).double().mean())


def train_linear_classifier(feats: torch.Tensor, labels: torch.Tensor, num_classes: int,
                            cfg: ProbeConfig) -> nn.Linear:
    """Centralised zero-initialised softmax classifier, SGD with momentum and cosine decay."""
    lin = _linear(feats.shape[1], num_classes)
    opt = torch.optim.SGD(lin.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed)
    n = feats.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=g)
        for idx in torch.split(perm, cfg.batch_size):
            for group in opt.param_groups:
                group["lr"] = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total))
            opt.zero_grad()
            F.cross_entropy(lin(feats[idx]), labels[idx]).backward()
            opt.step()
            step += 1
    return lin


class LinearProbeMethod:
    """Supervised client solver for the federated probe: cross-entropy on frozen features."""

    name = "linear_probe"

    def __init__(self, dim: int, num_classes: int):
        self.template = _linear(dim, num_classes)

    def local_update(self, global_params, data: LabeledFeatures, state, ctx: LocalContext):
        lin = copy.deepcopy(self.template)
        P.load_into(lin, global_params)
        cfg = ctx.config
        opt = torch.optim.SGD(lin.parameters(), lr=ctx.lr, momentum=cfg.momentum,
                              weight_decay=cfg.weight_decay)
        trainer = Trainer(lin, opt, lambda m, idx: F.cross_entropy(m(data.features[idx]), data.labels[idx]))
        plan = local_batches(len(data), cfg.batch_size, 1, ctx.rng, epochs=cfg.local_epochs, min_batch=1)
        losses = [accumulated_step(trainer, g, len(g)) for g in plan]
        loss = sum(losses) / len(losses) if losses else float("nan")
        return ClientUpdate(ctx.client_id, P.subtract(P.from_module(lin), global_params),
                            len(data), loss), state


def _require_labels(train) -> None:
    if not isinstance(train, LabeledImages):
        raise ProbeError("linear probes need labelled training data")


def _fed_probe(client_data: Sequence[LabeledFeatures], num_classes: int, cfg: ProbeConfig) -> nn.Linear:
    dim = client_data[0].features.shape[1]
    method = LinearProbeMethod(dim, num_classes)
    K = len(client_data)
    rc = RoundConfig(num_clients=K, clients_per_round=cfg.clients_per_round or K, rounds=cfg.rounds,
                     lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                     batch_size=cfg.batch_size, accumulation_steps=1,
                     local_epochs=cfg.local_epochs, seed=cfg.seed)
    result = run_training(method, client_data, rc, P.from_module(method.template))
    lin = copy.deepcopy(method.template)
    P.load_into(lin, result.params)
    return lin


def federated_linear_probe(encoder: FeatureFn, train: LabeledImages, shards: Sequence[ClientShard],
                           test: Optional[LabeledImages], cfg: Optional[ProbeConfig] = None) -> ProbeResult:
    """Linear classifier on the frozen global encoder, trained with FedAvg over the shards.

    ``global_accuracy`` is measured on the global test set; the per-client list holds the
    same classifier's accuracy on each client's local test data.
    """
    cfg = cfg or ProbeConfig()
    _require_labels(train)
    C = train.num_classes
    feats = _prep(embed(encoder, train.images), cfg)
    clients = [LabeledFeatures(feats[s.train_indices], train.labels[s.train_indices]) for s in shards]
    lin = _fed_probe(clients, C, cfg)
    global_acc = None
    if test is not None and len(test):
        global_acc = _accuracy(lin, _prep(embed(encoder, test.images), cfg), test.labels)
    ids, accs = [], []
    for s in shards:
        lt = _local_test(s, train, test)
        if lt is None:
            continue
        ids.append(s.client_id)
        accs.append(_accuracy(lin, _prep(embed(encoder, lt.images), cfg), lt.labels))
    return ProbeResult("fed_linear", ids, accs, global_acc)


def personalized_linear_probe(encoders: Mapping[int, FeatureFn], train: LabeledImages,
                              shards: Sequence[ClientShard], test: Optional[LabeledImages],
                              cfg: Optional[ProbeConfig] = None) -> ProbeResult:
    """Per client: classifier trained centrally on the whole labelled training set as seen
    through that client's encoder, evaluated on the client's local test data."""
    cfg = cfg or ProbeConfig()
    _require_labels(train)
    C = train.num_classes
    ids, accs = [], []
    for s in shards:
        if s.client_id not in encoders:
            raise ProbeError(f"no encoder for client {s.client_id}")
        lt = _local_test(s, train, test)
        if lt is None:
            warnings.warn(f"client {s.client_id} has no local test data; skipped", stacklevel=2)
            continue
        fn = encoders[s.client_id]
        lin = train_linear_classifier(_prep(embed(fn, train.images), cfg), train.labels, C, cfg)
        ids.append(s.client_id)
        accs.append(_accuracy(lin, _prep(embed(fn, lt.images), cfg), lt.labels))
    return ProbeResult("personalized_linear", ids, accs)


def naive_federated_probe(encoders: Mapping[int, FeatureFn], train: LabeledImages,
                          shards: Sequence[ClientShard], test: Optional[LabeledImages],
                          cfg: Optional[ProbeConfig] = None) -> ProbeResult:
    """One classifier trained by FedAvg while every client featurises with its own encoder."""
    cfg = cfg or ProbeConfig()
    _require_labels(train)
    C = train.num_classes
    clients = []
    for s in shards:
        if s.client_id not in encoders:
            raise ProbeError(f"no encoder for client {s.client_id}")
        local = train.subset(s.train_indices)
        clients.append(LabeledFeatures(_prep(embed(encoders[s.client_id], local.images), cfg), local.labels))
    lin = _fed_probe(clients, C, cfg)
    ids, accs = [], []
    for s in shards:
        lt = _local_test(s, train, test)
        if lt is None:
            continue
        ids.append(s.client_id)
        accs.append(_accuracy(lin, _prep(embed(encoders[s.client_id], lt.images), cfg), lt.labels))
    return ProbeResult("naive_fed_linear", ids, accs)


# ----------------------------------------------------------------------------- local adaptation

def local_adapt(template: nn.Module, params, data: UnlabeledImages, views, lr: float,
                steps: int = 1, batch_size: int = 32, accumulation_steps: int = 8,
                generator: Optional[torch.Generator] = None):
    """A few plain SGD steps of SimSiam on local unlabeled data; returns new parameters."""
    net = copy.deepcopy(template)
    P.load_into(net, params)
    net.train()
    g = generator if generator is not None else torch.Generator().manual_seed(0)
    images = data.images if hasattr(data, "images") else data
    opt = torch.optim.SGD(net.parameters(), lr=lr)
    trainer = Trainer(net, opt, lambda m, idx: simsiam_loss(m, images[idx], views, g))
    plan = local_batches(len(images), batch_size, accumulation_steps, g, iterations=steps)
    for group in plan:
        accumulated_step(trainer, group, len(group))
    return P.from_module(net)
