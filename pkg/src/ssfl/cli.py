"""Experiment driver: ``ssfl partition | train | evaluate | sweep | plot``.

Experiments are described by a flat ``key = value`` text file (see ``ExperimentConfig``);
any key can also be given as a ``--key value`` flag, which wins over the file. Relative
output directories are resolved against ``$SSFL_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import itertools
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import params as P
from .data import DatasetError, LabeledImages, balanced_subset, load_cifar10, load_npz, make_synthetic_shapes
from .evaluation import (Normalize, ProbeConfig, federated_linear_probe, frozen_features,
                         global_knn_evaluator, local_adapt, naive_federated_probe,
                         personal_knn_evaluator, personalized_linear_probe)
from .fed.core import ConfigError, PersonalState, RoundConfig
from .fed.loop import TrainingResult, run_training, write_metrics
from .partitioning import (ClientShard, PartitionError, PartitionSpec, dirichlet_partition,
                           load_partition, natural_partition_ingest, partition_stats, save_partition,
                           top_class_share)
from .personalization import METHODS, make_method
from .plots import replot, write_curves
from .ssl.augment import AugmentationPolicy, make_generator
from .ssl.checkpoint import load_checkpoint, save_checkpoint
from .ssl.models import ModelConfig, build_model

log = logging.getLogger("ssfl")

OUTPUT_ROOT_ENV = "SSFL_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# documented tuning grids
LR_GRID = (0.1, 0.3, 0.01, 0.03)
LAMBDA_GRID = (1.0, 10.0, 0.1, 0.01, 0.001)

PROBES = ("fed", "personal", "naive")
_FILE_KEYS = {"lam": "lambda"}
_FIELD_OF_KEY = {v: k for k, v in _FILE_KEYS.items()}


def _choice(*options):
    return {"choices": options}


def _range(lo=None, hi=None, lo_open=False, hi_open=False):
    return {"range": (lo, hi, lo_open, hi_open)}


def _f(default, help, **meta):
    return dataclasses.field(default=default, metadata={"help": help, **meta})


@dataclass
class ExperimentConfig:
    # data
    dataset: str = _f("synthetic", "synthetic | cifar10:<dir> | npz:<train.npz>[,<test.npz>]")
    train_size: int = _f(5000, "class-balanced training subset size, 0 = all", **_range(0))
    test_size: int = _f(1000, "class-balanced test subset size, 0 = all", **_range(0))
    image_size: int = _f(32, "synthetic image side length", **_range(8))
    data_seed: int = _f(0, "seed for synthetic data and subsets")
    # partition
    partition: str = _f("dirichlet", "dirichlet | natural", **_choice("dirichlet", "natural"))
    alpha: float = _f(0.5, "Dirichlet concentration", **_range(0, None, lo_open=True))
    num_clients: int = _f(8, "number of clients (dirichlet)", **_range(1))
    partition_seed: int = _f(0, "partition seed")
    mapping: str = _f("", "sample_id,owner_id CSV for natural partitions")
    min_samples: int = _f(100, "natural partitions drop smaller owners", **_range(1))
    test_fraction: float = _f(0.3, "natural partitions: local test share", **_range(0, 1, True, True))
    # model
    arch: str = _f("conv4", "encoder backbone", **_choice("conv4", "resnet18"))
    widths: str = _f("32,64,128,256", "conv4 channel widths, comma separated")
    proj_dim: int = _f(128, "embedding dimension d", **_range(1))
    proj_hidden: int = _f(512, "projection MLP hidden width", **_range(1))
    # augmentation
    crop_min: float = _f(0.2, "smallest random-resized-crop area fraction", **_range(0, 1, lo_open=True))
    # method
    method: str = _f("la", "client solver", **_choice(*METHODS))
    ssl: str = _f("simsiam", "self-supervised objective", **_choice("simsiam", "simclr"))
    temperature: float = _f(0.5, "NT-Xent temperature", **_range(0, None, lo_open=True))
    lam: float = _f(-1.0, "personalisation strength lambda, -1 = method default", **_range(-1))
    inner_steps: int = _f(1, "MAML inner steps M", **_range(0))
    # optimisation
    rounds: int = _f(30, "communication rounds T", **_range(0))
    clients_per_round: int = _f(8, "clients sampled per round m", **_range(1))
    lr: float = _f(0.1, "client learning rate", **_range(0, None, lo_open=True))
    lr_schedule: str = _f("cosine", "per-round schedule", **_choice("cosine", "constant"))
    momentum: float = _f(0.9, "SGD momentum", **_range(0, 1, hi_open=True))
    weight_decay: float = _f(0.0, "SGD weight decay", **_range(0))
    batch: int = _f(32, "micro-batch size", **_range(2))
    accumulation: int = _f(8, "micro-batches per optimizer step", **_range(1))
    local_epochs: int = _f(1, "local epochs per round", **_range(1))
    local_iterations: int = _f(0, "local optimizer steps per round, 0 = use epochs", **_range(0))
    # evaluation
    knn: str = _f("auto", "online KNN monitor", **_choice("auto", "global", "personal", "none"))
    knn_k: int = _f(200, "KNN neighbours", **_range(1))
    knn_temperature: float = _f(0.1, "KNN weighting temperature", **_range(0, None, lo_open=True))
    eval_every: int = _f(5, "KNN every n rounds (and the last)", **_range(1))
    probes: str = _f("fed,personal,naive", "linear probes to run after training, or none")
    probe_epochs: int = _f(100, "central probe epochs", **_range(1))
    probe_rounds: int = _f(50, "federated probe rounds", **_range(1))
    probe_lr: float = _f(1.0, "probe learning rate", **_range(0, None, lo_open=True))
    adapt_steps: int = _f(1, "local adaptation steps for la/maml personal encoders", **_range(0))
    # runtime
    transport: str = _f("direct", "direct | loopback | multiprocess",
                        **_choice("direct", "loopback", "multiprocess"))
    workers: int = _f(1, "client threads for the direct transport", **_range(1))
    checkpoint_every: int = _f(0, "also checkpoint Theta every n rounds, 0 = final only", **_range(0))
    output_dir: str = _f("runs/default", "run directory")
    seed: int = _f(0, "training seed")

    def validate(self) -> "ExperimentConfig":
        for f in fields(self):
            value = getattr(self, f.name)
            key = _FILE_KEYS.get(f.name, f.name)
            if "choices" in f.metadata and value not in f.metadata["choices"]:
                raise ConfigError(f"{key}: {value!r} is not one of {list(f.metadata['choices'])}")
            if "range" in f.metadata:
                lo, hi, lo_open, hi_open = f.metadata["range"]
                if not np.isfinite(value):
                    raise ConfigError(f"{key}: must be finite")
                if lo is not None and (value < lo or (lo_open and value == lo)):
                    raise ConfigError(f"{key}: {value} must be {'>' if lo_open else '>='} {lo}")
                if hi is not None and (value > hi or (hi_open and value == hi)):
                    raise ConfigError(f"{key}: {value} must be {'<' if hi_open else '<='} {hi}")
        if self.lam < 0 and self.lam != -1:
            raise ConfigError(f"lambda: {self.lam} must be >= 0 (or -1 for the method default)")
        if self.partition == "dirichlet" and self.clients_per_round > self.num_clients:
            raise ConfigError(f"clients_per_round: {self.clients_per_round} exceeds num_clients={self.num_clients}")
        if self.partition == "natural" and not self.mapping:
            raise ConfigError("mapping: required for natural partitions")
        if self.ssl == "simclr" and self.method not in ("global", "la"):
            raise ConfigError(f"ssl: simclr is only supported with method global or la, not {self.method}")
        try:
            w = self.width_list
        except ValueError:
            raise ConfigError(f"widths: cannot parse {self.widths!r}") from None
        if not w or min(w) < 1:
            raise ConfigError("widths: need at least one positive width")
        bad = set(self.probe_list) - set(PROBES)
        if bad:
            raise ConfigError(f"probes: unknown probe(s) {sorted(bad)}; choose from {list(PROBES)} or none")
        kind = self.dataset.split(":", 1)[0]
        if kind not in ("synthetic", "cifar10", "npz") or (kind != "synthetic" and ":" not in self.dataset):
            raise ConfigError(f"dataset: unrecognised {self.dataset!r}")
        return self

    @property
    def width_list(self) -> list[int]:
        return [int(w) for w in self.widths.split(",") if w.strip()]

    @property
    def probe_list(self) -> list[str]:
        if self.probes.strip().lower() in ("", "none"):
            return []
        return [p.strip() for p in self.probes.split(",") if p.strip()]

    def round_config(self, num_clients: int) -> RoundConfig:
        return RoundConfig(num_clients=num_clients, clients_per_round=self.clients_per_round,
                           rounds=self.rounds, lr=self.lr, lr_schedule=self.lr_schedule,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           batch_size=self.batch, accumulation_steps=self.accumulation,
                           local_epochs=self.local_epochs,
                           local_iterations=self.local_iterations or None, seed=self.seed)

    def model_config(self, in_channels: int) -> ModelConfig:
        return ModelConfig(arch=self.arch, in_channels=in_channels, widths=self.width_list,
                           proj_dim=self.proj_dim, proj_hidden=self.proj_hidden)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    kind = type(_FIELDS[name].default)
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return raw.lower() in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{_FILE_KEYS.get(name, name)}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def _field_name(key: str) -> str:
    name = _FIELD_OF_KEY.get(key, key)
    if name not in _FIELDS:
        raise ConfigError(f"{key}: unknown configuration key")
    return name


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unset keys keep their defaults."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[_field_name(key)] = _coerce(_field_name(key), raw)
    cfg = dataclasses.replace(base or ExperimentConfig(), **values)
    return cfg.validate()


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{_FILE_KEYS.get(f.name, f.name)} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def resolve_output(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


# ----------------------------------------------------------------------------- data

def _subset(data: LabeledImages, size: int, seed: int) -> LabeledImages:
    if size <= 0 or size >= len(data):
        return data
    per_class = size // data.num_classes
    return data.subset(balanced_subset(data.labels.numpy(), per_class, seed))


def load_dataset(cfg: ExperimentConfig) -> tuple[LabeledImages, LabeledImages]:
    kind, _, arg = cfg.dataset.partition(":")
    if kind == "synthetic":
        s = cfg.data_seed
        return (make_synthetic_shapes(cfg.train_size or 5000, seed=2 * s + 1, size=cfg.image_size),
                make_synthetic_shapes(cfg.test_size or 1000, seed=2 * s + 2, size=cfg.image_size))
    if kind == "cifar10":
        train, test = load_cifar10(arg, train=True), load_cifar10(arg, train=False)
    else:
        paths = arg.split(",")
        train = load_npz(paths[0])
        test = load_npz(paths[1]) if len(paths) > 1 else None
        if test is None:
            raise DatasetError("npz datasets need '<train.npz>,<test.npz>'")
    return _subset(train, cfg.train_size, cfg.data_seed), _subset(test, cfg.test_size, cfg.data_seed + 1)


def make_partition(cfg: ExperimentConfig, train: LabeledImages, test: LabeledImages):
    if cfg.partition == "natural":
        shards = natural_partition_ingest(cfg.mapping, cfg.min_samples, cfg.test_fraction,
                                          seed=cfg.partition_seed)
        top = max(max(s.train_indices + s.test_indices) for s in shards)
        if top >= len(train):
            raise PartitionError(f"mapping refers to sample {top} but the training set has {len(train)}")
        if cfg.clients_per_round > len(shards):
            raise ConfigError(f"clients_per_round: {cfg.clients_per_round} exceeds the "
                              f"{len(shards)} clients in the mapping")
        return None, shards
    spec = PartitionSpec(cfg.alpha, cfg.num_clients, cfg.partition_seed, train.num_classes)
    return spec, dirichlet_partition(train.labels.numpy(), spec, test.labels.numpy())


# ----------------------------------------------------------------------------- runs

@dataclass
class RunArtifacts:
    out_dir: Path
    result: TrainingResult
    probes: dict

    @property
    def final_knn(self) -> Optional[float]:
        vals = [m.knn_accuracy for m in self.result.metrics if m.knn_accuracy is not None]
        return vals[-1] if vals else None


def _views(cfg: ExperimentConfig, train: LabeledImages) -> AugmentationPolicy:
    if train.images.shape[1] == 3:
        return AugmentationPolicy(crop_scale=(cfg.crop_min, 1.0))
    return AugmentationPolicy.identity(train.images.shape[1])


def personal_parameters(cfg: ExperimentConfig, template, global_params, states: Mapping[int, PersonalState],
                        shards: Sequence[ClientShard], train: LabeledImages, views) -> dict:
    """theta_k for two-branch methods, locally adapted global weights for la/maml,
    the global weights themselves for the global baseline."""
    out = {}
    for s in shards:
        k = s.client_id
        if cfg.method in ("per", "bilevel"):
            out[k] = states[k].theta if k in states else global_params
        elif cfg.method in ("la", "maml") and cfg.adapt_steps > 0:
            g = make_generator((cfg.seed, 0xADA, k))
            out[k] = local_adapt(template, global_params, train.unlabeled(s.train_indices), views,
                                 cfg.round_config(len(shards)).lr_at(cfg.rounds), steps=cfg.adapt_steps,
                                 batch_size=cfg.batch, accumulation_steps=cfg.accumulation, generator=g)
        else:
            out[k] = global_params
    return out


def run_probes(cfg: ExperimentConfig, template, global_params, personal: Mapping[int, dict],
               train: LabeledImages, test: LabeledImages, shards, preprocess) -> dict:
    pc = ProbeConfig(epochs=cfg.probe_epochs, rounds=cfg.probe_rounds, lr=cfg.probe_lr, seed=cfg.seed)
    results = {}
    if "fed" in cfg.probe_list:
        net = copy.deepcopy(template)
        P.load_into(net, global_params)
        results["fed_linear"] = federated_linear_probe(frozen_features(net, preprocess), train,
                                                       shards, test, pc).to_record()
    if {"personal", "naive"} & set(cfg.probe_list):
        encoders = {}
        for k, params in personal.items():
            net = copy.deepcopy(template)
            P.load_into(net, params)
            encoders[k] = frozen_features(net, preprocess)
        if "personal" in cfg.probe_list:
            results["personalized_linear"] = personalized_linear_probe(encoders, train, shards, test, pc).to_record()
        if "naive" in cfg.probe_list:
            results["naive_fed_linear"] = naive_federated_probe(encoders, train, shards, test, pc).to_record()
    return results


def _knn_mode(cfg: ExperimentConfig) -> str:
    if cfg.knn != "auto":
        return cfg.knn
    return "personal" if cfg.method in ("per", "bilevel") else "global"


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunArtifacts:
    """partition -> train -> evaluate, writing every artifact under the run directory."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else resolve_output(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg))

    train, test = load_dataset(cfg)
    spec, shards = make_partition(cfg, train, test)
    save_partition(out / "partition.json", shards, spec)
    K = len(shards)
    rc = cfg.round_config(K)

    mcfg = cfg.model_config(train.images.shape[1])
    template = build_model(mcfg, seed=cfg.seed)
    init = P.from_module(template)
    views = _views(cfg, train)
    preprocess = Normalize(views.mean, views.std)
    method = make_method(cfg.method, template, views, lam=None if cfg.lam < 0 else cfg.lam, inner_steps=cfg.inner_steps,
                         ssl=cfg.ssl, temperature=cfg.temperature)

    mode = _knn_mode(cfg)
    evaluator = None
    if mode == "global":
        evaluator = global_knn_evaluator(template, train, test, preprocess, cfg.knn_k, cfg.knn_temperature)
    elif mode == "personal":
        evaluator = personal_knn_evaluator(template, train, test, shards, init, preprocess,
                                           cfg.knn_k, cfg.knn_temperature)
    clients = [train.unlabeled(s.train_indices) for s in shards]
    manifest = {"model": mcfg.to_dict(), "method": cfg.method, "rounds": cfg.rounds}

    def periodic(m, params, states):
        if cfg.checkpoint_every and (m.round + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoints" / f"global_round{m.round + 1:04d}.npz", params,
                            {**manifest, "round": m.round + 1})

    result = run_training(method, clients, rc, init, evaluator=evaluator, eval_every=cfg.eval_every,
                          max_workers=cfg.workers if cfg.transport == "direct" else 1,
                          on_round=periodic, transport=cfg.transport)

    write_metrics(out / "metrics.jsonl", result.metrics)
    save_checkpoint(out / "checkpoints" / "global.npz", result.params, manifest)
    for k, st in sorted(result.states.items()):
        save_checkpoint(out / "checkpoints" / f"personal_{k}.npz", st.theta,
                        {**manifest, "client_id": k, "lambda": st.lam})

    probes = {}
    if cfg.probe_list:
        personal = personal_parameters(cfg, template, result.params, result.states, shards, train, views)
        probes = run_probes(cfg, template, result.params, personal, train, test, shards, preprocess)
    (out / "probes.json").write_text(json.dumps(probes, indent=1, sort_keys=True) + "\n")
    write_curves(out, result.metrics, title=f"{cfg.method} / {cfg.ssl}")
    return RunArtifacts(out, result, probes)


def evaluate_run(run_dir) -> dict:
    """Re-run the configured probes from a finished run's checkpoints."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.txt")
    train, test = load_dataset(cfg)
    _, shards = load_partition(run_dir / "partition.json")
    global_params, manifest = load_checkpoint(run_dir / "checkpoints" / "global.npz")
    template = build_model(ModelConfig.from_dict(manifest["model"]), seed=cfg.seed)
    states = {}
    for s in shards:
        path = run_dir / "checkpoints" / f"personal_{s.client_id}.npz"
        if path.exists():
            theta, meta = load_checkpoint(path)
            states[s.client_id] = PersonalState(s.client_id, theta, lam=meta.get("lambda", 0.0))
    views = _views(cfg, train)
    preprocess = Normalize(views.mean, views.std)
    personal = personal_parameters(cfg, template, global_params, states, shards, train, views)
    probes = run_probes(cfg, template, global_params, personal, train, test, shards, preprocess)
    (run_dir / "probes.json").write_text(json.dumps(probes, indent=1, sort_keys=True) + "\n")
    return probes


# ----------------------------------------------------------------------------- sweeps

def parse_grid(items: Sequence[str]) -> dict[str, list]:
    """``["lr=0.1,0.03", "lambda=1,0.1"]`` -> {"lr": [0.1, 0.03], "lam": [1.0, 0.1]}."""
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid axis {item!r}: expected key=v1,v2,...")
        key, raw = item.split("=", 1)
        name = _field_name(key.strip())
        values = [v for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"grid axis {key}: no values")
        grid[name] = [_coerce(name, v) for v in values]
    return grid


def _score(art: RunArtifacts, metric: str) -> Optional[float]:
    if metric == "final_knn":
        return art.final_knn
    rec = art.probes.get(metric)
    return None if rec is None else rec["mean_accuracy"]


def select_best(rows: Sequence[dict]) -> list[dict]:
    """Mark the highest-scoring row of every method; ties keep the first cell."""
    best: dict[str, int] = {}
    for i, r in enumerate(rows):
        s = r["score"]
        if s is None:
            continue
        j = best.get(r["method"])
        if j is None or s > rows[j]["score"]:
            best[r["method"]] = i
    return [{**r, "best": best.get(r["method"]) == i} for i, r in enumerate(rows)]


def sweep(base: ExperimentConfig, grid: Mapping[str, Sequence], metric: str = "final_knn",
          out_dir=None, runner: Callable[[ExperimentConfig, Path], RunArtifacts] = run_experiment) -> list[dict]:
    """Run every cell of the cartesian grid in its own subdirectory, sequentially.

    All cells share the base config's data and partition seeds. Writes ``summary.json``
    and ``summary.tsv`` with one row per cell and a per-method ``best`` flag.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep grid is empty")
    out = Path(out_dir) if out_dir is not None else resolve_output(base)
    keys = list(grid)
    rows = []
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        changes = dict(zip(keys, combo))
        cfg = base.replace(**changes).validate()
        tag = "_".join(f"{_FILE_KEYS.get(k, k)}={v}" for k, v in changes.items())
        cell_dir = out / f"cell{i:03d}_{tag}"
        art = runner(cfg, cell_dir)
        rows.append({"cell": i, "dir": str(cell_dir), "method": cfg.method,
                     **{_FILE_KEYS.get(k, k): v for k, v in changes.items()},
                     "metric": metric, "score": _score(art, metric)})
    rows = select_best(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(rows, indent=1) + "\n")
    cols = list(rows[0])
    tsv = ["\t".join(cols)] + ["\t".join(str(r[c]) for c in cols) for r in rows]
    (out / "summary.tsv").write_text("\n".join(tsv) + "\n")
    return rows


# ----------------------------------------------------------------------------- argparse

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value experiment file")
    g = p.add_argument_group("experiment overrides")
    for f in fields(ExperimentConfig):
        key = _FILE_KEYS.get(f.name, f.name)
        flags = [f"--{key}"] + ([f"--{f.name}"] if key != f.name else [])
        g.add_argument(*flags, dest=f"cfg_{f.name}", metavar=key.upper(), default=None,
                       help=f"{f.metadata.get('help', '')} (default {f.default})")


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    for f in fields(ExperimentConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            changes[f.name] = _coerce(f.name, raw)
    return dataclasses.replace(cfg, **changes).validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("partition", help="split the dataset across clients and report statistics")
    _add_config_flags(p)
    p.add_argument("--out", help="partition JSON path (default <output_dir>/partition.json)")

    p = sub.add_parser("train", help="train, evaluate and write all artifacts")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="re-run linear probes from a run directory")
    p.add_argument("run_dir")

    p = sub.add_parser("sweep", help="grid over config keys")
    _add_config_flags(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="grid axis, repeatable (e.g. --grid lr=0.1,0.03 --grid lambda=1,0.1)")
    p.add_argument("--metric", default="final_knn",
                   choices=["final_knn", "fed_linear", "personalized_linear", "naive_fed_linear"])

    p = sub.add_parser("plot", help="re-render curves.png from curves.json")
    p.add_argument("path", help="run directory or curves.json")
    p.add_argument("--out")
    return parser


def _cmd_partition(args) -> int:
    cfg = config_from_args(args)
    train, test = load_dataset(cfg)
    spec, shards = make_partition(cfg, train, test)
    out = Path(args.out) if args.out else resolve_output(cfg) / "partition.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    hist = partition_stats(shards, train.labels.numpy(), train.num_classes)
    save_partition(out, shards, spec, class_counts=hist.tolist())
    print(f"{len(shards)} clients, sizes {[s.num_train for s in shards]}, "
          f"mean top-class share {top_class_share(hist):.3f} -> {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    art = run_experiment(config_from_args(args))
    last = art.result.metrics[-1].to_record() if art.result.metrics else {}
    print(json.dumps({"out_dir": str(art.out_dir), "final": last,
                      "probes": {k: v["mean_accuracy"] for k, v in art.probes.items()}}, sort_keys=True))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    probes = evaluate_run(args.run_dir)
    print(json.dumps({k: v["mean_accuracy"] for k, v in probes.items()}, sort_keys=True))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    base = config_from_args(args)
    rows = sweep(base, parse_grid(args.grid), args.metric)
    for r in rows:
        print("\t".join(f"{k}={v}" for k, v in r.items() if k != "dir"))
    return EXIT_OK


def _cmd_plot(args) -> int:
    path = Path(args.path)
    data = path / "curves.json" if path.is_dir() else path
    if not data.exists():
        raise FileNotFoundError(f"no curve data at {data}")
    print(replot(data, args.out))
    return EXIT_OK


_COMMANDS = {"partition": _cmd_partition, "train": _cmd_train, "evaluate": _cmd_evaluate,
             "sweep": _cmd_sweep, "plot": _cmd_plot}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.verb](args)
    except (ConfigError, PartitionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
