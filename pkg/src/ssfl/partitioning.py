"""Client data shards: Dirichlet label-skew partitioning and natural-partition ingestion."""
from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

MAX_REDRAWS = 10


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    alpha: float
    num_clients: int
    seed: int = 0
    num_classes: int = 10

    def __post_init__(self):
        if not self.alpha > 0:
            raise PartitionError(f"alpha must be > 0, got {self.alpha}")
        if self.num_clients < 1:
            raise PartitionError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.num_classes < 1:
            raise PartitionError(f"num_classes must be >= 1, got {self.num_classes}")


@dataclass
class ClientShard:
    """Sample indices owned by one client.

    ``test_pool`` says which dataset ``test_indices`` refer to: ``"train"`` when the
    local test split was carved out of the client's own samples (natural partitions),
    ``"test"`` when it was drawn from a separate global test set (synthetic partitions).
    """

    client_id: int
    train_indices: list[int]
    test_indices: list[int] = field(default_factory=list)
    test_pool: str = "test"
    owner: Optional[str] = None

    def __post_init__(self):
        self.train_indices = [int(i) for i in self.train_indices]
        self.test_indices = [int(i) for i in self.test_indices]
        if len(set(self.train_indices)) != len(self.train_indices):
            raise PartitionError(f"client {self.client_id}: duplicate train indices")
        if len(set(self.test_indices)) != len(self.test_indices):
            raise PartitionError(f"client {self.client_id}: duplicate test indices")
        if self.test_pool not in ("train", "test"):
            raise PartitionError(f"unknown test_pool {self.test_pool!r}")
        if self.test_pool == "train" and set(self.train_indices) & set(self.test_indices):
            raise PartitionError(f"client {self.client_id}: train and test indices overlap")

    @property
    def num_train(self) -> int:
        return len(self.train_indices)

    @property
    def num_test(self) -> int:
        return len(self.test_indices)


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing exactly to ``total``; leftovers go to the largest fractional parts."""
    raw = total * np.asarray(proportions, dtype=np.float64)
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _validate_labels(labels, num_classes: int, what: str) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise PartitionError(f"{what} must be one-dimensional")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise PartitionError(f"{what} must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def dirichlet_partition(labels: Sequence[int], spec: PartitionSpec,
                        test_labels: Optional[Sequence[int]] = None) -> list[ClientShard]:
    """Split a labelled dataset over ``spec.num_clients`` clients with Dir(alpha) label skew.

    For every class one proportion vector over clients is drawn from Dir(alpha) and the
    class's samples are dealt out by largest-remainder rounding. When ``test_labels`` is
    given, the global test set is split with the same per-class proportions so that each
    client's local test data mirrors its training label mix.

    A draw that leaves some client without training samples is repeated with a fresh
    sub-seed, at most ``MAX_REDRAWS`` times.
    """
    labels = _validate_labels(labels, spec.num_classes, "labels")
    if labels.size == 0:
        raise PartitionError("empty label list")
    if spec.num_clients > labels.size:
        raise PartitionError(
            f"num_clients={spec.num_clients} exceeds number of samples {labels.size}")
    tlabels = None if test_labels is None else _validate_labels(
        test_labels, spec.num_classes, "test_labels")

    K = spec.num_clients
    if K == 1:
        test = [] if tlabels is None else list(range(tlabels.size))
        return [ClientShard(0, list(range(labels.size)), test)]

    by_class = [np.flatnonzero(labels == c) for c in range(spec.num_classes)]
    test_by_class = None if tlabels is None else [
        np.flatnonzero(tlabels == c) for c in range(spec.num_classes)]

    for attempt in range(MAX_REDRAWS + 1):
        rng = np.random.default_rng([spec.seed, attempt])
        train = [[] for _ in range(K)]
        test = [[] for _ in range(K)]
        for c in range(spec.num_classes):
            p = rng.dirichlet(np.full(K, spec.alpha))
            _deal(rng.permutation(by_class[c]), p, train)
            if test_by_class is not None:
                _deal(rng.permutation(test_by_class[c]), p, test)
        if all(train):
            return [ClientShard(k, sorted(train[k]), sorted(test[k])) for k in range(K)]
    raise PartitionError(
        f"some client received no samples after {MAX_REDRAWS} re-draws "
        f"(alpha={spec.alpha}, num_clients={K})")


def _deal(indices: np.ndarray, proportions: np.ndarray, out: list[list[int]]) -> None:
    counts = largest_remainder(indices.size, proportions)
    start = 0
    for k, n in enumerate(counts):
        out[k].extend(indices[start:start + n].tolist())
        start += n


MappingSource = Union[str, os.PathLike, Iterable[Sequence]]


def _read_mapping_rows(mapping: MappingSource) -> list[tuple[int, Sequence]]:
    if isinstance(mapping, (str, os.PathLike)):
        path = Path(mapping)
        if not path.exists():
            raise PartitionError(f"mapping file not found: {path}")
        text = path.read_text()
        try:
            dialect = csv.Sniffer().sniff(text.splitlines()[0] if text else ",", delimiters=",\t;")
        except csv.Error:
            dialect = csv.excel
        rows = list(csv.reader(text.splitlines(), dialect))
    else:
        rows = [list(r) for r in mapping]
    # row numbers are 1-based as in a text editor
    numbered = [(i + 1, r) for i, r in enumerate(rows) if r and any(str(x).strip() for x in r)]
    if numbered and str(numbered[0][1][0]).strip().lower() in ("sample_id", "sample", "image_id"):
        numbered = numbered[1:]
    return numbered


def natural_partition_ingest(mapping: MappingSource, min_samples: int = 100,
                             test_fraction: float = 0.3, seed: int = 0) -> list[ClientShard]:
    """Build shards from a sample-to-owner table, as for naturally partitioned data.

    Owners with fewer than ``min_samples`` samples are dropped. Each remaining owner keeps
    ``floor(test_fraction * n)`` randomly chosen samples as local test data. Client ids are
    assigned in sorted owner order.
    """
    if not 0 < test_fraction < 1:
        raise PartitionError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rows = _read_mapping_rows(mapping)
    if not rows:
        raise PartitionError("mapping is empty")

    owners: dict[str, list[int]] = defaultdict(list)
    seen: dict[int, int] = {}
    for lineno, row in rows:
        if len(row) != 2:
            raise PartitionError(f"row {lineno}: expected 2 columns (sample_id, owner_id), got {len(row)}")
        raw_sample, raw_owner = (str(x).strip() for x in row)
        try:
            sample = int(raw_sample)
        except ValueError:
            raise PartitionError(f"row {lineno}: sample_id {raw_sample!r} is not an integer") from None
        if sample < 0:
            raise PartitionError(f"row {lineno}: negative sample_id {sample}")
        if not raw_owner:
            raise PartitionError(f"row {lineno}: empty owner_id")
        if sample in seen:
            raise PartitionError(f"row {lineno}: sample_id {sample} already assigned on row {seen[sample]}")
        seen[sample] = lineno
        owners[raw_owner].append(sample)

    def owner_key(o: str):
        return (0, int(o), o) if o.lstrip("-").isdigit() else (1, 0, o)

    kept = [o for o in sorted(owners, key=owner_key) if len(owners[o]) >= min_samples]
    if not kept:
        raise PartitionError(f"all {len(owners)} clients have fewer than {min_samples} samples")

    shards = []
    for cid, owner in enumerate(kept):
        samples = np.array(sorted(owners[owner]), dtype=np.int64)
        rng = np.random.default_rng([seed, cid])
        perm = rng.permutation(samples)
        n_test = math.floor(test_fraction * samples.size + 1e-9)
        shards.append(ClientShard(cid, sorted(perm[n_test:].tolist()), sorted(perm[:n_test].tolist()),
                                  test_pool="train", owner=owner))
    return shards


def partition_stats(shards: Sequence[ClientShard], labels: Sequence[int],
                    num_classes: Optional[int] = None) -> np.ndarray:
    """Per-client class histogram of training samples, shape (num_clients, num_classes)."""
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    hist = np.zeros((len(shards), num_classes), dtype=np.int64)
    for row, shard in enumerate(shards):
        idx = np.asarray(shard.train_indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= labels.size):
            raise PartitionError(f"client {shard.client_id}: index out of range for labels")
        hist[row] = np.bincount(labels[idx], minlength=num_classes)[:num_classes]
    return hist


def top_class_share(hist: np.ndarray) -> float:
    """Mean over clients of the largest class's share of that client's samples."""
    hist = np.asarray(hist, dtype=np.float64)
    totals = hist.sum(axis=1)
    nonempty = totals > 0
    return float((hist[nonempty].max(axis=1) / totals[nonempty]).mean())


def save_partition(path: Union[str, os.PathLike], shards: Sequence[ClientShard],
                   spec: Optional[PartitionSpec] = None, **extra) -> None:
    doc = {
        "spec": None if spec is None else asdict(spec),
        **extra,
        "shards": [
            {"client_id": s.client_id, "owner": s.owner, "test_pool": s.test_pool,
             "train_indices": s.train_indices, "test_indices": s.test_indices}
            for s in shards
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_partition(path: Union[str, os.PathLike]) -> tuple[Optional[PartitionSpec], list[ClientShard]]:
    doc = json.loads(Path(path).read_text())
    spec = None if doc.get("spec") is None else PartitionSpec(**doc["spec"])
    shards = [ClientShard(s["client_id"], s["train_indices"], s.get("test_indices", []),
                          test_pool=s.get("test_pool", "test"), owner=s.get("owner"))
              for s in doc["shards"]]
    return spec, shards
