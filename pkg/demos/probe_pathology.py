"""Why a single federated classifier mis-scores personalised encoders.

Every client embeds the same data through its own orthogonal map. Each map is a
rotation, so a classifier fitted per client loses nothing, but a classifier shared by
all clients has to serve incompatible feature layouts.

    python demos/probe_pathology.py
"""
import numpy as np
import torch

from ssfl.data import LabeledImages
from ssfl.evaluation import ProbeConfig, naive_federated_probe, personalized_linear_probe
from ssfl.partitioning import ClientShard

C = K = 4


def blobs(n_per, seed):
    g = torch.Generator().manual_seed(seed)
    labels = torch.arange(n_per * C) % C
    return LabeledImages(3.0 * torch.eye(C)[labels] + 0.2 * torch.randn(n_per * C, C, generator=g), labels)


train, test = blobs(60, 1), blobs(30, 2)
tr, te = np.array_split(np.arange(len(train)), K), np.array_split(np.arange(len(test)), K)
shards = [ClientShard(k, tr[k].tolist(), te[k].tolist()) for k in range(K)]
cfg = ProbeConfig(epochs=30, rounds=20, batch_size=64)

for name, maps in (("identical encoders", [torch.eye(C)] * K),
                   ("rotated encoders", [torch.roll(torch.eye(C), k, dims=1) for k in range(K)])):
    encoders = {k: (lambda x, R=maps[k]: x @ R) for k in range(K)}
    per = personalized_linear_probe(encoders, train, shards, test, cfg).mean
    naive = naive_federated_probe(encoders, train, shards, test, cfg).mean
    print(f"{name:20s} personalized {per:.3f}   naive federated {naive:.3f}")
