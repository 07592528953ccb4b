"""How the Dirichlet concentration controls label skew across clients.

    python demos/partition_skew.py
"""
import numpy as np

from ssfl.partitioning import PartitionSpec, dirichlet_partition, partition_stats, top_class_share

labels = np.arange(5000) % 10
for alpha in (0.1, 0.5, 1.0, 10.0, 100.0):
    shares = []
    for seed in range(20):
        hist = partition_stats(dirichlet_partition(labels, PartitionSpec(alpha, 8, seed)), labels, 10)
        shares.append(top_class_share(hist))
    print(f"alpha={alpha:<6g} mean top-class share {np.mean(shares):.3f}")

hist = partition_stats(dirichlet_partition(labels, PartitionSpec(0.5, 8, 0)), labels, 10)
print("\nclass histogram per client, alpha=0.5, seed 0")
for k, row in enumerate(hist):
    print(f"client {k}: " + " ".join(f"{c:4d}" for c in row))
