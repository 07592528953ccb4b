"""SimSiam and SimCLR objectives."""
from __future__ import annotations

from typing import Callable, Optional

import torch
import torch.nn.functional as F

ViewFn = Callable[[torch.Tensor, torch.Generator], torch.Tensor]


class LossInputError(ValueError):
    pass


def negative_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """D(p, z) = -<p, z> / (|p| |z|), averaged over rows for 2-d inputs.

    Gradients flow into both arguments; callers detach ``z`` where a stop-gradient is
    wanted. Zero vectors have no direction and are rejected.
    """
    if p.shape != z.shape:
        raise LossInputError(f"shape mismatch {tuple(p.shape)} vs {tuple(z.shape)}")
    pn = torch.linalg.vector_norm(p, dim=-1)
    zn = torch.linalg.vector_norm(z, dim=-1)
    if bool((pn == 0).any()) or bool((zn == 0).any()):
        raise LossInputError("negative cosine of a zero vector is undefined")
    d = -(p * z).sum(dim=-1) / (pn * zn)
    return d.mean() if d.ndim else d


def symmetric_simsiam(p1, p2, z1, z2) -> torch.Tensor:
    """[D(p1, sg(z2)) + D(p2, sg(z1))] / 2."""
    return 0.5 * (negative_cosine(p1, z2.detach()) + negative_cosine(p2, z1.detach()))


def two_views(batch: torch.Tensor, views: ViewFn, rng: torch.Generator):
    if batch.shape[0] == 0:
        raise LossInputError("empty batch")
    return views(batch, rng), views(batch, rng)


def simsiam_forward(net, x1: torch.Tensor, x2: torch.Tensor):
    """Returns (loss, (z1, z2, p1, p2)) for an already-augmented pair of views."""
    z1, p1 = net(x1)
    z2, p2 = net(x2)
    return symmetric_simsiam(p1, p2, z1, z2), (z1, z2, p1, p2)


def simsiam_loss(net, batch: torch.Tensor, views: ViewFn, rng: torch.Generator) -> torch.Tensor:
    """Symmetrised SimSiam loss of ``net`` on two random views of ``batch``."""
    x1, x2 = two_views(batch, views, rng)
    loss, _ = simsiam_forward(net, x1, x2)
    return loss


def nt_xent(h1: torch.Tensor, h2: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """Normalised-temperature cross entropy over the 2n views of n positive pairs."""
    n = h1.shape[0]
    if n < 2:
        raise LossInputError("NT-Xent needs at least 2 samples (no negatives otherwise)")
    if temperature <= 0:
        raise LossInputError("temperature must be positive")
    h = F.normalize(torch.cat([h1, h2], dim=0), dim=1)
    logits = h @ h.T / temperature
    eye = torch.eye(2 * n, dtype=torch.bool)
    logits = logits.masked_fill(eye, float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(logits, target)


def simclr_loss(encoder, batch: torch.Tensor, views: ViewFn, temperature: float,
                rng: torch.Generator, projection: Optional[Callable] = None) -> torch.Tensor:
    """NT-Xent on encoder (optionally followed by ``projection``) outputs of two views."""
    if batch.shape[0] < 2:
        raise LossInputError("SimCLR needs a batch of at least 2")
    x1, x2 = two_views(batch, views, rng)
    h1, h2 = encoder(x1), encoder(x2)
    if projection is not None:
        h1, h2 = projection(h1), projection(h2)
    return nt_xent(h1, h2, temperature)


def embedding_std(z: torch.Tensor) -> float:
    """Mean per-dimension std of L2-normalised embeddings; ~1/sqrt(d) when not collapsed."""
    zn = F.normalize(z.detach(), dim=1)
    return float(zn.std(dim=0).mean())
