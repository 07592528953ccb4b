"""Trainer abstraction and gradient accumulation."""
from __future__ import annotations

from typing import Any, Callable, List, Optional, Sequence

import torch
from torch import nn


class DivergenceError(FloatingPointError):
    pass


class MicroBatchError(ValueError):
    pass


class Trainer:
    """A model, its optimizer and a loss ``loss_fn(model, micro_batch) -> scalar``."""

    def __init__(self, model: nn.Module, optimizer: Optional[torch.optim.Optimizer],
                 loss_fn: Callable[[nn.Module, Any], torch.Tensor]):
        self.model = model
        self.optimizer = optimizer
        self.loss_fn = loss_fn

    def compute_loss(self, micro_batch) -> torch.Tensor:
        return self.loss_fn(self.model, micro_batch)

    def zero_grad(self) -> None:
        for p in self.model.parameters():
            p.grad = None


def _shape_of(mb):
    if isinstance(mb, torch.Tensor):
        return tuple(mb.shape)
    if isinstance(mb, (tuple, list)) and mb and isinstance(mb[0], torch.Tensor):
        return tuple(tuple(t.shape) for t in mb if isinstance(t, torch.Tensor))
    return None


def accumulate_gradients(trainer: Trainer, micro_batches: Sequence, accumulation_steps: int) -> float:
    """Leave mean-over-micro-batches gradients in ``.grad``; returns the mean loss."""
    if accumulation_steps < 1:
        raise MicroBatchError("accumulation_steps must be >= 1")
    if len(micro_batches) != accumulation_steps:
        raise MicroBatchError(
            f"got {len(micro_batches)} micro-batches for accumulation_steps={accumulation_steps}")
    shapes = {_shape_of(mb) for mb in micro_batches}
    if len(shapes) > 1:
        raise MicroBatchError(f"inconsistent micro-batch shapes: {sorted(map(str, shapes))}")
    trainer.zero_grad()
    total = 0.0
    for mb in micro_batches:
        loss = trainer.compute_loss(mb)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss.item()}")
        (loss / accumulation_steps).backward()
        total += float(loss.detach())
    return total / accumulation_steps


def accumulated_step(trainer: Trainer, micro_batches: Sequence, accumulation_steps: int) -> float:
    """One optimizer step on the averaged gradient of ``accumulation_steps`` micro-batches.

    The effective batch is micro-batch size times ``accumulation_steps``; gradients are
    averaged, not summed, so the learning rate does not depend on the split.
    """
    loss = accumulate_gradients(trainer, micro_batches, accumulation_steps)
    trainer.optimizer.step()
    return loss


def local_batches(num_samples: int, batch_size: int, accumulation_steps: int,
                  generator: torch.Generator, epochs: int = 1,
                  iterations: Optional[int] = None, min_batch: int = 2) -> List[List[torch.Tensor]]:
    """Index plan for a round of local training.

    Each epoch is a fresh permutation cut into micro-batches of ``batch_size``; a trailing
    partial micro-batch is dropped unless it is the whole epoch. Consecutive micro-batches
    are grouped ``accumulation_steps`` at a time, one group per optimizer step. Micro-batches
    smaller than ``min_batch`` are never produced.
    """
    if iterations is not None and iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    if num_samples < min_batch or iterations == 0 or (iterations is None and epochs <= 0):
        return []
    groups: List[List[torch.Tensor]] = []
    epoch = 0
    while True:
        perm = torch.randperm(num_samples, generator=generator)
        if num_samples < batch_size:
            micro = [perm]
        else:
            micro = list(torch.split(perm, batch_size))
            if micro[-1].numel() < batch_size:
                micro.pop()
        for i in range(0, len(micro), accumulation_steps):
            groups.append(micro[i:i + accumulation_steps])
            if iterations is not None and len(groups) == iterations:
                return groups
        epoch += 1
        if iterations is None and epoch >= epochs:
            return groups
