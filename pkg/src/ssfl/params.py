"""ParameterSet helpers.

A ParameterSet is an ordered ``dict`` mapping names to tensors, the same shape
as a torch ``state_dict`` restricted to floating-point entries. It is the unit
the server aggregates and the unit sent over the wire.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterable, Mapping

import torch
from torch import nn

ParameterSet = Dict[str, torch.Tensor]


class IncompatibleParameters(ValueError):
    pass


def from_module(module: nn.Module) -> ParameterSet:
    """Snapshot of the module's floating-point parameters and buffers."""
    return OrderedDict(
        (name, t.detach().clone())
        for name, t in module.state_dict().items()
        if t.is_floating_point()
    )


def load_into(module: nn.Module, params: Mapping[str, torch.Tensor]) -> nn.Module:
    state = module.state_dict()
    missing = [n for n, t in state.items() if t.is_floating_point() and n not in params]
    if missing:
        raise IncompatibleParameters(f"missing entries: {missing[:5]}")
    with torch.no_grad():
        for name, value in params.items():
            if name not in state:
                raise IncompatibleParameters(f"unexpected entry {name!r}")
            if state[name].shape != value.shape:
                raise IncompatibleParameters(
                    f"{name}: shape {tuple(value.shape)} != {tuple(state[name].shape)}")
            state[name].copy_(value)
    return module


def trainable_names(module: nn.Module) -> list[str]:
    return [n for n, p in module.named_parameters() if p.requires_grad]


def check_compatible(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> None:
    if list(a.keys()) != list(b.keys()):
        extra = set(a) ^ set(b)
        raise IncompatibleParameters(
            f"parameter names differ: {sorted(extra)[:5] or 'ordering'}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise IncompatibleParameters(
                f"{name}: shape {tuple(a[name].shape)} != {tuple(b[name].shape)}")


def clone(params: Mapping[str, torch.Tensor]) -> ParameterSet:
    return OrderedDict((n, t.detach().clone()) for n, t in params.items())


def subtract(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> ParameterSet:
    check_compatible(a, b)
    return OrderedDict((n, a[n] - b[n]) for n in a)


def add(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> ParameterSet:
    check_compatible(a, b)
    return OrderedDict((n, a[n] + b[n]) for n in a)


def scale(a: Mapping[str, torch.Tensor], c: float) -> ParameterSet:
    return OrderedDict((n, t * c) for n, t in a.items())


def zeros_like(a: Mapping[str, torch.Tensor]) -> ParameterSet:
    return OrderedDict((n, torch.zeros_like(t)) for n, t in a.items())


def max_abs_diff(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> float:
    check_compatible(a, b)
    if not a:
        return 0.0
    return max(float((a[n].double() - b[n].double()).abs().max()) if a[n].numel() else 0.0
               for n in a)


def all_finite(params: Iterable[torch.Tensor] | Mapping[str, torch.Tensor]) -> bool:
    values = params.values() if isinstance(params, Mapping) else params
    return all(bool(torch.isfinite(t).all()) for t in values)


def num_elements(params: Mapping[str, torch.Tensor]) -> int:
    return sum(t.numel() for t in params.values())
