"""Stochastic view generation.

All randomness comes from an explicit ``torch.Generator`` so a view is a pure function
of (input, policy, generator state).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

_LUMA = (0.299, 0.587, 0.114)


class AugmentationError(ValueError):
    pass


def _uniform(n: int, lo: float, hi: float, g: torch.Generator, dtype) -> torch.Tensor:
    return torch.rand(n, generator=g, dtype=dtype) * (hi - lo) + lo


def _gray(x: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(_LUMA, dtype=x.dtype).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def _rotate_hue(x: torch.Tensor, turns: torch.Tensor) -> torch.Tensor:
    # rotation of the chroma plane in YIQ space
    to_yiq = torch.tensor([[0.299, 0.587, 0.114],
                           [0.596, -0.274, -0.322],
                           [0.211, -0.523, 0.312]], dtype=x.dtype)
    from_yiq = torch.linalg.inv(to_yiq)
    yiq = torch.einsum("ij,njhw->nihw", to_yiq, x)
    ang = (turns * 2 * math.pi).view(-1, 1, 1)
    c, s = torch.cos(ang), torch.sin(ang)
    i, q = yiq[:, 1], yiq[:, 2]
    yiq = torch.stack([yiq[:, 0], c * i - s * q, s * i + c * q], dim=1)
    return torch.einsum("ij,njhw->nihw", from_yiq, yiq)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Random resized crop, horizontal flip, colour jitter, grayscale, normalisation.

    Defaults follow the usual small-image SimSiam recipe.
    """

    crop_scale: Tuple[float, float] = (0.2, 1.0)
    crop_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter: Tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    mean: Tuple[float, ...] = CIFAR_MEAN
    std: Tuple[float, ...] = CIFAR_STD

    def __post_init__(self):
        for name in ("flip_p", "jitter_p", "grayscale_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentationError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise AugmentationError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0.0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise AugmentationError(f"bad crop_ratio {self.crop_ratio}")
        if any(j < 0 for j in self.jitter) or self.jitter[3] > 0.5:
            raise AugmentationError(f"bad jitter strengths {self.jitter}")
        if len(self.mean) != len(self.std) or any(s <= 0 for s in self.std):
            raise AugmentationError("mean/std must have equal length and positive std")

    @classmethod
    def identity(cls, channels: int = 3) -> "AugmentationPolicy":
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0,
                   jitter=(0.0, 0.0, 0.0, 0.0), jitter_p=0.0, grayscale_p=0.0,
                   mean=(0.0,) * channels, std=(1.0,) * channels)

    def bounds(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-channel range of normalised outputs for inputs in [0, 1]."""
        mean = torch.tensor(self.mean)
        std = torch.tensor(self.std)
        return (0 - mean) / std, (1 - mean) / std

    def __call__(self, batch: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        return augment_batch(batch, self, generator)


def _check_images(x: torch.Tensor, policy: AugmentationPolicy) -> None:
    if not isinstance(x, torch.Tensor) or not x.is_floating_point():
        raise AugmentationError("images must be a floating-point tensor")
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise AugmentationError(f"expected (N, C, H, W) images, got shape {tuple(x.shape)}")
    if x.shape[1] != len(policy.mean):
        raise AugmentationError(f"expected {len(policy.mean)} channels, got {x.shape[1]}")
    if not torch.isfinite(x).all():
        raise AugmentationError("images contain non-finite values")


def augment_batch(x: torch.Tensor, policy: AugmentationPolicy,
                  generator: torch.Generator) -> torch.Tensor:
    """One random view of every image in ``x`` (N, C, H, W), values in [0, 1]."""
    _check_images(x, policy)
    n, ch = x.shape[0], x.shape[1]
    dt = x.dtype
    g = generator
    if n == 0:
        return x.clone()

    # random resized crop + flip through one affine resampling
    area = _uniform(n, *policy.crop_scale, g, dt)
    log_r = _uniform(n, math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1]), g, dt)
    ratio = torch.exp(log_r)
    w = torch.sqrt(area * ratio).clamp(max=1.0)
    h = torch.sqrt(area / ratio).clamp(max=1.0)
    cx = (torch.rand(n, generator=g, dtype=dt) * 2 - 1) * (1 - w)
    cy = (torch.rand(n, generator=g, dtype=dt) * 2 - 1) * (1 - h)
    flip = torch.rand(n, generator=g, dtype=dt) < policy.flip_p
    sx = torch.where(flip, -w, w)
    if bool((w == 1).all() and (h == 1).all() and (~flip).all()):
        out = x.clone()
    else:
        theta = torch.zeros(n, 2, 3, dtype=dt)
        theta[:, 0, 0], theta[:, 0, 2] = sx, cx
        theta[:, 1, 1], theta[:, 1, 2] = h, cy
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)

    b, c, s, hue = policy.jitter
    apply = torch.rand(n, generator=g, dtype=dt) < policy.jitter_p
    fb = _uniform(n, max(0.0, 1 - b), 1 + b, g, dt)
    fc = _uniform(n, max(0.0, 1 - c), 1 + c, g, dt)
    fs = _uniform(n, max(0.0, 1 - s), 1 + s, g, dt)
    fh = _uniform(n, -hue, hue, g, dt)
    to_gray = torch.rand(n, generator=g, dtype=dt) < policy.grayscale_p
    if ch == 3 and bool(apply.any()):
        one = torch.ones(n, dtype=dt)
        fb, fc, fs = (torch.where(apply, f, one) for f in (fb, fc, fs))
        fh = torch.where(apply, fh, torch.zeros_like(fh))
        out = (out * fb.view(-1, 1, 1, 1)).clamp(0, 1)
        m = _gray(out).mean(dim=(2, 3), keepdim=True)
        out = ((out - m) * fc.view(-1, 1, 1, 1) + m).clamp(0, 1)
        gr = _gray(out)
        out = ((out - gr) * fs.view(-1, 1, 1, 1) + gr).clamp(0, 1)
        if hue > 0:
            out = _rotate_hue(out, fh).clamp(0, 1)
    if ch == 3 and bool(to_gray.any()):
        out = torch.where(to_gray.view(-1, 1, 1, 1), _gray(out).expand_as(out), out)

    mean = torch.tensor(policy.mean, dtype=dt).view(1, -1, 1, 1)
    std = torch.tensor(policy.std, dtype=dt).view(1, -1, 1, 1)
    return (out - mean) / std


def augment(image: torch.Tensor, policy: AugmentationPolicy,
            rng: torch.Generator) -> torch.Tensor:
    """Single-image form of :func:`augment_batch`; ``image`` is (C, H, W)."""
    if not isinstance(image, torch.Tensor) or image.ndim != 3:
        raise AugmentationError("expected a (C, H, W) image tensor")
    return augment_batch(image.unsqueeze(0), policy, rng)[0]


@dataclass(frozen=True)
class AdditiveNoise:
    """View generator for vector-valued inputs: x + sigma * N(0, 1)."""

    sigma: float = 0.1

    def __call__(self, batch: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        if self.sigma == 0:
            return batch.clone()
        noise = torch.randn(batch.shape, generator=generator, dtype=batch.dtype)
        return batch + self.sigma * noise


def make_generator(seed_words) -> torch.Generator:
    """Generator seeded from an arbitrary tuple of integers."""
    state = np.random.SeedSequence(list(seed_words)).generate_state(2, dtype=np.uint64)
    g = torch.Generator()
    g.manual_seed(int(state[0] >> np.uint64(1)))
    return g
