"""Client-side solvers: LA-SSFL, MAML-SSFL, BiLevel-SSFL and Per-SSFL.

Every solver advances a local copy of the broadcast global model (the "global branch")
and reports its delta. BiLevel-SSFL and Per-SSFL additionally keep a personal model
theta_k on the client, coupled to the global one by a lambda-weighted regulariser.
"""
from __future__ import annotations

import copy
from typing import Optional

import torch
from torch import nn

from . import params as P
from .fed.core import ClientUpdate, LocalContext, PersonalState
from .params import ParameterSet
from .runtime.trainer import (DivergenceError, Trainer, accumulate_gradients, accumulated_step,
                              local_batches)
from .ssl.losses import negative_cosine, nt_xent, simsiam_forward, symmetric_simsiam

# substream tags
PERSONAL_VIEWS = 1
META_BATCHES = 2
META_VIEWS = 3


def _images(data) -> torch.Tensor:
    return data.images if hasattr(data, "images") else data


class SSLMethod:
    """Shared plumbing: model replicas, optimizers and the SSL loss on a micro-batch."""

    name = "base"
    personalized = False

    def __init__(self, template: nn.Module, views, ssl: str = "simsiam",
                 temperature: float = 0.5, lam: float = 0.0):
        if ssl not in ("simsiam", "simclr"):
            raise ValueError(f"unknown ssl objective {ssl!r}")
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        self.template = template
        self.views = views
        self.ssl = ssl
        self.temperature = temperature
        self.lam = lam

    def replica(self, params: ParameterSet) -> nn.Module:
        net = copy.deepcopy(self.template)
        P.load_into(net, params)
        return net.train()

    def optimizer(self, net: nn.Module, ctx: LocalContext, momentum: Optional[float] = None):
        cfg = ctx.config
        return torch.optim.SGD(net.parameters(), lr=ctx.lr,
                               momentum=cfg.momentum if momentum is None else momentum,
                               weight_decay=cfg.weight_decay)

    def ssl_loss(self, net, x: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
        x1, x2 = self.views(x, rng), self.views(x, rng)
        if self.ssl == "simclr":
            return nt_xent(net.encoder(x1), net.encoder(x2), self.temperature)
        loss, _ = simsiam_forward(net, x1, x2)
        return loss

    def plan(self, data, ctx: LocalContext, rng: Optional[torch.Generator] = None):
        cfg = ctx.config
        return local_batches(len(data), cfg.batch_size, cfg.accumulation_steps,
                             ctx.rng if rng is None else rng, epochs=cfg.local_epochs,
                             iterations=cfg.local_iterations)

    def global_trainer(self, net, opt, images, rng) -> Trainer:
        return Trainer(net, opt, lambda m, idx: self.ssl_loss(m, images[idx], rng))

    def _finish(self, ctx, global_params, net, data, losses) -> ClientUpdate:
        local = P.from_module(net)
        if not P.all_finite(local):
            raise DivergenceError(f"client {ctx.client_id}: non-finite parameters")
        loss = sum(losses) / len(losses) if losses else float("nan")
        return ClientUpdate(ctx.client_id, P.subtract(local, global_params), len(data), loss)

    def init_state(self, client_id: int, global_params: ParameterSet) -> PersonalState:
        return PersonalState(client_id, P.clone(global_params), {}, self.lam)

    def local_update(self, global_params, data, state, ctx):
        raise NotImplementedError


class LASSFL(SSLMethod):
    """FedAvg on the SSL loss (also the Global-SSFL solver). Local adaptation for
    personalised evaluation happens at inference time, see ``evaluation.local_adapt``."""

    name = "la"

    def local_update(self, global_params, data, state, ctx):
        images = _images(data)
        net = self.replica(global_params)
        trainer = self.global_trainer(net, self.optimizer(net, ctx), images, ctx.rng)
        losses = [accumulated_step(trainer, g, len(g)) for g in self.plan(data, ctx)]
        return self._finish(ctx, global_params, net, data, losses), state


class MAMLSSFL(SSLMethod):
    """First-order MAML: per local iteration, adapt a clone on B'_k for ``inner_steps``
    plain SGD steps, then apply the clone's gradient on B_k to the local model."""

    name = "maml"

    def __init__(self, template, views, inner_steps: int = 1, inner_lr: Optional[float] = None, **kw):
        super().__init__(template, views, **kw)
        if inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        self.inner_steps = inner_steps
        self.inner_lr = inner_lr

    def local_update(self, global_params, data, state, ctx):
        images = _images(data)
        net = self.replica(global_params)
        opt = self.optimizer(net, ctx)
        inner = self.replica(global_params)
        inner_opt = torch.optim.SGD(inner.parameters(), lr=ctx.lr if self.inner_lr is None else self.inner_lr)
        inner_views = ctx.substream(META_VIEWS)
        inner_trainer = Trainer(inner, inner_opt, lambda m, idx: self.ssl_loss(m, images[idx], inner_views))
        outer_trainer = self.global_trainer(inner, None, images, ctx.rng)

        plan = self.plan(data, ctx)
        plan_prime = self.plan(data, ctx, ctx.substream(META_BATCHES)) if self.inner_steps else []
        losses = []
        for it, group in enumerate(plan):
            P.load_into(inner, P.from_module(net))
            for _ in range(self.inner_steps):
                gp = plan_prime[it % len(plan_prime)]
                accumulated_step(inner_trainer, gp, len(gp))
            losses.append(accumulate_gradients(outer_trainer, group, len(group)))
            with torch.no_grad():
                for p_local, p_adapted in zip(net.parameters(), inner.parameters()):
                    p_local.grad = None if p_adapted.grad is None else p_adapted.grad.clone()
                for b_local, b_adapted in zip(net.buffers(), inner.buffers()):
                    b_local.copy_(b_adapted)
            opt.step()
        return self._finish(ctx, global_params, net, data, losses), state


class _TwoBranch(SSLMethod):
    """Global branch exactly as LA-SSFL; personal branch on theta_k after each global step."""

    personalized = True

    def personal_loss(self, net, x, rng, ctx, global_params, extras) -> torch.Tensor:
        raise NotImplementedError

    def global_loss(self, net, x, rng, extras):
        return self.ssl_loss(net, x, rng)

    def local_update(self, global_params, data, state, ctx):
        images = _images(data)
        if state is None:
            state = self.init_state(ctx.client_id, global_params)
        net = self.replica(global_params)
        g_opt = self.optimizer(net, ctx)
        theta = self.replica(state.theta)
        p_opt = self.optimizer(theta, ctx)
        if state.optimizer_state:
            p_opt.load_state_dict(state.optimizer_state)
            for group in p_opt.param_groups:
                group["lr"] = ctx.lr
        prng = ctx.substream(PERSONAL_VIEWS)
        anchors = {name: t.detach() for name, t in global_params.items()}

        losses, p_losses = [], []
        for group in self.plan(data, ctx):
            extras: list = []
            g_trainer = Trainer(net, g_opt,
                                lambda m, idx: self.global_loss(m, images[idx], ctx.rng, extras))
            losses.append(accumulated_step(g_trainer, group, len(group)))
            cursor = iter(extras)
            p_trainer = Trainer(theta, p_opt,
                                lambda m, idx: self.personal_loss(m, images[idx], prng, ctx,
                                                                  anchors, next(cursor, None)))
            p_losses.append(accumulated_step(p_trainer, group, len(group)))

        new_theta = P.from_module(theta)
        if not P.all_finite(new_theta):
            raise DivergenceError(f"client {ctx.client_id}: non-finite personal parameters")
        opt_state = copy.deepcopy(p_opt.state_dict())
        extra = dict(state.extra)
        if p_losses:
            extra["personal_loss"] = sum(p_losses) / len(p_losses)
        new_state = PersonalState(ctx.client_id, new_theta, opt_state, self.lam, extra)
        return self._finish(ctx, global_params, net, data, losses), new_state


class BiLevelSSFL(_TwoBranch):
    """Ditto-style: theta_k minimises the SSL loss + lam * ||Theta^(t) - theta_k||^2."""

    name = "bilevel"

    def weight_penalty(self, net, anchors) -> torch.Tensor:
        total = 0.0
        for name, p in net.named_parameters():
            total = total + ((anchors[name] - p) ** 2).sum()
        return total

    def personal_loss(self, net, x, rng, ctx, anchors, extras):
        loss = self.ssl_loss(net, x, rng)
        if self.lam:
            loss = loss + self.lam * self.weight_penalty(net, anchors)
        return loss


class PerSSFL(_TwoBranch):
    """Representation-regularised personalisation.

    theta_k minimises the symmetrised SimSiam loss plus lam times the mean of the four
    cross terms D(p_i, P_j), where P_1, P_2 are the global model's predictions on the
    same micro-batch, held constant.
    """

    name = "per"

    def __init__(self, template, views, lam: float = 0.1, **kw):
        if kw.get("ssl", "simsiam") != "simsiam":
            raise ValueError("Per-SSFL is defined for the SimSiam objective only")
        super().__init__(template, views, lam=lam, **kw)

    def global_loss(self, net, x, rng, extras):
        x1, x2 = self.views(x, rng), self.views(x, rng)
        loss, (_, _, p1, p2) = simsiam_forward(net, x1, x2)
        extras.append((p1.detach(), p2.detach()))
        return loss

    def personal_loss(self, net, x, rng, ctx, anchors, extras):
        P1, P2 = extras
        x1, x2 = self.views(x, rng), self.views(x, rng)
        z1, p1 = net(x1)
        z2, p2 = net(x2)
        return per_ssfl_objective(p1, p2, z1, z2, P1, P2, self.lam)


def per_ssfl_objective(p1, p2, z1, z2, P1, P2, lam: float) -> torch.Tensor:
    """Symmetrised SimSiam on (p, z) + lam * mean of D(p_i, P_j) over i, j in {1, 2}."""
    P1, P2 = P1.detach(), P2.detach()
    cross = (negative_cosine(p1, P1) + negative_cosine(p1, P2)
             + negative_cosine(p2, P1) + negative_cosine(p2, P2)) / 4
    return symmetric_simsiam(p1, p2, z1, z2) + lam * cross


# lambda per method when none is given (unused by la/maml, kept for logging)
DEFAULT_LAMBDA = {"global": 1.0, "la": 1.0, "maml": 1.0, "bilevel": 1.0, "per": 0.1}

METHODS = {"global": LASSFL, "la": LASSFL, "maml": MAMLSSFL, "bilevel": BiLevelSSFL, "per": PerSSFL}


def make_method(name: str, template: nn.Module, views, *, lam: Optional[float] = None,
                inner_steps: int = 1, ssl: str = "simsiam", temperature: float = 0.5) -> SSLMethod:
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {sorted(METHODS)}")
    if lam is None:
        lam = DEFAULT_LAMBDA[name]
    if ssl != "simsiam" and name not in ("global", "la"):
        raise ValueError(f"method {name!r} supports the simsiam objective only")
    if name in ("global", "la"):
        m = LASSFL(template, views, ssl=ssl, temperature=temperature, lam=lam)
    elif name == "maml":
        m = MAMLSSFL(template, views, inner_steps=inner_steps, lam=lam)
    elif name == "bilevel":
        m = BiLevelSSFL(template, views, lam=lam)
    else:
        m = PerSSFL(template, views, lam=lam)
    m.name = name
    return m
