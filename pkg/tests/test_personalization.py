import copy

import pytest
import torch

from ssfl import params as P
from ssfl.fed import LocalContext, RoundConfig, client_generator, run_training
from ssfl.personalization import (DEFAULT_LAMBDA, META_BATCHES, META_VIEWS, PERSONAL_VIEWS,
                                  BiLevelSSFL, LASSFL, MAMLSSFL, PerSSFL, make_method,
                                  per_ssfl_objective)
from ssfl.runtime.trainer import local_batches
from ssfl.ssl import AdditiveNoise, build_model, make_generator, stub_model_config
from ssfl.ssl.losses import negative_cosine

VIEWS = AdditiveNoise(0.2)


def setup(seed=0, n=48):
    net = build_model(stub_model_config(), seed=seed)
    x = torch.randn(n, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(seed + 100))
    return net, x


def ctx_for(cfg, t=0, k=0):
    return LocalContext(round=t, client_id=k, lr=cfg.lr_at(t), config=cfg,
                        rng=client_generator(cfg.seed, t, k))


def cfg1(**kw):
    args = dict(num_clients=1, clients_per_round=1, rounds=1, lr=0.05, batch_size=4,
                accumulation_steps=3, local_iterations=1, seed=7, lr_schedule="constant")
    args.update(kw)
    return RoundConfig(**args)


def oracle_loss(net, x, g):
    """Straight-line symmetrised SimSiam with stop-gradient, views drawn from g."""
    x1 = x + 0.2 * torch.randn(x.shape, generator=g, dtype=x.dtype)
    x2 = x + 0.2 * torch.randn(x.shape, generator=g, dtype=x.dtype)
    z1, p1 = net(x1)
    z2, p2 = net(x2)

    def D(p, z):
        return -(p * z).sum(1).div(p.norm(dim=1) * z.norm(dim=1)).mean()

    return 0.5 * D(p1, z2.detach()) + 0.5 * D(p2, z1.detach()), (p1, p2)


def group_grad(net, x, group, g, extra=None):
    """Mean gradient over the micro-batches of one group (extra(net, idx, p) adds terms)."""
    params = list(net.parameters())
    total = [torch.zeros_like(p) for p in params]
    for idx in group:
        loss, ps = oracle_loss(net, x[idx], g)
        if extra is not None:
            loss = loss + extra(net, idx, ps)
        for t, gr in zip(total, torch.autograd.grad(loss, params)):
            t += gr / len(group)
    return total


class TestLA:
    def test_lr_zero(self):
        net, x = setup()
        m = LASSFL(net, VIEWS)
        upd, _ = m.local_update(P.from_module(net), x, None, ctx_for(cfg1(lr=0.0, lr_schedule="constant")))
        assert all(float(d.abs().max()) == 0.0 for d in upd.delta.values())

    def test_single_iteration_oracle(self):
        net, x = setup(1)
        cfg = cfg1()
        upd, _ = LASSFL(net, VIEWS).local_update(P.from_module(net), x, None, ctx_for(cfg))
        g = client_generator(cfg.seed, 0, 0)
        (group,) = local_batches(len(x), 4, 3, g, iterations=1)
        ref = copy.deepcopy(net)
        grads = group_grad(ref, x, group, g)
        # first momentum step: buffer = gradient, update = -lr * gradient
        for (name, p), gr in zip(ref.named_parameters(), grads):
            assert torch.allclose(upd.delta[name], -cfg.lr * gr, atol=1e-7, rtol=0)

    def test_divergence_raises(self):
        net, x = setup()
        with pytest.raises(FloatingPointError):
            LASSFL(net, VIEWS).local_update(P.from_module(net), x * float("inf"), None, ctx_for(cfg1()))


class TestMAML:
    def test_m0_equals_la_single_iteration(self):
        net, x = setup(2)
        cfg = cfg1()
        gp = P.from_module(net)
        la, _ = LASSFL(net, VIEWS).local_update(gp, x, None, ctx_for(cfg))
        ml, _ = MAMLSSFL(net, VIEWS, inner_steps=0).local_update(gp, x, None, ctx_for(cfg))
        assert P.max_abs_diff(la.delta, ml.delta) <= 1e-7

    def test_lr_zero(self):
        net, x = setup()
        upd, _ = MAMLSSFL(net, VIEWS, inner_steps=2).local_update(P.from_module(net), x, None,
                                                                  ctx_for(cfg1(lr=0.0)))
        assert P.max_abs_diff(upd.delta, P.zeros_like(upd.delta)) == 0.0

    def test_one_inner_step_oracle(self):
        """Theta' = Theta - a * grad_B'(Theta); Theta_new = Theta - b * grad_B(Theta')."""
        net, x = setup(3)
        cfg = cfg1(lr=0.07)
        upd, _ = MAMLSSFL(net, VIEWS, inner_steps=1).local_update(P.from_module(net), x, None, ctx_for(cfg))

        key = (cfg.seed, 0, 0)
        g_outer = client_generator(*key)
        (group,) = local_batches(len(x), 4, 3, g_outer, iterations=1)
        g_batches = make_generator(key + (META_BATCHES,))
        (group_prime,) = local_batches(len(x), 4, 3, g_batches, iterations=1)
        g_inner = make_generator(key + (META_VIEWS,))

        adapted = copy.deepcopy(net)
        inner = group_grad(adapted, x, group_prime, g_inner)
        with torch.no_grad():
            for p, gr in zip(adapted.parameters(), inner):
                p -= cfg.lr * gr
        outer = group_grad(adapted, x, group, g_outer)
        for (name, _), gr in zip(net.named_parameters(), outer):
            assert torch.allclose(upd.delta[name], -cfg.lr * gr, atol=1e-7, rtol=0)

    def test_negative_inner_steps(self):
        net, _ = setup()
        with pytest.raises(ValueError):
            MAMLSSFL(net, VIEWS, inner_steps=-1)


def personal_grad(method, net_theta, x, ctx, anchors, extras):
    prng = ctx.substream(PERSONAL_VIEWS)
    loss = method.personal_loss(net_theta, x, prng, ctx, anchors, extras)
    return torch.autograd.grad(loss, list(net_theta.parameters())), loss


class TestBiLevel:
    def test_regulariser_gradient_oracle(self):
        net, x = setup(4)
        cfg = cfg1()
        ctx = ctx_for(cfg)
        lam = 0.1
        m = BiLevelSSFL(net, VIEWS, lam=lam)
        theta = copy.deepcopy(net)
        with torch.no_grad():
            for p in theta.parameters():
                p.add_(0.05 * torch.randn(p.shape, dtype=p.dtype, generator=torch.Generator().manual_seed(9)))
        anchors = {k: v.detach() for k, v in P.from_module(net).items()}
        got, _ = personal_grad(m, theta, x[:8], ctx, anchors, None)

        ssl_only = BiLevelSSFL(net, VIEWS, lam=0.0)
        base, _ = personal_grad(ssl_only, theta, x[:8], ctx, anchors, None)
        for (name, p), g, b in zip(theta.named_parameters(), got, base):
            expected = b + 2 * lam * (p.detach() - anchors[name])
            assert torch.allclose(g, expected, atol=1e-7, rtol=0)

    def test_regulariser_zero_at_anchor(self):
        net, _ = setup()
        m = BiLevelSSFL(net, VIEWS, lam=3.0)
        anchors = {k: v.detach() for k, v in P.from_module(net).items()}
        pen = m.weight_penalty(net, anchors)
        grads = torch.autograd.grad(pen, list(net.parameters()))
        assert float(pen) == 0.0
        assert all(float(g.abs().max()) == 0.0 for g in grads)

    def test_regulariser_nonnegative(self):
        net, _ = setup()
        other = build_model(stub_model_config(), seed=99)
        anchors = {k: v.detach() for k, v in P.from_module(other).items()}
        assert float(BiLevelSSFL(net, VIEWS, lam=1.0).weight_penalty(net, anchors)) > 0


class TestPer:
    def test_aligned_cross_terms_value(self):
        g = torch.Generator().manual_seed(0)
        p = torch.randn(5, 4, dtype=torch.float64, generator=g)
        z1 = torch.randn(5, 4, dtype=torch.float64, generator=g)
        z2 = torch.randn(5, 4, dtype=torch.float64, generator=g)
        lam = 0.3
        with_reg = per_ssfl_objective(p, p, z1, z2, p, p, lam)
        without = per_ssfl_objective(p, p, z1, z2, p, p, 0.0)
        assert float(with_reg - without) == pytest.approx(-lam, abs=1e-15)

    def test_cross_term_bounded(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(20):
            a = [torch.randn(6, 4, dtype=torch.float64, generator=g) for _ in range(6)]
            lam = 0.7
            diff = per_ssfl_objective(*a, lam) - per_ssfl_objective(*a, 0.0)
            assert -lam - 1e-12 <= float(diff) <= lam + 1e-12

    def test_personal_gradient_oracle(self):
        """grad = SimSiam grad + lam * mean of the four D(p_i, P_j) gradients through p only."""
        net, x = setup(5)
        cfg = cfg1()
        ctx = ctx_for(cfg)
        lam = 0.1
        m = PerSSFL(net, VIEWS, lam=lam)
        theta = build_model(stub_model_config(), seed=55)
        g = torch.Generator().manual_seed(3)
        P1 = torch.randn(8, 4, dtype=torch.float64, generator=g)
        P2 = torch.randn(8, 4, dtype=torch.float64, generator=g)
        got, _ = personal_grad(m, theta, x[:8], ctx, {}, (P1, P2))

        oracle = copy.deepcopy(theta)
        prng = ctx.substream(PERSONAL_VIEWS)

        def cross(net_, idx, ps):
            p1, p2 = ps
            return lam * (negative_cosine(p1, P1) + negative_cosine(p1, P2)
                          + negative_cosine(p2, P1) + negative_cosine(p2, P2)) / 4

        expected = group_grad(oracle, x[:8], [slice(None)], prng, extra=cross)
        for a, b in zip(got, expected):
            assert torch.allclose(a, b, atol=1e-7, rtol=0)

    def test_global_predictions_are_constants(self):
        net, x = setup(6)
        P1 = torch.randn(8, 4, dtype=torch.float64, requires_grad=True)
        P2 = torch.randn(8, 4, dtype=torch.float64, requires_grad=True)
        z, p = net(x[:8])
        loss = per_ssfl_objective(p, p, z, z, P1, P2, 0.5)
        g1, g2 = torch.autograd.grad(loss, [P1, P2], allow_unused=True)
        assert g1 is None and g2 is None

    def test_global_branch_matches_la_exactly(self):
        net, x = setup(7)
        cfg = cfg1(local_iterations=3)
        gp = P.from_module(net)
        la, _ = LASSFL(net, VIEWS).local_update(gp, x, None, ctx_for(cfg))
        per, state = PerSSFL(net, VIEWS, lam=0.5).local_update(gp, x, None, ctx_for(cfg))
        assert P.max_abs_diff(la.delta, per.delta) == 0.0
        assert P.max_abs_diff(state.theta, gp) > 0

    def test_simclr_rejected(self):
        net, _ = setup()
        with pytest.raises(ValueError):
            PerSSFL(net, VIEWS, ssl="simclr")


def local_simsiam_trajectory(net, x, cfg):
    """theta_k of a client that only ever runs plain SimSiam steps, round after round,
    with the personal-branch RNG and a persistent momentum buffer."""
    theta = copy.deepcopy(net).train()
    opt = torch.optim.SGD(theta.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    for t in range(cfg.rounds):
        for group_ in opt.param_groups:
            group_["lr"] = cfg.lr_at(t)
        plan = local_batches(len(x), cfg.batch_size, cfg.accumulation_steps,
                             client_generator(cfg.seed, t, 0), iterations=cfg.local_iterations)
        prng = make_generator((cfg.seed, t, 0, PERSONAL_VIEWS))
        for group in plan:
            grads = group_grad(theta, x, group, prng)
            for p, g in zip(theta.parameters(), grads):
                p.grad = g
            opt.step()
    return P.from_module(theta)


@pytest.mark.parametrize("name", ["per", "bilevel"])
def test_lambda_zero_reduces_to_local_simsiam(name):
    net, x = setup(8)
    cfg = RoundConfig(num_clients=1, clients_per_round=1, rounds=10, lr=0.05, batch_size=4,
                      accumulation_steps=2, local_iterations=5, seed=3)
    res = run_training(make_method(name, net, VIEWS, lam=0.0), [x], cfg, P.from_module(net))
    expected = local_simsiam_trajectory(net, x, cfg)
    assert P.max_abs_diff(res.states[0].theta, expected) <= 1e-6


def test_default_lambdas():
    net, _ = setup()
    assert make_method("per", net, VIEWS).lam == DEFAULT_LAMBDA["per"] == 0.1
    assert make_method("bilevel", net, VIEWS).lam == 1.0
    assert make_method("bilevel", net, VIEWS, lam=0.3).lam == 0.3


def test_make_method_validation():
    net, _ = setup()
    with pytest.raises(ValueError):
        make_method("fedprox", net, VIEWS)
    with pytest.raises(ValueError):
        make_method("maml", net, VIEWS, ssl="simclr")
    with pytest.raises(ValueError):
        make_method("per", net, VIEWS, lam=-1.0)
