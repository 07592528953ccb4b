import math
import struct
import threading
from collections import OrderedDict

import pytest
import torch
from torch import nn

from ssfl import params as P
from ssfl.fed import ClientFailure, ClientUpdate, RoundConfig, run_training
from ssfl.fed.loop import ClientRunner, FederatedServer
from ssfl.personalization import make_method
from ssfl.runtime.managers import ClientManager, RoundTimeout, ServerManager, run_loopback, run_multiprocess
from ssfl.runtime.trainer import (DivergenceError, MicroBatchError, Trainer, accumulate_gradients,
                                  accumulated_step, local_batches)
from ssfl.runtime.transport import LoopbackTransport
from ssfl.runtime.wire import (HEADER, HEADER_SIZE, SERVER_ID, FrameError, Kind, Message,
                               deserialize, serialize)
from ssfl.ssl import AdditiveNoise, build_model, stub_model_config


def rand_pset(seed, shapes=(("w", (3, 4)), ("b", (4,)))):
    g = torch.Generator().manual_seed(seed)
    return OrderedDict((k, torch.randn(s, generator=g, dtype=torch.float64)) for k, s in shapes)


class TestWire:
    def test_broadcast_round_trip(self):
        params = rand_pset(0)
        msg = deserialize(serialize(Message(Kind.BROADCAST_MODEL, 7, SERVER_ID, params)))
        assert (msg.kind, msg.round, msg.sender) == (Kind.BROADCAST_MODEL, 7, SERVER_ID)
        assert list(msg.payload) == list(params)
        assert P.max_abs_diff(msg.payload, params) == 0.0

    def test_million_parameters_bit_exact(self):
        g = torch.Generator().manual_seed(1)
        delta = OrderedDict(big=torch.randn(1000, 1000, generator=g, dtype=torch.float64),
                            tiny=torch.tensor([5e-324, -0.0, 1e308], dtype=torch.float64))
        up = ClientUpdate(3, delta, 41, -0.25)
        msg = deserialize(serialize(Message(Kind.CLIENT_UPDATE, 2, 3, up)))
        out = msg.payload
        assert (out.client_id, out.num_samples, out.train_loss) == (3, 41, -0.25)
        for k in delta:
            assert out.delta[k].numpy().tobytes() == delta[k].numpy().tobytes()

    def test_empty_delta(self):
        msg = deserialize(serialize(Message(Kind.CLIENT_UPDATE, 0, 1, ClientUpdate(1, OrderedDict(), 5, 0.5))))
        assert len(msg.payload.delta) == 0
        assert msg.payload.num_samples == 5

    def test_nan_loss_and_error_report(self):
        up = ClientUpdate(2, rand_pset(2), 9, float("nan"))
        assert math.isnan(deserialize(serialize(Message(Kind.CLIENT_UPDATE, 1, 2, up))).payload.train_loss)
        err = deserialize(serialize(Message(Kind.CLIENT_UPDATE, 1, 2, error="boom")))
        assert err.error == "boom" and err.payload is None

    def test_shutdown_has_no_payload(self):
        frame = serialize(Message(Kind.SHUTDOWN, 4, SERVER_ID))
        assert len(frame) == HEADER_SIZE
        with pytest.raises(FrameError, match="shutdown"):
            deserialize(frame[:-8] + struct.pack("<Q", 1) + b"x")

    def test_version_mismatch(self):
        frame = bytearray(serialize(Message(Kind.SHUTDOWN, 0, SERVER_ID)))
        frame[0:2] = struct.pack("<H", 2)
        with pytest.raises(FrameError, match="version") as info:
            deserialize(bytes(frame))
        assert info.value.offset == 0

    def test_unknown_kind(self):
        frame = HEADER.pack(1, 9, 0, 0, 0)
        with pytest.raises(FrameError, match="kind") as info:
            deserialize(frame)
        assert info.value.offset == 2

    @pytest.mark.parametrize("cut", [0, 5, HEADER_SIZE - 1, HEADER_SIZE, HEADER_SIZE + 10, -1])
    def test_truncation_reports_offset(self, cut):
        frame = serialize(Message(Kind.BROADCAST_MODEL, 1, SERVER_ID, rand_pset(3)))
        buf = frame[:cut]
        with pytest.raises(FrameError, match="truncated") as info:
            deserialize(buf)
        assert info.value.offset == len(buf)

    def test_trailing_bytes(self):
        frame = serialize(Message(Kind.BROADCAST_MODEL, 1, SERVER_ID, rand_pset(3)))
        with pytest.raises(FrameError, match="trailing") as info:
            deserialize(frame + b"\0\0")
        assert info.value.offset == len(frame)

    def test_corrupt_payload(self):
        frame = bytearray(serialize(Message(Kind.BROADCAST_MODEL, 1, SERVER_ID, rand_pset(3))))
        frame[HEADER_SIZE:HEADER_SIZE + 8] = b"garbage!"
        with pytest.raises(FrameError) as info:
            deserialize(bytes(frame))
        assert info.value.offset == HEADER_SIZE


def stub_setup(K=3, n=40, seed=0):
    net = build_model(stub_model_config(), seed=seed)
    g = torch.Generator().manual_seed(seed)
    clients = [torch.randn(n + 7 * k, 6, generator=g, dtype=torch.float64) for k in range(K)]
    return net, clients


def cfg(**kw):
    args = dict(num_clients=3, clients_per_round=2, rounds=3, lr=0.05, batch_size=4,
                accumulation_steps=2, seed=1)
    args.update(kw)
    return RoundConfig(**args)


class TestManagers:
    def test_zero_rounds_sends_only_shutdown(self):
        net, clients = stub_setup()
        hub = LoopbackTransport(range(3))
        res = run_loopback(make_method("la", net, AdditiveNoise(0.1)), clients, cfg(rounds=0),
                           P.from_module(net), transport=hub)
        assert [e[0] for e in hub.log] == [Kind.SHUTDOWN]
        assert res.metrics == []

    @pytest.mark.parametrize("T,m", [(1, 1), (3, 2), (4, 3)])
    def test_message_conservation(self, T, m):
        net, clients = stub_setup()
        hub = LoopbackTransport(range(3))
        run_loopback(make_method("la", net, AdditiveNoise(0.1)), clients,
                     cfg(rounds=T, clients_per_round=m), P.from_module(net), transport=hub)
        kinds = [e[0] for e in hub.log]
        assert len(kinds) == T * 2 * m + 1
        assert kinds.count(Kind.BROADCAST_MODEL) == kinds.count(Kind.CLIENT_UPDATE) == T * m
        assert kinds[-1] == Kind.SHUTDOWN

    @pytest.mark.parametrize("method", ["la", "per", "maml"])
    def test_loopback_equals_direct(self, method):
        net, clients = stub_setup()
        m = make_method(method, net, AdditiveNoise(0.1), lam=0.1)
        a = run_training(m, clients, cfg(), P.from_module(net))
        b = run_loopback(m, clients, cfg(), P.from_module(net))
        assert P.max_abs_diff(a.params, b.params) == 0.0
        assert [r.to_record() for r in a.metrics] == [r.to_record() for r in b.metrics]
        assert set(a.states) == set(b.states)
        for k in a.states:
            assert P.max_abs_diff(a.states[k].theta, b.states[k].theta) == 0.0

    def test_out_of_order_replies(self):
        """Replies arrive in reverse order of dispatch; the result must not change."""
        net, clients = stub_setup()
        m = make_method("la", net, AdditiveNoise(0.1))
        config = cfg(clients_per_round=3)
        runners = {k: ClientRunner(k, m, clients[k], config) for k in range(3)}

        class Reversing:
            def __init__(self):
                self.pending = []

            def send(self, frame, dest):
                msg = deserialize(frame)
                if msg.kind == Kind.BROADCAST_MODEL:
                    up = runners[dest].train(msg.round, msg.payload)
                    self.pending.append(serialize(Message(Kind.CLIENT_UPDATE, msg.round, dest, up)))

            def recv(self, timeout=None):
                return self.pending.pop()

        server = FederatedServer(config, P.from_module(net))
        ServerManager(server, Reversing()).run()
        ref = run_training(m, clients, config, P.from_module(net))
        assert P.max_abs_diff(server.params, ref.params) == 0.0

    def test_missing_reply_times_out(self):
        net, clients = stub_setup(K=2)
        config = cfg(num_clients=2, clients_per_round=2, rounds=1)
        m = make_method("la", net, AdditiveNoise(0.1))
        hub = LoopbackTransport(range(2))
        th = threading.Thread(target=ClientManager(ClientRunner(0, m, clients[0], config),
                                                   hub.client(0)).serve, daemon=True)
        th.start()
        server = FederatedServer(config, P.from_module(net))
        with pytest.raises(RoundTimeout, match=r"\[1\]"):
            ServerManager(server, hub.server(), timeout=0.5).run()
        th.join(timeout=5)
        assert not th.is_alive()
        assert hub.log[-1][0] == Kind.SHUTDOWN

    def test_client_failure_is_surfaced(self):
        net, clients = stub_setup()
        clients[2] = clients[2] * float("nan")
        with pytest.raises(ClientFailure, match="client 2"):
            run_loopback(make_method("la", net, AdditiveNoise(0.1)), clients,
                         cfg(clients_per_round=3), P.from_module(net), timeout=30)

    def test_multiprocess_matches_direct(self):
        net, clients = stub_setup()
        m = make_method("per", net, AdditiveNoise(0.1), lam=0.1)
        config = cfg(rounds=2)
        a = run_training(m, clients, config, P.from_module(net))
        b = run_multiprocess(m, clients, config, P.from_module(net), timeout=60)
        assert P.max_abs_diff(a.params, b.params) == 0.0
        assert [r.to_record() for r in a.metrics] == [r.to_record() for r in b.metrics]
        assert b.states == {}


def mlp(seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(nn.Linear(5, 7), nn.Tanh(), nn.Linear(7, 3)).double()


def mse_trainer(net, x, y, lr=0.1):
    opt = torch.optim.SGD(net.parameters(), lr=lr)
    return Trainer(net, opt, lambda m, idx: ((m(x[idx]) - y[idx]) ** 2).mean())


class TestAccumulation:
    def data(self, n=256):
        g = torch.Generator().manual_seed(0)
        return (torch.randn(n, 5, generator=g, dtype=torch.float64),
                torch.randn(n, 3, generator=g, dtype=torch.float64))

    def test_single_step_equals_plain_sgd(self):
        x, y = self.data(32)
        a, b = mlp(), mlp()
        idx = torch.arange(32)
        accumulated_step(mse_trainer(a, x, y), [idx], 1)
        opt = torch.optim.SGD(b.parameters(), lr=0.1)
        ((b(x) - y) ** 2).mean().backward()
        opt.step()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_eight_micro_batches_equal_one_big_batch(self):
        x, y = self.data(256)
        a, b = mlp(), mlp()
        idx = torch.arange(256)
        la = accumulated_step(mse_trainer(a, x, y), list(torch.split(idx, 32)), 8)
        lb = accumulated_step(mse_trainer(b, x, y), [idx], 1)
        assert abs(la - lb) <= 1e-12
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.max(torch.abs(pa - pb)) <= 1e-6

    def test_gradients_are_averaged(self):
        x, y = self.data(64)
        a = mlp()
        tr = mse_trainer(a, x, y)
        accumulate_gradients(tr, [torch.arange(32), torch.arange(32, 64)], 2)
        got = [p.grad.clone() for p in a.parameters()]
        b = mlp()
        ((b(x) - y) ** 2).mean().backward()
        for g1, p in zip(got, b.parameters()):
            assert torch.max(torch.abs(g1 - p.grad)) <= 1e-12

    def test_errors(self):
        x, y = self.data(64)
        tr = mse_trainer(mlp(), x, y)
        with pytest.raises(MicroBatchError, match="inconsistent"):
            accumulate_gradients(tr, [torch.arange(32), torch.arange(16)], 2)
        with pytest.raises(MicroBatchError):
            accumulate_gradients(tr, [torch.arange(32)], 2)
        with pytest.raises(MicroBatchError):
            accumulate_gradients(tr, [], 0)
        tr_nan = mse_trainer(mlp(), x * float("nan"), y)
        with pytest.raises(DivergenceError):
            accumulated_step(tr_nan, [torch.arange(8)], 1)


class TestLocalBatches:
    def g(self):
        return torch.Generator().manual_seed(0)

    def test_epoch_plan(self):
        plan = local_batches(100, 8, 4, self.g(), epochs=2)
        # 12 full micro-batches per epoch, trailing 4 dropped; groups of 4
        assert len(plan) == 6
        assert all(len(grp) == 4 and all(len(mb) == 8 for mb in grp) for grp in plan)
        first = torch.cat([mb for grp in plan[:3] for mb in grp])
        assert len(set(first.tolist())) == 96

    def test_partial_last_group(self):
        plan = local_batches(40, 8, 3, self.g())
        assert [len(grp) for grp in plan] == [3, 2]

    def test_iterations_cross_epochs(self):
        plan = local_batches(20, 8, 1, self.g(), iterations=5)
        assert len(plan) == 5

    def test_small_and_empty(self):
        assert local_batches(0, 8, 1, self.g()) == []
        assert local_batches(50, 8, 2, self.g(), iterations=0) == []
        plan = local_batches(5, 8, 2, self.g())
        assert len(plan) == 1 and len(plan[0][0]) == 5
        with pytest.raises(ValueError):
            local_batches(50, 8, 2, self.g(), iterations=-1)

    def test_deterministic(self):
        a = local_batches(50, 8, 2, self.g())
        b = local_batches(50, 8, 2, self.g())
        assert all(torch.equal(x, y) for ga, gb in zip(a, b) for x, y in zip(ga, gb))
