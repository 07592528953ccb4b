import math
import warnings

import numpy as np
import pytest
import torch

from ssfl import params as P
from ssfl.data import LabeledImages, UnlabeledImages
from ssfl.evaluation import (ProbeConfig, ProbeError, ProbeResult, federated_linear_probe,
                             frozen_features, global_knn_evaluator, knn_indicator, knn_predict,
                             local_adapt, naive_federated_probe, personal_knn_evaluator,
                             personalized_linear_probe, train_linear_classifier)
from ssfl.partitioning import ClientShard
from ssfl.ssl import AdditiveNoise, ModelConfig, build_model, stub_model_config


def clusters(n_per, C=4, d=8, noise=0.3, seed=0):
    """Gaussian blobs around scaled one-hot means; balanced, interleaved labels."""
    g = torch.Generator().manual_seed(seed)
    labels = torch.arange(n_per * C) % C
    means = 3.0 * torch.eye(C, d)
    x = means[labels] + noise * torch.randn(n_per * C, d, generator=g)
    return LabeledImages(x, labels)


def iid_shards(n_train, n_test, K):
    tr = np.array_split(np.arange(n_train), K)
    te = np.array_split(np.arange(n_test), K)
    return [ClientShard(k, tr[k].tolist(), te[k].tolist()) for k in range(K)]


def identity(x):
    return x


def knn_oracle(train, labels, test, k, T, C):
    tr = train / np.linalg.norm(train, axis=1, keepdims=True)
    te = test / np.linalg.norm(test, axis=1, keepdims=True)
    out = []
    for q in te:
        sim = tr @ q
        order = np.argsort(-sim, kind="stable")[:k]
        votes = np.zeros(C)
        for i in order:
            votes[labels[i]] += math.exp(sim[i] / T)
        out.append(int(np.argmax(votes)))
    return np.array(out)


class TestKNN:
    def test_k1_on_train_set_is_identity(self):
        data = clusters(20, noise=1.0)
        acc = knn_indicator(identity, data.images, data.labels, data.images, data.labels, k=1)
        assert acc == 1.0

    def test_separated_clusters(self):
        tr, te = clusters(30, noise=0.05, seed=1), clusters(10, noise=0.05, seed=2)
        assert knn_indicator(identity, tr.images, tr.labels, te.images, te.labels, k=20) == 1.0

    @pytest.mark.parametrize("k,T", [(1, 0.1), (5, 0.1), (15, 0.5), (40, 0.07)])
    def test_matches_brute_force(self, k, T):
        g = torch.Generator().manual_seed(k)
        tr = torch.randn(60, 5, generator=g, dtype=torch.float64)
        te = torch.randn(25, 5, generator=g, dtype=torch.float64)
        lab = torch.randint(0, 3, (60,), generator=g)
        got = knn_predict(tr, lab, te, k=k, temperature=T, num_classes=3).numpy()
        want = knn_oracle(tr.numpy(), lab.numpy(), te.numpy(), k, T, 3)
        assert np.array_equal(got, want)

    def test_ties_prefer_lowest_train_index(self):
        tr = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        lab = torch.tensor([2, 0, 1])
        pred = knn_predict(tr, lab, torch.tensor([[2.0, 0.0]]), k=1, num_classes=3)
        assert pred.tolist() == [2]

    def test_k_larger_than_bank_is_clamped(self):
        tr, te = clusters(3, noise=0.05), clusters(2, noise=0.05, seed=3)
        with pytest.warns(UserWarning, match="exceeds"):
            acc = knn_indicator(identity, tr.images, tr.labels, te.images, te.labels, k=200)
        assert 0.0 <= acc <= 1.0

    def test_errors(self):
        with pytest.raises(ProbeError):
            knn_predict(torch.zeros(0, 3), torch.zeros(0, dtype=torch.long), torch.ones(1, 3))
        with pytest.raises(ProbeError):
            knn_predict(torch.ones(2, 3), torch.zeros(2, dtype=torch.long), torch.ones(1, 3), k=0)
        with pytest.raises(ProbeError):
            knn_indicator(identity, torch.ones(2, 3), torch.zeros(2, dtype=torch.long),
                          torch.zeros(0, 3), torch.zeros(0, dtype=torch.long))


def small_cfg(**kw):
    args = dict(epochs=30, rounds=20, lr=1.0, batch_size=64)
    args.update(kw)
    return ProbeConfig(**args)


class TestLinearProbes:
    def test_separable_federated_probe(self):
        tr, te = clusters(50, noise=0.1), clusters(20, noise=0.1, seed=1)
        shards = iid_shards(len(tr), len(te), 4)
        res = federated_linear_probe(identity, tr, shards, te, small_cfg())
        assert res.global_accuracy == 1.0
        assert res.accuracies == [1.0] * 4

    def test_zero_rounds_is_chance(self):
        tr, te = clusters(50), clusters(50, seed=1)
        res = federated_linear_probe(identity, tr, iid_shards(len(tr), len(te), 2), te,
                                     small_cfg(rounds=0))
        assert abs(res.global_accuracy - 0.25) <= 0.05

    def test_central_classifier_separable(self):
        tr = clusters(40, noise=0.1)
        lin = train_linear_classifier(tr.images, tr.labels, 4, small_cfg())
        assert (lin(tr.images).argmax(1) == tr.labels).all()

    def test_single_client_personalized_equals_central(self):
        tr, te = clusters(40, noise=1.0), clusters(40, noise=1.0, seed=5)
        cfg = small_cfg()
        res = personalized_linear_probe({0: identity}, tr, iid_shards(len(tr), len(te), 1), te, cfg)
        feats = torch.nn.functional.normalize(tr.images, dim=1)
        lin = train_linear_classifier(feats, tr.labels, 4, cfg)
        te_feats = torch.nn.functional.normalize(te.images, dim=1)
        central = float((lin(te_feats).argmax(1) == te.labels).double().mean())
        assert res.accuracies == [central]

    def test_naive_equals_federated_for_identical_encoders(self):
        tr, te = clusters(50, noise=0.8), clusters(30, noise=0.8, seed=1)
        shards = iid_shards(len(tr), len(te), 4)
        cfg = small_cfg()
        fed = federated_linear_probe(identity, tr, shards, te, cfg)
        naive = naive_federated_probe({k: identity for k in range(4)}, tr, shards, te, cfg)
        assert abs(fed.mean - naive.mean) <= 0.01
        assert naive.client_ids == fed.client_ids

    def test_identical_encoders_personalized_close_to_federated(self):
        tr, te = clusters(100, noise=0.8), clusters(100, noise=0.8, seed=1)
        shards = iid_shards(len(tr), len(te), 4)
        cfg = small_cfg(rounds=40)
        fed = federated_linear_probe(identity, tr, shards, te, cfg)
        per = personalized_linear_probe({k: identity for k in range(4)}, tr, shards, te, cfg)
        assert abs(fed.mean - per.mean) <= 0.02

    def test_rotated_encoders_separate_personalized_from_naive(self):
        """Client k sees the data through the orthogonal map that cycles class means by k.
        A per-client classifier is unaffected, while any shared classifier labels each
        cluster region correctly for at most one of the K clients."""
        C = K = 4
        tr, te = clusters(60, C=C, d=C, noise=0.2), clusters(30, C=C, d=C, noise=0.2, seed=1)
        shards = iid_shards(len(tr), len(te), K)
        rots = [torch.roll(torch.eye(C), k, dims=1) for k in range(K)]
        encoders = {k: (lambda x, R=rots[k]: x @ R) for k in range(K)}
        cfg = small_cfg()
        per = personalized_linear_probe(encoders, tr, shards, te, cfg)
        naive = naive_federated_probe(encoders, tr, shards, te, cfg)
        assert per.mean >= 0.95
        assert naive.mean <= 1.0 / K + 0.1
        assert per.mean > naive.mean + 0.5

    def test_labels_required(self):
        tr = clusters(10)
        with pytest.raises(ProbeError, match="labelled"):
            federated_linear_probe(identity, UnlabeledImages(tr.images), iid_shards(40, 0, 2),
                                   None, small_cfg())

    def test_missing_encoder(self):
        tr, te = clusters(10), clusters(10, seed=1)
        with pytest.raises(ProbeError, match="client 1"):
            naive_federated_probe({0: identity}, tr, iid_shards(40, 40, 2), te, small_cfg())

    def test_client_without_local_test_is_skipped(self):
        tr, te = clusters(20, noise=0.1), clusters(10, noise=0.1, seed=1)
        shards = [ClientShard(0, list(range(40)), list(range(40))), ClientShard(1, list(range(40, 80)))]
        with pytest.warns(UserWarning, match="client 1"):
            res = personalized_linear_probe({0: identity, 1: identity}, tr, shards, te, small_cfg())
        assert res.client_ids == [0]

    def test_result_validation(self):
        with pytest.raises(ProbeError):
            ProbeResult("svm")
        with pytest.raises(ProbeError):
            ProbeResult("knn", [0], [1.5])
        rec = ProbeResult("knn", [0, 1], [0.5, 1.0]).to_record()
        assert rec["mean_accuracy"] == 0.75


class TestFrozenEncoders:
    def net(self):
        return build_model(ModelConfig(widths=[4, 8], proj_dim=8, proj_hidden=16), seed=0)

    def test_probes_leave_encoder_bytes_unchanged(self):
        net = self.net()
        net.train()
        before = {k: v.clone() for k, v in net.state_dict().items()}
        g = torch.Generator().manual_seed(0)
        tr = LabeledImages(torch.rand(40, 3, 16, 16, generator=g), torch.arange(40) % 4)
        te = LabeledImages(torch.rand(20, 3, 16, 16, generator=g), torch.arange(20) % 4)
        shards = iid_shards(40, 20, 2)
        fn = frozen_features(net)
        knn_indicator(fn, tr.images, tr.labels, te.images, te.labels, k=5)
        federated_linear_probe(fn, tr, shards, te, small_cfg(rounds=2))
        personalized_linear_probe({0: fn, 1: fn}, tr, shards, te, small_cfg(epochs=2))
        naive_federated_probe({0: fn, 1: fn}, tr, shards, te, small_cfg(rounds=2))
        after = net.state_dict()
        for k in before:
            assert torch.equal(before[k], after[k]), k
        assert net.training

    def test_features_have_no_grad(self):
        fn = frozen_features(self.net())
        assert not fn(torch.rand(2, 3, 16, 16)).requires_grad

    def test_unknown_output(self):
        with pytest.raises(ValueError):
            frozen_features(self.net(), output="logits")


class TestRoundEvaluators:
    def setup(self):
        net = build_model(stub_model_config(in_dim=8), seed=0)
        tr, te = clusters(20, noise=0.1), clusters(10, noise=0.1, seed=1)
        tr, te = (LabeledImages(d.images.double(), d.labels) for d in (tr, te))
        return net, tr, te

    def test_global_evaluator_in_range(self):
        net, tr, te = self.setup()
        acc = global_knn_evaluator(net, tr, te, k=10)(0, P.from_module(net), {})
        assert 0.0 <= acc <= 1.0

    def test_personal_evaluator_falls_back_to_init(self):
        net, tr, te = self.setup()
        shards = iid_shards(len(tr), len(te), 2)
        init = P.from_module(net)
        per = personal_knn_evaluator(net, tr, te, shards, init, k=5)(0, init, {})
        # with no personal states every client uses the initial model on its own bank
        expect = []
        fn = frozen_features(net)
        for s in shards:
            bank, lt = tr.subset(s.train_indices), te.subset(s.test_indices)
            expect.append(knn_indicator(fn, bank.images, bank.labels, lt.images, lt.labels, k=5,
                                        num_classes=4))
        assert per == pytest.approx(float(np.mean(expect)), abs=1e-12)


class TestLocalAdapt:
    def test_zero_steps_is_identity(self):
        net = build_model(stub_model_config(), seed=0)
        params = P.from_module(net)
        data = torch.randn(64, 6, dtype=torch.float64)
        out = local_adapt(net, params, UnlabeledImages(data), AdditiveNoise(0.1), lr=0.1, steps=0,
                          batch_size=8, accumulation_steps=2)
        assert P.max_abs_diff(out, params) == 0.0

    def test_one_step_moves_and_is_deterministic(self):
        net = build_model(stub_model_config(), seed=0)
        params = P.from_module(net)
        data = UnlabeledImages(torch.randn(64, 6, dtype=torch.float64))

        def run():
            return local_adapt(net, params, data, AdditiveNoise(0.1), lr=0.1, steps=1, batch_size=8,
                               accumulation_steps=2, generator=torch.Generator().manual_seed(3))

        a, b = run(), run()
        assert P.max_abs_diff(a, params) > 0
        assert P.max_abs_diff(a, b) == 0.0
        assert P.max_abs_diff(P.from_module(net), params) == 0.0
