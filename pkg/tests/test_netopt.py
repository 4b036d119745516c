import numpy as np
import pytest

from admlkit import dataio
from admlkit.gradcheck import central_difference, kink_distance
from admlkit.losses import ClassHead, FeatureBatch, LossConfig, LossVariant, joint_loss
from admlkit.netopt import (
    NetworkSpec,
    NetworkState,
    SGDConfig,
    accuracy,
    backward,
    finetune_schedule,
    forward,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    scratch_schedule,
    sgd_step,
    train,
)
from admlkit.numcore import make_rng

from conftest import rel_err

FULL_SCHEDULE = SGDConfig(base_lr=0.1, lr_drops=((16000, 10), (24000, 10)))


def linear_net(w):
    w = np.asarray(w, dtype=float)
    spec = NetworkSpec(w.shape[0], (), w.shape[1])
    return NetworkState(spec, {"W0": w.copy(), "b0": np.zeros(w.shape[1])})


class TestForwardBackward:
    def test_identity_passthrough(self):
        net = NetworkState(NetworkSpec(3, (3,), 3),
                           {"W0": np.eye(3), "b0": np.zeros(3), "W1": np.eye(3), "b1": np.zeros(3)})
        x = np.array([[0.0, 1.5, 2.0]])
        np.testing.assert_array_equal(forward(net, x)[0], x)

    @pytest.mark.parametrize("act", ["relu", "prelu"])
    def test_zero_input_zero_features(self, act):
        net = NetworkState.init(NetworkSpec(5, (7, 4), 3, act, init_seed=2))
        assert not forward(net, np.zeros((2, 5)))[0].any()

    def test_input_dim_mismatch(self):
        net = NetworkState.init(NetworkSpec(5, (4,), 2))
        with pytest.raises(ValueError):
            forward(net, np.zeros((2, 4)))

    def test_zero_upstream_gradient(self, rng):
        net = NetworkState.init(NetworkSpec(4, (6,), 3, "prelu"))
        _, cache = forward(net, rng.normal(size=(5, 4)))
        grads = backward(net, cache, np.zeros((5, 3)))
        assert set(grads) == set(net.params)
        assert all(not g.any() for g in grads.values())

    def test_linear_closed_form(self, rng):
        net = linear_net(rng.normal(size=(4, 3)))
        x = rng.normal(size=(5, 4))
        g = rng.normal(size=(5, 3))
        _, cache = forward(net, x)
        grads = backward(net, cache, g)
        np.testing.assert_allclose(grads["W0"], x.T @ g, atol=1e-14)
        np.testing.assert_allclose(grads["b0"], g.sum(axis=0), atol=1e-14)

    def test_stale_cache_rejected(self, rng):
        net = NetworkState.init(NetworkSpec(4, (3,), 2))
        _, cache = forward(net, rng.normal(size=(2, 4)))
        net.version += 1
        with pytest.raises(ValueError, match="stale"):
            backward(net, cache, np.zeros((2, 2)))

    @pytest.mark.parametrize("act", ["relu", "prelu"])
    def test_jacobian_vector_product(self, rng, act):
        net = NetworkState.init(NetworkSpec(5, (6, 4), 3, act, init_seed=4))
        x = rng.normal(size=(7, 5))
        g = rng.normal(size=(7, 3))
        _, cache = forward(net, x)
        grads = backward(net, cache, g)
        names = list(net.params)

        def f(*arrays):
            for k, a in zip(names, arrays):
                net.params[k] = a
            return float(np.sum(g * forward(net, x)[0]))

        numeric = central_difference(f, [net.params[k] for k in names])
        assert rel_err(np.concatenate([grads[k].ravel() for k in names]),
                       np.concatenate([n.ravel() for n in numeric])) < 1e-5


def _relu_kink_free(net, x, tol=1e-3):
    _, cache = forward(net, x)
    return all(np.abs(z).min() > tol for z in cache.pre[:-1])


@pytest.mark.parametrize("variant", list(LossVariant))
def test_end_to_end_gradient(variant):
    """Two-layer net + joint loss on an 8 x 6 batch against finite differences."""
    rng = make_rng([99, list(LossVariant).index(variant)])
    cfg = LossConfig(variant=variant, lam=0.5, alpha=0.3, alpha0=0.2, p=0.6)
    for _ in range(200):
        spec = NetworkSpec(6, (5,), 4, "prelu", init_seed=int(rng.integers(1 << 30)))
        net = NetworkState.init(spec)
        x = rng.normal(size=(8, 6))
        y = rng.integers(0, 5, size=8)
        head = ClassHead(rng.normal(size=(4, 5)), np.full(5, 0.2), rng.uniform(1, 4))
        feats, _ = forward(net, x)
        batch = FeatureBatch(feats, y)
        if cfg.variant.adaptive:
            joint_loss(batch, head, cfg)  # settle margins, then freeze them
        if _relu_kink_free(net, x) and kink_distance(batch, head, cfg) > 1e-3:
            break
    names = list(net.params)
    feats, cache = forward(net, x)
    out = joint_loss(FeatureBatch(feats, y), head, cfg, update_margins=False)
    grads = backward(net, cache, out.grad_features)

    def f(*arrays):
        for k, a in zip(names, arrays[:-2]):
            net.params[k] = a
        h = ClassHead(arrays[-2], head.margins, arrays[-1][0])
        return joint_loss(FeatureBatch(forward(net, x)[0], y), h, cfg, update_margins=False).loss

    params = [net.params[k].copy() for k in names] + [head.weights.copy(), np.array([head.scale])]
    numeric = central_difference(f, params)
    analytic = [grads[k] for k in names] + [out.grad_weights, np.array([out.grad_scale])]
    assert rel_err(np.concatenate([a.ravel() for a in analytic]),
                   np.concatenate([n.ravel() for n in numeric])) < 1e-5


class TestSchedule:
    @pytest.mark.parametrize("it,lr", [(0, 0.1), (16000, 0.01), (27999, 0.001)])
    def test_full_schedule(self, it, lr):
        assert lr_at(FULL_SCHEDULE, it) == pytest.approx(lr, rel=1e-15)

    def test_non_increasing(self):
        lrs = [lr_at(FULL_SCHEDULE, i) for i in range(0, 28000, 250)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_scaled_scratch_schedule(self):
        cfg = scratch_schedule(2000)
        assert cfg.lr_drops == ((1143, 10.0), (1714, 10.0))
        assert scratch_schedule().lr_drops == FULL_SCHEDULE.lr_drops

    def test_finetune(self):
        cfg = finetune_schedule()
        assert (cfg.base_lr, cfg.lr_drops, cfg.max_iter) == (0.001, (), 4000)

    def test_validation(self):
        with pytest.raises(ValueError):
            SGDConfig(lr_drops=((10, 10), (10, 10)))
        with pytest.raises(ValueError):
            SGDConfig(base_lr=-0.1)


class TestSGDStep:
    def test_decay_only(self):
        p = {"w": np.array([1.0])}
        sgd_step(p, {"w": np.zeros(1)}, {"w": np.zeros(1)},
                 SGDConfig(base_lr=0.1, lr_drops=(), momentum=0.0, weight_decay=0.0005), 0)
        assert p["w"][0] == pytest.approx(0.99995, rel=1e-15)

    def test_plain_descent(self, rng):
        w = rng.normal(size=3)
        g = rng.normal(size=3)
        p = {"w": w.copy()}
        sgd_step(p, {"w": g}, {"w": np.zeros(3)},
                 SGDConfig(base_lr=0.3, lr_drops=(), momentum=0.0, weight_decay=0.0), 0)
        np.testing.assert_array_equal(p["w"], w - 0.3 * g)

    def test_momentum_two_steps(self, rng):
        cfg = SGDConfig(base_lr=0.05, lr_drops=(), momentum=0.9, weight_decay=0.001)
        w0 = rng.normal(size=4)
        g1, g2 = rng.normal(size=4), rng.normal(size=4)
        p, v = {"w": w0.copy()}, {"w": np.zeros(4)}
        sgd_step(p, {"w": g1}, v, cfg, 0)
        sgd_step(p, {"w": g2}, v, cfg, 1)
        v1 = g1 + 0.001 * w0
        w1 = w0 - 0.05 * v1
        v2 = 0.9 * v1 + g2 + 0.001 * w1
        w2 = w1 - 0.05 * v2
        np.testing.assert_allclose(p["w"], w2, rtol=0, atol=1e-12)
        np.testing.assert_allclose(v["w"], v2, rtol=0, atol=1e-12)

    def test_no_decay_names(self):
        p = {"a": np.array([0.25])}
        sgd_step(p, {"a": np.zeros(1)}, {"a": np.zeros(1)}, SGDConfig(momentum=0.0), 0,
                 no_decay=("a",))
        assert p["a"][0] == 0.25

    def test_decay_shrinks_norm(self, rng):
        w = rng.normal(size=10)
        p, v = {"w": w.copy()}, {"w": np.zeros(10)}
        for it in range(5):
            before = np.linalg.norm(p["w"])
            sgd_step(p, {"w": np.zeros(10)}, v, SGDConfig(), it)
            assert np.linalg.norm(p["w"]) < before


def separable_blobs():
    return dataio.synth_blobs(2, 4, 50, 0.05, seed=3)


class TestTrain:
    def test_zero_lr_leaves_parameters(self):
        ds = separable_blobs()
        spec = NetworkSpec(4, (8,), 3)
        cfg = SGDConfig(base_lr=0.0, lr_drops=(), max_iter=1, batch_size=16)
        net, head, log = train(ds, spec, LossConfig(lam=0.0), cfg, seed=1)
        init = NetworkState.init(spec)
        for k in init.params:
            np.testing.assert_array_equal(net.params[k], init.params[k])
        assert len(log.iterations) == 1

    def test_separable_reaches_full_accuracy(self):
        ds = separable_blobs()
        spec = NetworkSpec(4, (8,), 3)
        net, head, _ = train(ds, spec, LossConfig(), scratch_schedule(200, batch_size=32), seed=0)
        assert accuracy(net, head, ds) == 1.0

    def test_deterministic(self):
        ds = dataio.synth_blobs(3, 5, 30, 0.3, seed=1)
        spec = NetworkSpec(5, (8,), 4, "prelu")
        cfg = scratch_schedule(60, batch_size=16)
        loss = LossConfig(variant="MALMC", lam=0.1)
        a = train(ds, spec, loss, cfg, seed=5)
        b = train(ds, spec, loss, cfg, seed=5)
        for k in a[0].params:
            assert np.array_equal(a[0].params[k], b[0].params[k])
        assert np.array_equal(a[1].weights, b[1].weights)
        assert a[2].loss == b[2].loss and a[2].margins[-1].tolist() == b[2].margins[-1].tolist()

    def test_log_contents(self, tmp_path):
        ds = dataio.synth_blobs(3, 5, 20, 0.3, seed=1)
        net, head, log = train(ds, NetworkSpec(5, (6,), 4), LossConfig(variant="MALMC", alpha0=0.2),
                               scratch_schedule(10, batch_size=16), seed=0)
        assert log.margins[0].tolist() == [0.2, 0.2, 0.2]
        assert all(np.all((m >= 0.2) & (m <= 1.0)) for m in log.margins)
        log.to_csv(tmp_path / "log.csv")
        header = (tmp_path / "log.csv").read_text().splitlines()[0]
        assert header.startswith("iteration,lr,loss,violation_count,hard_count")
        assert header.endswith("margin_0,margin_1,margin_2")

    def test_warm_start_mismatch(self):
        ds = separable_blobs()
        spec = NetworkSpec(4, (8,), 3)
        net, head, _ = train(ds, spec, LossConfig(), scratch_schedule(5, batch_size=16))
        with pytest.raises(ValueError):
            train(ds, NetworkSpec(4, (9,), 3), LossConfig(variant="NLMC"),
                  finetune_schedule(5, batch_size=16), warm_start=(net, head))

    def test_warm_start_keeps_weights(self):
        ds = separable_blobs()
        spec = NetworkSpec(4, (8,), 3)
        net, head, _ = train(ds, spec, LossConfig(), scratch_schedule(20, batch_size=16))
        net2, head2, _ = train(ds, spec, LossConfig(variant="NLMC"),
                               SGDConfig(base_lr=0.0, lr_drops=(), max_iter=1),
                               warm_start=(net, head))
        np.testing.assert_array_equal(head2.weights, head.weights)
        np.testing.assert_array_equal(net2.params["W0"], net.params["W0"])

    def test_empty_dataset(self):
        ds = dataio.Dataset(np.zeros((0, 4)), [], 2)
        with pytest.raises(ValueError):
            train(ds, NetworkSpec(4, (), 2), LossConfig(), scratch_schedule(5))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        net = NetworkState.init(NetworkSpec(5, (4, 3), 2, "prelu", init_seed=11))
        head = ClassHead(rng.normal(size=(2, 6)), rng.uniform(0.2, 1, 6), 7.5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, net, head)
        assert path.read_bytes()[:8] == b"ADMLCKPT"
        net2, head2 = load_checkpoint(path)
        assert net2.spec == net.spec
        assert list(net2.params) == list(net.params)
        for k in net.params:
            assert np.array_equal(net2.params[k], net.params[k])
        assert np.array_equal(head2.weights, head.weights)
        assert np.array_equal(head2.margins, head.margins)
        assert head2.scale == head.scale
        save_checkpoint(tmp_path / "again.ckpt", net2, head2)
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_size_matches_layout(self, tmp_path):
        net = NetworkState.init(NetworkSpec(3, (2,), 2))
        head = ClassHead(np.ones((2, 4)), np.zeros(4))
        save_checkpoint(tmp_path / "m.ckpt", net, head)
        n_params = (3 * 2 + 2) + (2 * 2 + 2) + 2 * 4 + 4 + 1
        header = 8 + 4 * 5 + 8 + 4 + 4 * 1
        assert (tmp_path / "m.ckpt").stat().st_size == header + 8 * n_params

    def test_bad_magic_and_truncation(self, tmp_path):
        net = NetworkState.init(NetworkSpec(3, (2,), 2))
        save_checkpoint(tmp_path / "m.ckpt", net, ClassHead(np.ones((2, 4)), np.zeros(4)))
        data = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + data[8:])
        (tmp_path / "short.ckpt").write_bytes(data[:-8])
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "bad.ckpt")
        with pytest.raises(ValueError, match="bytes"):
            load_checkpoint(tmp_path / "short.ckpt")
