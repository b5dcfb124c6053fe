import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graspinfer import autodiff as ad
from graspinfer import models, trainer, world


class Probe:
    """Minimal model over a few fixed features, for exercising the trainer."""

    def __init__(self, n_in=2, head=None, seed=0):
        self.graph = ad.Graph({"x": (n_in,)})
        self.graph.add("out", head or ad.Logistic(1), "x", rng=np.random.default_rng(seed))

    def batch_inputs(self, grids, thetas):
        return {"x": np.asarray(grids).reshape(len(grids), -1)}

    def targets(self, grids, thetas):
        return np.asarray(thetas, dtype=np.float64)


def toy_dataset(features, thetas, labels):
    features = np.asarray(features, dtype=np.float64)
    m = len(features)
    grids = features.reshape(m, 1, 1, features.shape[1])
    shapes = [None] * m
    return world.Dataset(grids, np.asarray(thetas, dtype=np.float64), labels, shapes)


def separable(n=20, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(np.uint8)
    x += np.where(y[:, None] == 1, 0.5, -0.5) * np.array([1.0, 0.5])  # open a margin
    return toy_dataset(x, np.zeros((n, 4)), y)


def small_cfg(**kw):
    return trainer.TrainConfig(mirror_augment=False, **kw)


class TestLoss:
    def test_examples(self):
        assert trainer.cross_entropy_loss(0.5, 1) == pytest.approx(0.693147, abs=1e-6)
        assert trainer.cross_entropy_loss(0.4, 0) == pytest.approx(0.510826, abs=1e-6)
        assert trainer.cross_entropy_loss(1 - 1e-12, 1) == pytest.approx(1e-12, rel=1e-3)

    def test_clamped_extremes_are_finite(self):
        out = trainer.cross_entropy_loss(np.array([0.0, 1.0, 0.0, 1.0]), np.array([1, 0, 0, 1]))
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(-math.log(1e-12))

    @given(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1))
    def test_matches_definition(self, p, y):
        ref = -math.log(p) if y else -math.log(1 - p)
        assert trainer.cross_entropy_loss(p, y) == pytest.approx(ref, rel=1e-9)


class TestSchedule:
    def test_step_decay(self):
        cfg = trainer.TrainConfig()
        assert trainer.learning_rate(0, cfg) == 0.001
        assert trainer.learning_rate(1999, cfg) == 0.001
        assert trainer.learning_rate(2000, cfg) == 0.0001
        assert trainer.learning_rate(4000, cfg) == pytest.approx(1e-5, rel=1e-12)

    def test_arch_defaults(self):
        assert trainer.TrainConfig.for_arch("config-net").iterations == 6000
        pn = trainer.TrainConfig.for_arch("patch-net")
        assert (pn.iterations, pn.decay_every) == (60000, 20000)
        reg = trainer.TrainConfig.for_arch("regression")
        assert not reg.oversample_positives and reg.ridge == 0.5

    def test_oversampling_needs_two_slots(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(batch_size=1)
        trainer.TrainConfig(batch_size=1, oversample_positives=False)


class TestMinibatch:
    def test_all_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            idx = trainer.sample_minibatch(np.ones(12, dtype=np.uint8), trainer.TrainConfig(), rng)
            assert len(idx) == 8

    def test_every_batch_has_a_positive(self):
        labels = np.zeros(1000, dtype=np.uint8)
        labels[:3] = 1
        rng = np.random.default_rng(1)
        cfg = trainer.TrainConfig()
        for _ in range(10_000):
            assert labels[trainer.sample_minibatch(labels, cfg, rng)].any()

    def test_positive_share_matches_replacement_rule(self):
        # one slot is replaced only when the uniform draw had no positive:
        # E[share] = (8 * 0.1 + 0.9**8) / 8
        expected = (8 * 0.1 + 0.9**8) / 8
        assert expected == pytest.approx(0.153808, abs=1e-6)
        labels = np.zeros(1000, dtype=np.uint8)
        labels[:100] = 1
        rng = np.random.default_rng(2)
        cfg = trainer.TrainConfig()
        share = np.mean([labels[trainer.sample_minibatch(labels, cfg, rng)].mean() for _ in range(10_000)])
        assert share == pytest.approx(expected, abs=0.01)

    def test_without_oversampling_share_is_base_rate(self):
        labels = np.zeros(1000, dtype=np.uint8)
        labels[:100] = 1
        rng = np.random.default_rng(3)
        cfg = trainer.TrainConfig(oversample_positives=False)
        share = np.mean([labels[trainer.sample_minibatch(labels, cfg, rng)].mean() for _ in range(10_000)])
        assert share == pytest.approx(0.1, abs=0.01)

    def test_errors(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            trainer.sample_minibatch(np.zeros(0), trainer.TrainConfig(), rng)
        with pytest.raises(ValueError):
            trainer.sample_minibatch(np.zeros(5), trainer.TrainConfig(), rng)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 50), st.integers(2, 16))
    def test_guarantee_property(self, seed, n_pos, batch):
        labels = np.zeros(200, dtype=np.uint8)
        labels[np.random.default_rng(seed).choice(200, n_pos, replace=False)] = 1
        rng = np.random.default_rng(seed)
        cfg = trainer.TrainConfig(batch_size=batch)
        for _ in range(50):
            assert labels[trainer.sample_minibatch(labels, cfg, rng)].any()


class TestMirror:
    def test_symmetric_fixed_point(self):
        grid = world.render(world.ObjectShape("rectangle", 0.5, 0.4, 0.0, 0.12, 0.06))
        theta = world.f32([0.5, 0.4, 0.0, 0.08])
        g2, t2, y2 = trainer.mirror_augment(grid, theta, 1)
        np.testing.assert_array_equal(g2, grid)
        np.testing.assert_array_equal(t2, theta)
        assert y2 == 1

    def test_twice_is_identity(self, reference_dataset):
        ds = reference_dataset
        for i in range(20):
            g, t, y = trainer.mirror_augment(*trainer.mirror_augment(ds.grids[i], ds.thetas[i], ds.labels[i]))
            np.testing.assert_array_equal(g, ds.grids[i])
            np.testing.assert_array_equal(t, ds.thetas[i])

    def test_mirrored_dataset_doubles(self, reference_dataset):
        ds = reference_dataset.subset(np.arange(50))
        md = trainer.mirrored_dataset(ds)
        assert len(md) == 100
        np.testing.assert_array_equal(md.labels[:50], md.labels[50:])
        for i in range(50):
            assert world.oracle_execute(md.shapes[50 + i], md.thetas[50 + i]).success == md.labels[50 + i]


class TestAdam:
    def test_zero_gradient_is_a_no_op(self):
        model = Probe(3, seed=1)
        before = {k: p.values.copy() for k, p in model.graph.params.items()}
        opt = trainer.Adam(model.graph.params, trainer.TrainConfig())
        opt.step({k: np.zeros(p.shape) for k, p in model.graph.params.items()}, 0.001)
        for k, p in model.graph.params.items():
            np.testing.assert_array_equal(p.values, before[k])

    def test_first_step_is_lr_times_sign(self):
        model = Probe(2, seed=1)
        w0 = model.graph.params["out.W"].values.copy()
        opt = trainer.Adam(model.graph.params, trainer.TrainConfig())
        grads = {k: np.full(p.shape, 3.0) for k, p in model.graph.params.items()}
        opt.step(grads, 0.01)
        np.testing.assert_allclose(model.graph.params["out.W"].values, w0 - 0.01, atol=1e-8)


class TestTrain:
    def test_separable_loss_goes_to_zero(self):
        ds = separable()
        res = trainer.train(Probe(), ds, small_cfg(iterations=2000, lr=0.05, keep=1.0))
        assert res.losses[-100:].mean() < 0.1
        assert np.all(np.isfinite(res.losses))

    def test_lr_trace(self):
        res = trainer.train(Probe(), separable(), small_cfg(iterations=30, decay_every=10))
        assert res.lrs[9] == 0.001 and res.lrs[10] == 0.0001 and res.lrs[29] == pytest.approx(1e-5)

    def test_bit_identical_runs(self, reference_dataset):
        ds = reference_dataset.subset(np.arange(60))
        cfg = trainer.TrainConfig(iterations=40, seed=4)
        a = trainer.train(models.build_model("config-net", seed=2), ds, cfg)
        b = trainer.train(models.build_model("config-net", seed=2), ds, cfg)
        assert a.loss_trace() == b.loss_trace()
        assert models.checkpoint_bytes(a.model) == models.checkpoint_bytes(b.model)
        assert a.n_samples == 120  # mirrored copies included

    def test_loss_trace_format(self):
        res = trainer.train(Probe(), separable(), small_cfg(iterations=3))
        lines = res.loss_trace().splitlines()
        assert len(lines) == 3
        assert [int(l.split()[0]) for l in lines] == [0, 1, 2]
        assert float(lines[0].split()[1]) == pytest.approx(res.losses[0], rel=1e-8)

    def test_non_finite_loss_aborts(self):
        model = Probe()
        model.graph.params["out.W"].values = np.full((2, 1), np.nan)
        with pytest.raises(trainer.TrainingError, match=r"iteration 0 \(lr=0.001\)"):
            trainer.train(model, separable(), small_cfg(iterations=5))

    def test_empty_dataset(self):
        ds = toy_dataset(np.zeros((0, 2)), np.zeros((0, 4)), np.zeros(0))
        with pytest.raises(ValueError):
            trainer.train(Probe(), ds, small_cfg(iterations=5))


class TestRegression:
    def test_trains_on_positives_only(self):
        ds = toy_dataset(np.eye(4)[:, :2], np.arange(16).reshape(4, 4), [1, 0, 1, 0])
        res = trainer.train_regression(Probe(2, ad.LinearHeads(4)), ds, small_cfg(iterations=5))
        assert res.n_samples == 2
        with pytest.raises(ValueError):
            trainer.train_regression(Probe(2, ad.LinearHeads(4)), toy_dataset(np.zeros((3, 2)), np.zeros((3, 4)), [0, 0, 0]),
                                     small_cfg())

    def test_ridge_shrinks_weights(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(10, 3))
        t = x @ rng.normal(size=(3, 4))
        ds = toy_dataset(np.tile(x, (3, 1)), np.tile(t, (3, 1)), np.ones(30))
        norms = []
        for ridge in (0.0, 0.5):
            model = Probe(3, ad.LinearHeads(4), seed=0)
            trainer.train_regression(model, ds, small_cfg(iterations=3000, ridge=ridge, keep=1.0,
                                                          oversample_positives=False, lr=0.01))
            norms.append(np.linalg.norm(model.graph.params["out.W"].values))
        assert norms[1] < norms[0]

    def test_memorizes_one_sample(self, reference_dataset):
        i = int(np.flatnonzero(reference_dataset.labels == 1)[0])
        ds = reference_dataset.subset([i])
        model = models.build_model("regression", seed=0)
        trainer.train_regression(model, ds, trainer.TrainConfig.for_arch("regression", iterations=800, lr=0.01, mirror_augment=False))
        pred = model.predict_theta(ds.grids[0])
        assert np.abs(pred - ds.thetas[0]).max() <= 1e-2
