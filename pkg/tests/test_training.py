import os

import numpy as np
import pytest

from capsconv.model import ConfigError, init_kernels, model_scores, preset
from capsconv.training import (
    Adam,
    EvalResult,
    MomentumSGD,
    NumericError,
    Pipeline,
    TrainConfig,
    batch_indices,
    batch_loss_and_grads,
    child_rng,
    derive_seed,
    evaluate,
    lr_at,
    make_optimizer,
    optimizer_from_state,
    train,
)
from capsconv.activations import MarginLossConfig, predict


def toy_pipeline(n_train=60, n_test=24, seed=0, augment="none"):
    rng = np.random.default_rng(seed)
    return Pipeline(
        name="synthetic",
        train_images=rng.uniform(0, 1, size=(n_train, 7, 7)).astype(np.float32),
        train_labels=rng.integers(0, 3, size=n_train),
        test_images=rng.uniform(0, 1, size=(n_test, 7, 7)).astype(np.float32),
        test_labels=rng.integers(0, 3, size=n_test),
        augment=augment,
    )


class TestSeeds:
    """Derived seeds: stable, role-separated."""

    def test_stable_values(self):
        assert derive_seed(0, "perm", 0) == derive_seed(0, "perm", 0)
        a = child_rng(7, "aug", 3).integers(0, 1 << 30)
        b = child_rng(7, "aug", 3).integers(0, 1 << 30)
        assert a == b

    def test_roles_and_indices_separate(self):
        seen = {derive_seed(1, role, i) for role in ("perm", "aug", "init")
                for i in range(5)}
        assert len(seen) == 15


class TestBatchSchedule:
    """Pure (seed, iteration) -> minibatch indices."""

    def test_epoch_batches_are_disjoint(self):
        n, batch = 10, 3  # 3 batches per epoch, one row dropped
        taken = [batch_indices(n, batch, seed=5, iteration=i) for i in range(3)]
        flat = np.concatenate(taken)
        assert len(set(flat.tolist())) == 9

    def test_next_epoch_reshuffles(self):
        a = batch_indices(100, 10, seed=5, iteration=0)
        b = batch_indices(100, 10, seed=5, iteration=10)  # same slot, epoch 1
        assert not np.array_equal(a, b)

    def test_pure_function(self):
        a = batch_indices(50, 8, seed=1, iteration=37)
        b = batch_indices(50, 8, seed=1, iteration=37)
        np.testing.assert_array_equal(a, b)

    def test_batch_too_large(self):
        with pytest.raises(ConfigError):
            batch_indices(5, 6, seed=0, iteration=0)


class TestLrSchedule:
    def test_halving_steps(self):
        assert lr_at(0.002, 0.5, 4000, 0) == 0.002
        assert lr_at(0.002, 0.5, 4000, 3999) == 0.002
        assert lr_at(0.002, 0.5, 4000, 4000) == 0.001
        assert lr_at(0.002, 0.5, 4000, 8000) == 0.0005


class TestOptimizers:
    """Update rules on hand-checkable cases."""

    def test_adam_constant_grad_moves_at_lr(self):
        # with g constant, bias-corrected m_hat=g, v_hat=g^2: step = lr*sign(g)
        k = [np.array([1.0])]
        opt = Adam(k)
        g = [np.array([0.3])]
        for t in range(1, 6):
            before = k[0].copy()
            opt.step(k, g, lr=0.01)
            np.testing.assert_allclose(before - k[0], 0.01, rtol=1e-6)
        assert opt.step_count == 5

    def test_sgd_momentum_recurrence(self):
        k = [np.array([0.0])]
        opt = MomentumSGD(k, momentum=0.9)
        g = [np.array([1.0])]
        opt.step(k, g, lr=0.1)   # vel=1, k=-0.1
        opt.step(k, g, lr=0.1)   # vel=1.9, k=-0.29
        np.testing.assert_allclose(k[0], [-0.29], rtol=1e-12)

    def test_state_round_trip_continues_identically(self):
        rng = np.random.default_rng(3)
        shape = (4, 3)
        for name in ("adam", "sgd"):
            start = rng.normal(size=shape)
            grads = [rng.normal(size=shape) for _ in range(4)]
            k1 = [start.copy()]
            opt1 = make_optimizer(name, k1)
            for g in grads[:3]:
                opt1.step(k1, [g], lr=0.05)
            # snapshot across a serialize boundary (copies, like a checkpoint)
            state = {key: ([a.copy() for a in val] if isinstance(val, list)
                           else val) for key, val in opt1.state().items()}
            k2 = [k1[0].copy()]
            opt2 = optimizer_from_state(state)
            opt1.step(k1, [grads[3]], lr=0.05)
            opt2.step(k2, [grads[3]], lr=0.05)
            np.testing.assert_array_equal(k1[0], k2[0])

    def test_unknown_optimizer(self):
        with pytest.raises(ConfigError):
            make_optimizer("rmsprop", [np.zeros(2)])


class TestBatchLossAndGrads:
    """Chunked data parallelism merges to the single-chunk result."""

    def test_thread_count_invariance(self):
        cfg = preset("toy")
        kernels = [k.astype(np.float64) for k in init_kernels(cfg, seed=1)]
        rng = np.random.default_rng(2)
        images = rng.uniform(0, 1, size=(7, 7, 7))
        labels = rng.integers(0, 3, size=7)
        base = batch_loss_and_grads(cfg, kernels, images, labels,
                                    MarginLossConfig(), threads=1)
        multi = batch_loss_and_grads(cfg, kernels, images, labels,
                                     MarginLossConfig(), threads=3)
        np.testing.assert_allclose(multi[0], base[0], rtol=1e-12)
        for a, b in zip(multi[1], base[1]):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)
        assert multi[2] == base[2]

    def test_input_grad_concatenates_chunks(self):
        cfg = preset("toy")
        kernels = init_kernels(cfg, seed=1)
        rng = np.random.default_rng(3)
        images = rng.uniform(0, 1, size=(5, 7, 7)).astype(np.float32)
        labels = rng.integers(0, 3, size=5)
        _, _, _, dx1 = batch_loss_and_grads(cfg, kernels, images, labels,
                                            MarginLossConfig(), threads=1,
                                            need_input_grad=True)
        _, _, _, dx2 = batch_loss_and_grads(cfg, kernels, images, labels,
                                            MarginLossConfig(), threads=2,
                                            need_input_grad=True)
        assert dx1.shape == (5, 1, 7, 7, 1, 1, 1)
        np.testing.assert_allclose(dx1, dx2, rtol=1e-5, atol=1e-8)


class TestEvaluate:
    def test_matches_direct_forward(self):
        cfg = preset("toy")
        kernels = init_kernels(cfg, seed=4)
        pipe = toy_pipeline(n_test=11)
        images, labels = pipe.eval_set()
        res = evaluate(cfg, kernels, images, labels, batch=4)
        scores = model_scores(cfg, kernels, images)
        want_acc = float((predict(scores) == labels).mean())
        assert res.accuracy == pytest.approx(want_acc)
        assert isinstance(res, EvalResult)
        assert res.error == pytest.approx(1.0 - want_acc)

    def test_threaded_eval_identical(self):
        cfg = preset("toy")
        kernels = init_kernels(cfg, seed=4)
        pipe = toy_pipeline(n_test=17)
        images, labels = pipe.eval_set()
        a = evaluate(cfg, kernels, images, labels, batch=4, threads=1)
        b = evaluate(cfg, kernels, images, labels, batch=4, threads=3)
        assert a.loss == b.loss and a.accuracy == b.accuracy


class TestTrainConfig:
    def test_presets(self):
        m = TrainConfig.mnist()
        assert (m.iterations, m.batch_size, m.base_lr, m.decay_every) == (
            30000, 128, 0.002, 4000)
        assert m.loss is None  # margin bounds come from the model config
        c = TrainConfig.cifar(seed=9)
        assert (c.iterations, c.batch_size, c.base_lr, c.decay_every) == (
            50000, 256, 0.001, 10000)
        assert c.seed == 9

    def test_margin_bounds_ride_with_the_model(self):
        assert preset("p2").loss == MarginLossConfig(0.5, 0.1, 0.5)
        assert preset("p4").loss == MarginLossConfig(0.6, 0.1, 0.5)


class TestTrainLoop:
    """End-to-end loop on a synthetic problem: artifacts, determinism, resume."""

    def _cfg(self, iterations, seed=3):
        return TrainConfig(iterations=iterations, batch_size=10, base_lr=0.01,
                           decay_every=1000, seed=seed, eval_every=5,
                           checkpoint_every=5, eval_batch=8)

    def test_artifacts_and_loss_decrease(self, tmp_path):
        out = tmp_path / "run"
        res = train(preset("toy"), self._cfg(30), toy_pipeline(), str(out))
        assert res.iteration == 30
        assert os.path.exists(res.metrics_path)
        assert os.path.exists(res.checkpoint_path)
        assert os.path.exists(out / "run.json")
        assert os.path.exists(out / "timings.csv")
        rows = (out / "metrics.csv").read_text().strip().splitlines()
        assert rows[0] == "iteration,split,loss,accuracy,lr"
        train_rows = [r for r in rows[1:] if ",train," in r]
        test_rows = [r for r in rows[1:] if ",test," in r]
        assert len(train_rows) == 30 and len(test_rows) == 6
        first = float(train_rows[0].split(",")[2])
        last = float(train_rows[-1].split(",")[2])
        assert last < first  # synthetic task is learnable at margin level

    def test_bitwise_deterministic(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            res = train(preset("toy"), self._cfg(20), toy_pipeline(),
                        str(tmp_path / sub))
            outs.append(res)
        a, b = outs
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
               (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a" / "final.bin").read_bytes() == \
               (tmp_path / "b" / "final.bin").read_bytes()

    def test_seed_changes_results(self, tmp_path):
        r1 = train(preset("toy"), self._cfg(10, seed=1), toy_pipeline(),
                   str(tmp_path / "s1"))
        r2 = train(preset("toy"), self._cfg(10, seed=2), toy_pipeline(),
                   str(tmp_path / "s2"))
        assert any(not np.array_equal(a, b)
                   for a, b in zip(r1.kernels, r2.kernels))

    def test_resume_matches_uninterrupted(self, tmp_path):
        pipe = toy_pipeline()
        full = train(preset("toy"), self._cfg(30), pipe, str(tmp_path / "full"))
        part = train(preset("toy"), self._cfg(15), pipe, str(tmp_path / "split"))
        resumed = train(preset("toy"), self._cfg(30), pipe,
                        str(tmp_path / "split"),
                        resume_from=part.checkpoint_path)
        assert (tmp_path / "full" / "metrics.csv").read_bytes() == \
               (tmp_path / "split" / "metrics.csv").read_bytes()
        for a, b in zip(full.kernels, resumed.kernels):
            np.testing.assert_array_equal(a, b)
        assert (tmp_path / "full" / "ck_0000030.bin").read_bytes() == \
               (tmp_path / "split" / "ck_0000030.bin").read_bytes()

    def test_resume_guards(self, tmp_path):
        part = train(preset("toy"), self._cfg(10), toy_pipeline(),
                     str(tmp_path / "r"))
        with pytest.raises(ConfigError):
            train(preset("toy"), self._cfg(20, seed=99), toy_pipeline(),
                  str(tmp_path / "r2"), resume_from=part.checkpoint_path)
        with pytest.raises(ConfigError):
            train(preset("p2"), self._cfg(20), toy_pipeline(),
                  str(tmp_path / "r3"), resume_from=part.checkpoint_path)
        with pytest.raises(ConfigError):  # checkpoint past requested horizon
            train(preset("toy"), self._cfg(5), toy_pipeline(),
                  str(tmp_path / "r4"), resume_from=part.checkpoint_path)

    def test_nan_input_raises_numeric_error(self, tmp_path):
        pipe = toy_pipeline()
        pipe.train_images[:] = np.nan
        with pytest.raises(NumericError):
            train(preset("toy"), self._cfg(3), pipe, str(tmp_path / "nan"))


class TestPipelinePolicies:
    def test_shift_policy_changes_batch(self):
        pipe = toy_pipeline(augment="shift")
        idx = np.arange(10)
        out = pipe.train_batch(idx, np.random.default_rng(1))
        assert out.shape == pipe.train_images[idx].shape
        assert not np.array_equal(out, pipe.train_images[idx])

    def test_none_policy_is_passthrough(self):
        pipe = toy_pipeline(augment="none")
        idx = np.arange(5)
        np.testing.assert_array_equal(
            pipe.train_batch(idx, np.random.default_rng(1)),
            pipe.train_images[idx])

    def test_crop_policy_and_eval_window(self):
        rng = np.random.default_rng(2)
        pipe = Pipeline("c", rng.uniform(size=(20, 8, 8, 3)).astype(np.float32),
                        rng.integers(0, 3, size=20),
                        rng.uniform(size=(6, 8, 8, 3)).astype(np.float32),
                        rng.integers(0, 3, size=6),
                        augment="crop", crop_size=6)
        batch = pipe.train_batch(np.arange(4), np.random.default_rng(0))
        assert batch.shape == (4, 6, 6, 3)
        images, labels = pipe.eval_set()
        assert images.shape == (6, 6, 6, 3)
        np.testing.assert_array_equal(images, pipe.test_images[:, 1:7, 1:7])

    def test_unknown_policy_rejected(self):
        with pytest.raises(ConfigError):
            toy_pipeline(augment="flip")
