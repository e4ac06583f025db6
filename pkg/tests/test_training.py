import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jmvae import tensor as T
from jmvae.data import make_toy
from jmvae.evaluation import BoundSpec, evaluate
from jmvae.models import build_model
from jmvae.networks import Architecture
from jmvae.training import (
    METRIC_FIELDS,
    Adam,
    TrainConfig,
    TrainingError,
    binarize_epoch,
    resample_binarization,
    train,
    warmup_beta,
)
from jmvae.tensor import Tensor

from helpers import TINY_ARCH

TOY_ARCH = Architecture((32, 32), 16, 4, (32, 32))


class TestWarmup:
    def test_midpoint(self):
        assert warmup_beta(99, 200) == 0.5

    def test_end_of_ramp_and_clamp(self):
        assert warmup_beta(199, 200) == 1.0
        assert warmup_beta(200, 200) == 1.0 and warmup_beta(10_000, 200) == 1.0

    def test_first_epoch_positive(self):
        assert warmup_beta(0, 200) == 1 / 200

    @given(st.integers(1, 500), st.integers(0, 1000))
    def test_non_decreasing(self, n_t, epoch):
        assert warmup_beta(epoch + 1, n_t) >= warmup_beta(epoch, n_t)
        if epoch >= n_t:
            assert warmup_beta(epoch, n_t) == 1.0

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            warmup_beta(-1, 10)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        before = p.data.copy()
        opt = Adam([p])
        for _ in range(3):
            opt.step([np.zeros(2)])
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_is_lr_times_sign(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        Adam([p], lr=1e-3).step([np.array([0.5, -3.0, 1e-2])])
        np.testing.assert_allclose(p.data, -1e-3 * np.array([1, -1, 1]), rtol=1e-5)

    def test_converges_on_quadratic(self):
        target = np.array([0.3, -0.2, 0.1])
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = Adam([p], lr=0.05)
        for _ in range(200):
            loss = T.sum_(T.square(p - target))
            opt.step(T.grad(loss, [p]))
        np.testing.assert_allclose(p.data, target, atol=1e-3)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            Adam([Tensor(np.zeros(2), requires_grad=True)]).step([np.zeros(3)])

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            Adam([Tensor(np.zeros(2), requires_grad=True)]).step([])


class TestBinarization:
    def test_degenerate_pixels(self):
        out = resample_binarization(np.array([0.0, 1.0, 0.0, 1.0]), np.random.default_rng(0))
        np.testing.assert_array_equal(out, [0, 1, 0, 1])

    def test_half_pixel_mean(self):
        n = 100_000
        out = resample_binarization(np.full(n, 0.5), np.random.default_rng(1))
        assert abs(out.mean() - 0.5) < 3 * 0.5 / np.sqrt(n)

    def test_reproducible_per_epoch(self):
        raw = np.random.default_rng(2).random((20, 9))
        assert binarize_epoch(raw, 3, 7).tobytes() == binarize_epoch(raw, 3, 7).tobytes()
        assert binarize_epoch(raw, 3, 7).tobytes() != binarize_epoch(raw, 3, 8).tobytes()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            resample_binarization(np.array([1.2]), np.random.default_rng(0))


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [{"epochs": 0}, {"warmup_epochs": 0}, {"learning_rate": 0}, {"batch_size": 0}, {"modality_dropout": 1.0}, {"precision": "float16"}]
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_mnist_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.warmup_epochs, c.learning_rate, c.batch_size) == (500, 200, 1e-3, 100)


@pytest.fixture(scope="module")
def toy():
    return make_toy(4, 16, 50, 0.05, 0)


def quick(variant, toy, epochs=2, **kw):
    h = build_model(variant, toy.x_spec, toy.w_spec, TOY_ARCH, alpha=0.1, seed=0)
    cfg = TrainConfig(epochs=epochs, batch_size=40, warmup_epochs=2, alpha=0.1, seed=0, precision="float64", **kw)
    return train(h, toy, cfg)


class TestTrain:
    @pytest.mark.parametrize("variant", ["vae", "cvae", "jmvae-zero", "jmvae-kl"])
    def test_epoch_one_bitwise_reproducible(self, variant, toy):
        a, b = quick(variant, toy, 1)[1][0], quick(variant, toy, 1)[1][0]
        a.pop("seconds"), b.pop("seconds")
        assert a == b

    @pytest.mark.slow
    def test_objective_improves_over_twenty_epochs(self):
        ds = make_toy(10, 64, 100, 0.05, 0)
        h = build_model("jmvae-kl", ds.x_spec, ds.w_spec, TOY_ARCH, alpha=0.1, seed=0)
        _, rows = train(h, ds, TrainConfig(epochs=20, warmup_epochs=8, alpha=0.1, seed=0))
        assert rows[-1]["total"] > rows[0]["total"]

    def test_metrics_csv_and_checkpoints(self, toy, tmp_path):
        h = build_model("jmvae-zero", toy.x_spec, toy.w_spec, TOY_ARCH, seed=0)
        train(h, toy, TrainConfig(epochs=4, batch_size=50, warmup_epochs=2, eval_every=2), tmp_path)
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == METRIC_FIELDS
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
        assert [float(r["beta"]) for r in rows] == [0.5, 1.0, 1.0, 1.0]
        assert {p.name for p in tmp_path.glob("*.jmck")} == {"epoch0002.jmck", "epoch0004.jmck", "final.jmck"}

    def test_training_precision_is_applied(self, toy):
        h = build_model("vae", toy.x_spec, toy.w_spec, TOY_ARCH, seed=0)
        train(h, toy, TrainConfig(epochs=1, precision="float32"))
        assert h.dtype == np.float32

    def test_non_finite_loss_names_the_term(self, toy):
        h = build_model("jmvae-kl", toy.x_spec, toy.w_spec, TOY_ARCH, alpha=0.1, seed=0)
        h["phi_w"].head_logvar.bias.data[:] = np.nan
        with pytest.raises(TrainingError, match="kl_sw"):
            train(h, toy, TrainConfig(epochs=1, precision="float64"))

    def test_modality_dropout_changes_only_jmvae_zero(self, toy):
        base = quick("jmvae-zero", toy, 1)[1][0]["total"]
        drop = quick("jmvae-zero", toy, 1, modality_dropout=0.5)[1][0]["total"]
        assert base != drop

    def test_dataset_mismatch(self, toy):
        other = make_toy(3, 9, 5, 0.1, 0)
        h = build_model("vae", other.x_spec, other.w_spec, TINY_ARCH)
        with pytest.raises(ValueError):
            train(h, toy, TrainConfig(epochs=1))

    def test_evaluation_does_not_update_parameters(self, toy):
        h, _ = quick("jmvae-kl", toy, 1)
        fp = h.fingerprint()
        evaluate(h, toy.x[:5], toy.w[:5], BoundSpec("conditional-x-given-w", "single-w", 3, 10))
        assert h.fingerprint() == fp
