import json
import math

import numpy as np
import pytest

from harmonizer import training as TR
from harmonizer.config import RunConfig
from harmonizer.checkpoint import load_checkpoint
from harmonizer.errors import (
    ConfigError,
    EmptyRegionError,
    NonFiniteGradientError,
    ValidationError,
)
from harmonizer.generator import Generator
from harmonizer.tensor import GradTape, ParamStore, Tensor


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


class TestForegroundMseLoss:
    def test_zero_for_equal(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(1, 3, 8, 8))
        mask = np.ones((1, 1, 8, 8))
        loss = TR.foreground_mse_loss(t64(x), x.copy(), mask)
        assert loss.item() == 0.0

    def test_single_pixel_single_channel(self):
        delta = 0.25
        pred = np.zeros((1, 3, 20, 10))
        target = np.zeros((1, 3, 20, 10))
        pred[0, 1, 3, 4] += delta
        mask = np.ones((1, 1, 20, 10))  # 200 pixels
        loss = TR.foreground_mse_loss(t64(pred), target, mask)
        np.testing.assert_allclose(loss.item(), delta * delta / 200.0, rtol=1e-12)

    def test_area_floor(self):
        pred = np.zeros((1, 3, 8, 8))
        target = np.zeros((1, 3, 8, 8))
        pred[0, 0, 0, 0] = 1.0  # unit total squared error
        mask = np.zeros((1, 1, 8, 8))
        mask[0, 0, :3, :3] = 1  # 9 < 100
        loss = TR.foreground_mse_loss(t64(pred), target, mask, min_fg_area=100.0)
        np.testing.assert_allclose(loss.item(), 1.0 / 100.0, rtol=1e-12)

    def test_composed_output_ignores_off_mask_prediction(self):
        # through residual composition the off-mask residual is annihilated,
        # so the loss cannot see it
        from harmonizer.generator import compose_residual

        rng = np.random.default_rng(1)
        image = rng.uniform(size=(1, 3, 8, 8))
        target = rng.uniform(size=(1, 3, 8, 8))
        mask = np.zeros((1, 1, 8, 8))
        mask[0, 0, 2:5, 2:5] = 1
        residual_a = rng.normal(size=(1, 3, 8, 8))
        residual_b = residual_a.copy()
        residual_b[np.broadcast_to(mask == 0, residual_b.shape)] += 99.0
        out_a = compose_residual(t64(image), t64(residual_a), t64(mask))
        out_b = compose_residual(t64(image), t64(residual_b), t64(mask))
        la = TR.foreground_mse_loss(out_a, target, mask)
        lb = TR.foreground_mse_loss(out_b, target, mask)
        assert la.item() == lb.item()

    def test_batch_mean(self):
        pred = np.zeros((2, 1, 4, 4))
        target = np.zeros((2, 1, 4, 4))
        pred[0, 0, 0, 0] = 2.0
        mask = np.ones((2, 1, 4, 4))
        # per-sample: 4/max(100,16)=0.04 and 0; mean = 0.02
        loss = TR.foreground_mse_loss(t64(pred), target, mask)
        np.testing.assert_allclose(loss.item(), 0.02, rtol=1e-12)

    def test_gradient(self):
        from harmonizer import tensor as T

        rng = np.random.default_rng(2)
        pred = Tensor(rng.uniform(size=(1, 3, 5, 5)), requires_grad=True)
        target = rng.uniform(size=(1, 3, 5, 5))
        mask = (rng.uniform(size=(1, 1, 5, 5)) < 0.5).astype(float)
        err = T.grad_check(
            lambda: TR.foreground_mse_loss(pred, target, mask), [("pred", pred)]
        )
        assert err < 1e-8


class TestAdam:
    def make(self, values, lr=1e-3):
        store = ParamStore()
        p = store.register("p", np.asarray(values, dtype=np.float64))
        return store, p, TR.Adam(store, lr=lr)

    def test_first_step_sign_update(self):
        store, p, adam = self.make([1.0, -2.0, 3.0])
        p.grad = np.array([0.5, -0.25, 1.5])
        before = p.data.copy()
        adam.step()
        update = before - p.data
        np.testing.assert_allclose(update, 1e-3 * np.sign(p.grad), rtol=1e-4)

    def test_zero_gradient_no_move(self):
        store, p, adam = self.make([1.0, 2.0])
        p.grad = np.zeros(2)
        before = p.data.copy()
        adam.step()
        np.testing.assert_array_equal(p.data, before)

    def test_missing_gradient_no_move(self):
        store, p, adam = self.make([1.0, 2.0])
        adam.step()
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_quadratic_descends(self):
        store, p, adam = self.make([1.0], lr=1e-3)
        values = []
        for _ in range(3):
            values.append(0.5 * float(p.data[0]) ** 2)
            p.grad = p.data.copy()  # gradient of 0.5 x^2
            adam.step()
        assert values[0] > 0.5 * float(p.data[0]) ** 2
        # strictly decreasing objective across the recorded steps
        assert values == sorted(values, reverse=True)

    def test_non_finite_gradient_aborts(self):
        store, p, adam = self.make([1.0])
        p.grad = np.array([np.nan])
        with pytest.raises(NonFiniteGradientError):
            adam.step()


class TestSchedule:
    def test_factor(self):
        sched = TR.Schedule(total_epochs=140, decay_epoch=120, decay_factor=0.1)
        assert sched.factor(1) == 1.0
        assert sched.factor(119) == 1.0
        assert sched.factor(120) == 0.1
        assert sched.factor(140) == 0.1

    def test_invariant(self):
        with pytest.raises(ValidationError):
            TR.Schedule(total_epochs=10, decay_epoch=10)


class TestMetrics:
    def test_identical_images(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(3, 8, 8))
        mask = np.ones((8, 8))
        report = TR.metrics(img, img.copy(), mask)
        assert report.mse == 0 and report.fmse == 0
        assert math.isinf(report.psnr)
        assert report.to_dict()["psnr"] == "inf"

    def test_uniform_error_psnr(self):
        gt = np.full((3, 8, 8), 0.25)
        pred = gt + 16.0 / 255.0
        report = TR.metrics(pred, gt, np.ones((8, 8)))
        np.testing.assert_allclose(report.mse, 256.0, rtol=1e-9)
        np.testing.assert_allclose(report.psnr, 10 * math.log10(65025 / 256), atol=1e-9)
        assert abs(report.psnr - 24.05) < 0.01

    def test_quarter_mask_ratio(self):
        gt = np.zeros((3, 8, 8))
        pred = np.zeros((3, 8, 8))
        mask = np.zeros((8, 8))
        mask[:4, :4] = 1  # quarter of the frame
        pred[:, :4, :4] = 0.1  # error confined to the mask
        report = TR.metrics(pred, gt, mask)
        np.testing.assert_allclose(report.fmse, 4 * report.mse, atol=1e-6)

    def test_full_mask_fmse_equals_mse(self):
        rng = np.random.default_rng(4)
        gt = rng.uniform(size=(3, 6, 6))
        pred = rng.uniform(size=(3, 6, 6))
        report = TR.metrics(pred, gt, np.ones((6, 6)))
        np.testing.assert_allclose(report.fmse, report.mse, rtol=1e-12)

    def test_fmse_quadratic_in_error_scale(self):
        rng = np.random.default_rng(5)
        gt = rng.uniform(0.3, 0.6, size=(3, 8, 8))
        err = rng.normal(scale=0.02, size=(3, 8, 8))
        mask = np.zeros((8, 8))
        mask[2:6, 2:6] = 1
        err *= mask  # confine the error to the foreground
        base = TR.metrics(gt + err, gt, mask).fmse
        scaled = TR.metrics(gt + 3.0 * err, gt, mask).fmse
        np.testing.assert_allclose(scaled, 9.0 * base, rtol=1e-9)

    def test_empty_mask_signals(self):
        with pytest.raises(EmptyRegionError):
            TR.metrics(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.zeros((4, 4)))

    def test_quantize_mode(self):
        gt = np.full((3, 4, 4), 0.5)        # quantizes to 128
        pred = np.full((3, 4, 4), 0.5019)   # 128.0 after rounding
        report = TR.metrics(pred, gt, np.ones((4, 4)), quantize=True)
        assert report.mse == 0.0
        unrounded = TR.metrics(pred, gt, np.ones((4, 4)), quantize=False)
        assert unrounded.mse > 0

    def test_aggregate_is_mean(self):
        reports = [
            TR.MetricsReport(psnr=30.0, mse=10.0, fmse=40.0),
            TR.MetricsReport(psnr=40.0, mse=20.0, fmse=80.0),
        ]
        agg = TR.aggregate_metrics(reports)
        assert agg.mse == 15.0 and agg.fmse == 60.0 and agg.psnr == 35.0


def tiny_config(**overrides):
    base = dict(
        input_size=32,
        base_channels=4,
        epochs=2,
        decay_epoch=120,
        batch_size=4,
        synth_samples=4,
        augment=False,
        seed=3,
        lr=1e-3,
    )
    base.update(overrides)
    return RunConfig(**base)


class TestTrainLoop:
    def test_zero_epochs_writes_init_checkpoint(self, tmp_path):
        cfg = tiny_config(epochs=0)
        result = TR.train(cfg, tmp_path)
        assert result.steps == 0
        text, arrays = load_checkpoint(result.checkpoint_path)
        fresh = Generator(cfg.to_generator_config())
        for name, p in fresh.params:
            np.testing.assert_array_equal(arrays[name], p.data.astype(np.float32))

    def test_deterministic_runs(self, tmp_path):
        r1 = TR.train(tiny_config(), tmp_path / "a")
        r2 = TR.train(tiny_config(), tmp_path / "b")
        assert (tmp_path / "a/checkpoint.hkpt").read_bytes() == (
            tmp_path / "b/checkpoint.hkpt"
        ).read_bytes()
        for rec1, rec2 in zip(r1.records, r2.records):
            a = {k: v for k, v in rec1.items() if k != "wall_ms"}
            b = {k: v for k, v in rec2.items() if k != "wall_ms"}
            assert a == b

    def test_loss_decreases_on_overfit_smoke(self, tmp_path):
        cfg = tiny_config(epochs=30, synth_samples=4)
        result = TR.train(cfg, tmp_path)
        assert not result.halted
        first = result.records[0]["fmse"]
        last = result.records[-1]["fmse"]
        assert last < first

    def test_log_schema(self, tmp_path):
        result = TR.train(tiny_config(), tmp_path)
        lines = result.log_path.read_text().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert list(record.keys()) == [
            "epoch", "lr", "loss", "psnr", "mse", "fmse", "wall_ms",
        ]

    def test_max_steps_cap(self, tmp_path):
        cfg = tiny_config(epochs=50, max_steps=3)
        result = TR.train(cfg, tmp_path)
        assert result.steps == 3

    def test_halts_on_divergence(self, tmp_path):
        cfg = tiny_config(epochs=5, lr=1e18)
        with np.errstate(all="ignore"):
            result = TR.train(cfg, tmp_path)
        assert result.halted
        assert result.halt_reason
        # the checkpoint still loads and matches the last good state
        text, arrays = load_checkpoint(result.checkpoint_path)
        assert all(np.isfinite(a).all() for a in arrays.values())

    def test_no_data_source(self, tmp_path):
        cfg = tiny_config(synth_samples=0)
        with pytest.raises(ConfigError):
            TR.train(cfg, tmp_path)

    def test_missing_manifest(self, tmp_path):
        cfg = tiny_config(data_manifest=str(tmp_path / "missing.jsonl"))
        with pytest.raises(ConfigError):
            TR.train(cfg, tmp_path)

    def test_early_stop(self, tmp_path):
        cfg = tiny_config(epochs=200, early_stop_fmse=1e9)
        result = TR.train(cfg, tmp_path)
        assert len(result.records) == 1  # stops after the first epoch


class TestEvaluateModel:
    def test_zero_residual_model_returns_composite_metrics(self, tmp_path):
        from harmonizer import data as D

        cfg = tiny_config()
        samples = D.synthetic_samples(2, 32, seed=5)
        gen = Generator(cfg.to_generator_config())
        agg, per = evaluate = TR.evaluate_model(gen, samples, batch_size=2)
        # untrained model output equals the composite
        direct = [
            TR.metrics(s.composite, s.gt, s.mask) for s in samples
        ]
        for got, want in zip(per, direct):
            np.testing.assert_allclose(got.mse, want.mse, rtol=1e-5)
        assert agg.mse == pytest.approx(np.mean([r.mse for r in per]))
