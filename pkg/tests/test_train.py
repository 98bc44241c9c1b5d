import json
import math

import numpy as np
import pytest

from visground.data import generate_samples, write_dataset
from visground.errors import ConfigError, NumericError
from visground.model import GroundingModel, ModelConfig
from visground.tensor import Tensor
from visground.train import (
    AdamW,
    TrainConfig,
    adamw_update,
    clip_grad_norm,
    evaluate,
    evaluate_model,
    fit_model,
    split_groups,
    train,
)

TINY = dict(d_model=16, num_heads=2, ffn_dim=32, visual_layers=1, text_layers=1, num_stages=2)


def tiny_config(**kw):
    model = ModelConfig(**TINY, **kw.pop("model", {}))
    return TrainConfig(model=model, **kw)


@pytest.fixture(scope="module")
def samples():
    return generate_samples(12, 500)


class TestAdamW:
    def test_zero_grad_zero_decay(self):
        p, m, v = adamw_update(np.array([1.5]), np.zeros(1), np.zeros(1), np.zeros(1), 1, 1e-3)
        assert p[0] == 1.5

    def test_zero_grad_decay_only(self):
        p, _, _ = adamw_update(np.array([2.0]), np.zeros(1), np.zeros(1), np.zeros(1), 1, 1e-3, weight_decay=0.1)
        assert p[0] == pytest.approx(2.0 * (1 - 1e-4), rel=1e-15)

    def test_hand_simulated_steps(self):
        # scalar with grad 1: m_hat = v_hat = 1 at step 1 so the step is lr / (1 + eps)
        lr, eps, wd = 1e-3, 1e-8, 1e-2
        p = np.array([0.5])
        m = v = np.zeros(1)
        x, mm, vv = 0.5, 0.0, 0.0
        for step, g in enumerate([1.0, -2.0, 0.5], start=1):
            p, m, v = adamw_update(p, np.array([g]), m, v, step, lr, eps=eps, weight_decay=wd)
            x = x * (1 - lr * wd)
            mm = 0.9 * mm + 0.1 * g
            vv = 0.999 * vv + 0.001 * g * g
            x -= lr * (mm / (1 - 0.9**step)) / (math.sqrt(vv / (1 - 0.999**step)) + eps)
            if step == 1:
                assert x == pytest.approx(0.5 * (1 - 1e-5) - lr / (1 + eps), rel=1e-15)
            assert p[0] == pytest.approx(x, rel=1e-14)

    def test_optimizer_tracks_steps_per_parameter(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        opt = AdamW({"base": [("a", a)], "encoder": [("b", b)]}, {"base": 0.1, "encoder": 0.01}, weight_decay=0)
        a.grad = np.ones(2)
        b.grad = np.ones(2)
        opt.step(["base"])
        assert "b" not in opt.state and opt.state["a"]["step"] == 1
        np.testing.assert_array_equal(b.data, 1.0)
        np.testing.assert_allclose(a.data, 1 - 0.1 / (1 + 1e-8))

    def test_non_finite_gradient_names_parameter(self):
        a = Tensor(np.ones(2), requires_grad=True)
        a.grad = np.array([1.0, np.nan])
        with pytest.raises(NumericError, match="stages.0.ffn"):
            AdamW({"base": [("stages.0.ffn", a)]}, {"base": 0.1}).step()


class TestClip:
    def test_rescales_to_max_norm(self):
        ps = [Tensor(np.zeros(2)), Tensor(np.zeros(1))]
        ps[0].grad, ps[1].grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_grad_norm(ps, 0.1) == pytest.approx(5.0)
        assert math.sqrt(sum(float((p.grad**2).sum()) for p in ps)) == pytest.approx(0.1, rel=1e-5)

    def test_small_norm_untouched(self):
        p = Tensor(np.zeros(1))
        p.grad = np.array([0.01])
        clip_grad_norm([p], 0.1)
        assert p.grad[0] == 0.01


class TestConfig:
    def test_schedule_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.lr_decay_epoch, c.freeze_epochs) == (300, 32, 200, 33)
        assert c.encoder_lr == pytest.approx(c.base_lr / 10)
        assert (c.lambda_giou, c.lambda_l1, c.grad_clip) == (2.0, 5.0, 0.1)

    def test_schedule_scales(self):
        c = TrainConfig(epochs=90)
        assert (c.lr_decay_epoch, c.freeze_epochs) == (60, 10)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            TrainConfig(base_lr=1e-5, encoder_lr=1e-4)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=3, freeze_epochs=3)
        with pytest.raises(ConfigError, match="nope"):
            TrainConfig.from_dict({"nope": 1})

    def test_groups_split_on_encoders(self):
        groups = split_groups(GroundingModel(ModelConfig(**TINY)))
        assert all(n.startswith(("visual_encoder.", "text_encoder.")) for n, _ in groups["encoder"])
        assert {"verification.alpha", "verification.sigma", "target_query"} <= {n for n, _ in groups["base"]}


class TestFit:
    def test_freeze_window(self, samples):
        model = GroundingModel(ModelConfig(**TINY), seed=0)
        cfg = tiny_config(epochs=9, batch_size=4, freeze_epochs=2)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        snaps = []
        fit_model(model, samples, cfg, on_epoch=lambda r, m: snaps.append({k: v.copy() for k, v in m.state_dict().items()}))
        enc = [k for k in before if k.startswith(("visual_encoder.", "text_encoder."))]
        for snap in snaps[:2]:
            assert all(snap[k].tobytes() == before[k].tobytes() for k in enc)
        for k in ("verification.alpha", "verification.sigma", "stages.0.ffn.fc1.weight", "box_head.fc3.bias"):
            assert snaps[0][k].tobytes() != before[k].tobytes()
        assert any(snaps[2][k].tobytes() != before[k].tobytes() for k in enc)

    def test_metrics_records(self, samples):
        model = GroundingModel(ModelConfig(**TINY), seed=0)
        cfg = tiny_config(epochs=3, batch_size=6, lr_decay_epoch=2)
        hist = fit_model(model, samples, cfg)
        assert [r["epoch"] for r in hist] == [1, 2, 3]
        assert hist[0]["lr"] == {"base": cfg.base_lr, "encoder": cfg.encoder_lr}
        assert hist[2]["lr"]["base"] == pytest.approx(cfg.base_lr / 10)
        assert len(hist[0]["per_stage_acc"]) == 2
        assert all(math.isfinite(r["loss"]) for r in hist)

    def test_max_steps(self, samples):
        model = GroundingModel(ModelConfig(**TINY), seed=0)
        hist = fit_model(model, samples, tiny_config(epochs=5, batch_size=4, max_steps=4))
        assert len(hist) == 2

    def test_non_finite_loss_aborts(self, samples):
        model = GroundingModel(ModelConfig(**TINY), seed=0)
        model.box_head.fc3.bias.data[:] = np.nan
        with pytest.raises(NumericError, match="epoch 1, step 1"):
            fit_model(model, samples, tiny_config(epochs=1, batch_size=4))

    def test_deterministic(self, samples):
        states = []
        for _ in range(2):
            model = GroundingModel(ModelConfig(**TINY), seed=7)
            fit_model(model, samples, tiny_config(epochs=4, batch_size=4, seed=7, max_steps=10))
            states.append(model.state_dict())
        assert all(states[0][k].tobytes() == states[1][k].tobytes() for k in states[0])

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(3))
    def test_overfit_trend(self, seed):
        # ten steps per epoch; with one full batch per epoch 50 steps are too few
        data = generate_samples(20, 1000 * seed)
        model = GroundingModel(ModelConfig(), seed=seed)
        cfg = TrainConfig(epochs=50, batch_size=2, base_lr=1e-3, encoder_lr=1e-4, seed=seed)
        hist = fit_model(model, data, cfg)
        assert hist[49]["loss"] < 0.25 * hist[0]["loss"]


class TestFiles:
    def test_train_and_evaluate(self, tmp_path):
        data = write_dataset(8, 3, tmp_path / "d.jsonl")
        cfg = tiny_config(epochs=2, batch_size=4, checkpoint_every=1)
        ckpt, metrics = train(cfg, data, tmp_path / "run")
        lines = [json.loads(x) for x in metrics.read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [1, 2]
        assert set(lines[0]) == {"epoch", "loss", "lr", "acc@0.5", "per_stage_acc"}
        assert (tmp_path / "run" / "model_epoch0001.ckpt").exists()
        r1, r2 = evaluate(ckpt, data), evaluate(ckpt, data)
        assert json.dumps(r1) == json.dumps(r2)
        assert len(r1["per_stage_acc"]) == 2 and r1["count"] == 8

    def test_untrained_model_metrics(self, samples):
        r = evaluate_model(GroundingModel(ModelConfig(**TINY)), samples)
        assert 0 <= r["acc@0.5"] <= 100 and 0 <= r["mean_iou"] <= 1
