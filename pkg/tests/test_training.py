import dataclasses
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitsr import data as D
from vitsr.checkpoint import encode_checkpoint, read_checkpoint
from vitsr.errors import ConfigError, DataError, NumericalError
from vitsr.model import ModelConfig, ViTSR
from vitsr import training as T

MICRO32 = dict(image_size=32, patch_size=8, embed_dim=32, encoder_depth=1, decoder_depth=1,
               num_heads_encoder=2, num_heads_decoder=2)


def specs(root, crop=32):
    return D.DatasetSpec(root, "train", crop), D.DatasetSpec(root, "val", crop)


def train_cfg(**kw):
    base = dict(stage=D.SUPER_RESOLUTION, batch_size=4, max_epochs=2, patience=1, lr_init=1e-3)
    base.update(kw)
    return T.TrainConfig(**base)


class TestConfig:
    def test_stage_defaults(self):
        c1, c2 = T.TrainConfig(stage=D.COLORIZATION), T.TrainConfig(stage=D.SUPER_RESOLUTION)
        assert (c1.lr_init, c1.max_epochs, c1.patience, c1.residual_mode) == (2e-4, 100, 20, "off")
        assert (c2.lr_init, c2.max_epochs, c2.patience, c2.residual_mode) == (5e-5, 400, 40, "on")
        assert c2.weight_decay == 0.05 and c2.batch_size == 16

    @pytest.mark.parametrize("kw", [dict(lr_init=0.0), dict(patience=400), dict(lam=1.5),
                                    dict(stage="denoise"), dict(sched_t0=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            T.TrainConfig(**kw)

    def test_dict_roundtrip(self):
        cfg = train_cfg(seed=3)
        assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestAdamW:
    def test_first_step_hand_example(self):
        w = np.array([1.0])
        T.adamw_step(w, np.array([1.0]), np.zeros(1), np.zeros(1), 1, lr=0.1, weight_decay=0.05)
        assert w[0] == pytest.approx(1 - 0.1 / (1 + 1e-8) - 0.005, abs=1e-15)
        assert w[0] == pytest.approx(0.895, abs=1e-6)

    def test_zero_grad_no_decay(self):
        w = np.array([0.7, -2.0])
        T.adamw_step(w, np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(w, [0.7, -2.0])

    def test_pure_decay(self):
        w = np.array([0.7, -2.0])
        T.adamw_step(w, np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=0.1, weight_decay=0.05)
        np.testing.assert_allclose(w, np.array([0.7, -2.0]) * (1 - 0.1 * 0.05), atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.adamw_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1, 0.1)

    def test_no_decay_equals_adam(self, rng):
        # reference Adam written from the textbook recurrences
        target = rng.normal(size=20)
        w_ours = rng.normal(size=20)
        w_ref = w_ours.copy()
        m, v = np.zeros(20), np.zeros(20)
        rm, rv = np.zeros(20), np.zeros(20)
        for t in range(1, 51):
            T.adamw_step(w_ours, 2 * (w_ours - target), m, v, t, 0.01, weight_decay=0.0)
            g = 2 * (w_ref - target)
            rm = 0.9 * rm + 0.1 * g
            rv = 0.999 * rv + 0.001 * g ** 2
            w_ref = w_ref - 0.01 * (rm / (1 - 0.9 ** t)) / (np.sqrt(rv / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(w_ours, w_ref, atol=1e-7)

    def test_optimizer_skips_missing_grads(self, rng):
        from vitsr import diffcore as dc
        p = {"a": dc.Tensor(np.ones(3), requires_grad=True),
             "b": dc.Tensor(np.ones(3), requires_grad=True)}
        p["a"].grad = np.ones(3, np.float32)
        opt = T.AdamW(p)
        opt.step(0.1)
        assert p["a"].data[0] < 1 and np.all(p["b"].data == 1)
        assert list(opt.state_tensors()) == ["optim.m.a", "optim.v.a", "optim.m.b", "optim.v.b"]


class TestSchedule:
    def test_reference_epochs(self):
        lr = 3e-4
        values = [T.cosine_warm_restart_lr(e, lr, 10, 2) for e in (0, 5, 10, 30)]
        for got, want in zip(values, [lr, lr / 2, lr, lr]):
            assert abs(got - want) <= 1e-12

    def test_cycle_boundaries(self):
        assert T.cycle_starts(10, 2, 4) == [10, 30, 70, 150]
        for s in T.cycle_starts(10, 2, 4):
            assert T.cosine_warm_restart_lr(s, 1.0) == 1.0
            assert T.cosine_warm_restart_lr(s - 1, 1.0) < 0.1

    def test_tmult_one(self):
        assert T.cosine_warm_restart_lr(25, 1.0, 10, 1) == pytest.approx(0.5)

    @settings(max_examples=50, deadline=None)
    @given(epoch=st.floats(0, 500), t0=st.integers(1, 20), tmult=st.integers(1, 3))
    def test_bounded(self, epoch, t0, tmult):
        lr = T.cosine_warm_restart_lr(epoch, 1e-3, t0, tmult)
        assert 0 <= lr <= 1e-3

    def test_monotone_within_cycle(self):
        values = [T.cosine_warm_restart_lr(e, 1.0) for e in range(10, 30)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestEarlyStop:
    def test_traced_example(self):
        history = [20, 21, 20.5, 20.9]
        assert [T.early_stop_decision(history[:k], 2) for k in range(1, 5)] == \
            ["continue", "continue", "continue", "stop"]

    def test_tie_is_not_improvement(self):
        assert T.early_stop_decision([20, 21, 21.0], 1) == "stop"

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 5))
    def test_increasing_never_stops(self, steps, patience):
        history = list(np.cumsum(np.array(steps) + 0.01))
        assert T.early_stop_decision(history, patience) == "continue"

    def test_bad_patience(self):
        with pytest.raises(ConfigError):
            T.early_stop_decision([1.0], 0)


class TestCheckpoints:
    def test_save_load_save_identical(self, tmp_path):
        model = ViTSR(ModelConfig(**MICRO32), seed=1)
        opt = T.AdamW(model.params)
        for p in model.params.values():
            p.grad = np.full(p.shape, 0.1, np.float32)
        opt.step(1e-3)
        cfg = train_cfg()
        T.save_model_checkpoint(tmp_path / "a.ckpt", model, stage=cfg.stage, epoch=3,
                                best_psnr=31.5, train_cfg=cfg, optimizer=opt)
        meta, tensors = read_checkpoint(tmp_path / "a.ckpt")
        assert encode_checkpoint(meta, tensors) == (tmp_path / "a.ckpt").read_bytes()
        loaded, meta = T.load_model_checkpoint(tmp_path / "a.ckpt")
        assert meta["has_optimizer_state"] and meta["optimizer_step"] == 1
        T.save_model_checkpoint(tmp_path / "b.ckpt", loaded, stage=cfg.stage, epoch=3,
                                best_psnr=31.5, train_cfg=cfg, optimizer=opt)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        for k, p in model.params.items():
            assert np.array_equal(loaded.params[k].data, p.data)

    def test_header_bytes(self, tmp_path):
        model = ViTSR(ModelConfig(**MICRO32))
        T.save_model_checkpoint(tmp_path / "a.ckpt", model, stage=D.COLORIZATION, epoch=0,
                                best_psnr=-math.inf)
        raw = (tmp_path / "a.ckpt").read_bytes()
        assert raw[:4] == b"VTSR" and raw[4:8] == (1).to_bytes(4, "little")

    def test_corrupt(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"VTSR\x01")
        with pytest.raises(DataError):
            T.load_model_checkpoint(tmp_path / "x.ckpt")

    def test_transfer_copies_everything(self, tmp_path):
        cfg = ModelConfig(**MICRO32)
        src = ViTSR(dataclasses.replace(cfg, residual_mode="off"), seed=1)
        T.save_model_checkpoint(tmp_path / "s1.ckpt", src, stage=D.COLORIZATION, epoch=0,
                                best_psnr=12.0)
        dst = ViTSR(cfg, seed=2)
        assert T.transfer_stage1_to_stage2(tmp_path / "s1.ckpt", dst) == len(dst.params)
        assert all(np.array_equal(dst.params[k].data, src.params[k].data) for k in src.params)

    def test_transfer_config_mismatch(self, tmp_path):
        src = ViTSR(ModelConfig(**MICRO32))
        T.save_model_checkpoint(tmp_path / "s1.ckpt", src, stage=D.COLORIZATION, epoch=0,
                                best_psnr=12.0)
        other = ViTSR(ModelConfig(**dict(MICRO32, decoder_depth=2)))
        with pytest.raises(ConfigError, match="decoder_depth"):
            T.transfer_stage1_to_stage2(tmp_path / "s1.ckpt", other)

    def test_transfer_needs_colorization(self, tmp_path):
        src = ViTSR(ModelConfig(**MICRO32))
        T.save_model_checkpoint(tmp_path / "s2.ckpt", src, stage=D.SUPER_RESOLUTION, epoch=0,
                                best_psnr=30.0)
        with pytest.raises(ConfigError):
            T.transfer_stage1_to_stage2(tmp_path / "s2.ckpt", ViTSR(ModelConfig(**MICRO32)))


class TestRunStage:
    def test_one_epoch_smoke(self, tiny_dataset, tmp_path):
        model = ViTSR(ModelConfig(**MICRO32))
        cfg = train_cfg(max_epochs=2, patience=1)
        res = T.run_stage(model, *specs(tiny_dataset), dataclasses.replace(cfg, max_epochs=2),
                          run_dir=tmp_path)
        assert 1 <= len(res.records) <= 2
        assert math.isfinite(res.records[0].train_loss)
        lines = (tmp_path / "train_log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_psnr,val_ssim,lr,seconds"
        assert len(lines) == len(res.records) + 1
        assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
        assert (tmp_path / "samples" / "epoch0000_0.png").exists()

    def test_same_seed_same_log(self, tiny_dataset, tmp_path):
        cfg = train_cfg(max_epochs=3, patience=2, seed=11)
        logs = []
        for name in ("a", "b"):
            T.run_stage(ViTSR(ModelConfig(**MICRO32), seed=4), *specs(tiny_dataset), cfg,
                        run_dir=tmp_path / name)
            logs.append((tmp_path / name / "train_log.csv").read_bytes())
        assert logs[0] == logs[1]
        a, b = (read_checkpoint(tmp_path / n / "last.ckpt")[1] for n in ("a", "b"))
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_loss_decreases_over_20_epochs(self, tiny_dataset):
        cfg = train_cfg(stage=D.COLORIZATION, max_epochs=20, patience=19, lr_init=1e-3)
        res = T.run_stage(ViTSR(ModelConfig(**MICRO32)), *specs(tiny_dataset), cfg)
        assert len(res.records) == 20
        assert res.records[-1].train_loss < res.records[0].train_loss

    def test_early_stop_keeps_best(self, tiny_dataset):
        cfg = train_cfg(max_epochs=6, patience=1, lr_init=5e-2)
        res = T.run_stage(ViTSR(ModelConfig(**MICRO32)), *specs(tiny_dataset), cfg)
        psnrs = [r.val_psnr for r in res.records]
        assert res.best_psnr == max(psnrs) and res.best_epoch == psnrs.index(max(psnrs))

    def test_batch_too_large(self, tiny_dataset):
        with pytest.raises(DataError):
            T.run_stage(ViTSR(ModelConfig(**MICRO32)), *specs(tiny_dataset),
                        train_cfg(batch_size=16))

    def test_nan_aborts(self, tiny_dataset):
        model = ViTSR(ModelConfig(**MICRO32))
        model.params["head.final.bias"].data[:] = np.nan
        with pytest.raises(NumericalError, match="epoch 0, batch 0"):
            T.run_stage(model, *specs(tiny_dataset), train_cfg())

    def test_overlapping_splits(self, tiny_dataset):
        train, _ = specs(tiny_dataset)
        with pytest.raises(DataError):
            T.run_stage(ViTSR(ModelConfig(**MICRO32)), train, train, train_cfg())
