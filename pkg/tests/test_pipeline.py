"""Training loop, optimizer, schedule, TTA inference, post-processing."""
import csv
import math
import os

import numpy as np
import pytest

from vesselforge import ConfigError, TrainingError
from vesselforge.infer import (
    TTAConfig,
    _patch_probability,
    apply_transform,
    infer_subject,
    invert_transform,
)
from vesselforge.losses import LossConfig
from vesselforge.network import (
    ModelConfig,
    build_params,
    load_checkpoint,
)
from vesselforge.patching import Patch
from vesselforge.phantom import PhantomSpec, generate_phantom, make_dataset
from vesselforge.train import (
    LOG_COLUMNS,
    PatchPlan,
    TrainConfig,
    adamw_step,
    fit_on_patches,
    lr_schedule,
    train,
)
from vesselforge.vesselness import VesselnessParams
from vesselforge.volume import znorm_array

from oracles import bfs_fill_holes

TINY_MODEL = dict(depth=2, widths=(2, 3, 4), patch_size=8, cls_hidden=3)


def make_patch(seed, positive, size=8):
    rng = np.random.default_rng(seed)
    image = rng.standard_normal((size, size, size))
    label = np.zeros((size, size, size), np.uint8)
    vessel = rng.random((size, size, size)).astype(np.float32) * 0.2
    if positive:
        c = size // 2
        label[c - 2:c + 2, c - 2:c + 2, c - 2:c + 2] = 1
        image[label > 0] += 4.0
        vessel[label > 0] += 0.7
    return Patch(znorm_array(image), vessel, label, positive,
                 f"s{seed}", (size // 2,) * 3)


class TestSchedule:
    def test_paper_values(self):
        cfg = TrainConfig()
        for e in range(5):
            assert lr_schedule(e, cfg) == 0.001
        assert lr_schedule(5, cfg) == pytest.approx(0.0008)
        assert lr_schedule(25, cfg) == pytest.approx(0.00032768, rel=1e-12)

    def test_non_increasing(self):
        cfg = TrainConfig()
        vals = [lr_schedule(e, cfg) for e in range(60)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, TrainConfig())


class TestAdamW:
    def _store(self, theta):
        from vesselforge.network import ParamStore
        s = ParamStore()
        s.add("w", np.array([theta], dtype=np.float64))
        return s

    def test_zero_grad_zero_decay_is_identity(self):
        cfg = TrainConfig(weight_decay=0.0)
        s = self._store(1.234)
        for t in range(1, 4):
            adamw_step(s, {"w": np.zeros(1)}, t, cfg, lr_t=0.1)
        assert float(s["w"].data[0]) == 1.234

    def test_scalar_trajectory_matches_recurrence(self):
        cfg = TrainConfig(weight_decay=0.0)
        s = self._store(1.0)
        # Independent recurrence with plain floats.
        b1, b2, eps, lr = cfg.beta1, cfg.beta2, cfg.eps, 0.1
        theta, m, v = 1.0, 0.0, 0.0
        for t in range(1, 4):
            g = 1.0
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1 ** t)
            vh = v / (1 - b2 ** t)
            theta -= lr * mh / (math.sqrt(vh) + eps)
            adamw_step(s, {"w": np.ones(1)}, t, cfg, lr_t=lr)
            assert float(s["w"].data[0]) == pytest.approx(theta, rel=1e-12)

    def test_pure_decay_shrinks_exponentially(self):
        cfg = TrainConfig(weight_decay=0.01)
        s = self._store(2.0)
        for t in range(1, 4):
            adamw_step(s, {"w": np.zeros(1)}, t, cfg, lr_t=0.1)
        assert float(s["w"].data[0]) == pytest.approx(
            2.0 * (1 - 0.1 * 0.01) ** 3, rel=1e-12)

    def test_nonfinite_gradient_names_parameter_and_leaves_params(self):
        cfg = TrainConfig()
        s = self._store(1.0)
        s.add("bad", np.array([0.5]))
        grads = {"w": np.ones(1), "bad": np.array([np.nan])}
        with pytest.raises(TrainingError, match="bad"):
            adamw_step(s, grads, 1, cfg, lr_t=0.1)
        assert float(s["w"].data[0]) == 1.0
        assert float(s["bad"].data[0]) == 0.5

    def test_missing_gradient_rejected(self):
        s = self._store(1.0)
        with pytest.raises(TrainingError, match="w"):
            adamw_step(s, {}, 1, TrainConfig(), lr_t=0.1)


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [
        dict(batch_size=0), dict(lr0=0.0), dict(lr_decay=1.0),
        dict(lr_decay=0.0), dict(early_stop_patience=0),
        dict(beta1=1.0), dict(weight_decay=-0.1),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestFit:
    def test_overfit_four_positive_patches(self, tmp_path):
        patches = [make_patch(i, True) for i in range(4)]
        model_cfg = ModelConfig(**TINY_MODEL)
        tcfg = TrainConfig(batch_size=4, max_epochs=200, seed=1, lr0=2e-3,
                           early_stop_delta=1e-4, early_stop_patience=30,
                           steps_per_epoch=10)
        plan = PatchPlan(augment=False)
        res = fit_on_patches(patches, patches, model_cfg, LossConfig(), tcfg,
                             tmp_path, plan)
        rows = list(csv.DictReader(open(res.log_path)))
        train_rows = [r for r in rows if r["val_total"]]
        first = float(train_rows[0]["total"])
        last = float(train_rows[-1]["total"])
        assert last <= 0.1 * first, (first, last)
        assert os.path.exists(os.path.join(res.checkpoint_dir,
                                           "manifest.json"))

    def test_log_columns_and_early_stop_row_count(self, tmp_path):
        patches = [make_patch(i, i % 2 == 0) for i in range(8)]
        model_cfg = ModelConfig(**TINY_MODEL)
        # A learning rate this small cannot move the val loss, so the
        # plateau rule fires exactly at the patience limit.
        tcfg = TrainConfig(batch_size=2, max_epochs=50, lr0=1e-12, seed=2,
                           early_stop_patience=3, steps_per_epoch=2)
        res = fit_on_patches(patches, patches[:2], model_cfg, LossConfig(),
                             tcfg, tmp_path, PatchPlan(augment=False))
        assert res.stop_reason == "early_stop"
        with open(res.log_path) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        assert tuple(header) == LOG_COLUMNS
        val_rows = [r for r in rows if r[7] != ""]
        assert len(val_rows) == res.n_epochs == 4
        step_rows = [r for r in rows if r[7] == ""]
        assert len(step_rows) == res.n_steps == 8

    def test_same_seed_same_checkpoint_bits(self, tmp_path):
        patches = [make_patch(i, i % 2 == 0) for i in range(6)]
        model_cfg = ModelConfig(**TINY_MODEL)
        blobs = []
        for run in ("a", "b"):
            tcfg = TrainConfig(batch_size=2, max_epochs=2, seed=7,
                               steps_per_epoch=3)
            res = fit_on_patches(patches, patches[:2], model_cfg,
                                 LossConfig(), tcfg, tmp_path / run,
                                 PatchPlan(augment=True))
            with open(os.path.join(res.checkpoint_dir, "params.blob"),
                      "rb") as fh:
                blobs.append(fh.read())
        assert blobs[0] == blobs[1]

    def test_different_seed_changes_checkpoint(self, tmp_path):
        patches = [make_patch(i, i % 2 == 0) for i in range(6)]
        model_cfg = ModelConfig(**TINY_MODEL)
        blobs = []
        for seed in (1, 2):
            tcfg = TrainConfig(batch_size=2, max_epochs=1, seed=seed,
                               steps_per_epoch=2)
            res = fit_on_patches(patches, patches[:2], model_cfg,
                                 LossConfig(), tcfg, tmp_path / str(seed))
            with open(os.path.join(res.checkpoint_dir, "params.blob"),
                      "rb") as fh:
                blobs.append(fh.read())
        assert blobs[0] != blobs[1]

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_nonfinite_loss_aborts_with_last_good_checkpoint(self, tmp_path):
        patches = [make_patch(i, True) for i in range(4)]
        model_cfg = ModelConfig(**TINY_MODEL)
        tcfg = TrainConfig(batch_size=2, max_epochs=5, lr0=1e15, seed=3,
                           steps_per_epoch=2)
        with pytest.raises(TrainingError, match="last-good"):
            fit_on_patches(patches, patches, model_cfg, LossConfig(), tcfg,
                           tmp_path, PatchPlan(augment=False))
        last_good = tmp_path / "checkpoints" / "last_good"
        assert (last_good / "manifest.json").exists()
        load_checkpoint(last_good)

    def test_empty_pools_rejected(self, tmp_path):
        model_cfg = ModelConfig(**TINY_MODEL)
        patches = [make_patch(0, True)]
        with pytest.raises(ConfigError):
            fit_on_patches([], patches, model_cfg, LossConfig(),
                           TrainConfig(), tmp_path)
        with pytest.raises(ConfigError):
            fit_on_patches(patches, [], model_cfg, LossConfig(),
                           TrainConfig(), tmp_path)


class TestTrainFromManifest:
    def test_end_to_end_smoke(self, tmp_path):
        spec = PhantomSpec(dims=(40, 40, 40), seed=5,
                           vessel_radius_range=(1.5, 2.5),
                           aneurysm_radius_range=(2.0, 3.0))
        manifest = make_dataset(10, spec, tmp_path / "data",
                                control_fraction=0.2, test_fraction=0.2)
        model_cfg = ModelConfig(depth=2, widths=(2, 3, 4), patch_size=16,
                                cls_hidden=3)
        tcfg = TrainConfig(batch_size=2, max_epochs=2, seed=4,
                           steps_per_epoch=3)
        plan = PatchPlan(k_per_site=2, n_negative=4, val_n_negative=2)
        res = train(manifest, model_cfg, LossConfig(), tcfg,
                    tmp_path / "run", plan,
                    vp=VesselnessParams(sigma=1.5))
        assert res.n_epochs == 2 and res.stop_reason == "max_epochs"
        params, cfg2 = load_checkpoint(res.checkpoint_dir)
        assert cfg2.patch_size == 16
        rows = list(csv.DictReader(open(res.log_path)))
        assert all(set(r) == set(LOG_COLUMNS) for r in rows)

    def test_missing_split_rejected(self, tmp_path):
        spec = PhantomSpec(dims=(40, 40, 40), seed=6)
        # Six subjects leave round(0.1 * 4) = 0 validation subjects.
        manifest = make_dataset(6, spec, tmp_path / "data",
                                control_fraction=0.0, test_fraction=1 / 3)
        with pytest.raises(ConfigError, match="val"):
            train(manifest, ModelConfig(depth=2, widths=(2, 3, 4),
                                        patch_size=16, cls_hidden=3),
                  LossConfig(), TrainConfig(max_epochs=1), tmp_path / "run")


class TestTTATransforms:
    @pytest.mark.parametrize("name", ["identity", "flip_x", "flip_y",
                                      "flip_z", "rot90_xy", "rot90_yz",
                                      "rot90_xz"])
    def test_inverse_is_exact(self, name):
        cube = np.random.default_rng(1).standard_normal((6, 6, 6))
        np.testing.assert_array_equal(
            invert_transform(name, apply_transform(name, cube)), cube)

    def test_config_rejects_unknown_and_missing_identity(self):
        with pytest.raises(ConfigError, match="unknown"):
            TTAConfig(transforms=("identity", "flip_w"))
        with pytest.raises(ConfigError, match="identity"):
            TTAConfig(transforms=("flip_x",))
        with pytest.raises(ConfigError, match="duplicate"):
            TTAConfig(transforms=("identity", "flip_x", "flip_x"))

    def test_disabled_falls_back_to_identity(self):
        cfg = TTAConfig(enabled=False)
        assert cfg.active() == ("identity",)

    def test_averaging_order_invariant(self):
        model_cfg = ModelConfig(**TINY_MODEL)
        params = build_params(model_cfg, seed=8)
        rng = np.random.default_rng(9)
        img = rng.standard_normal((8, 8, 8)).astype(np.float32)
        ves = rng.random((8, 8, 8)).astype(np.float32)
        a, ca = _patch_probability(img, ves, params, model_cfg,
                                   ("identity", "flip_x", "rot90_yz"))
        b, cb = _patch_probability(img, ves, params, model_cfg,
                                   ("rot90_yz", "identity", "flip_x"))
        np.testing.assert_allclose(a, b, atol=1e-6)
        assert abs(ca - cb) <= 1e-6


@pytest.fixture(scope="module")
def subject():
    vol, precise, weak, sites = generate_phantom(
        PhantomSpec(dims=(40, 40, 40), seed=12))
    return vol, precise, weak, sites


class TestInferSubject:
    MODEL = dict(depth=2, widths=(2, 3, 4), patch_size=16, cls_hidden=3)

    def test_identity_only_equals_disabled(self, subject):
        vol = subject[0]
        cfg = ModelConfig(**self.MODEL)
        params = build_params(cfg, seed=10)
        kw = dict(vp=VesselnessParams(sigma=1.5), n_patches=6, nms_radius=6.0)
        m1, d1, p1 = infer_subject(vol, params, cfg,
                                   tta=TTAConfig(transforms=("identity",)),
                                   **kw)
        m2, d2, p2 = infer_subject(vol, params, cfg,
                                   tta=TTAConfig(enabled=False), **kw)
        np.testing.assert_array_equal(m1.data, m2.data)
        np.testing.assert_array_equal(p1.data, p2.data)
        assert d1 == d2

    def test_background_model_predicts_nothing(self, subject):
        vol = subject[0]
        cfg = ModelConfig(**self.MODEL)
        params = build_params(cfg, seed=11)
        for name, t in params.items():
            t.data[:] = 0.0
        params["seg.b"].data[:] = np.array([10.0, -10.0], np.float32)
        mask, dets, prob = infer_subject(vol, params, cfg, n_patches=6,
                                         vp=VesselnessParams(sigma=1.5))
        assert not mask.data.any()
        assert dets == []
        assert prob.data.max() < 0.5

    def test_foreground_model_covers_patches_without_holes(self, subject):
        vol = subject[0]
        cfg = ModelConfig(**self.MODEL)
        params = build_params(cfg, seed=11)
        for name, t in params.items():
            t.data[:] = 0.0
        params["seg.b"].data[:] = np.array([-10.0, 10.0], np.float32)
        mask, dets, prob = infer_subject(vol, params, cfg, n_patches=6,
                                         vp=VesselnessParams(sigma=1.5))
        assert mask.data.any() and len(dets) >= 1
        for det in dets:
            assert det["voxels"] >= 5
            assert set(det) == {"id", "voxels", "centroid", "max_prob"}
        # Post-processing promises: no enclosed cavities, and every
        # surviving component overlaps the thresholded set.
        np.testing.assert_array_equal(bfs_fill_holes(mask.data), mask.data)
        assert (mask.data.astype(bool) & (prob.data > 0.5)).any()
        # The mask only covers voxels some patch visited.
        assert not (mask.data.astype(bool) & (prob.data == 0)).all() or \
            not mask.data.any()

    def test_flat_image_warns_and_returns_empty(self, caplog):
        from vesselforge.volume import Volume3D
        vol = Volume3D(np.zeros((40, 40, 40), np.float32))
        cfg = ModelConfig(**self.MODEL)
        params = build_params(cfg, seed=1)
        import logging
        with caplog.at_level(logging.WARNING, "vesselforge.infer"):
            mask, dets, prob = infer_subject(vol, params, cfg, n_patches=4)
        assert not mask.data.any() and dets == [] and not prob.data.any()
        assert any("no inference patch centers" in r.message
                   for r in caplog.records)

    def test_cls_gate_can_suppress_everything(self, subject):
        vol = subject[0]
        cfg = ModelConfig(**self.MODEL)
        params = build_params(cfg, seed=11)
        for name, t in params.items():
            t.data[:] = 0.0
        params["seg.b"].data[:] = np.array([-10.0, 10.0], np.float32)
        params["cls.fc1.b"].data[:] = -5.0
        patch_log = []
        mask, dets, _ = infer_subject(vol, params, cfg, n_patches=6,
                                      vp=VesselnessParams(sigma=1.5),
                                      cls_gate=True, cls_threshold=0.0,
                                      patch_log=patch_log)
        assert not mask.data.any() and dets == []
        assert patch_log and all(e["cls_logit"] == pytest.approx(-5.0)
                                 for e in patch_log)

    def test_bad_threshold_rejected(self, subject):
        cfg = ModelConfig(**self.MODEL)
        params = build_params(cfg, seed=1)
        with pytest.raises(ConfigError):
            infer_subject(subject[0], params, cfg, threshold=1.5)
