"""Layered configuration: schema sync, parsing, precedence, snapshots."""
import json

import pytest

from vesselforge import ConfigError
from vesselforge import config as C
from vesselforge.infer import TTAConfig
from vesselforge.losses import LossConfig
from vesselforge.network import ModelConfig
from vesselforge.patching import AugmentParams
from vesselforge.phantom import PhantomSpec
from vesselforge.train import PatchPlan, TrainConfig
from vesselforge.vesselness import VesselnessParams


class TestSchema:
    def test_defaults_match_dataclasses(self):
        cfg = C.defaults_config()
        assert C.model_config(cfg) == ModelConfig()
        assert C.loss_config(cfg) == LossConfig()
        assert C.train_config(cfg) == TrainConfig()
        assert C.patch_plan(cfg) == PatchPlan()
        assert C.patch_plan(cfg).aug == AugmentParams()
        assert C.vesselness_params(cfg) == VesselnessParams()
        assert C.tta_config(cfg) == TTAConfig()
        assert C.phantom_spec(cfg) == PhantomSpec()

    def test_every_key_documented(self):
        for spec in C.SCHEMA.values():
            assert spec.doc.strip(), spec.full

    def test_documented_defaults(self):
        cfg = C.defaults_config()
        assert cfg["loss.phi"] == 0.3
        assert cfg["loss.beta"] == 0.5
        assert cfg["vesselness.sigma"] == 1.0
        assert cfg["model.patch_size"] == 64


class TestParse:
    def test_scalars(self):
        assert C.parse_value(C.SCHEMA["model.depth"], " 3 ") == 3
        assert C.parse_value(C.SCHEMA["loss.phi"], "0.25") == 0.25
        assert C.parse_value(C.SCHEMA["tta.enabled"], "FALSE") is False
        assert C.parse_value(C.SCHEMA["patch.augment"], "yes") is True

    def test_tuples(self):
        spec = C.SCHEMA["model.widths"]
        assert C.parse_value(spec, "4, 8, 16") == (4, 8, 16)
        spec3 = C.SCHEMA["patch.negative_mix"]
        assert C.parse_value(spec3, "0.5,0.25,0.25") == (0.5, 0.25, 0.25)
        with pytest.raises(ValueError, match="3 comma-separated"):
            C.parse_value(spec3, "0.5, 0.5")

    def test_nullable(self):
        spec = C.SCHEMA["vesselness.sigmas"]
        assert C.parse_value(spec, "") is None
        assert C.parse_value(spec, "none") is None
        assert C.parse_value(spec, "1.0, 1.5") == (1.0, 1.5)

    def test_choices(self):
        with pytest.raises(ValueError, match="not one of"):
            C.parse_value(C.SCHEMA["model.variant"], "half")
        with pytest.raises(ValueError, match="not one of"):
            C.parse_value(C.SCHEMA["tta.transforms"], "identity, warp")

    def test_ranges(self):
        with pytest.raises(ValueError, match="<= 1.0"):
            C.parse_value(C.SCHEMA["loss.phi"], "1.5")
        with pytest.raises(ValueError, match="> 0"):
            C.parse_value(C.SCHEMA["vesselness.sigma"], "0")
        with pytest.raises(ValueError, match=">= 1"):
            C.parse_value(C.SCHEMA["train.batch_size"], "0")

    def test_type_mismatch(self):
        with pytest.raises(ValueError, match="integer"):
            C.parse_value(C.SCHEMA["model.depth"], "2.5")
        with pytest.raises(ValueError, match="number"):
            C.parse_value(C.SCHEMA["loss.phi"], "lots")

    def test_format_value_roundtrips(self):
        for key, spec in C.SCHEMA.items():
            text = C.format_value(spec, spec.default)
            assert C.parse_value(spec, text) == spec.default, key


class TestKvText:
    def test_comments_and_blanks(self):
        vals = C.parse_kv_text("# header\n\nmodel.depth = 2\n")
        assert vals == {"model.depth": 2}

    def test_all_offenders_reported(self):
        with pytest.raises(ConfigError) as err:
            C.parse_kv_text(
                "loss.phi = 1.5\nmodel.zap = 1\ntrain.batch_size = x\n")
        msg = str(err.value)
        assert "loss.phi" in msg
        assert "model.zap" in msg
        assert "train.batch_size" in msg

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="key=value"):
            C.parse_kv_text("model.depth 2\n")


class TestJson:
    def test_nested_and_flat(self):
        vals = C.parse_json_obj({"model": {"depth": 2}, "loss.phi": 0.25})
        assert vals == {"model.depth": 2, "loss.phi": 0.25}

    def test_lists_and_bools(self):
        vals = C.parse_json_obj({"model.widths": [4, 8, 16],
                                 "tta.enabled": False,
                                 "vesselness.sigmas": None})
        assert vals["model.widths"] == (4, 8, 16)
        assert vals["tta.enabled"] is False
        assert vals["vesselness.sigmas"] is None

    def test_type_errors_collected(self):
        with pytest.raises(ConfigError) as err:
            C.parse_json_obj({"model.depth": 2.5, "tta.enabled": "maybe"})
        assert "model.depth" in str(err.value)
        assert "tta.enabled" in str(err.value)


class TestLoadConfig:
    def test_empty_file_is_all_defaults(self, tmp_path):
        p = tmp_path / "empty.cfg"
        p.write_text("")
        cfg = C.load_config(p)
        assert dict(cfg) == dict(C.defaults_config())

    def test_kv_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("train.lr0 = 0.01\nmodel.widths = 4,8,16\n")
        cfg = C.load_config(p)
        assert cfg["train.lr0"] == 0.01
        assert cfg["model.widths"] == (4, 8, 16)
        assert cfg["loss.phi"] == 0.3

    def test_json_file(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text(json.dumps({"train": {"lr0": 0.01}}))
        assert C.load_config(p)["train.lr0"] == 0.01


class TestRunConfig:
    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            C.defaults_config().with_overrides({"model.zap": 1})

    def test_mapping_is_frozen(self):
        cfg = C.defaults_config()
        with pytest.raises(TypeError):
            cfg["model.depth"] = 9

    def test_overrides_do_not_mutate(self):
        base = C.defaults_config()
        derived = base.with_overrides({"model.depth": 2})
        assert base["model.depth"] == 4
        assert derived["model.depth"] == 2


class TestSnapshot:
    def test_roundtrip_exact(self):
        cfg = C.defaults_config().with_overrides({
            "model.widths": (4, 8, 16), "train.lr0": 3e-4,
            "vesselness.sigmas": (1.0, 1.5), "tta.enabled": False})
        text = C.snapshot_text(cfg, "train", notes={"out": "/tmp/r"})
        assert C.parse_kv_text(text) == dict(cfg)

    def test_keys_subset(self):
        cfg = C.defaults_config()
        text = C.snapshot_text(cfg, "vesselness",
                               keys=["vesselness.sigma"])
        parsed = C.parse_kv_text(text)
        assert parsed == {"vesselness.sigma": 1.0}
