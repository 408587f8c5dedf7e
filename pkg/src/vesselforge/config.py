"""Layered run configuration: defaults <- config file <- command flags.

Keys are "section.name" strings covering every tunable in the package's
config dataclasses.  Files are plain key=value lines (# comments, blank
lines allowed); a file whose first non-space character is "{" is parsed
as JSON instead, either flat {"model.depth": 2} or nested
{"model": {"depth": 2}}.  All offending keys in a file are reported in
one error, not just the first.
"""
import json
from collections.abc import Mapping
from dataclasses import dataclass

from . import ConfigError
from .infer import DEFAULT_TRANSFORMS, TTAConfig, TTA_NAMES
from .losses import LossConfig
from .network import VARIANTS, ModelConfig
from .patching import AugmentParams
from .phantom import PhantomSpec
from .train import PatchPlan, TrainConfig
from .vesselness import VesselnessParams


@dataclass(frozen=True)
class KeySpec:
    section: str
    name: str
    kind: str            # int | float | bool | str
    arity: int           # 0 scalar, n fixed-length tuple, -1 any length
    default: object
    doc: str
    lo: float = None
    hi: float = None
    lo_open: bool = False
    hi_open: bool = False
    choices: tuple = None
    nullable: bool = False

    @property
    def full(self):
        return f"{self.section}.{self.name}"


def _kind_of(value):
    if isinstance(value, bool):
        return "bool", 0
    if isinstance(value, int):
        return "int", 0
    if isinstance(value, float):
        return "float", 0
    if isinstance(value, str):
        return "str", 0
    if isinstance(value, tuple) and value:
        inner, _ = _kind_of(value[0])
        return inner, len(value)
    raise TypeError(f"cannot infer kind for default {value!r}")


_SCHEMA = {}


def _k(section, name, default, doc, kind=None, arity=None, **kw):
    if kind is None:
        kind, inferred = _kind_of(default)
        arity = inferred if arity is None else arity
    spec = KeySpec(section, name, kind, arity or 0, default, doc, **kw)
    if spec.full in _SCHEMA:
        raise ValueError(f"duplicate schema key {spec.full}")
    _SCHEMA[spec.full] = spec


# model: network architecture
_k("model", "depth", 4, "encoder/decoder stages", lo=1)
_k("model", "widths", (16, 32, 64, 128, 256),
   "channels per stage, depth+1 entries", arity=-1, lo=1)
_k("model", "patch_size", 64, "cubic input edge, divisible by 2^depth", lo=1)
_k("model", "in_channels", 1, "image channels (single-modality only)", lo=1)
_k("model", "leaky_slope", 0.01, "negative slope of leaky ReLU", lo=0.0)
_k("model", "dropout_rate", 0.2, "dropout before the classifier head",
   lo=0.0, hi=1.0, hi_open=True)
_k("model", "seg_classes", 2, "segmentation classes (background, lesion)")
_k("model", "norm_epsilon", 1e-5, "instance-norm variance floor",
   lo=0.0, lo_open=True)
_k("model", "cls_hidden", 64, "hidden units in the classifier head", lo=1)
_k("model", "variant", "full", "architecture variant", choices=VARIANTS)

# loss: combined objective
_k("loss", "phi", 0.3, "weight of the focal term vs the seg terms",
   lo=0.0, hi=1.0)
_k("loss", "beta", 0.5, "weight of generalized Dice vs cross-entropy",
   lo=0.0, hi=1.0)
_k("loss", "alpha", 0.25, "focal class-balance weight for positives",
   lo=0.0, hi=1.0)
_k("loss", "gamma", 2.0, "focal down-weighting exponent", lo=0.0)
_k("loss", "prob_clamp", 1e-7, "probability clamp inside log terms",
   lo=0.0, hi=0.5, lo_open=True, hi_open=True)

# train: optimizer and schedule
_k("train", "batch_size", 4, "patches per optimizer step", lo=1)
_k("train", "lr0", 1e-3, "initial learning rate", lo=0.0, lo_open=True)
_k("train", "lr_decay", 0.8, "multiplicative decay factor",
   lo=0.0, hi=1.0, lo_open=True, hi_open=True)
_k("train", "lr_period", 5, "epochs (or steps) between decays", lo=1)
_k("train", "decay_per_step", False, "decay per step instead of per epoch")
_k("train", "max_epochs", 100, "hard epoch cap", lo=1)
_k("train", "early_stop_delta", 1e-3,
   "minimum val improvement that resets patience", lo=0.0, lo_open=True)
_k("train", "early_stop_patience", 10,
   "consecutive non-improving validations before stopping", lo=1)
_k("train", "beta1", 0.9, "Adam first-moment decay", lo=0.0, hi=1.0,
   hi_open=True)
_k("train", "beta2", 0.999, "Adam second-moment decay", lo=0.0, hi=1.0,
   hi_open=True)
_k("train", "eps", 1e-8, "Adam denominator floor", lo=0.0, lo_open=True)
_k("train", "weight_decay", 0.01, "decoupled weight decay", lo=0.0)
_k("train", "seed", 0, "master seed for init, sampling, augmentation")
_k("train", "steps_per_epoch", 0,
   "optimizer steps per epoch; 0 derives from the pool size", lo=0)

# patch: sampling plan
_k("patch", "k_per_site", 8, "positive patches per aneurysm site", lo=1)
_k("patch", "max_offset", 16, "max jitter of positive centers (voxels)",
   lo=0)
_k("patch", "n_negative", 50, "negative patches per training subject", lo=0)
_k("patch", "negative_mix", (0.4, 0.3, 0.3),
   "negative sourcing mix: vessel-adjacent, random, background",
   lo=0.0, hi=1.0)
_k("patch", "augment", True, "augment training patches")
_k("patch", "augment_positives_only", True,
   "restrict augmentation to positive patches")
_k("patch", "val_k_per_site", 1, "positive patches per site for validation",
   lo=1)
_k("patch", "val_n_negative", 10, "negative patches per validation subject",
   lo=0)

# augment: intensity/geometry jitter ranges
_k("augment", "noise_std_range", (0.01, 0.1),
   "gaussian noise std as a fraction of patch std", lo=0.0)
_k("augment", "gamma_range", (0.7, 1.5), "gamma-correction exponent range",
   lo=0.0, lo_open=True)
_k("augment", "shift_range", (-0.1, 0.1),
   "additive shift as a fraction of intensity range")
_k("augment", "zoom_range", (0.9, 1.1), "zoom factor range", lo=0.0,
   lo_open=True)
_k("augment", "n_transforms", (2, 5),
   "min,max number of transforms applied per patch", lo=0)

# vesselness: tubular prior
_k("vesselness", "sigma", 1.0, "gaussian derivative scale (voxels)",
   lo=0.0, lo_open=True)
_k("vesselness", "alpha1", 0.5, "lower eigenvalue-ratio weight",
   lo=0.0, lo_open=True)
_k("vesselness", "alpha2", 2.0, "upper eigenvalue-ratio weight",
   lo=0.0, lo_open=True)
_k("vesselness", "measure", "sato", "line measure",
   choices=("sato", "frangi"))
_k("vesselness", "frangi_a", 0.5, "frangi plate/line constant", lo=0.0,
   lo_open=True)
_k("vesselness", "frangi_b", 0.5, "frangi blob constant", lo=0.0,
   lo_open=True)
_k("vesselness", "frangi_c", 500.0, "frangi structure constant", lo=0.0,
   lo_open=True)
_k("vesselness", "normalize", True, "rescale output to [0, 1]")
_k("vesselness", "sigmas", None,
   "optional multi-scale sigmas, max-combined; empty means single scale",
   kind="float", arity=-1, nullable=True, lo=0.0, lo_open=True)

# tta: test-time augmentation
_k("tta", "enabled", True, "average predictions over the transform set")
_k("tta", "transforms", tuple(DEFAULT_TRANSFORMS),
   "transform names, must include identity", arity=-1, choices=TTA_NAMES)

# infer: sliding-patch prediction and post-processing
_k("infer", "n_patches", 50, "vesselness-ranked patch centers per subject",
   lo=1)
_k("infer", "threshold", 0.5, "foreground probability threshold",
   lo=0.0, hi=1.0, lo_open=True, hi_open=True)
_k("infer", "nms_radius", 16.0, "min spacing between patch centers (voxels)",
   lo=0.0)
_k("infer", "min_component_voxels", 5,
   "components smaller than this are removed", lo=0)
_k("infer", "cls_gate", False,
   "suppress patches whose classifier logit falls below cls_threshold")
_k("infer", "cls_threshold", 0.0, "classifier logit gate threshold")

# phantom: synthetic subject geometry
_k("phantom", "dims", (64, 64, 64), "volume shape (voxels)", lo=32)
_k("phantom", "spacing", (1.0, 1.0, 1.0), "voxel spacing (mm)",
   lo=0.0, lo_open=True)
_k("phantom", "n_vessels", 3, "vessel centerlines per volume", lo=1)
_k("phantom", "vessel_radius_range", (1.5, 3.0), "vessel radius (voxels)",
   lo=0.0, lo_open=True)
_k("phantom", "n_aneurysms", 1, "max aneurysms per diseased subject", lo=0)
_k("phantom", "aneurysm_radius_range", (2.0, 4.0),
   "aneurysm radius (voxels)", lo=1.0)
_k("phantom", "intensity_vessel", 1.0, "vessel intensity")
_k("phantom", "intensity_background", 0.0, "background intensity")
_k("phantom", "noise_std", 0.05, "additive gaussian noise std", lo=0.0)
_k("phantom", "psf_sigma", 0.6, "gaussian blur sigma (voxels)", lo=0.0)
_k("phantom", "seed", 0, "cohort master seed")

# dataset: cohort composition
_k("dataset", "n_subjects", 30, "subjects to generate", lo=1)
_k("dataset", "control_fraction", 0.2, "fraction with zero aneurysms",
   lo=0.0, hi=1.0)
_k("dataset", "test_fraction", 0.2, "fraction held out as the test split",
   lo=0.0, hi=1.0)

SCHEMA = dict(_SCHEMA)
SECTIONS = tuple(sorted({s.section for s in SCHEMA.values()}))

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _parse_scalar(spec, raw):
    raw = raw.strip()
    if spec.kind == "bool":
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ValueError(f"expected true/false, got {raw!r}")
    if spec.kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}")
    if spec.kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"expected a number, got {raw!r}")
    return raw


def parse_value(spec, raw: str):
    """String (file line or flag) -> typed, range-checked value."""
    text = raw.strip()
    if spec.nullable and text.lower() in ("", "none"):
        return None
    if spec.arity == 0:
        value = _parse_scalar(spec, text)
    else:
        parts = [p for p in (s.strip() for s in text.split(",")) if p != ""]
        if spec.arity > 0 and len(parts) != spec.arity:
            raise ValueError(
                f"expected {spec.arity} comma-separated values, got "
                f"{len(parts)}")
        if spec.arity < 0 and not parts:
            raise ValueError("expected at least one value")
        value = tuple(_parse_scalar(spec, p) for p in parts)
    validate_value(spec, value)
    return value


def coerce_value(spec, obj):
    """JSON-native value -> typed, range-checked value."""
    if obj is None or isinstance(obj, str):
        return parse_value(spec, obj if obj is not None else "")
    if spec.arity == 0:
        if spec.kind == "bool":
            if not isinstance(obj, bool):
                raise ValueError(f"expected true/false, got {obj!r}")
            value = obj
        elif spec.kind == "int":
            if isinstance(obj, bool) or not isinstance(obj, (int, float)):
                raise ValueError(f"expected an integer, got {obj!r}")
            if isinstance(obj, float) and not obj.is_integer():
                raise ValueError(f"expected an integer, got {obj!r}")
            value = int(obj)
        elif spec.kind == "float":
            if isinstance(obj, bool) or not isinstance(obj, (int, float)):
                raise ValueError(f"expected a number, got {obj!r}")
            value = float(obj)
        else:
            raise ValueError(f"expected a string, got {obj!r}")
    else:
        if not isinstance(obj, (list, tuple)):
            raise ValueError(f"expected a list, got {obj!r}")
        value = tuple(coerce_value(
            KeySpec(spec.section, spec.name, spec.kind, 0, None, ""), v)
            for v in obj)
        if spec.arity > 0 and len(value) != spec.arity:
            raise ValueError(f"expected {spec.arity} values, got {len(value)}")
        if spec.arity < 0 and not value:
            if spec.nullable:
                return None
            raise ValueError("expected at least one value")
    validate_value(spec, value)
    return value


def validate_value(spec, value):
    if value is None:
        if not spec.nullable:
            raise ValueError("value required")
        return
    items = value if isinstance(value, tuple) else (value,)
    for item in items:
        if spec.choices is not None and item not in spec.choices:
            raise ValueError(
                f"{item!r} not one of {', '.join(map(str, spec.choices))}")
        if spec.kind in ("int", "float"):
            if spec.lo is not None:
                if item < spec.lo or (spec.lo_open and item == spec.lo):
                    op = ">" if spec.lo_open else ">="
                    raise ValueError(f"must be {op} {spec.lo}, got {item}")
            if spec.hi is not None:
                if item > spec.hi or (spec.hi_open and item == spec.hi):
                    op = "<" if spec.hi_open else "<="
                    raise ValueError(f"must be {op} {spec.hi}, got {item}")


def format_value(spec, value):
    """Typed value -> the string parse_value accepts (snapshot format)."""
    if value is None:
        return ""
    if isinstance(value, tuple):
        scalar = KeySpec(spec.section, spec.name, spec.kind, 0, None, "")
        return ", ".join(format_value(scalar, v) for v in value)
    if spec.kind == "bool":
        return "true" if value else "false"
    if spec.kind == "float":
        return repr(float(value))
    return str(value)


class RunConfig(Mapping):
    """Immutable full-schema key/value map."""

    __slots__ = ("_values",)

    def __init__(self, values):
        missing = set(SCHEMA) - set(values)
        extra = set(values) - set(SCHEMA)
        if missing or extra:
            raise ConfigError(
                f"config incomplete: missing {sorted(missing)}, "
                f"extra {sorted(extra)}")
        object.__setattr__(self, "_values", dict(values))

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def with_overrides(self, overrides):
        unknown = set(overrides) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        merged = dict(self._values)
        merged.update(overrides)
        return RunConfig(merged)


def defaults_config() -> RunConfig:
    return RunConfig({k: s.default for k, s in SCHEMA.items()})


def _known_key(key, errors):
    if key not in SCHEMA:
        sections = ", ".join(SECTIONS)
        errors.append(f"{key}: unknown key (sections: {sections})")
        return False
    return True


def parse_kv_text(text: str) -> dict:
    """key=value document -> {full_key: typed value}; all errors at once."""
    values, errors = {}, []
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            errors.append(f"line {ln}: expected key=value, got {stripped!r}")
            continue
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not _known_key(key, errors):
            continue
        try:
            values[key] = parse_value(SCHEMA[key], raw)
        except ValueError as e:
            errors.append(f"{key}: {e}")
    if errors:
        raise ConfigError("invalid config: " + "; ".join(errors))
    return values


def parse_json_obj(obj) -> dict:
    values, errors = {}, []
    if not isinstance(obj, dict):
        raise ConfigError("invalid config: JSON root must be an object")
    flat = {}
    for key, val in obj.items():
        if isinstance(val, dict):
            for sub, v in val.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = val
    for key, val in flat.items():
        if not _known_key(key, errors):
            continue
        try:
            values[key] = coerce_value(SCHEMA[key], val)
        except ValueError as e:
            errors.append(f"{key}: {e}")
    if errors:
        raise ConfigError("invalid config: " + "; ".join(errors))
    return values


def load_overrides(path) -> dict:
    """Config file -> {full_key: typed value} for the keys it sets."""
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        return parse_json_obj(json.loads(text))
    return parse_kv_text(text)


def load_config(path) -> RunConfig:
    """Defaults overlaid with the file at path; validated and frozen."""
    return defaults_config().with_overrides(load_overrides(path))


def snapshot_text(cfg: RunConfig, command: str, notes=None,
                  keys=None) -> str:
    """Reloadable key=value snapshot of the effective configuration."""
    lines = ["# frozen run configuration; reload with --config",
             f"# command: {command}"]
    for name, val in sorted((notes or {}).items()):
        lines.append(f"# {name}: {val}")
    for key in sorted(keys if keys is not None else cfg):
        lines.append(f"{key}={format_value(SCHEMA[key], cfg[key])}")
    return "\n".join(lines) + "\n"


# Materializers: RunConfig -> the dataclasses the pipeline modules take.

def _section(cfg, section):
    return {s.name: cfg[k] for k, s in SCHEMA.items() if s.section == section}


def model_config(cfg) -> ModelConfig:
    return ModelConfig(**_section(cfg, "model"))


def loss_config(cfg) -> LossConfig:
    return LossConfig(**_section(cfg, "loss"))


def train_config(cfg) -> TrainConfig:
    return TrainConfig(**_section(cfg, "train"))


def patch_plan(cfg) -> PatchPlan:
    return PatchPlan(aug=AugmentParams(**_section(cfg, "augment")),
                     **_section(cfg, "patch"))


def vesselness_params(cfg) -> VesselnessParams:
    return VesselnessParams(**_section(cfg, "vesselness"))


def tta_config(cfg) -> TTAConfig:
    return TTAConfig(transforms=tuple(cfg["tta.transforms"]),
                     enabled=cfg["tta.enabled"])


def phantom_spec(cfg) -> PhantomSpec:
    return PhantomSpec(**_section(cfg, "phantom"))


def dataset_args(cfg) -> dict:
    return _section(cfg, "dataset")


def infer_kwargs(cfg) -> dict:
    return _section(cfg, "infer")
