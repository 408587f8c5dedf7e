"""Dual-stream attention-gated 3D U-Net with an auxiliary classifier.

One shared encoder runs twice, on the image patch and on its vesselness
prior. The decoder walks back up on image features; at the top level an
attention gate fuses image features, vesselness features, and the
decoder's gating signal into a single-channel map that modulates the
skip connection. A classification head pools the vesselness bottleneck
and the final decoder map into one subject-level logit.

Variants: "vessel_encoder_only" drops the gate (plain top skip),
"vessel_attblock_only" feeds vesselness through a single conv stem
straight to the gate instead of the shared encoder.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import ConfigError, ShapeError
from .autodiff import (
    Tensor,
    concat,
    conv3d,
    conv_transpose3d,
    dropout,
    global_avg_pool,
    instance_norm,
    leaky_relu,
    linear,
    max_pool2,
    mul,
    relu,
    sigmoid,
)

VARIANTS = ("full", "vessel_encoder_only", "vessel_attblock_only")


@dataclass
class ModelConfig:
    depth: int = 4
    widths: tuple = (16, 32, 64, 128, 256)
    patch_size: int = 64
    in_channels: int = 1
    leaky_slope: float = 0.01
    dropout_rate: float = 0.2
    seg_classes: int = 2
    norm_epsilon: float = 1e-5
    cls_hidden: int = 64
    variant: str = "full"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if len(self.widths) != self.depth + 1:
            raise ConfigError(f"widths must list depth+1 = {self.depth + 1} "
                              f"channel counts, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.patch_size % (2 ** self.depth):
            raise ConfigError(f"patch_size {self.patch_size} must be divisible "
                              f"by 2^depth = {2 ** self.depth}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must be in [0, 1), got "
                              f"{self.dropout_rate}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one "
                              f"of {VARIANTS}")
        if self.in_channels != 1:
            raise ConfigError("each stream carries a single input channel")
        if self.seg_classes != 2:
            raise ConfigError("segmentation head is binary (2 logit channels)")


class ParamStore:
    """Named parameter tensors plus per-parameter optimizer moments."""

    def __init__(self):
        self._tensors = {}
        self.m = {}
        self.v = {}

    def add(self, name: str, array: np.ndarray):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(array), requires_grad=True)
        self._tensors[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    @property
    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._tensors.values())


def _kaiming(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_params(cfg: ModelConfig, seed: int = 0,
                 dtype=np.float32) -> ParamStore:
    """Allocate and initialize every parameter the config's variant needs.

    Creation order is fixed, so a given seed always produces identical
    values. Conv/linear weights are Kaiming-uniform over fan-in, biases
    zero, norm scales one, norm shifts zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2 ** 63 - 1), 7]))
    store = ParamStore()

    def conv_block(prefix, c_in, c_out, k=3):
        for j, ci in enumerate((c_in, c_out)):
            store.add(f"{prefix}.conv{j}.w",
                      _kaiming(rng, (c_out, ci, k, k, k), ci * k ** 3, dtype))
            store.add(f"{prefix}.conv{j}.b", np.zeros(c_out, dtype))
            store.add(f"{prefix}.norm{j}.g", np.ones(c_out, dtype))
            store.add(f"{prefix}.norm{j}.b", np.zeros(c_out, dtype))

    w = cfg.widths
    conv_block("enc0", cfg.in_channels, w[0])
    for i in range(1, cfg.depth):
        conv_block(f"enc{i}", w[i - 1], w[i])
    conv_block("bot", w[cfg.depth - 1], w[cfg.depth])

    for i in reversed(range(cfg.depth)):
        store.add(f"dec{i}.up.w",
                  _kaiming(rng, (w[i + 1], w[i], 2, 2, 2), w[i + 1] * 8, dtype))
        store.add(f"dec{i}.up.b", np.zeros(w[i], dtype))
        conv_block(f"dec{i}", 2 * w[i], w[i])

    if cfg.variant != "vessel_encoder_only":
        inter = max(1, w[0] // 2)
        for leg in ("img", "ves", "gate"):
            store.add(f"att.{leg}.w",
                      _kaiming(rng, (inter, w[0], 1, 1, 1), w[0], dtype))
            store.add(f"att.{leg}.b", np.zeros(inter, dtype))
            store.add(f"att.{leg}.norm.g", np.ones(inter, dtype))
            store.add(f"att.{leg}.norm.b", np.zeros(inter, dtype))
        store.add("att.psi.w", _kaiming(rng, (1, inter, 1, 1, 1), inter, dtype))
        store.add("att.psi.b", np.zeros(1, dtype))
        store.add("att.psi.norm.g", np.ones(1, dtype))
        store.add("att.psi.norm.b", np.zeros(1, dtype))

    if cfg.variant == "vessel_attblock_only":
        store.add("stem.conv.w",
                  _kaiming(rng, (w[0], cfg.in_channels, 3, 3, 3),
                           cfg.in_channels * 27, dtype))
        store.add("stem.conv.b", np.zeros(w[0], dtype))
        store.add("stem.norm.g", np.ones(w[0], dtype))
        store.add("stem.norm.b", np.zeros(w[0], dtype))

    store.add("seg.w", _kaiming(rng, (cfg.seg_classes, w[0], 3, 3, 3),
                                w[0] * 27, dtype))
    store.add("seg.b", np.zeros(cfg.seg_classes, dtype))

    cls_in = w[cfg.depth] + w[0]
    store.add("cls.fc0.w", _kaiming(rng, (cls_in, cfg.cls_hidden), cls_in, dtype))
    store.add("cls.fc0.b", np.zeros(cfg.cls_hidden, dtype))
    store.add("cls.fc1.w", _kaiming(rng, (cfg.cls_hidden, 1), cfg.cls_hidden, dtype))
    store.add("cls.fc1.b", np.zeros(1, dtype))
    return store


def _block(x, p: ParamStore, prefix: str, cfg: ModelConfig):
    for j in (0, 1):
        x = conv3d(x, p[f"{prefix}.conv{j}.w"], p[f"{prefix}.conv{j}.b"],
                   stride=1, padding=1, name=f"{prefix}.conv{j}")
        x = instance_norm(x, p[f"{prefix}.norm{j}.g"], p[f"{prefix}.norm{j}.b"],
                          cfg.norm_epsilon)
        x = leaky_relu(x, cfg.leaky_slope)
    return x


def _encode(x, p: ParamStore, cfg: ModelConfig):
    """Shared encoder pass -> (per-level skip features, bottleneck)."""
    feats = []
    for i in range(cfg.depth):
        x = _block(x, p, f"enc{i}", cfg)
        feats.append(x)
        x = max_pool2(x)
    return feats, _block(x, p, "bot", cfg)


def attention_gate(enc_img, enc_ves, gating, p: ParamStore,
                   cfg: ModelConfig):
    """-> (gated enc_img, single-channel att_map in (0, 1))."""
    shapes = {t.shape[2:] for t in (enc_img, enc_ves, gating)}
    if len(shapes) != 1:
        raise ShapeError(f"attention gate inputs must share spatial dims, got "
                         f"{[t.shape for t in (enc_img, enc_ves, gating)]}")
    total = None
    for leg, t in (("img", enc_img), ("ves", enc_ves), ("gate", gating)):
        y = conv3d(t, p[f"att.{leg}.w"], p[f"att.{leg}.b"], name=f"att.{leg}")
        y = instance_norm(y, p[f"att.{leg}.norm.g"], p[f"att.{leg}.norm.b"],
                          cfg.norm_epsilon)
        total = y if total is None else total + y
    att = conv3d(total, p["att.psi.w"], p["att.psi.b"], name="att.psi")
    att = instance_norm(att, p["att.psi.norm.g"], p["att.psi.norm.b"],
                        cfg.norm_epsilon)
    att = sigmoid(att)
    return mul(enc_img, att), att


def vpunet_forward(image, vessel, p: ParamStore, cfg: ModelConfig,
                   train: bool = False, rng=None):
    """-> (seg_logits [N, 2, S, S, S], cls_logit [N, 1])."""
    s = cfg.patch_size
    want = (cfg.in_channels, s, s, s)
    for name, t in (("image", image), ("vessel", vessel)):
        if t.data.ndim != 5 or t.shape[1:] != want:
            raise ShapeError(f"{name} patch must be [N, {cfg.in_channels}, "
                             f"{s}, {s}, {s}], got {t.shape}")
    if image.shape[0] != vessel.shape[0]:
        raise ShapeError("image and vessel batches must match")

    img_feats, img_bot = _encode(image, p, cfg)

    ves_top, ves_bot = None, None
    if cfg.variant == "vessel_attblock_only":
        y = conv3d(vessel, p["stem.conv.w"], p["stem.conv.b"], stride=1,
                   padding=1, name="stem.conv")
        y = instance_norm(y, p["stem.norm.g"], p["stem.norm.b"],
                          cfg.norm_epsilon)
        ves_top = leaky_relu(y, cfg.leaky_slope)
    else:
        ves_feats, ves_bot = _encode(vessel, p, cfg)
        ves_top = ves_feats[0]

    x = img_bot
    for i in reversed(range(cfg.depth)):
        x = conv_transpose3d(x, p[f"dec{i}.up.w"], p[f"dec{i}.up.b"],
                             stride=2, name=f"dec{i}.up")
        if i == 0 and cfg.variant != "vessel_encoder_only":
            skip, _ = attention_gate(img_feats[0], ves_top, x, p, cfg)
        else:
            skip = img_feats[i]
        x = concat([skip, x], axis=1)
        x = _block(x, p, f"dec{i}", cfg)

    seg = conv3d(x, p["seg.w"], p["seg.b"], stride=1, padding=1, name="seg")

    pooled_bot = global_avg_pool(ves_bot if ves_bot is not None else img_bot)
    cls_in = concat([pooled_bot, global_avg_pool(x)], axis=1)
    h = dropout(cls_in, cfg.dropout_rate, train, rng)
    h = relu(linear(h, p["cls.fc0.w"], p["cls.fc0.b"]))
    cls = linear(h, p["cls.fc1.w"], p["cls.fc1.b"])
    return seg, cls


CHECKPOINT_VERSION = 1
_MANIFEST_NAME = "manifest.json"
_BLOB_NAME = "params.blob"


def save_checkpoint(dir_path, params: ParamStore, cfg: ModelConfig) -> None:
    """Manifest (names, shapes, offsets, config echo, blob digest) plus one
    raw little-endian float32 blob, in a directory."""
    os.makedirs(dir_path, exist_ok=True)
    chunks, entries, offset = [], [], 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.data.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "float32",
        "config": asdict(cfg),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
    }
    with open(os.path.join(dir_path, _BLOB_NAME), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(dir_path, _MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_checkpoint(dir_path, dtype=np.float32):
    """-> (ParamStore, ModelConfig). Verifies the blob digest and every
    tensor's shape by name before any value is accepted."""
    with open(os.path.join(dir_path, _MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version "
                          f"{manifest.get('format_version')}")
    with open(os.path.join(dir_path, _BLOB_NAME), "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ConfigError("checkpoint blob does not match its recorded digest")

    raw_cfg = dict(manifest["config"])
    raw_cfg["widths"] = tuple(raw_cfg["widths"])
    cfg = ModelConfig(**raw_cfg)
    store = build_params(cfg, seed=0, dtype=dtype)
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in store:
            raise ConfigError(f"checkpoint tensor {name!r} is not a parameter "
                              f"of this config")
        want = tuple(entry["shape"])
        have = store[name].data.shape
        if want != have:
            raise ConfigError(f"shape mismatch for {name!r}: checkpoint has "
                              f"{want}, model expects {have}")
        flat = np.frombuffer(blob, dtype="<f4", count=entry["nbytes"] // 4,
                             offset=entry["offset"])
        store[name].data = flat.reshape(want).astype(dtype)
        seen.add(name)
    missing = [n for n in store.names() if n not in seen]
    if missing:
        raise ConfigError(f"checkpoint is missing parameters: {missing[:5]}")
    return store, cfg


def checkpoint_digest(dir_path) -> str:
    with open(os.path.join(dir_path, _MANIFEST_NAME)) as fh:
        return json.load(fh)["sha256"]
