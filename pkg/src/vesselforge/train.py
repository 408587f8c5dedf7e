"""Patch-based training: AdamW, stepped learning-rate decay, early stopping.

Each epoch draws class-balanced batches from the patch pool (positives
upweighted to match negatives), augments them, and takes one optimizer
step per batch. Validation loss on untouched patches drives both the
best-checkpoint selection and the plateau-based stop rule.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import ConfigError, TrainingError
from .autodiff import Tensor
from .losses import LossConfig, make_onehot, total_loss
from .network import (
    ModelConfig,
    ParamStore,
    build_params,
    save_checkpoint,
    vpunet_forward,
)
from .nifti import read_nifti
from .patching import (
    AugmentParams,
    SamplerState,
    augment_patch,
    extract_negative_patches,
    extract_positive_patches,
    sampler_next,
)
from .phantom import AneurysmSite
from .vesselness import VesselnessParams, vesselness_map

log = logging.getLogger("vesselforge.train")

LOG_COLUMNS = ("epoch", "step", "L_F", "L_GD", "L_CE", "total", "lr",
               "val_total")


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr0: float = 1e-3
    lr_decay: float = 0.8
    lr_period: int = 5
    decay_per_step: bool = False
    max_epochs: int = 100
    early_stop_delta: float = 1e-3
    early_stop_patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    steps_per_epoch: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr_period < 1:
            raise ConfigError("batch_size, max_epochs, lr_period must be >= 1")
        if self.lr0 <= 0 or self.eps <= 0:
            raise ConfigError("lr0 and eps must be positive")
        if not (0.0 < self.lr_decay < 1.0):
            raise ConfigError(f"lr_decay must be in (0, 1), got {self.lr_decay}")
        if self.early_stop_delta <= 0 or self.early_stop_patience < 1:
            raise ConfigError("early stop settings must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must be in [0, 1)")
        if self.weight_decay < 0 or self.steps_per_epoch < 0:
            raise ConfigError("weight_decay and steps_per_epoch must be >= 0")


@dataclass
class PatchPlan:
    """How many patches to carve per subject, and what to do to them."""
    k_per_site: int = 8
    max_offset: int = 16
    n_negative: int = 50
    negative_mix: tuple = (0.4, 0.3, 0.3)
    augment: bool = True
    augment_positives_only: bool = True
    val_k_per_site: int = 1
    val_n_negative: int = 10
    aug: AugmentParams = field(default_factory=AugmentParams)


@dataclass
class TrainResult:
    checkpoint_dir: str
    log_path: str
    best_val: float
    stop_reason: str
    n_epochs: int
    n_steps: int


def lr_schedule(index: int, cfg: TrainConfig) -> float:
    """lr0 * lr_decay^floor(index / lr_period); index is the epoch, or the
    step when per-step decay is switched on."""
    if index < 0:
        raise ValueError(f"schedule index must be >= 0, got {index}")
    return cfg.lr0 * cfg.lr_decay ** (index // cfg.lr_period)


def adamw_step(params: ParamStore, grads, t: int, cfg: TrainConfig,
               lr_t: float) -> None:
    """Decoupled-weight-decay Adam update, in place.

    All gradients are checked before any tensor is touched, so a
    non-finite gradient aborts the step leaving params unchanged.
    """
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    for name in params.names():
        g = grads.get(name)
        if g is None:
            raise TrainingError(f"missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        if g.shape != params[name].data.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match "
                                f"parameter {name!r} {params[name].data.shape}")
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name].astype(p.data.dtype, copy=False)
        m = params.m[name]
        v = params.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data -= lr_t * (update + cfg.weight_decay * p.data)


def _stack_batch(patches, dtype=np.float32):
    img = np.stack([p.image for p in patches])[:, None].astype(dtype)
    ves = np.stack([p.vessel for p in patches])[:, None].astype(dtype)
    labels = np.stack([p.label for p in patches])
    cls_t = np.array([[1.0 if p.is_positive else 0.0] for p in patches])
    return Tensor(np.ascontiguousarray(img)), \
        Tensor(np.ascontiguousarray(ves)), make_onehot(labels), cls_t


def _eval_loss(patches, params, model_cfg, loss_cfg, batch_size) -> float:
    total = 0.0
    for i in range(0, len(patches), batch_size):
        chunk = patches[i:i + batch_size]
        img, ves, seg_t, cls_t = _stack_batch(chunk)
        seg, cls = vpunet_forward(img, ves, params, model_cfg, train=False)
        loss, _ = total_loss(cls, cls_t, seg, seg_t, loss_cfg)
        total += float(loss.data) * len(chunk)
    return total / len(patches)


def fit_on_patches(train_patches, val_patches, model_cfg: ModelConfig,
                   loss_cfg: LossConfig, train_cfg: TrainConfig,
                   out_dir, plan: PatchPlan = None) -> TrainResult:
    """Core loop over an in-memory patch pool. -> TrainResult."""
    if not train_patches:
        raise ConfigError("training patch pool is empty")
    if not val_patches:
        raise ConfigError("validation patch pool is empty")
    plan = plan or PatchPlan()
    out_dir = str(out_dir)
    log_dir = os.path.join(out_dir, "logs")
    ckpt_root = os.path.join(out_dir, "checkpoints")
    os.makedirs(log_dir, exist_ok=True)
    os.makedirs(ckpt_root, exist_ok=True)
    best_dir = os.path.join(ckpt_root, "best")
    log_path = os.path.join(log_dir, "training_log.csv")

    root = train_cfg.seed & (2 ** 63 - 1)
    params = build_params(model_cfg, seed=train_cfg.seed)
    sampler = SamplerState.for_patches(
        train_patches,
        seed=int(np.random.SeedSequence([root, 21]).generate_state(1)[0]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([root, 22]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([root, 23]))
    aug_params = plan.aug if plan.aug is not None else AugmentParams()

    steps = train_cfg.steps_per_epoch or max(
        1, len(train_patches) // train_cfg.batch_size)
    best_val = math.inf
    streak = 0
    stop_reason = "max_epochs"
    global_step = 0
    epochs_done = 0

    def abort_with_checkpoint(message):
        last_good = os.path.join(ckpt_root, "last_good")
        save_checkpoint(last_good, params, model_cfg)
        raise TrainingError(f"{message}; last-good checkpoint saved to "
                            f"{last_good}")

    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for epoch in range(train_cfg.max_epochs):
            sums = np.zeros(4)
            for _ in range(steps):
                global_step += 1
                lr_t = lr_schedule(
                    global_step - 1 if train_cfg.decay_per_step else epoch,
                    train_cfg)
                chunk = []
                for _ in range(train_cfg.batch_size):
                    p = train_patches[sampler_next(sampler)]
                    if plan.augment and not (plan.augment_positives_only
                                             and not p.is_positive):
                        p = augment_patch(p, aug_rng, aug_params)
                    chunk.append(p)
                img, ves, seg_t, cls_t = _stack_batch(chunk)
                seg, cls = vpunet_forward(img, ves, params, model_cfg,
                                          train=True, rng=drop_rng)
                loss, bd = total_loss(cls, cls_t, seg, seg_t, loss_cfg)
                if not math.isfinite(bd["total"]):
                    abort_with_checkpoint(
                        f"non-finite loss at epoch {epoch} step {global_step}"
                        f" (breakdown {bd})")
                params.zero_grad()
                loss.backward()
                grads = {n: t.grad for n, t in params.items()}
                try:
                    adamw_step(params, grads, global_step, train_cfg, lr_t)
                except TrainingError as exc:
                    abort_with_checkpoint(str(exc))
                sums += (bd["L_F"], bd["L_GD"], bd["L_CE"], bd["total"])
                writer.writerow([epoch, global_step, f"{bd['L_F']:.6f}",
                                 f"{bd['L_GD']:.6f}", f"{bd['L_CE']:.6f}",
                                 f"{bd['total']:.6f}", f"{lr_t:.8g}", ""])
            val = _eval_loss(val_patches, params, model_cfg, loss_cfg,
                             train_cfg.batch_size)
            if not math.isfinite(val):
                abort_with_checkpoint(f"non-finite validation loss at epoch "
                                      f"{epoch}")
            means = sums / steps
            lr_now = lr_schedule(
                global_step - 1 if train_cfg.decay_per_step else epoch,
                train_cfg)
            writer.writerow([epoch, global_step, f"{means[0]:.6f}",
                             f"{means[1]:.6f}", f"{means[2]:.6f}",
                             f"{means[3]:.6f}", f"{lr_now:.8g}",
                             f"{val:.6f}"])
            fh.flush()
            epochs_done = epoch + 1

            improvement = best_val - val
            if val < best_val:
                best_val = val
                save_checkpoint(best_dir, params, model_cfg)
            if improvement < train_cfg.early_stop_delta:
                streak += 1
            else:
                streak = 0
            log.info("epoch %d: train %.4f val %.4f (best %.4f, streak %d)",
                     epoch, means[3], val, best_val, streak)
            if streak >= train_cfg.early_stop_patience:
                stop_reason = "early_stop"
                break

    return TrainResult(checkpoint_dir=best_dir, log_path=log_path,
                       best_val=best_val, stop_reason=stop_reason,
                       n_epochs=epochs_done, n_steps=global_step)


def _sites_of(entry) -> list:
    return [AneurysmSite(center=tuple(s["center"]), radius=float(s["radius"]),
                         parent_vessel=int(s["parent_vessel"]))
            for s in entry.get("sites", [])]


def _read(manifest, entry, key):
    return read_nifti(os.path.join(manifest["_dir"], entry["files"][key]))


def subject_patches(manifest, entry, model_cfg: ModelConfig,
                    plan: PatchPlan, vp: VesselnessParams, rng,
                    for_val: bool = False) -> list:
    """Positive and negative patches for one manifest subject."""
    image = _read(manifest, entry, "image")
    weak = _read(manifest, entry, "weak")
    ves = vesselness_map(image, vp)
    sites = _sites_of(entry)
    patch = model_cfg.patch_size
    sid = entry["id"]
    out = []
    if sites:
        out.extend(extract_positive_patches(
            image, ves, weak, sites,
            k=plan.val_k_per_site if for_val else plan.k_per_site,
            patch=patch, max_offset=0 if for_val else plan.max_offset,
            rng=rng, subject_id=sid))
    out.extend(extract_negative_patches(
        image, ves, weak,
        n=plan.val_n_negative if for_val else plan.n_negative,
        patch=patch, mix=plan.negative_mix, rng=rng, subject_id=sid))
    return out


def collect_split_patches(manifest, split: str, model_cfg, plan, vp,
                          seed: int) -> list:
    patches = []
    for idx, entry in enumerate(manifest["subjects"]):
        if entry["split"] != split:
            continue
        rng = np.random.default_rng(
            np.random.SeedSequence([seed & (2 ** 63 - 1), 31, idx]))
        patches.extend(subject_patches(manifest, entry, model_cfg, plan, vp,
                                       rng, for_val=(split == "val")))
    return patches


def train(manifest: dict, model_cfg: ModelConfig, loss_cfg: LossConfig,
          train_cfg: TrainConfig, out_dir, plan: PatchPlan = None,
          vp: VesselnessParams = None) -> TrainResult:
    """Carve patches from the manifest's train/val splits, then fit."""
    plan = plan or PatchPlan()
    vp = vp or VesselnessParams(sigma=1.5)
    splits = {e["split"] for e in manifest["subjects"]}
    for need in ("train", "val"):
        if need not in splits:
            raise ConfigError(f"manifest has no {need!r} split")
    train_patches = collect_split_patches(manifest, "train", model_cfg, plan,
                                          vp, train_cfg.seed)
    val_patches = collect_split_patches(manifest, "val", model_cfg, plan, vp,
                                        train_cfg.seed)
    log.info("patch pools: %d train (%d positive), %d val", len(train_patches),
             sum(p.is_positive for p in train_patches), len(val_patches))
    return fit_on_patches(train_patches, val_patches, model_cfg, loss_cfg,
                          train_cfg, out_dir, plan)
