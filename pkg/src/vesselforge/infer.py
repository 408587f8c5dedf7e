"""Subject-level inference: vesselness-guided patch placement, test-time
augmentation, overlap-averaged probability fusion, and mask cleanup.

Patches are cut at vesselness peaks, each one is pushed through the
model once per geometric transform (with the segmentation probabilities
mapped back through the exact inverse), and the averaged probabilities
are scattered onto a whole-volume canvas. Overlaps average. The canvas
is thresholded, components under five voxels are dropped, holes are
filled, and what survives becomes the detection list.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ConfigError
from .autodiff import Tensor
from .network import ModelConfig, vpunet_forward
from .patching import select_inference_centers
from .vesselness import VesselnessParams, vesselness_map
from .volume import (
    LabelVolume,
    Volume3D,
    connected_components,
    fill_holes,
    remove_small_components,
    znorm_array,
)

log = logging.getLogger("vesselforge.infer")

_TTA_TABLE = {
    "identity": (lambda a: a, lambda a: a),
    "flip_x": (lambda a: a[::-1], lambda a: a[::-1]),
    "flip_y": (lambda a: a[:, ::-1], lambda a: a[:, ::-1]),
    "flip_z": (lambda a: a[:, :, ::-1], lambda a: a[:, :, ::-1]),
    "rot90_xy": (lambda a: np.rot90(a, 1, (0, 1)),
                 lambda a: np.rot90(a, -1, (0, 1))),
    "rot90_yz": (lambda a: np.rot90(a, 1, (1, 2)),
                 lambda a: np.rot90(a, -1, (1, 2))),
    "rot90_xz": (lambda a: np.rot90(a, 1, (0, 2)),
                 lambda a: np.rot90(a, -1, (0, 2))),
}

DEFAULT_TRANSFORMS = ("identity", "flip_x", "flip_y", "flip_z",
                      "rot90_xy", "rot90_yz", "rot90_xz")
TTA_NAMES = tuple(_TTA_TABLE)


@dataclass
class TTAConfig:
    transforms: tuple = DEFAULT_TRANSFORMS
    enabled: bool = True

    def __post_init__(self):
        self.transforms = tuple(self.transforms)
        unknown = [t for t in self.transforms if t not in _TTA_TABLE]
        if unknown:
            raise ConfigError(f"unknown TTA transforms {unknown}; known: "
                              f"{sorted(_TTA_TABLE)}")
        if "identity" not in self.transforms:
            raise ConfigError("TTA transform list must include 'identity'")
        if len(set(self.transforms)) != len(self.transforms):
            raise ConfigError("TTA transform list has duplicates")

    def active(self):
        return self.transforms if self.enabled else ("identity",)


def apply_transform(name: str, cube: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(_TTA_TABLE[name][0](cube))


def invert_transform(name: str, cube: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(_TTA_TABLE[name][1](cube))


def _fg_prob(seg_logits: np.ndarray) -> np.ndarray:
    """Foreground softmax probability of a [2, S, S, S] logit cube."""
    z = seg_logits.astype(np.float64)
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e[1] / e.sum(axis=0)


def _patch_probability(img_cube, ves_cube, params, cfg, names):
    acc = np.zeros(img_cube.shape, dtype=np.float64)
    cls_sum = 0.0
    for name in names:
        ti = apply_transform(name, img_cube)[None, None].astype(np.float32)
        tv = apply_transform(name, ves_cube)[None, None].astype(np.float32)
        seg, cls = vpunet_forward(Tensor(ti), Tensor(tv), params, cfg,
                                  train=False)
        acc += invert_transform(name, _fg_prob(seg.data[0]))
        cls_sum += float(cls.data[0, 0])
    return acc / len(names), cls_sum / len(names)


def infer_subject(image: Volume3D, params, model_cfg: ModelConfig,
                  tta: TTAConfig = None, vp: VesselnessParams = None,
                  n_patches: int = 50, threshold: float = 0.5,
                  nms_radius: float = 16.0, min_component_voxels: int = 5,
                  cls_gate: bool = False, cls_threshold: float = 0.0,
                  patch_log: list = None):
    """-> (pred_mask: LabelVolume, detections: list of dicts,
    prob_map: Volume3D).

    The per-patch classification logit is recorded in patch_log (when
    given); it only suppresses patches when cls_gate is set.
    """
    tta = tta or TTAConfig()
    vp = vp or VesselnessParams(sigma=1.5)
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")

    ves = vesselness_map(image, vp)
    patch = model_cfg.patch_size
    centers = select_inference_centers(ves, n=n_patches, patch=patch,
                                       nms_radius=nms_radius)
    dims = image.dims
    prob = np.zeros(dims, dtype=np.float64)
    if not centers:
        log.warning("no inference patch centers found; returning an empty "
                    "prediction")
        empty = np.zeros(dims, dtype=np.uint8)
        return (LabelVolume(empty, image.spacing, image.origin), [],
                Volume3D(prob.astype(np.float32), image.spacing, image.origin))

    half = patch // 2
    canvas = np.zeros(dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.float64)
    names = tta.active()
    for center in centers:
        start = tuple(center[i] - half for i in range(3))
        sl = tuple(slice(start[i], start[i] + patch) for i in range(3))
        img_cube = znorm_array(image.data[sl])
        ves_cube = ves.data[sl].astype(np.float32)
        patch_prob, cls_mean = _patch_probability(img_cube, ves_cube, params,
                                                  model_cfg, names)
        if patch_log is not None:
            patch_log.append({"center": tuple(int(c) for c in center),
                              "cls_logit": cls_mean})
        if cls_gate and cls_mean < cls_threshold:
            continue
        canvas[sl] += patch_prob
        count[sl] += 1.0

    covered = count > 0
    prob[covered] = canvas[covered] / count[covered]
    mask = (prob > threshold).astype(np.uint8)
    mask = remove_small_components(mask, min_voxels=min_component_voxels)
    mask = fill_holes(mask)

    labels, sizes = connected_components(mask)
    detections = []
    for comp_id, size in enumerate(sizes, start=1):
        coords = np.argwhere(labels == comp_id)
        detections.append({
            "id": comp_id,
            "voxels": int(size),
            "centroid": tuple(float(c) for c in coords.mean(axis=0)),
            "max_prob": float(prob[labels == comp_id].max()),
        })
    return (LabelVolume(mask, image.spacing, image.origin), detections,
            Volume3D(prob.astype(np.float32), image.spacing, image.origin))
