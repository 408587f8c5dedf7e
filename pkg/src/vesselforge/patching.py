"""Patch extraction, augmentation, weighted sampling, inference placement.

Training patches are cubes cut from (image, vesselness, weak label)
triples: per-lesion positives at jittered centers, and a mixed pool of
negatives (vessel-like, landmark-substitute, random) that must avoid the
weak label entirely. Augmentation draws 2..5 distinct transforms per
patch. All randomness flows through explicit numpy Generators.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume3D, require_same_grid, znorm_array

log = logging.getLogger("vesselforge.patching")


@dataclass
class Patch:
    image: np.ndarray    # float32 cube, z-normalized
    vessel: np.ndarray   # float32 cube
    label: np.ndarray    # uint8 cube of {0, 1}
    is_positive: bool
    subject_id: str
    center: tuple        # cube center, source-volume voxel coordinates

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        self.vessel = np.ascontiguousarray(self.vessel, dtype=np.float32)
        self.label = np.ascontiguousarray(self.label, dtype=np.uint8)
        if not (self.image.shape == self.vessel.shape == self.label.shape):
            raise ValueError("image, vessel, and label cubes must share dims")
        if self.image.ndim != 3:
            raise ValueError("patch cubes must be 3D")
        if self.label.max(initial=0) > 1:
            raise ValueError("label cube must contain only {0, 1}")
        self.is_positive = bool(self.is_positive)
        self.center = tuple(int(c) for c in self.center)
        if self.is_positive != bool(self.label.any()):
            raise ValueError("is_positive must match label foreground presence")


def _clamped_start(center, patch, dims):
    return tuple(int(np.clip(center[i] - patch // 2, 0, dims[i] - patch))
                 for i in range(3))


def _cut(arr, start, patch):
    return arr[start[0]:start[0] + patch,
               start[1]:start[1] + patch,
               start[2]:start[2] + patch]


def _make_patch(image, vessel, weak, center, patch, subject_id):
    dims = image.shape
    start = _clamped_start(center, patch, dims)
    img = znorm_array(_cut(image, start, patch))
    ves = _cut(vessel, start, patch).astype(np.float32)
    lab = (_cut(weak, start, patch) > 0).astype(np.uint8)
    true_center = tuple(start[i] + patch // 2 for i in range(3))
    return Patch(img, ves, lab, bool(lab.any()), subject_id, true_center)


def extract_positive_patches(image: Volume3D, vessel: Volume3D,
                             weak_label: LabelVolume, sites,
                             k: int = 8, patch: int = 64,
                             max_offset: int = 16,
                             rng=None, subject_id: str = "") -> list:
    """k patches per site: the centered cube plus k-1 distinct random
    offsets in [-max_offset, max_offset]^3, clamped in-bounds. Candidates
    whose cube misses the weak label entirely are skipped with a warning."""
    require_same_grid(image, vessel)
    require_same_grid(image, weak_label)
    dims = image.dims
    if patch > min(dims):
        raise ValueError(f"patch {patch} exceeds volume dims {dims}")
    if not sites:
        raise ValueError("sites must be nonempty")
    if rng is None:
        rng = np.random.default_rng(0)

    out, skipped = [], 0
    for site in sites:
        base = tuple(int(round(c)) for c in site.center)
        offsets = [(0, 0, 0)]
        if max_offset > 0:
            seen = {(0, 0, 0)}
            tries = 0
            while len(offsets) < k and tries < 1000:
                cand = tuple(int(v) for v in
                             rng.integers(-max_offset, max_offset + 1, size=3))
                tries += 1
                if cand in seen:
                    continue
                seen.add(cand)
                offsets.append(cand)
        else:
            offsets = [(0, 0, 0)] * k
        for off in offsets[:k]:
            center = tuple(base[i] + off[i] for i in range(3))
            p = _make_patch(image.data, vessel.data, weak_label.data,
                            center, patch, subject_id)
            if not p.is_positive:
                skipped += 1
                continue
            out.append(p)
    if skipped:
        log.warning("skipped %d positive patch candidates with no weak-label "
                    "voxels (subject %s)", skipped, subject_id or "?")
    return out


def extract_negative_patches(image: Volume3D, vessel: Volume3D,
                             weak_label: LabelVolume, n: int = 50,
                             patch: int = 64,
                             mix: tuple = (0.4, 0.3, 0.3),
                             rng=None, subject_id: str = "",
                             max_tries_per_patch: int = 50) -> list:
    """n aneurysm-free patches: vessel-like (centers above the subject's
    99th-percentile vesselness), landmark-substitute (jittered bright-core
    centroid), and uniformly random, per the mix fractions. Any cube that
    intersects the weak label is rejected and redrawn."""
    require_same_grid(image, vessel)
    require_same_grid(image, weak_label)
    if abs(sum(mix) - 1.0) > 1e-9 or any(m < 0 for m in mix):
        raise ValueError(f"mix fractions must be nonnegative and sum to 1, got {mix}")
    dims = image.dims
    if patch > min(dims):
        raise ValueError(f"patch {patch} exceeds volume dims {dims}")
    if rng is None:
        rng = np.random.default_rng(0)

    n_vessel = int(round(n * mix[0]))
    n_landmark = int(round(n * mix[1]))
    n_random = n - n_vessel - n_landmark

    vdata = vessel.data
    thresh = np.percentile(vdata, 99.0)
    bright = np.argwhere(vdata >= thresh)
    # vessel-like centers must survive cube clamping unchanged, or the
    # recorded center would drift off the bright voxel it was drawn from
    half = patch // 2
    interior = np.ones(len(bright), dtype=bool)
    for i in range(3):
        interior &= (bright[:, i] >= half) & (bright[:, i] <= dims[i] - patch + half)
    bright = bright[interior]
    core = vdata >= 0.5 * max(float(vdata.max()), 1e-12)
    centroid = (np.argwhere(core).mean(axis=0) if core.any()
                else np.array([d / 2.0 for d in dims]))

    def draw_center(kind):
        if kind == 0:
            if not len(bright):
                return None
            return tuple(int(v) for v in bright[rng.integers(len(bright))])
        if kind == 1:
            jit = rng.integers(-(patch // 2), patch // 2 + 1, size=3)
            return tuple(int(np.clip(centroid[i] + jit[i], 0, dims[i] - 1))
                         for i in range(3))
        return tuple(int(rng.integers(0, dims[i])) for i in range(3))

    out = []
    wanted = [(0, n_vessel), (1, n_landmark), (2, n_random)]
    for kind, count in wanted:
        for _ in range(count):
            for _ in range(max_tries_per_patch):
                center = draw_center(kind)
                if center is None:
                    break
                start = _clamped_start(center, patch, dims)
                if _cut(weak_label.data, start, patch).any():
                    continue
                p = _make_patch(image.data, vessel.data, weak_label.data,
                                center, patch, subject_id)
                out.append(p)
                break
    if len(out) < n:
        log.warning("extracted %d/%d negative patches before exhausting the "
                    "retry budget (subject %s)", len(out), n, subject_id or "?")
    return out


@dataclass
class AugmentParams:
    noise_std_range: tuple = (0.01, 0.1)      # fraction of patch std
    gamma_range: tuple = (0.7, 1.5)
    shift_range: tuple = (-0.1, 0.1)          # fraction of intensity range
    zoom_range: tuple = (0.9, 1.1)
    n_transforms: tuple = (2, 5)


def aug_noise(image, vessel, label, rng, p: AugmentParams):
    std = rng.uniform(*p.noise_std_range) * float(image.std())
    return image + rng.normal(0.0, max(std, 0.0), size=image.shape), vessel, label


def aug_gamma(image, vessel, label, rng, p: AugmentParams):
    gamma = rng.uniform(*p.gamma_range)
    lo, hi = float(image.min()), float(image.max())
    if hi - lo < 1e-12:
        return image, vessel, label
    u = (image - lo) / (hi - lo)
    return lo + (hi - lo) * u ** gamma, vessel, label


def aug_shift(image, vessel, label, rng, p: AugmentParams):
    span = float(image.max() - image.min())
    return image + rng.uniform(*p.shift_range) * span, vessel, label


_ROT_PLANES = ((0, 1), (0, 2), (1, 2))


def aug_rot90(image, vessel, label, rng, p: AugmentParams):
    axes = _ROT_PLANES[rng.integers(3)]
    k = int(rng.integers(1, 4))
    return (np.rot90(image, k, axes), np.rot90(vessel, k, axes),
            np.rot90(label, k, axes))


def aug_flip(image, vessel, label, rng, p: AugmentParams):
    axis = int(rng.integers(3))
    return (np.flip(image, axis), np.flip(vessel, axis), np.flip(label, axis))


def _resize_center(arr, out_dim, pad_value):
    """Center crop or pad a cube to out_dim per axis."""
    out = np.full((out_dim,) * 3, pad_value, dtype=arr.dtype)
    src, dst = [], []
    for d in arr.shape:
        if d >= out_dim:
            a = (d - out_dim) // 2
            src.append(slice(a, a + out_dim))
            dst.append(slice(0, out_dim))
        else:
            a = (out_dim - d) // 2
            src.append(slice(0, d))
            dst.append(slice(a, a + d))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def aug_zoom(image, vessel, label, rng, p: AugmentParams):
    scale = rng.uniform(*p.zoom_range)
    side = image.shape[0]
    zi = ndimage.zoom(image, scale, order=1, mode="nearest")
    zv = ndimage.zoom(vessel, scale, order=1, mode="nearest")
    zl = ndimage.zoom(label, scale, order=0, mode="nearest")
    return (_resize_center(zi, side, float(image.min())),
            _resize_center(zv, side, 0.0),
            _resize_center(zl, side, 0))


TRANSFORMS = (aug_noise, aug_gamma, aug_shift, aug_rot90, aug_flip, aug_zoom)


def augment_patch(p: Patch, rng, params: AugmentParams = AugmentParams()) -> Patch:
    """Apply m ~ Uniform{2..5} distinct random transforms; geometric ones act
    on all three cubes (label nearest-neighbor); image re-z-normalized."""
    lo, hi = params.n_transforms
    m = int(rng.integers(lo, hi + 1))
    picks = rng.choice(len(TRANSFORMS), size=min(m, len(TRANSFORMS)),
                       replace=False)
    image = p.image.astype(np.float64)
    vessel = p.vessel.astype(np.float64)
    label = p.label.copy()
    for t in picks:
        image, vessel, label = TRANSFORMS[t](image, vessel, label, rng, params)
    label = (np.asarray(label) > 0).astype(np.uint8)
    return Patch(znorm_array(np.ascontiguousarray(image)),
                 np.ascontiguousarray(vessel, dtype=np.float32),
                 np.ascontiguousarray(label),
                 bool(label.any()), p.subject_id, p.center)


class SamplerState:
    """Weighted sampler over a fixed patch pool; deterministic given seed."""

    def __init__(self, weights, seed: int = 0):
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.size == 0:
            raise ValueError("weights must be nonempty")
        if not (self.weights > 0).all():
            raise ValueError("weights must all be > 0")
        self._cum = np.cumsum(self.weights / self.weights.sum())
        self._cum[-1] = 1.0
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))

    @classmethod
    def for_patches(cls, patches, seed: int = 0):
        """Default weighting: positives at N_neg/N_pos, negatives at 1.0."""
        n_pos = sum(1 for p in patches if p.is_positive)
        n_neg = len(patches) - n_pos
        w_pos = (n_neg / n_pos) if (n_pos and n_neg) else 1.0
        return cls([w_pos if p.is_positive else 1.0 for p in patches] or [1.0],
                   seed)


def sampler_next(state: SamplerState) -> int:
    return int(np.searchsorted(state._cum, state.rng.random(), side="right"))


def select_inference_centers(vessel: Volume3D, n: int = 50, patch: int = 64,
                             nms_radius: float = 16.0) -> list:
    """Greedy pick of the n strongest vesselness local maxima, pairwise at
    least nms_radius apart (voxel units), cube centers clamped in-bounds,
    sorted by descending vesselness."""
    if n <= 0:
        return []
    data = vessel.data
    dims = vessel.dims
    if (data < 0).any():
        raise ValueError("vesselness map must be nonnegative")
    peak = (ndimage.maximum_filter(data, size=3, mode="constant") == data)
    peak &= data > 0
    coords = np.argwhere(peak)
    if len(coords) == 0:
        return []
    vals = data[tuple(coords.T)]
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], -vals))
    coords = coords[order]

    chosen = []
    r2 = float(nms_radius) ** 2
    for c in coords:
        start = _clamped_start(c, patch, dims)
        center = np.array([start[i] + patch // 2 for i in range(3)])
        if any(((center - np.array(s)) ** 2).sum() < r2 for s in chosen):
            continue
        chosen.append(tuple(int(v) for v in center))
        if len(chosen) >= n:
            break
    # clamping can move a center off its peak; order by the final value
    chosen.sort(key=lambda s: (-data[s], s))
    return chosen


_BLOB_MAGIC = b"VFPT"
_BLOB_VERSION = 1


def save_patch_blob(p: Patch, path) -> None:
    """One binary blob per patch: fixed header, then the three cubes raw
    little-endian (image f4, vessel f4, label u1)."""
    sid = p.subject_id.encode("utf-8")
    header = struct.pack("<4sHHiii iii H", _BLOB_MAGIC, _BLOB_VERSION,
                         1 if p.is_positive else 0,
                         *p.image.shape, *p.center, len(sid))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(sid)
        fh.write(np.ascontiguousarray(p.image, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(p.vessel, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(p.label, dtype="u1").tobytes())


def load_patch_blob(path) -> Patch:
    with open(path, "rb") as fh:
        raw = fh.read()
    head_size = struct.calcsize("<4sHHiii iii H")
    magic, version, pos, dx, dy, dz, cx, cy, cz, sid_len = \
        struct.unpack("<4sHHiii iii H", raw[:head_size])
    if magic != _BLOB_MAGIC:
        raise ValueError(f"not a patch blob: bad magic {magic!r}")
    if version != _BLOB_VERSION:
        raise ValueError(f"unsupported patch blob version {version}")
    off = head_size
    sid = raw[off:off + sid_len].decode("utf-8")
    off += sid_len
    count = dx * dy * dz
    img = np.frombuffer(raw[off:off + 4 * count], dtype="<f4").reshape(dx, dy, dz)
    off += 4 * count
    ves = np.frombuffer(raw[off:off + 4 * count], dtype="<f4").reshape(dx, dy, dz)
    off += 4 * count
    lab = np.frombuffer(raw[off:off + count], dtype="u1").reshape(dx, dy, dz)
    return Patch(img.copy(), ves.copy(), lab.copy(), bool(pos), sid, (cx, cy, cz))


def write_patch_cache(patches, out_dir) -> dict:
    """Blob per patch plus a manifest; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, p in enumerate(patches):
        fname = f"patch_{i:05d}.bin"
        save_patch_blob(p, os.path.join(out_dir, fname))
        entries.append({"file": fname, "subject_id": p.subject_id,
                        "is_positive": p.is_positive,
                        "center": list(p.center)})
    manifest = {"version": _BLOB_VERSION, "patches": entries}
    with open(os.path.join(out_dir, "cache_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
