"""Volume containers and voxel-grid processing.

Arrays are C-contiguous and indexed [x, y, z]; spacing is mm per axis.
Binary morphology (components, small-component removal, hole filling)
operates on LabelVolume masks or plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import GridError


def _as_triple(t):
    out = tuple(float(v) for v in t)
    if len(out) != 3:
        raise ValueError(f"expected 3 values, got {len(out)}")
    return out


@dataclass
class Volume3D:
    """Scalar volume: float32 voxels on a regular grid."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"Volume3D needs 3 dims, got {self.data.ndim}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Volume3D contains non-finite values")
        self.spacing = _as_triple(self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"non-positive spacing {self.spacing}")
        self.origin = _as_triple(self.origin)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelVolume:
    """Integer label volume: uint8 masks or uint32 component ids."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.dtype not in (np.uint8, np.uint32):
            raise ValueError(
                f"LabelVolume must be uint8 or uint32, got {self.data.dtype}")
        if self.data.ndim != 3:
            raise ValueError(f"LabelVolume needs 3 dims, got {self.data.ndim}")
        self.spacing = _as_triple(self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"non-positive spacing {self.spacing}")
        self.origin = _as_triple(self.origin)

    @property
    def dims(self):
        return self.data.shape

    def is_binary(self):
        return bool(self.data.max(initial=0) <= 1)


def same_grid(a, b, tol=1e-5):
    return a.dims == b.dims and np.allclose(a.spacing, b.spacing, atol=tol)


def require_same_grid(a, b):
    if not same_grid(a, b):
        raise GridError(
            f"grid mismatch: {a.dims}@{a.spacing} vs {b.dims}@{b.spacing}")


def znorm_array(arr):
    """(arr - mean) / std in float64 stats; constant arrays map to zeros."""
    a = np.asarray(arr, dtype=np.float64)
    mean = a.mean()
    std = a.std()
    if std < 1e-8:
        return np.zeros(a.shape, dtype=np.float32)
    return ((a - mean) / std).astype(np.float32)


def z_normalize(v: Volume3D) -> Volume3D:
    return Volume3D(znorm_array(v.data), v.spacing, v.origin)


def resample_trilinear(v: Volume3D, target_spacing) -> Volume3D:
    """Resample onto target spacing: output dims round(dims*spacing/target)
    clamped to >= 1, trilinear interpolation, clamp-to-edge sampling."""
    ts = _as_triple(target_spacing)
    if any(t <= 0 for t in ts):
        raise ValueError(f"non-positive target spacing {ts}")
    dims = np.asarray(v.dims)
    sp = np.asarray(v.spacing)
    out_dims = np.maximum(1, np.round(dims * sp / np.asarray(ts)).astype(int))

    idx0, idx1, frac = [], [], []
    for ax in range(3):
        coord = np.clip(np.arange(out_dims[ax]) * ts[ax] / sp[ax], 0, dims[ax] - 1)
        i0 = np.floor(coord).astype(np.intp)
        i1 = np.minimum(i0 + 1, dims[ax] - 1)
        idx0.append(i0)
        idx1.append(i1)
        frac.append(coord - i0)

    src = v.data.astype(np.float64)
    out = np.zeros(tuple(out_dims), dtype=np.float64)
    for cx in (0, 1):
        wx = (frac[0] if cx else 1.0 - frac[0])[:, None, None]
        ix = idx1[0] if cx else idx0[0]
        for cy in (0, 1):
            wy = (frac[1] if cy else 1.0 - frac[1])[None, :, None]
            iy = idx1[1] if cy else idx0[1]
            for cz in (0, 1):
                wz = (frac[2] if cz else 1.0 - frac[2])[None, None, :]
                iz = idx1[2] if cz else idx0[2]
                out += wx * wy * wz * src[np.ix_(ix, iy, iz)]
    return Volume3D(out.astype(np.float32), ts, v.origin)


_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def _mask_of(m):
    data = m.data if isinstance(m, LabelVolume) else np.asarray(m)
    return data != 0


def _wrap_like(arr, template):
    if isinstance(template, LabelVolume):
        return LabelVolume(arr, template.spacing, template.origin)
    return arr


def connected_components(mask, connectivity=26):
    """Label foreground components with dense ids 1..n (scan order).

    Returns (labels, sizes): labels uint32 shaped like the input, sizes[i]
    is the voxel count of component id i+1.
    """
    if connectivity not in _STRUCTS:
        raise ValueError(f"connectivity must be 6, 18, or 26, got {connectivity}")
    m = _mask_of(mask)
    labels, n = ndimage.label(m, structure=_STRUCTS[connectivity])
    labels = labels.astype(np.uint32)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return _wrap_like(labels, mask), sizes


def remove_small_components(mask, min_voxels, connectivity=26):
    """Drop foreground components smaller than min_voxels voxels."""
    labels, sizes = connected_components(mask, connectivity)
    lab = labels.data if isinstance(labels, LabelVolume) else labels
    keep = np.concatenate(([False], sizes >= min_voxels))
    out = keep[lab].astype(np.uint8)
    return _wrap_like(out, mask)


def fill_holes(mask):
    """Fill background cavities not 6-connected to the volume border."""
    m = _mask_of(mask)
    bg_labels, n = ndimage.label(~m, structure=_STRUCTS[6])
    border_ids = np.unique(np.concatenate([
        bg_labels[0].ravel(), bg_labels[-1].ravel(),
        bg_labels[:, 0].ravel(), bg_labels[:, -1].ravel(),
        bg_labels[:, :, 0].ravel(), bg_labels[:, :, -1].ravel(),
    ]))
    border_ids = border_ids[border_ids > 0]
    outside = np.isin(bg_labels, border_ids) & ~m
    out = (~outside).astype(np.uint8)
    return _wrap_like(out, mask)
