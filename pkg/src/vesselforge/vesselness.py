"""Hessian-based vesselness prior.

Per voxel: Gaussian-derivative Hessian (separable correlation, reflect
boundary, kernels truncated at radius ceil(4*sigma/spacing), corrected
for polynomial exactness), analytic symmetric 3x3 eigenvalues, then a
tube-selective measure on the eigenvalues. The sato-style asymmetric
measure is the default; the classic frangi form is selectable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume3D

HESSIAN_CHANNELS = ("xx", "yy", "zz", "xy", "xz", "yz")
_CHANNEL_ORDERS = {
    "xx": (2, 0, 0), "yy": (0, 2, 0), "zz": (0, 0, 2),
    "xy": (1, 1, 0), "xz": (1, 0, 1), "yz": (0, 1, 1),
}


@dataclass
class VesselnessParams:
    sigma: float = 1.0
    alpha1: float = 0.5
    alpha2: float = 2.0
    measure: str = "sato"
    frangi_a: float = 0.5
    frangi_b: float = 0.5
    frangi_c: float = 500.0
    normalize: bool = True
    sigmas: tuple | None = None  # optional multi-scale max-over-sigma

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("alpha1 and alpha2 must be > 0")
        if self.alpha1 > self.alpha2:
            raise ValueError(
                f"alpha1 ({self.alpha1}) must not exceed alpha2 ({self.alpha2})")
        if self.measure not in ("sato", "frangi"):
            raise ValueError(f"measure must be sato or frangi, got {self.measure!r}")
        if min(self.frangi_a, self.frangi_b, self.frangi_c) <= 0:
            raise ValueError("frangi constants must be > 0")
        if self.sigmas is not None:
            self.sigmas = tuple(float(s) for s in self.sigmas)
            if not self.sigmas or any(s <= 0 for s in self.sigmas):
                raise ValueError("sigmas must be a nonempty tuple of positives")


def _gauss_kernels(sigma_mm, spacing):
    """(smooth, d1, d2) correlation kernels along one axis, physical units.

    Corrected so that discretely: constants map to themselves under smooth,
    f=x maps to 1 under d1, and f=x^2 maps to exactly 2 under d2.
    """
    radius = max(1, math.ceil(4.0 * sigma_mm / spacing))
    x = np.arange(-radius, radius + 1, dtype=np.float64) * spacing
    g0 = np.exp(-(x ** 2) / (2.0 * sigma_mm ** 2))
    g0 /= g0.sum()

    g1 = x * g0 / sigma_mm ** 2
    g1 /= (g1 * x).sum()

    g2 = (x ** 2 - sigma_mm ** 2) / sigma_mm ** 4 * g0
    g2 -= g0 * g2.sum()          # zero mean, Gaussian-weighted
    g2 *= 2.0 / (g2 * x ** 2).sum()
    return g0, g1, g2


def gaussian_hessian(v: Volume3D, sigma: float) -> np.ndarray:
    """Six-channel Hessian field (xx, yy, zz, xy, xz, yz), scale-normalized
    by sigma^2. Returns float64 [6, X, Y, Z] on the input grid."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    kernels = [_gauss_kernels(sigma, sp) for sp in v.spacing]
    src = v.data.astype(np.float64)
    out = np.empty((6,) + v.dims, dtype=np.float64)
    for ch_idx, name in enumerate(HESSIAN_CHANNELS):
        orders = _CHANNEL_ORDERS[name]
        work = src
        for axis in range(3):
            work = ndimage.correlate1d(work, kernels[axis][orders[axis]],
                                       axis=axis, mode="reflect")
        out[ch_idx] = work
    out *= sigma ** 2
    return out


def eigvals_sym3(h) -> np.ndarray:
    """Eigenvalues of symmetric 3x3 matrices, sorted descending by signed
    value. Accepts [..., 6] channel form (xx, yy, zz, xy, xz, yz) or
    [..., 3, 3] matrices. Analytic trigonometric solver with a LAPACK
    fallback on near-degenerate discriminants."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] == 6:
        a, b, c = h[..., 0], h[..., 1], h[..., 2]
        d, e, f = h[..., 3], h[..., 4], h[..., 5]
    elif h.shape[-2:] == (3, 3):
        a, b, c = h[..., 0, 0], h[..., 1, 1], h[..., 2, 2]
        d, e, f = h[..., 0, 1], h[..., 0, 2], h[..., 1, 2]
    else:
        raise ValueError(f"expected [..., 6] or [..., 3, 3], got {h.shape}")

    q = (a + b + c) / 3.0
    p1 = d ** 2 + e ** 2 + f ** 2
    p2 = (a - q) ** 2 + (b - q) ** 2 + (c - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)

    scale = np.maximum.reduce([np.abs(a), np.abs(b), np.abs(c),
                               np.abs(d), np.abs(e), np.abs(f)])
    isotropic = p <= 1e-14 * np.maximum(scale, 1e-300)

    p_safe = np.where(isotropic, 1.0, p)
    ba = (a - q) / p_safe
    bb = (b - q) / p_safe
    bc = (c - q) / p_safe
    bd = d / p_safe
    be = e / p_safe
    bf = f / p_safe
    detb = (ba * (bb * bc - bf ** 2)
            - bd * (bd * bc - bf * be)
            + be * (bd * bf - bb * be))
    r = np.clip(detb / 2.0, -1.0, 1.0)

    phi = np.arccos(r) / 3.0
    lam1 = q + 2.0 * p * np.cos(phi)
    lam3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    lam2 = 3.0 * q - lam1 - lam3
    lam = np.stack([lam1, lam2, lam3], axis=-1)
    lam[isotropic] = q[isotropic][..., None]

    # near-degenerate discriminant: hand off to LAPACK for full precision
    risky = (1.0 - np.abs(r) < 1e-4) & ~isotropic
    if np.any(risky):
        mats = np.empty(risky.shape + (3, 3), dtype=np.float64)
        mats[..., 0, 0], mats[..., 1, 1], mats[..., 2, 2] = a, b, c
        mats[..., 0, 1] = mats[..., 1, 0] = d
        mats[..., 0, 2] = mats[..., 2, 0] = e
        mats[..., 1, 2] = mats[..., 2, 1] = f
        lam[risky] = np.linalg.eigvalsh(mats[risky])[..., ::-1]
    return lam


def _sato(lam, alpha1, alpha2):
    lam1, lam2, lam3 = lam[..., 0], lam[..., 1], lam[..., 2]
    lc = np.sqrt(np.maximum(lam2 * lam3, 0.0))
    valid = (lam2 < 0) & (lam3 < 0) & (lc >= 1e-12)
    lc_safe = np.where(valid, lc, 1.0)
    alpha = np.where(lam1 <= 0, alpha1, alpha2)
    v = lc * np.exp(-(lam1 ** 2) / (2.0 * (alpha * lc_safe) ** 2))
    return np.where(valid, v, 0.0)


def _frangi(lam, fa, fb, fc):
    order = np.argsort(np.abs(lam), axis=-1)
    m = np.take_along_axis(lam, order, axis=-1)
    l1, l2, l3 = m[..., 0], m[..., 1], m[..., 2]
    valid = (l2 <= 0) & (l3 <= 0) & (np.abs(l3) > 1e-300)
    a2 = np.abs(l2)
    a3 = np.where(valid, np.abs(l3), 1.0)
    ra = a2 / a3
    rb = np.abs(l1) / np.sqrt(np.maximum(a2 * a3, 1e-300))
    s2 = lam[..., 0] ** 2 + lam[..., 1] ** 2 + lam[..., 2] ** 2
    v = ((1.0 - np.exp(-(ra ** 2) / (2.0 * fa ** 2)))
         * np.exp(-(rb ** 2) / (2.0 * fb ** 2))
         * (1.0 - np.exp(-s2 / (2.0 * fc ** 2))))
    return np.where(valid, v, 0.0)


def _single_scale(v, sigma, p):
    hess = gaussian_hessian(v, sigma)
    lam = eigvals_sym3(np.moveaxis(hess, 0, -1))
    if p.measure == "sato":
        return _sato(lam, p.alpha1, p.alpha2)
    return _frangi(lam, p.frangi_a, p.frangi_b, p.frangi_c)


def vesselness_map(v: Volume3D, p: VesselnessParams) -> Volume3D:
    """Vesselness in [0, max] per voxel ([0, 1] when p.normalize)."""
    sigmas = p.sigmas if p.sigmas else (p.sigma,)
    vmap = _single_scale(v, sigmas[0], p)
    for s in sigmas[1:]:
        vmap = np.maximum(vmap, _single_scale(v, s, p))
    if p.normalize:
        peak = vmap.max()
        if peak > 1e-12:
            vmap = vmap / peak
    return Volume3D(vmap.astype(np.float32), v.spacing, v.origin)
