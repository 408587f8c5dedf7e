"""Synthetic cerebrovascular phantoms.

Each phantom is a set of smoothed random tubes (vessels) crossing the
volume, with optional spherical bulges (aneurysms) seated on vessel
walls. The precise mask marks exact aneurysm voxels; the weak mask marks
enlarged spheres (1.5x radius, same centers) that fully enclose them.
Everything is deterministic given the spec seed.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import CapacityError
from .nifti import write_nifti
from .volume import LabelVolume, Volume3D

WEAK_RADIUS_FACTOR = 1.5


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_vessels: int = 3
    vessel_radius_range: tuple = (1.5, 3.0)
    n_aneurysms: int = 1
    aneurysm_radius_range: tuple = (2.0, 4.0)
    intensity_vessel: float = 1.0
    intensity_background: float = 0.0
    noise_std: float = 0.05
    psf_sigma: float = 0.6
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.vessel_radius_range = tuple(float(r) for r in self.vessel_radius_range)
        self.aneurysm_radius_range = tuple(float(r) for r in self.aneurysm_radius_range)
        if len(self.dims) != 3 or any(d < 32 for d in self.dims):
            raise ValueError(f"dims must be 3 integers >= 32, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.n_vessels < 1:
            raise ValueError("n_vessels must be >= 1")
        if self.n_aneurysms < 0:
            raise ValueError("n_aneurysms must be >= 0")
        for name, rng_ in (("vessel_radius_range", self.vessel_radius_range),
                           ("aneurysm_radius_range", self.aneurysm_radius_range)):
            if len(rng_) != 2 or rng_[0] <= 0 or rng_[0] > rng_[1]:
                raise ValueError(f"{name} must be ordered positives, got {rng_}")
        if self.aneurysm_radius_range[0] < 1.0:
            # radius >= 1 voxel guarantees every lesion spans >= 5 voxels
            raise ValueError("aneurysm radii below 1.0 voxel are not supported")
        if self.intensity_vessel <= self.intensity_background:
            raise ValueError("intensity_vessel must exceed intensity_background")
        if self.noise_std < 0 or self.psf_sigma < 0:
            raise ValueError("noise_std and psf_sigma must be >= 0")


@dataclass
class AneurysmSite:
    center: tuple          # voxel coordinates, fractional
    radius: float          # voxels
    parent_vessel: int

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.radius = float(self.radius)


def _catmull_rom(ctrl: np.ndarray, step: float = 0.25) -> np.ndarray:
    """Uniform Catmull-Rom samples through all control points."""
    pts = np.vstack([ctrl[:1], ctrl, ctrl[-1:]])
    out = []
    for i in range(1, len(pts) - 2):
        p0, p1, p2, p3 = pts[i - 1], pts[i], pts[i + 1], pts[i + 2]
        n = max(2, int(math.ceil(np.linalg.norm(p2 - p1) / step)))
        t = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
        out.append(0.5 * ((2.0 * p1)
                          + (-p0 + p2) * t
                          + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t ** 2
                          + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t ** 3))
    out.append(ctrl[-1:])
    return np.vstack(out)


def _stamp_sphere(mask: np.ndarray, center, radius: float) -> int:
    """Mark voxels whose centers lie within radius; returns voxels marked."""
    dims = mask.shape
    lo = [max(0, int(math.floor(center[i] - radius))) for i in range(3)]
    hi = [min(dims[i] - 1, int(math.ceil(center[i] + radius))) for i in range(3)]
    if any(lo[i] > hi[i] for i in range(3)):
        return 0
    gx, gy, gz = np.ogrid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    inside = ((gx - center[0]) ** 2 + (gy - center[1]) ** 2
              + (gz - center[2]) ** 2) <= radius ** 2
    region = mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    count = int(np.count_nonzero(inside & ~region.astype(bool)))
    region[inside] = 1
    return count


def _sphere_voxels(center, radius: float, dims) -> int:
    lo = [max(0, int(math.floor(center[i] - radius))) for i in range(3)]
    hi = [min(dims[i] - 1, int(math.ceil(center[i] + radius))) for i in range(3)]
    if any(lo[i] > hi[i] for i in range(3)):
        return 0
    gx, gy, gz = np.ogrid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    inside = ((gx - center[0]) ** 2 + (gy - center[1]) ** 2
              + (gz - center[2]) ** 2) <= radius ** 2
    return int(np.count_nonzero(inside))


def _make_vessel(rng: np.random.Generator, dims) -> np.ndarray:
    """Control points of one vessel polyline crossing the volume."""
    axis = int(rng.integers(3))
    span_lo, span_hi = 2.0, dims[axis] - 3.0
    n_mid = 3
    along = np.linspace(span_lo, span_hi, n_mid + 2)
    along[1:-1] += rng.uniform(-0.05, 0.05, size=n_mid) * (span_hi - span_lo)
    ctrl = np.zeros((n_mid + 2, 3))
    cross = [a for a in range(3) if a != axis]
    base = [rng.uniform(0.3 * dims[a], 0.7 * dims[a]) for a in cross]
    for j in range(n_mid + 2):
        ctrl[j, axis] = along[j]
        for b, a in zip(base, cross):
            ctrl[j, a] = np.clip(b + rng.uniform(-0.12, 0.12) * dims[a],
                                 2.0, dims[a] - 3.0)
    return ctrl


def generate_phantom(spec: PhantomSpec):
    """-> (image: Volume3D, precise_mask, weak_mask: LabelVolume, sites)."""
    dims = spec.dims
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & (2 ** 63 - 1), 1]))

    structures = np.zeros(dims, dtype=np.uint8)
    vessels = []  # (samples [K,3], tangents [K,3], radius)
    for _ in range(spec.n_vessels):
        radius = float(rng.uniform(*spec.vessel_radius_range))
        samples = _catmull_rom(_make_vessel(rng, dims))
        tangents = np.gradient(samples, axis=0)
        norms = np.linalg.norm(tangents, axis=1, keepdims=True)
        tangents = tangents / np.maximum(norms, 1e-12)
        for p in samples:
            _stamp_sphere(structures, p, radius)
        vessels.append((samples, tangents, radius))

    sites = []
    precise = np.zeros(dims, dtype=np.uint8)
    weak = np.zeros(dims, dtype=np.uint8)
    for k in range(spec.n_aneurysms):
        placed = False
        for _ in range(200):
            vid = int(rng.integers(len(vessels)))
            samples, tangents, v_radius = vessels[vid]
            idx = int(rng.integers(len(samples) // 10, len(samples) * 9 // 10))
            r_a = float(rng.uniform(*spec.aneurysm_radius_range))
            g = rng.standard_normal(3)
            t_hat = tangents[idx]
            u = g - (g @ t_hat) * t_hat
            nu = np.linalg.norm(u)
            if nu < 1e-6:
                continue
            u /= nu
            center = samples[idx] + v_radius * u
            r_weak = WEAK_RADIUS_FACTOR * r_a
            if any(center[i] - r_weak < 1.0 or center[i] + r_weak > dims[i] - 2.0
                   for i in range(3)):
                continue
            if any(np.linalg.norm(center - np.array(s.center))
                   < WEAK_RADIUS_FACTOR * (r_a + s.radius) + 2.0 for s in sites):
                continue
            if _sphere_voxels(center, r_a, dims) < 5:
                continue
            sites.append(AneurysmSite(tuple(center), r_a, vid))
            _stamp_sphere(structures, center, r_a)
            _stamp_sphere(precise, center, r_a)
            _stamp_sphere(weak, center, r_weak)
            placed = True
            break
        if not placed:
            raise CapacityError(
                f"could not place aneurysm {k + 1}/{spec.n_aneurysms} after 200 "
                f"attempts; volume {dims} too small for the requested geometry")

    img = np.full(dims, spec.intensity_background, dtype=np.float64)
    img[structures > 0] = spec.intensity_vessel
    if spec.psf_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.psf_sigma, mode="nearest")
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=dims)

    image = Volume3D(img.astype(np.float32), spec.spacing)
    return (image,
            LabelVolume(precise, spec.spacing),
            LabelVolume(weak, spec.spacing),
            sites)


def _subject_seed(root_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([root_seed & (2 ** 63 - 1), 1, index])
    return int(ss.generate_state(1, np.uint64)[0] & (2 ** 63 - 1))


def make_dataset(n_subjects: int, spec_template: PhantomSpec, out_dir,
                 control_fraction: float = 0.2,
                 test_fraction: float = 0.2) -> dict:
    """Generate a cohort, write per-subject .nii files, return the manifest.

    Controls (zero aneurysms) are a seeded choice of round(n * control_fraction)
    subjects; diseased subjects draw 1..spec_template.n_aneurysms lesions.
    Splits: round(n * test_fraction) test subjects, then 90/10 train/val
    among the rest, all from one seeded shuffle.
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    if not (0.0 <= control_fraction <= 1.0 and 0.0 <= test_fraction < 1.0):
        raise ValueError("fractions must lie in [0, 1]")
    os.makedirs(out_dir, exist_ok=True)
    ds_rng = np.random.default_rng(
        np.random.SeedSequence([spec_template.seed & (2 ** 63 - 1), 0]))

    n_controls = int(round(n_subjects * control_fraction))
    control_ids = set(ds_rng.choice(n_subjects, size=n_controls, replace=False).tolist()) \
        if n_controls else set()
    max_an = max(spec_template.n_aneurysms, 0)
    counts = [0 if (i in control_ids or max_an == 0)
              else int(ds_rng.integers(1, max_an + 1))
              for i in range(n_subjects)]

    perm = ds_rng.permutation(n_subjects)
    n_test = int(round(n_subjects * test_fraction))
    test_set = set(perm[:n_test].tolist())
    rest = [int(i) for i in perm[n_test:]]
    n_val = int(round(0.1 * len(rest)))
    val_set = set(rest[:n_val])

    subjects = []
    for i in range(n_subjects):
        sid = f"subject_{i:03d}"
        spec = replace(spec_template, seed=_subject_seed(spec_template.seed, i),
                       n_aneurysms=counts[i])
        image, precise, weak, sites = generate_phantom(spec)
        files = {kind: f"{sid}_{kind}.nii" for kind in ("image", "precise", "weak")}
        write_nifti(image, os.path.join(out_dir, files["image"]))
        write_nifti(precise, os.path.join(out_dir, files["precise"]))
        write_nifti(weak, os.path.join(out_dir, files["weak"]))
        split = "test" if i in test_set else ("val" if i in val_set else "train")
        subjects.append({
            "id": sid,
            "files": files,
            "split": split,
            "n_aneurysms": len(sites),
            "sites": [{"center": list(s.center), "radius": s.radius,
                       "parent_vessel": s.parent_vessel} for s in sites],
        })

    manifest = {
        "version": 1,
        "seed": spec_template.seed,
        "dims": list(spec_template.dims),
        "spacing": list(spec_template.spacing),
        "n_subjects": n_subjects,
        "subjects": subjects,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    manifest["_dir"] = os.path.abspath(out_dir)
    return manifest


def load_manifest(path) -> dict:
    """Read a dataset manifest; attaches the dataset directory as '_dir'."""
    with open(path) as fh:
        manifest = json.load(fh)
    for key in ("version", "subjects"):
        if key not in manifest:
            raise ValueError(f"manifest missing required key {key!r}")
    manifest["_dir"] = os.path.dirname(os.path.abspath(path))
    return manifest
