"""Synthetic head phantoms with spherical lesions.

The phantom is mirror-symmetric about the mid-sagittal plane (axis 0) so that
symmetric augmentation without registration is exact on it.  Lesions are
hyperintense spheres confined to one hemisphere.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Mask, MultiModalCase, Volume, write_manifest

# (semi-axis fraction of the grid) per axis
HEAD_AXES = (0.35, 0.45, 0.42)
VENTRICLE_AXES = (0.07, 0.16, 0.12)
VENTRICLE_OFFSET = (0.09, -0.04, 0.0)


@dataclass(frozen=True)
class SyntheticSpec:
    shape: tuple[int, int, int] = (64, 64, 32)
    n_modalities: int = 2
    n_cases: int = 8
    lesion_count: tuple[int, int] = (1, 2)
    lesion_radius: tuple[float, float] = (4.0, 6.0)
    contrast: float = 0.6
    noise: float = 0.08
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"shape must be 3D with every side >= 8, got {self.shape}")
        if self.n_modalities < 1 or self.n_cases < 1:
            raise ValueError("n_modalities and n_cases must be >= 1")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid lesion_count {self.lesion_count}")
        rlo, rhi = self.lesion_radius
        if rlo <= 0 or rhi < rlo:
            raise ValueError(f"invalid lesion_radius {self.lesion_radius}")
        if self.noise < 0 or self.contrast <= self.noise:
            raise ValueError("contrast must exceed the noise level")
        # the largest lesion must fit in a hemisphere of the smallest head axis
        semi = min(f * n for f, n in zip(HEAD_AXES, self.shape))
        if 2 * rhi + 2 >= semi * 2 or rhi + 1 >= semi:
            raise ValueError(f"lesion radius {rhi} does not fit inside the phantom")


def _coords(shape, transform=None, spacing=(1.0, 1.0, 1.0)):
    """Voxel-index coordinates relative to the grid centre.

    With a transform, returns the coordinates of the un-moved phantom that
    land on each voxel, so the rendered phantom is moved by ``transform``.
    """
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    if transform is not None:
        pts = transform.inverse_map(pts * np.asarray(spacing)) / np.asarray(spacing)
    center = (np.asarray(shape) - 1) / 2.0
    rel = pts - center
    return [rel[:, i].reshape(shape) for i in range(3)]


def _ellipsoid(rel, axes, offset=(0.0, 0.0, 0.0)):
    return sum(((r - o) / a) ** 2 for r, a, o in zip(rel, axes, offset)) <= 1.0


def _ventricle_masks(rel, shape):
    axes = [f * n for f, n in zip(VENTRICLE_AXES, shape)]
    off = [f * n for f, n in zip(VENTRICLE_OFFSET, shape)]
    left = _ellipsoid(rel, axes, (-off[0], off[1], off[2]))
    right = _ellipsoid(rel, axes, (off[0], off[1], off[2]))
    return left | right


def tissue_intensity(modality: int) -> tuple[float, float]:
    """(parenchyma, ventricle) base intensity of a modality."""
    if modality % 2 == 0:
        return 0.6 + 0.1 * modality, 0.2
    return 0.5 + 0.1 * modality, 1.3


def head_phantom(shape=(64, 64, 32), modality: int = 0, transform=None,
                 spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Noise-free lesion-free phantom intensities for one modality.

    ``transform`` (a RigidTransform) moves the phantom content analytically,
    which is how registration tests build moving images with a known motion.
    """
    rel = _coords(shape, transform, spacing)
    head_axes = [f * n for f, n in zip(HEAD_AXES, shape)]
    head = _ellipsoid(rel, head_axes)
    parenchyma, ventricle = tissue_intensity(modality)
    # smooth left-right symmetric variation so the interior carries structure
    shade = 1.0 + 0.15 * np.cos(np.pi * rel[1] / head_axes[1]) + 0.1 * (rel[2] / head_axes[2])
    img = np.where(head, parenchyma * shade, 0.0)
    img = np.where(head & _ventricle_masks(rel, shape), ventricle, img)
    return img.astype(np.float32)


def sphere_mask(shape, center, radius) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return d2 <= radius**2


def _fibonacci_sphere(n: int = 256) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


_SHELL = _fibonacci_sphere()


def _inside(points: np.ndarray, axes, offset=(0.0, 0.0, 0.0)) -> np.ndarray:
    return np.sum(((points - np.asarray(offset)) / np.asarray(axes)) ** 2, axis=1) <= 1.0


def _place_lesions(rng, spec: SyntheticSpec, head_axes, max_tries: int = 1000):
    n = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    side = -1 if rng.random() < 0.5 else 1
    center = (np.asarray(spec.shape) - 1) / 2.0
    vent_axes = np.array([f * s for f, s in zip(VENTRICLE_AXES, spec.shape)])
    vent_off = np.array([f * s for f, s in zip(VENTRICLE_OFFSET, spec.shape)])
    vent_c = np.array([side * vent_off[0], vent_off[1], vent_off[2]])
    lesions: list[tuple[np.ndarray, float]] = []
    for _ in range(n):
        for _attempt in range(max_tries):
            r = float(rng.uniform(*spec.lesion_radius))
            p = rng.uniform(-1.0, 1.0, 3) * head_axes
            p[0] = side * abs(p[0])
            # one voxel margin to the midline, the head surface and the ventricles
            if abs(p[0]) < r + 1.0:
                continue
            shell = p + (r + 1.0) * _SHELL
            if not _inside(shell, head_axes).all():
                continue
            if _inside(np.vstack([shell, p]), vent_axes, vent_c).any():
                continue
            if any(np.linalg.norm(p - q) < r + rq + 1.0 for q, rq in lesions):
                continue
            lesions.append((p, r))
            break
        else:
            raise RuntimeError(f"could not place lesion {len(lesions) + 1} of {n} after {max_tries} tries")
    return [(tuple(float(v) for v in p + center), r) for p, r in lesions]


def generate_case(spec: SyntheticSpec, index: int) -> MultiModalCase:
    rng = np.random.default_rng([spec.seed, index])
    head_axes = np.array([f * n for f, n in zip(HEAD_AXES, spec.shape)])
    lesions = _place_lesions(rng, spec, head_axes)
    gold = np.zeros(spec.shape, dtype=bool)
    for c, r in lesions:
        gold |= sphere_mask(spec.shape, c, r)
    head = head_phantom(spec.shape, 0) != 0
    vols = []
    for m in range(spec.n_modalities):
        img = head_phantom(spec.shape, m).astype(np.float64)
        # modality 0 carries the full contrast, the others a weaker variant
        gain = spec.contrast if m == 0 else spec.contrast * (0.5 if m % 2 else -0.5)
        img = np.where(gold, img * (1.0 + gain) + 0.0, img)
        if spec.noise > 0:
            img = img + head * rng.normal(0.0, spec.noise, size=spec.shape)
        vols.append(Volume(img.astype(np.float32), spec.spacing))
    names = tuple(f"mod{m}" for m in range(spec.n_modalities))
    meta = {"lesions": [{"center": list(c), "radius": r} for c, r in lesions]}
    return MultiModalCase(f"case{index:03d}", tuple(vols), Mask(gold, spec.spacing), names, meta)


def generate_synthetic_dataset(spec: SyntheticSpec) -> list[MultiModalCase]:
    return [generate_case(spec, i) for i in range(spec.n_cases)]


def write_synthetic_dataset(spec: SyntheticSpec, out_dir, ext: str = ".nii.gz") -> Path:
    """Generate the dataset under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, generate_synthetic_dataset(spec), ext=ext)
    return manifest
