"""Class-balanced training patch sampling.

Half of each case's patches are centred on healthy tissue at regular spatial
steps, half on lesion voxels with a random offset so that the surrounding
tissue is represented too.  Lesion voxels are reused with different offsets
and augmentations when a case has fewer lesion voxels than needed.

A patch window of even size ``p`` around centre ``c`` covers
``[c - p/2, c + p/2)`` on every axis.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import MultiModalCase, foreground_mask

AUGMENTATIONS = (
    "none",
    "sagittal-reflect",
    "rot90",
    "rot180",
    "rot270",
    "sagittal-reflect-combined",
)
HEALTHY, LESION = 0, 1


class SamplingError(Exception):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    patch_size: tuple[int, int, int] = (24, 24, 16)
    goal_per_case: int = 10000
    lesion_fraction: float = 0.5
    max_offset: tuple[int, int, int] | None = None
    seed: int = 0
    validation_fraction: float = 0.2
    num_classes: int = 2

    def __post_init__(self):
        ps = tuple(int(p) for p in self.patch_size)
        if len(ps) != 3 or any(p < 2 or p % 2 for p in ps):
            raise ValueError(f"patch_size components must be even and >= 2, got {ps}")
        object.__setattr__(self, "patch_size", ps)
        if self.goal_per_case < 1:
            raise ValueError("goal_per_case must be >= 1")
        if not 0 < self.lesion_fraction < 1:
            raise ValueError("lesion_fraction must lie in (0, 1)")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        off = self.max_offset
        off = tuple(p // 2 for p in ps) if off is None else tuple(int(o) for o in off)
        if len(off) != 3 or any(o < 0 or o > p // 2 for o, p in zip(off, ps)):
            raise ValueError(f"max_offset must lie in [0, patch_size/2], got {off}")
        object.__setattr__(self, "max_offset", off)

    @property
    def half(self) -> np.ndarray:
        return np.asarray(self.patch_size) // 2


@dataclass(frozen=True)
class PatchSpec:
    case_id: str
    center: tuple[int, int, int]
    class_label: int
    augmentation: str = "none"
    source_voxel: tuple[int, int, int] | None = None


@dataclass
class PatchSet:
    """Training/validation arrays plus per-patch provenance.

    ``*_x`` are float32 ``(n, I, X, Y, Z)`` stacks, ``*_y`` uint8 one-hot
    ``(n, N, X, Y, Z)`` targets.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    train_specs: list[PatchSpec] = field(default_factory=list)
    val_specs: list[PatchSpec] = field(default_factory=list)

    @property
    def training(self):
        return list(zip(self.train_x, self.train_y))

    @property
    def validation(self):
        return list(zip(self.val_x, self.val_y))

    @property
    def provenance(self) -> list[PatchSpec]:
        return self.train_specs + self.val_specs


def case_rng(seed: int, case_id: str) -> np.random.Generator:
    """Independent stream per case so sampling order never matters."""
    return np.random.default_rng([int(seed), zlib.crc32(case_id.encode())])


def window_bounds(center, patch_size) -> tuple[np.ndarray, np.ndarray]:
    half = np.asarray(patch_size) // 2
    lo = np.asarray(center) - half
    return lo, lo + np.asarray(patch_size)


def window_in_bounds(center, patch_size, shape) -> bool:
    lo, hi = window_bounds(center, patch_size)
    return bool(np.all(lo >= 0) and np.all(hi <= np.asarray(shape)))


def _valid_center_region(shape, patch_size) -> np.ndarray:
    half = np.asarray(patch_size) // 2
    region = np.zeros(shape, dtype=bool)
    sl = tuple(slice(h, n - h + 1) for h, n in zip(half, shape))
    region[sl] = True
    return region


def _regular_grid_samples(support: np.ndarray, needed: int) -> np.ndarray:
    """Raster-ordered voxels of ``support`` on a regular lattice."""
    coords = np.argwhere(support)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    extent = hi - lo + 1
    step = np.maximum(1, np.floor(extent / np.cbrt(needed)).astype(int))
    while True:
        sub = support[lo[0]:hi[0] + 1:step[0], lo[1]:hi[1] + 1:step[1], lo[2]:hi[2] + 1:step[2]]
        picked = np.argwhere(sub) * step + lo
        if len(picked) >= needed or step.max() == 1:
            break
        step[np.argmax(step)] -= 1
    if len(picked) > needed:
        picked = picked[np.linspace(0, len(picked) - 1, needed).round().astype(int)]
    elif len(picked) < needed:
        picked = picked[np.arange(needed) % len(picked)]
    return picked


def sample_centers(case: MultiModalCase, config: SamplerConfig, rng: np.random.Generator) -> list[PatchSpec]:
    """Balanced patch centres for one case (healthy first, then lesion)."""
    if case.gold is None or not case.gold.data.any():
        raise SamplingError(f"case {case.case_id!r}: gold mask absent or empty")
    shape = np.asarray(case.shape)
    ps = np.asarray(config.patch_size)
    if np.any(shape < ps):
        raise SamplingError(f"case {case.case_id!r}: volume {tuple(shape)} smaller than patch {tuple(ps)}")
    n_lesion = int(round(config.lesion_fraction * config.goal_per_case))
    n_healthy = config.goal_per_case - n_lesion
    half = config.half
    lo_c, hi_c = half, shape - half

    specs: list[PatchSpec] = []
    if n_healthy:
        healthy = foreground_mask(case).data & ~case.gold.data & _valid_center_region(case.shape, ps)
        if not healthy.any():
            raise SamplingError(f"case {case.case_id!r}: no healthy voxel admits an in-bounds patch")
        for c in _regular_grid_samples(healthy, n_healthy):
            specs.append(PatchSpec(case.case_id, tuple(int(v) for v in c), HEALTHY))

    lesion_voxels = np.argwhere(case.gold.data)
    n_vox = len(lesion_voxels)
    if n_vox >= n_lesion:
        chosen = np.sort(rng.choice(n_vox, size=n_lesion, replace=False))
    else:
        chosen = np.arange(n_lesion) % n_vox
    # per-voxel permutation of augmentations; the k-th reuse of a voxel takes
    # the k-th entry so repeats differ in augmentation as well as offset
    perms = np.stack([rng.permutation(len(AUGMENTATIONS)) for _ in range(min(n_vox, n_lesion))])
    off = np.asarray(config.max_offset)
    # the window is half-open, so offsets of -p/2 would push the voxel out
    off_lo = -np.minimum(off, half - 1)
    for k, idx in enumerate(chosen):
        voxel = lesion_voxels[idx]
        reuse = k // n_vox if n_vox < n_lesion else 0
        slot = idx if n_vox < n_lesion else k
        aug = AUGMENTATIONS[perms[slot][reuse % len(AUGMENTATIONS)]]
        offset = rng.integers(off_lo, off + 1)
        center = np.clip(voxel + offset, lo_c, hi_c)
        specs.append(PatchSpec(case.case_id, tuple(int(v) for v in center), LESION, aug,
                               tuple(int(v) for v in voxel)))
    return specs


def augment_patch(patch: np.ndarray, target: np.ndarray, op: str) -> tuple[np.ndarray, np.ndarray]:
    """Apply one spatial augmentation to channels-first patch and target.

    ``sagittal-reflect-combined`` is a sagittal reflection followed by an
    axial 180 degree rotation.
    """
    if op not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {op!r}")
    return _spatial(patch, op), _spatial(target, op)


def _spatial(arr: np.ndarray, op: str) -> np.ndarray:
    # arrays are (C, X, Y, Z): axis 1 sagittal, axes (1, 2) the axial plane
    if op == "none":
        out = arr
    elif op == "sagittal-reflect":
        out = arr[:, ::-1]
    elif op == "rot90":
        out = np.rot90(arr, 1, axes=(1, 2))
    elif op == "rot180":
        out = np.rot90(arr, 2, axes=(1, 2))
    elif op == "rot270":
        out = np.rot90(arr, 3, axes=(1, 2))
    else:
        out = np.rot90(arr[:, ::-1], 2, axes=(1, 2))
    return np.ascontiguousarray(out)


def one_hot(labels: np.ndarray, num_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return (np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(np.uint8)


def extract_patch(case: MultiModalCase, spec: PatchSpec, config: SamplerConfig,
                  stack: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cut the window of ``spec`` from every modality and from the gold mask."""
    if not window_in_bounds(spec.center, config.patch_size, case.shape):
        raise SamplingError(f"case {case.case_id!r}: patch at {spec.center} leaves the volume {case.shape}")
    lo, hi = window_bounds(spec.center, config.patch_size)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    if stack is None:
        stack = case.stack()
    patch = stack[(slice(None),) + sl]
    if case.gold is None:
        labels = np.zeros(config.patch_size, dtype=np.int64)
    else:
        labels = case.gold.data[sl]
    target = one_hot(labels, config.num_classes)
    patch, target = augment_patch(patch, target, spec.augmentation)
    aug_shape = patch.shape[1:]
    if aug_shape != tuple(config.patch_size):
        raise SamplingError(f"augmentation {spec.augmentation!r} needs equal axial patch sides, got {aug_shape}")
    return patch.astype(np.float32), target


def build_patch_set(cases: Sequence[MultiModalCase], config: SamplerConfig) -> PatchSet:
    if not cases:
        raise SamplingError("no cases to sample from")
    channels = {c.num_modalities for c in cases}
    if len(channels) != 1:
        raise SamplingError(f"cases disagree on modality count: {sorted(channels)}")
    train_specs, val_specs = [], []
    train_parts, val_parts = [], []
    for case in cases:
        rng = case_rng(config.seed, case.case_id)
        specs = sample_centers(case, config, rng)
        order = rng.permutation(len(specs))
        n_val = int(round(config.validation_fraction * len(specs)))
        val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        stack = case.stack()
        pairs = [extract_patch(case, s, config, stack) for s in specs]
        for idx, spec_list, parts in ((train_idx, train_specs, train_parts), (val_idx, val_specs, val_parts)):
            spec_list.extend(specs[i] for i in idx)
            parts.extend(pairs[i] for i in idx)
    c = channels.pop()

    def pack(parts):
        if not parts:
            return (np.zeros((0, c, *config.patch_size), np.float32),
                    np.zeros((0, config.num_classes, *config.patch_size), np.uint8))
        return np.stack([p for p, _ in parts]), np.stack([t for _, t in parts])

    tx, ty = pack(train_parts)
    vx, vy = pack(val_parts)
    return PatchSet(tx, ty, vx, vy, train_specs, val_specs)


# --------------------------------------------------------------------------
# On-disk cache: patches.bin holds float32 records (patch then target) in
# index order; index.json holds shapes and provenance.

def save_patch_set(patches: PatchSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    with open(directory / "patches.bin", "wb") as fh:
        for split, xs, ys, specs in (("train", patches.train_x, patches.train_y, patches.train_specs),
                                     ("val", patches.val_x, patches.val_y, patches.val_specs)):
            for x, y, spec in zip(xs, ys, specs):
                fh.write(np.ascontiguousarray(x, "<f4").tobytes())
                fh.write(np.ascontiguousarray(y, "<f4").tobytes())
                records.append({"split": split, **asdict(spec)})
    index = {
        "format": "lesionseg-patches",
        "version": 1,
        "dtype": "float32",
        "byteorder": "little",
        "patch_shape": list(patches.train_x.shape[1:] if len(patches.train_x) else patches.val_x.shape[1:]),
        "target_shape": list(patches.train_y.shape[1:] if len(patches.train_y) else patches.val_y.shape[1:]),
        "records": records,
    }
    (directory / "index.json").write_text(json.dumps(index))


def load_patch_set(directory) -> PatchSet:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    pshape, tshape = tuple(index["patch_shape"]), tuple(index["target_shape"])
    psize, tsize = int(np.prod(pshape)), int(np.prod(tshape))
    raw = np.fromfile(directory / "patches.bin", dtype="<f4")
    n = len(index["records"])
    if raw.size != n * (psize + tsize):
        raise SamplingError(f"{directory}: patch cache size does not match its index")
    raw = raw.reshape(n, psize + tsize)
    out = {"train": ([], [], []), "val": ([], [], [])}
    for rec, row in zip(index["records"], raw):
        xs, ys, specs = out[rec.pop("split")]
        xs.append(row[:psize].reshape(pshape))
        ys.append(row[psize:].reshape(tshape).astype(np.uint8))
        for key in ("center", "source_voxel"):
            if rec.get(key) is not None:
                rec[key] = tuple(rec[key])
        specs.append(PatchSpec(**rec))

    def arr(items, shape, dtype):
        return np.stack(items).astype(dtype) if items else np.zeros((0, *shape), dtype)

    tx, ty, ts = out["train"]
    vx, vy, vs = out["val"]
    return PatchSet(arr(tx, pshape, np.float32), arr(ty, tshape, np.uint8),
                    arr(vx, pshape, np.float32), arr(vy, tshape, np.uint8), ts, vs)
