"""Volume and case data model, volumetric file I/O and foreground masks.

Axis convention used throughout the package: axis 0 is sagittal (left-right),
axis 1 is coronal (posterior-anterior) and axis 2 is axial
(inferior-superior).  Physical coordinates are ``index * spacing`` in mm with
the origin at voxel (0, 0, 0).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

PathLike = Union[str, os.PathLike]

RAW_FORMAT = "lesionseg-raw"
RAW_VERSION = 1


class VolumeIOError(Exception):
    """Raised when a volume or manifest cannot be read or written."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _check_geometry(shape: Sequence[int], spacing: Sequence[float]) -> tuple[float, float, float]:
    if len(shape) != 3:
        raise ValueError(f"expected a 3D grid, got shape {tuple(shape)}")
    if any(s < 1 for s in shape):
        raise ValueError(f"shape components must be >= 1, got {tuple(shape)}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing components must be finite and > 0, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D float32 intensity grid with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        spacing = _check_geometry(data.shape, self.spacing)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains NaN or Inf voxels")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class Mask:
    """A binary 3D grid (stored as bool) with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype != bool:
            if not np.all((raw == 0) | (raw == 1)):
                raise ValueError("mask values must be exactly 0 or 1")
        data = np.array(raw, dtype=bool, copy=True)
        spacing = _check_geometry(data.shape, self.spacing)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True, eq=False)
class MultiModalCase:
    """Co-registered modalities of one subject plus an optional gold mask.

    ``modality_names`` records channel semantics; its order is the channel
    order used by every downstream consumer.
    """

    case_id: str
    modalities: tuple[Volume, ...]
    gold: Mask | None = None
    modality_names: tuple[str, ...] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        modalities = tuple(self.modalities)
        if not modalities:
            raise ValueError(f"case {self.case_id!r} has no modalities")
        ref = modalities[0]
        for i, vol in enumerate(modalities[1:], start=1):
            if vol.shape != ref.shape or not np.allclose(vol.spacing, ref.spacing):
                raise ValueError(
                    f"case {self.case_id!r}: modality {i} geometry {vol.shape}/{vol.spacing} "
                    f"differs from modality 0 {ref.shape}/{ref.spacing}"
                )
        if self.gold is not None and (
            self.gold.shape != ref.shape or not np.allclose(self.gold.spacing, ref.spacing)
        ):
            raise ValueError(f"case {self.case_id!r}: gold geometry differs from modalities")
        names = self.modality_names
        if names is None:
            names = tuple(f"m{i}" for i in range(len(modalities)))
        names = tuple(names)
        if len(names) != len(modalities):
            raise ValueError(f"case {self.case_id!r}: {len(names)} names for {len(modalities)} modalities")
        object.__setattr__(self, "modalities", modalities)
        object.__setattr__(self, "modality_names", names)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.modalities[0].shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.modalities[0].spacing

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    def stack(self) -> np.ndarray:
        """Channels-first float32 array of shape (I, X, Y, Z)."""
        return np.stack([m.data for m in self.modalities], axis=0)


def foreground_mask(case: MultiModalCase) -> Mask:
    """Voxels that are nonzero in at least one modality."""
    fg = np.zeros(case.shape, dtype=bool)
    for vol in case.modalities:
        fg |= vol.data != 0
    return Mask(fg, case.spacing)


# --------------------------------------------------------------------------
# File I/O

def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def load_volume(path: PathLike) -> Volume:
    """Load a NIfTI-1 (``.nii``/``.nii.gz``) or raw+sidecar (``.raw``) volume."""
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"{path}: no such file")
    if _is_nifti(path):
        data, spacing = _read_nifti(path)
    elif path.suffix.lower() == ".raw":
        data, spacing = _read_raw(path)
    else:
        raise VolumeIOError(f"{path}: unsupported volume format (expected .nii, .nii.gz or .raw)")
    if not np.all(np.isfinite(data)):
        raise VolumeIOError(f"{path}: volume contains NaN or Inf voxels")
    try:
        return Volume(data, spacing)
    except ValueError as exc:
        raise VolumeIOError(f"{path}: {exc}") from exc


def load_mask(path: PathLike) -> Mask:
    vol = load_volume(path)
    try:
        return Mask(vol.data, vol.spacing)
    except ValueError as exc:
        raise VolumeIOError(f"{path}: {exc}") from exc


def save_volume(volume: Volume | Mask, path: PathLike) -> None:
    """Write a Volume (float32) or Mask (uint8 in NIfTI, float32 in raw)."""
    path = Path(path)
    try:
        if _is_nifti(path):
            _write_nifti(volume, path)
        elif path.suffix.lower() == ".raw":
            _write_raw(volume, path)
        else:
            raise VolumeIOError(f"{path}: unsupported volume format (expected .nii, .nii.gz or .raw)")
    except OSError as exc:
        raise VolumeIOError(f"{path}: {exc}") from exc


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, ...]]:
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise VolumeIOError(f"{path}: cannot read NIfTI ({exc})") from exc
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise VolumeIOError(f"{path}: expected a 3D image, got shape {data.shape}")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return data, spacing


def _write_nifti(volume: Volume | Mask, path: Path) -> None:
    import nibabel as nib

    if isinstance(volume, Mask):
        data = volume.data.astype(np.uint8)
    else:
        data = volume.data.astype(np.float32)
    affine = np.diag([*volume.spacing, 1.0])
    img = nib.Nifti1Image(data, affine)
    img.header.set_zooms(volume.spacing)
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))


def _read_raw(path: Path) -> tuple[np.ndarray, tuple[float, ...]]:
    sidecar = _sidecar(path)
    if not sidecar.exists():
        raise VolumeIOError(f"{path}: missing sidecar {sidecar.name}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeIOError(f"{sidecar}: invalid JSON ({exc})") from exc
    if meta.get("format") != RAW_FORMAT:
        raise VolumeIOError(f"{sidecar}: not a {RAW_FORMAT} sidecar")
    if meta.get("dtype") != "float32" or meta.get("byteorder") != "little" or meta.get("order") != "C":
        raise VolumeIOError(f"{sidecar}: only little-endian C-order float32 is supported")
    shape = tuple(int(s) for s in meta["shape"])
    buf = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(buf) != expected:
        raise VolumeIOError(f"{path}: {len(buf)} bytes, expected {expected} for shape {shape}")
    data = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    return data, tuple(meta["spacing"])


def _write_raw(volume: Volume | Mask, path: Path) -> None:
    data = np.ascontiguousarray(volume.data, dtype="<f4")
    meta = {
        "format": RAW_FORMAT,
        "version": RAW_VERSION,
        "dtype": "float32",
        "byteorder": "little",
        "order": "C",
        "shape": list(volume.shape),
        "spacing": list(volume.spacing),
        "kind": "mask" if isinstance(volume, Mask) else "volume",
    }
    path.write_bytes(data.tobytes())
    _sidecar(path).write_text(json.dumps(meta, indent=2))


# --------------------------------------------------------------------------
# Case manifests

def read_manifest(path: PathLike) -> list[dict]:
    """Parse a case manifest into entries with absolute paths.

    Each entry holds ``case_id``, ``modalities`` (ordered name -> path) and
    optionally ``gold``.  Relative paths resolve against the manifest folder.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise VolumeIOError(f"{path}: no such manifest") from exc
    except json.JSONDecodeError as exc:
        raise VolumeIOError(f"{path}: invalid JSON ({exc})") from exc
    root = path.parent
    entries = []
    for i, raw in enumerate(doc.get("cases", [])):
        if "case_id" not in raw or not raw.get("modalities"):
            raise VolumeIOError(f"{path}: cases[{i}] needs case_id and modalities")
        entry = {
            "case_id": str(raw["case_id"]),
            "modalities": {k: str(root / v) for k, v in raw["modalities"].items()},
            "gold": str(root / raw["gold"]) if raw.get("gold") else None,
        }
        entries.append(entry)
    return entries


def missing_files(entries: Sequence[dict]) -> list[str]:
    """Paths referenced by manifest entries that do not exist."""
    missing = []
    for e in entries:
        for p in e["modalities"].values():
            if not Path(p).exists():
                missing.append(p)
        if e.get("gold") and not Path(e["gold"]).exists():
            missing.append(e["gold"])
    return missing


def load_case(entry: dict) -> MultiModalCase:
    """Load one manifest entry; fails as a whole if any file is bad."""
    names = tuple(entry["modalities"].keys())
    vols = tuple(load_volume(p) for p in entry["modalities"].values())
    gold = load_mask(entry["gold"]) if entry.get("gold") else None
    try:
        return MultiModalCase(entry["case_id"], vols, gold, names)
    except ValueError as exc:
        raise VolumeIOError(str(exc)) from exc


def load_cases(manifest: PathLike) -> list[MultiModalCase]:
    entries = read_manifest(manifest)
    missing = missing_files(entries)
    if missing:
        raise VolumeIOError("manifest references missing files: " + ", ".join(missing))
    return [load_case(e) for e in entries]


def write_manifest(path: PathLike, cases: Sequence[MultiModalCase], ext: str = ".nii.gz") -> None:
    """Save every case's volumes next to ``path`` and write the manifest."""
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    doc = {"cases": []}
    for case in cases:
        mods = {}
        for name, vol in zip(case.modality_names, case.modalities):
            rel = f"{case.case_id}_{name}{ext}"
            save_volume(vol, root / rel)
            mods[name] = rel
        entry = {"case_id": case.case_id, "modalities": mods}
        if case.gold is not None:
            rel = f"{case.case_id}_gold{ext}"
            save_volume(case.gold, root / rel)
            entry["gold"] = rel
        doc["cases"].append(entry)
    path.write_text(json.dumps(doc, indent=2))
