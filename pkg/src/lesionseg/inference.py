"""Whole-volume prediction and post-processing.

Patches are taken on a regular lattice (step 4x4x1 by default, plus an
end-aligned origin per axis so the last voxels are covered), predicted by
every network, and the class probabilities are averaged per voxel.  The
lesion map is then thresholded and components smaller than a minimum size
are dropped; threshold and size are chosen by grid search on the combined
Dice/Hausdorff score.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .core import Mask, MultiModalCase
from .metrics import dsc, hausdorff
from .model import forward

LESION_CLASS = 1


class InferenceError(Exception):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    extraction_step: tuple[int, int, int] = (4, 4, 1)
    patch_size: tuple[int, int, int] = (24, 24, 16)
    batch_size: int = 64

    def __post_init__(self):
        step = tuple(int(s) for s in self.extraction_step)
        ps = tuple(int(p) for p in self.patch_size)
        if len(step) != 3 or len(ps) != 3:
            raise ValueError("extraction_step and patch_size need three components")
        if any(s < 1 or s > p for s, p in zip(step, ps)):
            raise ValueError(f"extraction_step {step} must lie in [1, patch_size {ps}]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "extraction_step", step)
        object.__setattr__(self, "patch_size", ps)


@dataclass(frozen=True)
class PostprocessParams:
    threshold: float = 0.5
    min_lesion_size: int = 200
    connectivity: int = 26

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.min_lesion_size < 0:
            raise ValueError("min_lesion_size must be >= 0")
        if self.connectivity not in (6, 18, 26):
            raise ValueError("connectivity must be 6, 18 or 26")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def load(cls, path) -> "PostprocessParams":
        return cls(**json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ScoreConfig:
    hd_max: float = 200.0

    def __post_init__(self):
        if self.hd_max <= 0:
            raise ValueError("hd_max must be > 0")


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """(N, X, Y, Z) class probabilities and the per-voxel patch count.

    ``coverage`` counts the patches of one network covering each voxel; every
    network sees the same lattice.
    """

    data: np.ndarray
    coverage: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_networks: int = 1

    @property
    def lesion(self) -> np.ndarray:
        return self.data[LESION_CLASS]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


def patch_origins(shape, patch_size, step) -> list[np.ndarray]:
    """Per-axis origins: the step lattice plus the end-aligned origin."""
    origins = []
    for n, p, s in zip(shape, patch_size, step):
        if n < p:
            raise InferenceError(f"volume side {n} is smaller than patch side {p}")
        axis = list(range(0, n - p + 1, s))
        if axis[-1] != n - p:
            axis.append(n - p)
        origins.append(np.asarray(axis))
    return origins


def predict_volume(networks: Sequence, case: MultiModalCase, config: InferenceConfig | None = None) -> ProbabilityMap:
    config = config or InferenceConfig()
    if not networks:
        raise InferenceError("no networks given")
    for i, net in enumerate(networks):
        expected = getattr(getattr(net, "config", None), "in_channels", case.num_modalities)
        if expected != case.num_modalities:
            raise InferenceError(f"network {i} expects {expected} channels, case {case.case_id!r} has {case.num_modalities}")
    stack = case.stack()
    ps = config.patch_size
    ox, oy, oz = patch_origins(case.shape, ps, config.extraction_step)
    grid = np.stack(np.meshgrid(ox, oy, oz, indexing="ij"), axis=-1).reshape(-1, 3)
    coverage = np.zeros(case.shape, dtype=np.int32)
    for x, y, z in grid:
        coverage[x:x + ps[0], y:y + ps[1], z:z + ps[2]] += 1
    total = None
    for net in networks:
        if hasattr(net, "to"):
            net = net.to(memory_format=torch.channels_last_3d)
        acc = None
        for start in range(0, len(grid), config.batch_size):
            origins = grid[start:start + config.batch_size]
            batch = np.stack([stack[:, x:x + ps[0], y:y + ps[1], z:z + ps[2]] for x, y, z in origins])
            xb = torch.from_numpy(batch).to(memory_format=torch.channels_last_3d)
            probs = forward(net, xb, "eval").double().numpy()
            if acc is None:
                acc = np.zeros((probs.shape[1],) + case.shape, dtype=np.float64)
            for (x, y, z), p in zip(origins, probs):
                acc[:, x:x + ps[0], y:y + ps[1], z:z + ps[2]] += p
        total = acc if total is None else total + acc
    data = (total / (coverage[None] * len(networks))).astype(np.float32)
    return ProbabilityMap(data, coverage, case.spacing, len(networks))


def _structure(connectivity: int) -> np.ndarray:
    rank = {6: 1, 18: 2, 26: 3}[connectivity]
    return ndimage.generate_binary_structure(3, rank)


def connected_components(mask, connectivity: int = 26) -> tuple[np.ndarray, np.ndarray]:
    """Labels (0 = background, 1..K) and sizes (index k-1 for label k)."""
    data = mask.data if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(data, structure=_structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def _filter_components(labels: np.ndarray, sizes: np.ndarray, min_size: int) -> np.ndarray:
    keep = np.concatenate([[False], sizes >= min_size])
    return keep[labels]


def binarize(prob_map: ProbabilityMap | np.ndarray, params: PostprocessParams) -> Mask:
    lesion = prob_map.lesion if isinstance(prob_map, ProbabilityMap) else np.asarray(prob_map)
    spacing = prob_map.spacing if isinstance(prob_map, ProbabilityMap) else (1.0, 1.0, 1.0)
    labels, sizes = connected_components(lesion >= params.threshold, params.connectivity)
    return Mask(_filter_components(labels, sizes, params.min_lesion_size), spacing)


def combined_score(dsc_value: float, hd_value: float, config: ScoreConfig | None = None) -> float:
    """Harmonic-style combination of DSC and HD normalised by ``hd_max``.

    Lies in [0, 0.5]; the degenerate 0/0 case is 0.
    """
    config = config or ScoreConfig()
    hd_term = 1.0 - min(max(float(hd_value), 0.0), config.hd_max) / config.hd_max
    denom = float(dsc_value) + hd_term
    if denom == 0.0:
        return 0.0
    return float(dsc_value) * hd_term / denom


DEFAULT_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))
DEFAULT_MIN_SIZES = tuple(range(10, 101, 10)) + tuple(range(150, 1001, 50))


def grid_scores(
    maps: Sequence[ProbabilityMap],
    golds: Sequence[Mask],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    min_sizes: Sequence[int] = DEFAULT_MIN_SIZES,
    score_config: ScoreConfig | None = None,
    connectivity: int = 26,
) -> np.ndarray:
    """Mean combined score per (threshold, min size), shape (T, S)."""
    score_config = score_config or ScoreConfig()
    if not maps or len(maps) != len(golds):
        raise InferenceError(f"need matching non-empty maps and golds, got {len(maps)} and {len(golds)}")
    if not thresholds or not min_sizes:
        raise InferenceError("empty parameter grid")
    scores = np.zeros((len(thresholds), len(min_sizes)))
    for pm, gold in zip(maps, golds):
        lesion = pm.lesion if isinstance(pm, ProbabilityMap) else np.asarray(pm)
        for i, th in enumerate(thresholds):
            labels, sizes = connected_components(lesion >= th, connectivity)
            previous = None
            for j, s_min in enumerate(min_sizes):
                kept = tuple(np.flatnonzero(sizes >= s_min))
                if kept != previous:
                    pred = Mask(_filter_components(labels, sizes, s_min), gold.spacing)
                    value = combined_score(dsc(pred, gold), hausdorff(pred, gold, score_config.hd_max), score_config)
                    previous = kept
                scores[i, j] += value
    return scores / len(maps)


def grid_search(
    maps: Sequence[ProbabilityMap],
    golds: Sequence[Mask],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    min_sizes: Sequence[int] = DEFAULT_MIN_SIZES,
    score_config: ScoreConfig | None = None,
    connectivity: int = 26,
) -> PostprocessParams:
    """Best (threshold, min size); ties go to smaller size, then larger threshold."""
    scores = grid_scores(maps, golds, thresholds, min_sizes, score_config, connectivity)
    best = None
    for j, s_min in enumerate(min_sizes):
        for i, th in enumerate(thresholds):
            key = (scores[i, j], -s_min, th)
            if best is None or key > best[0]:
                best = (key, th, s_min)
    _, th, s_min = best
    return PostprocessParams(float(th), int(s_min), connectivity)
