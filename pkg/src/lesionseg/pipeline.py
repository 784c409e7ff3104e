"""Configuration and cross-validated end-to-end runs.

Every stage writes its outputs to disk next to a ``meta.json`` recording the
hash of the configuration that produced it; rerunning with a different
configuration over existing artifacts is refused instead of mixing results.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .core import MultiModalCase, Volume, load_cases, load_volume, save_volume, write_manifest
from .inference import (
    DEFAULT_MIN_SIZES,
    DEFAULT_THRESHOLDS,
    InferenceConfig,
    PostprocessParams,
    ProbabilityMap,
    ScoreConfig,
    binarize,
    grid_search,
    predict_volume,
)
from .metrics import EvaluationReport, evaluate_cases
from .model import NetworkConfig, build_network, load_weights, save_weights
from .preprocess import RegistrationConfig, symmetric_augment
from .sampling import SamplerConfig, build_patch_set
from .training import FocalConfig, TrainConfig, train

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Invalid or inconsistent configuration; message names the field path."""


class StageError(Exception):
    """A pipeline stage failed; message names the stage and fold."""


@dataclass(frozen=True)
class GridConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    min_sizes: tuple[int, ...] = DEFAULT_MIN_SIZES


@dataclass(frozen=True)
class PipelineConfig:
    manifest: str = "manifest.json"
    output_dir: str = "runs/default"
    folds: int = 4
    seed: int = 0
    symmetric: bool = True
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    focal: FocalConfig = field(default_factory=FocalConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("folds: must be >= 2")
        if tuple(self.inference.patch_size) != tuple(self.sampler.patch_size):
            raise ConfigError("inference.patch_size: must equal sampler.patch_size")

    def to_dict(self) -> dict:
        return _to_plain(asdict(self))

    def hash(self) -> str:
        doc = self.to_dict()
        doc.pop("output_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=int(seed))


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, doc, path: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        sub = _NESTED.get(cls, {}).get(name)
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_NESTED = {
    PipelineConfig: {
        "registration": RegistrationConfig,
        "sampler": SamplerConfig,
        "network": NetworkConfig,
        "train": TrainConfig,
        "focal": FocalConfig,
        "inference": InferenceConfig,
        "score": ScoreConfig,
        "grid": GridConfig,
    }
}


def config_from_dict(doc: dict) -> PipelineConfig:
    return _build(PipelineConfig, doc, "")


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: no such config file") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    config = config_from_dict(doc)
    # relative paths in the file resolve against the file's folder
    base = path.parent
    return replace(config, manifest=str(base / config.manifest), output_dir=str(base / config.output_dir))


def save_config(config: PipelineConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


# --------------------------------------------------------------------------
# Artifact bookkeeping

def _check_meta(directory: Path, config_hash: str, stage: str) -> bool:
    """True if ``directory`` holds a finished artifact of this config."""
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        return False
    meta = json.loads(meta_path.read_text())
    if meta.get("config_hash") != config_hash:
        raise StageError(
            f"{stage}: {directory} was produced by config {meta.get('config_hash')}, "
            f"current config is {config_hash}; use a fresh output_dir"
        )
    return bool(meta.get("complete"))


def _write_meta(directory: Path, config_hash: str, **extra) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "meta.json").write_text(json.dumps({"config_hash": config_hash, "complete": True, **extra}, indent=2))


def assign_folds(case_ids: Sequence[str], n_folds: int, seed: int) -> list[list[str]]:
    """Sort, shuffle with the seed, then deal round-robin into folds."""
    if len(case_ids) < n_folds:
        raise ConfigError(f"folds: {n_folds} folds need at least as many cases, got {len(case_ids)}")
    ids = sorted(case_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    for k, i in enumerate(order):
        folds[k % n_folds].append(ids[i])
    return [sorted(f) for f in folds]


def save_probability_map(pm: ProbabilityMap, directory, case_id: str) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for k in range(pm.data.shape[0]):
        name = f"{case_id}_prob{k}.nii.gz"
        save_volume(Volume(pm.data[k], pm.spacing), directory / name)
        files[f"prob{k}"] = name
    name = f"{case_id}_coverage.nii.gz"
    save_volume(Volume(pm.coverage.astype(np.float32), pm.spacing), directory / name)
    files["coverage"] = name
    return {"case_id": case_id, "n_networks": pm.n_networks, "files": files}


def load_probability_map(directory, entry: dict) -> ProbabilityMap:
    directory = Path(directory)
    keys = sorted((k for k in entry["files"] if k.startswith("prob")), key=lambda k: int(k[4:]))
    vols = [load_volume(directory / entry["files"][k]) for k in keys]
    cov = load_volume(directory / entry["files"]["coverage"])
    return ProbabilityMap(np.stack([v.data for v in vols]), cov.data.astype(np.int32), vols[0].spacing,
                          entry.get("n_networks", 1))


def write_map_index(directory, entries: list[dict]) -> None:
    Path(directory, "maps.json").write_text(json.dumps({"maps": entries}, indent=2))


def read_map_index(directory) -> list[dict]:
    return json.loads(Path(directory, "maps.json").read_text())["maps"]


# --------------------------------------------------------------------------
# Stages

def preprocess_cases(cases: Sequence[MultiModalCase], config: PipelineConfig) -> list[MultiModalCase]:
    if not config.symmetric:
        return list(cases)
    out = []
    for case in cases:
        aug = symmetric_augment(case, config.registration)
        warning = aug.metadata.get("registration", {}).get("warning")
        if warning:
            logger.warning("case %s: %s", case.case_id, warning)
        out.append(aug)
    return out


def network_config_for(config: PipelineConfig, cases: Sequence[MultiModalCase]) -> NetworkConfig:
    channels = {c.num_modalities for c in cases}
    if len(channels) != 1:
        raise ConfigError(f"manifest: cases disagree on modality count {sorted(channels)}")
    return replace(config.network, in_channels=channels.pop())


def train_fold(config: PipelineConfig, cases: Sequence[MultiModalCase], fold: int, fold_dir: Path,
               config_hash: str):
    """Train one fold's network on ``cases``; reuses a finished artifact."""
    weights = fold_dir / "weights.lsnw"
    net_config = network_config_for(config, cases)
    if _check_meta(fold_dir, config_hash, f"train fold {fold}") and weights.exists():
        logger.info("fold %d: reusing %s", fold, weights)
        return load_weights(weights, net_config)
    fold_dir.mkdir(parents=True, exist_ok=True)
    patches = build_patch_set(cases, replace(config.sampler, seed=config.seed))
    net = build_network(net_config, seed=config.seed + fold)
    tcfg = replace(config.train, seed=config.seed + fold, checkpoint_path=str(fold_dir / "checkpoint.lsnw"))
    net, history = train(net, patches, tcfg, config.focal)
    save_weights(net, weights, extra={"config_hash": config_hash, "fold": fold, "best_epoch": history.best_epoch})
    history.to_json(fold_dir / "history.json")
    history.to_csv(fold_dir / "history.csv")
    _write_meta(fold_dir, config_hash, fold=fold, train_cases=[c.case_id for c in cases],
                n_train_patches=len(patches.train_x), n_val_patches=len(patches.val_x),
                best_epoch=history.best_epoch, epochs=len(history.monitored))
    return net


@dataclass
class CVResult:
    folds: list[list[str]]
    weights: list[str]
    params: PostprocessParams
    report: EvaluationReport
    maps: dict[str, ProbabilityMap]


def run_fold_cv(config: PipelineConfig) -> CVResult:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_hash = config.hash()
    save_config(config, out / "config.yaml")
    try:
        raw_cases = load_cases(config.manifest)
    except Exception as exc:
        raise StageError(f"load: {exc}") from exc
    if len(raw_cases) < config.folds:
        raise ConfigError(f"folds: {config.folds} folds need at least as many cases, got {len(raw_cases)}")
    if any(c.gold is None for c in raw_cases):
        raise ConfigError("manifest: every case needs a gold mask for cross-validation")

    pre_dir = out / "preprocessed"
    try:
        if _check_meta(pre_dir, config_hash, "preprocess"):
            cases = load_cases(pre_dir / "manifest.json")
        else:
            cases = preprocess_cases(raw_cases, config)
            write_manifest(pre_dir / "manifest.json", cases)
            _write_meta(pre_dir, config_hash)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"preprocess: {exc}") from exc
    by_id = {c.case_id: c for c in cases}

    folds = assign_folds(list(by_id), config.folds, config.seed)
    (out / "folds.json").write_text(json.dumps({"config_hash": config_hash, "folds": folds}, indent=2))
    weights, maps = [], {}
    map_dir = out / "maps"
    map_entries = []
    for k, held_out in enumerate(folds):
        fold_dir = out / f"fold{k}"
        training_cases = [by_id[i] for f, ids in enumerate(folds) if f != k for i in ids]
        try:
            net = train_fold(config, training_cases, k, fold_dir, config_hash)
            for cid in held_out:
                pm = predict_volume([net], by_id[cid], config.inference)
                maps[cid] = pm
                map_entries.append(save_probability_map(pm, map_dir, cid))
        except (StageError, ConfigError):
            raise
        except Exception as exc:
            raise StageError(f"fold {k}: {type(exc).__name__}: {exc}") from exc
        weights.append(str(fold_dir / "weights.lsnw"))
    write_map_index(map_dir, map_entries)

    ids = sorted(maps)
    golds = [by_id[i].gold for i in ids]
    try:
        params = grid_search([maps[i] for i in ids], golds, config.grid.thresholds, config.grid.min_sizes,
                             config.score)
    except Exception as exc:
        raise StageError(f"gridsearch: {exc}") from exc
    params.save(out / "postprocess.json")
    masks = [binarize(maps[i], params) for i in ids]
    mask_dir = out / "masks"
    mask_dir.mkdir(exist_ok=True)
    for cid, m in zip(ids, masks):
        save_volume(m, mask_dir / f"{cid}_mask.nii.gz")
    report = evaluate_cases(masks, golds, ids, config.score.hd_max)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    _write_meta(out / "masks", config_hash, params=asdict(params))
    return CVResult(folds, weights, params, report, maps)
