"""Command line entry point: ``lesionseg <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .core import VolumeIOError, load_case, load_cases, missing_files, read_manifest, save_volume, write_manifest
from .model import WeightFileError, load_weights
from .inference import PostprocessParams, binarize, grid_search, predict_volume
from .metrics import evaluate_cases
from .core import load_mask
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    assign_folds,
    load_config,
    load_probability_map,
    preprocess_cases,
    read_map_index,
    run_fold_cv,
    save_probability_map,
    train_fold,
    write_map_index,
)
from .sampling import SamplingError, build_patch_set, save_patch_set
from .synthetic import SyntheticSpec, write_synthetic_dataset

logger = logging.getLogger("lesionseg")

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2


class ValidationError(Exception):
    pass


def _triple(text: str) -> tuple[int, int, int]:
    parts = text.replace("x", ",").split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma separated integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _config(args) -> PipelineConfig:
    config = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def _preflight(manifest) -> list[dict]:
    entries = read_manifest(manifest)
    if not entries:
        raise ValidationError(f"{manifest}: manifest lists no cases")
    missing = missing_files(entries)
    if missing:
        raise ValidationError("manifest references missing files:\n  " + "\n  ".join(missing))
    return entries


def cmd_synth(args) -> None:
    try:
        spec = SyntheticSpec(shape=args.shape, n_modalities=args.modalities, n_cases=args.cases,
                             lesion_count=tuple(args.lesion_count), lesion_radius=tuple(args.lesion_radius),
                             noise=args.noise, contrast=args.contrast, seed=args.seed or 0)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    path = write_synthetic_dataset(spec, args.out)
    print(path)


def cmd_preprocess(args) -> None:
    config = _config(args)
    entries = _preflight(args.manifest)
    cases = preprocess_cases([load_case(e) for e in entries], replace(config, symmetric=True))
    write_manifest(Path(args.out) / "manifest.json", cases)
    print(Path(args.out) / "manifest.json")


def cmd_sample(args) -> None:
    config = _config(args)
    sampler = config.sampler
    overrides = {k: v for k, v in (("patch_size", args.patch_size), ("goal_per_case", args.goal_per_case),
                                   ("seed", args.seed), ("validation_fraction", args.validation_fraction))
                 if v is not None}
    sampler = replace(sampler, **overrides)
    _preflight(args.manifest)
    patches = build_patch_set(load_cases(args.manifest), sampler)
    save_patch_set(patches, args.out)
    print(f"{len(patches.train_x)} training and {len(patches.val_x)} validation patches -> {args.out}")


def cmd_train(args) -> None:
    config = _config(args)
    _preflight(config.manifest)
    cases = load_cases(config.manifest)
    folds = assign_folds([c.case_id for c in cases], config.folds, config.seed)
    if not 0 <= args.fold < len(folds):
        raise ValidationError(f"--fold must lie in [0, {len(folds) - 1}]")
    training = [c for c in cases if c.case_id not in folds[args.fold]]
    out = Path(args.checkpoint_dir)
    train_fold(config, training, args.fold, out, config.hash())
    print(out / "weights.lsnw")


def cmd_predict(args) -> None:
    config = _config(args)
    entries = _preflight(args.manifest)
    networks = [load_weights(w) for w in args.weights]
    params = PostprocessParams.load(args.params) if args.params else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for entry in entries:
        case = load_case(entry)
        pm = predict_volume(networks, case, config.inference)
        index.append(save_probability_map(pm, out, case.case_id))
        if params is not None:
            save_volume(binarize(pm, params), out / f"{case.case_id}_mask.nii.gz")
    write_map_index(out, index)
    print(out / "maps.json")


def cmd_gridsearch(args) -> None:
    config = _config(args)
    golds = {e["case_id"]: e["gold"] for e in _preflight(args.manifest)}
    entries = read_map_index(args.maps)
    missing = [e["case_id"] for e in entries if not golds.get(e["case_id"])]
    if missing:
        raise ValidationError(f"no gold mask for case(s) {missing}")
    maps = [load_probability_map(args.maps, e) for e in entries]
    gold_masks = [load_mask(golds[e["case_id"]]) for e in entries]
    params = grid_search(maps, gold_masks, config.grid.thresholds, config.grid.min_sizes, config.score)
    params.save(args.out)
    print(json.dumps(params.__dict__))


def cmd_evaluate(args) -> None:
    entries = _preflight(args.manifest)
    masks_dir = Path(args.masks)
    preds, golds, ids = [], [], []
    for e in entries:
        path = masks_dir / f"{e['case_id']}_mask.nii.gz"
        if not path.exists():
            raise ValidationError(f"missing predicted mask {path}")
        if not e.get("gold"):
            raise ValidationError(f"case {e['case_id']} has no gold mask")
        preds.append(load_mask(path))
        golds.append(load_mask(e["gold"]))
        ids.append(e["case_id"])
    report = evaluate_cases(preds, golds, ids, _config(args).score.hd_max)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    print(json.dumps(report.to_dict()["aggregate"], indent=2))


def cmd_cv(args) -> None:
    config = _config(args)
    _preflight(config.manifest)
    result = run_fold_cv(config)
    print(json.dumps({"params": result.params.__dict__, "aggregate": result.report.to_dict()["aggregate"]},
                     indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if config:
            p.add_argument("--config", help="pipeline config (YAML)")
        p.add_argument("--seed", type=int, help="override the global seed")
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset", config=False)
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=8)
    p.add_argument("--shape", type=_triple, default=(64, 64, 32))
    p.add_argument("--modalities", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--contrast", type=float, default=0.6)
    p.add_argument("--lesion-count", type=int, nargs=2, default=(1, 2), metavar=("MIN", "MAX"))
    p.add_argument("--lesion-radius", type=float, nargs=2, default=(4.0, 6.0), metavar=("MIN", "MAX"))

    p = add("preprocess", cmd_preprocess, "append symmetric modalities")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("sample", cmd_sample, "build a balanced patch set")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=_triple)
    p.add_argument("--goal-per-case", type=int)
    p.add_argument("--validation-fraction", type=float)

    p = add("train", cmd_train, "train the network of one fold")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--checkpoint-dir", required=True)

    p = add("predict", cmd_predict, "predict probability maps (ensembles several weight files)")
    p.add_argument("--weights", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="post-processing JSON; also writes binary masks")

    p = add("gridsearch", cmd_gridsearch, "choose threshold and minimum lesion size")
    p.add_argument("--maps", required=True, help="directory written by predict")
    p.add_argument("--manifest", required=True, help="manifest with gold masks")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "score predicted masks against gold masks")
    p.add_argument("--masks", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    add("cv", cmd_cv, "full cross-validation run")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, ConfigError, VolumeIOError, WeightFileError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (StageError, Exception) as exc:
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
