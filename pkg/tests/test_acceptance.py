"""Acceptance suite: one PASS/FAIL line per primary criterion.

Run with ``pytest -s tests/test_acceptance.py`` to see the verdict lines.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest
import torch

import oracles
from registration_cases import moved_pair, random_motions, recovery_error, rotation_norm_deg
from stubs import ConstantNet, synthetic_probability_maps
from lesionseg.core import Mask, MultiModalCase, Volume, foreground_mask
from lesionseg.inference import (
    DEFAULT_MIN_SIZES,
    DEFAULT_THRESHOLDS,
    InferenceConfig,
    PostprocessParams,
    ProbabilityMap,
    binarize,
    combined_score,
    grid_search,
    predict_volume,
)
from lesionseg.metrics import dsc, hausdorff, ppv, sensitivity
from lesionseg.model import NetworkConfig, build_network, encoder_fraction, forward
from lesionseg.pipeline import PipelineConfig, run_fold_cv
from lesionseg.preprocess import rigid_register
from lesionseg.sampling import HEALTHY, LESION, SamplerConfig, build_patch_set, case_rng, sample_centers, window_bounds
from lesionseg.synthetic import SyntheticSpec, generate_synthetic_dataset, write_synthetic_dataset
from lesionseg.training import FocalConfig, TrainConfig, focal_loss


def verdict(name: str, ok: bool, detail: str, elapsed: float, limit: float) -> None:
    ok = ok and elapsed < limit
    print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}; runtime {elapsed:.1f}s (limit {limit:.0f}s)")
    assert ok, detail


def test_focal_loss_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    def pair(shape):
        logits = rng.normal(size=shape)
        probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        lab = rng.integers(0, shape[1], size=(shape[0],) + shape[2:])
        tgt = (np.arange(shape[1]).reshape(1, -1, 1, 1, 1) == lab[:, None]).astype(float)
        return torch.tensor(probs), torch.tensor(tgt)

    ce_err = 0.0
    for _ in range(50):
        p, t = pair((2, 2, 4, 4, 3))
        ce = -(t * torch.log(p)).sum(1).mean()
        ce_err = max(ce_err, abs(float(focal_loss(p, t, FocalConfig(0.0, (1.0, 1.0))) - ce)))

    half = torch.tensor([0.5, 0.5], dtype=torch.float64).view(1, 2, 1, 1, 1)
    lesion = torch.tensor([0.0, 1.0], dtype=torch.float64).view(1, 2, 1, 1, 1)
    hand = float(focal_loss(half, lesion, FocalConfig(2.0, (0.25, 0.75))))
    hand_ok = abs(hand - 0.1300) <= 1e-4
    hand_ce = float(focal_loss(half, lesion, FocalConfig(0.0, (1.0, 1.0))))
    hand_ok &= abs(hand_ce - math.log(2)) < 1e-12

    cfg = FocalConfig(2.0, (0.25, 0.75))
    worst = 0.0
    h = 1e-6
    for _ in range(100):
        p, t = pair((1, 2, 2, 2, 2))
        p = p.clamp(1e-3, 1 - 1e-3).requires_grad_(True)
        g = torch.autograd.grad(focal_loss(p, t, cfg), p)[0].view(-1)
        base = p.detach().view(-1)
        num = torch.empty_like(base)
        for i in range(base.numel()):
            e = torch.zeros_like(base)
            e[i] = h
            num[i] = (focal_loss((base + e).view_as(p), t, cfg) - focal_loss((base - e).view_as(p), t, cfg)) / (2 * h)
        worst = max(worst, float((g - num).norm() / num.norm()))
    ok = ce_err < 1e-9 and hand_ok and worst < 1e-4
    verdict("focal loss suite", ok,
            f"CE reduction err {ce_err:.2e} (<1e-9); p_t=0.5,gamma=2,alpha=0.75 -> {hand:.6f} (0.1300+-1e-4); "
            f"max FD rel err {worst:.2e} over 100 tensors (<1e-4)",
            time.perf_counter() - t0, 60)


def test_sampler_suite():
    t0 = time.perf_counter()
    cases = generate_synthetic_dataset(SyntheticSpec(n_cases=5, seed=21))
    cfg = SamplerConfig(goal_per_case=500, seed=7)
    split_ok = contain_ok = True
    air = 0
    n_lesion = 0
    for case in cases:
        specs = sample_centers(case, cfg, case_rng(cfg.seed, case.case_id))
        labels = [s.class_label for s in specs]
        split_ok &= labels.count(LESION) == labels.count(HEALTHY) == 250
        fg = foreground_mask(case).data
        for s in specs:
            lo, hi = window_bounds(s.center, cfg.patch_size)
            contain_ok &= bool(np.all(lo >= 0) and np.all(hi <= case.shape))
            if s.class_label == LESION:
                n_lesion += 1
                contain_ok &= bool(np.all(lo <= s.source_voxel) and np.all(np.asarray(s.source_voxel) < hi))
            else:
                air += int(not fg[s.center])
    a = build_patch_set(cases, cfg)
    b = build_patch_set(cases, cfg)
    det_ok = (a.train_x.tobytes() == b.train_x.tobytes() and a.val_y.tobytes() == b.val_y.tobytes()
              and a.provenance == b.provenance)
    ok = split_ok and contain_ok and air == 0 and det_ok
    verdict("sampler suite", ok,
            f"50/50 split exact={split_ok}; offset containment over {n_lesion} lesion specs={contain_ok}; "
            f"healthy centres in air={air}; deterministic={det_ok}",
            time.perf_counter() - t0, 60)


def test_architecture_suite():
    t0 = time.perf_counter()
    shape_ok = sums_ok = True
    worst = 0.0
    for channels in (2, 4, 8):
        net = build_network(NetworkConfig(in_channels=channels, base_filters=8), seed=channels)
        y = forward(net, torch.randn(2, channels, 24, 24, 16), "eval")
        shape_ok &= tuple(y.shape) == (2, 2, 24, 24, 16)
        worst = max(worst, float((y.sum(1) - 1).abs().max()))
    sums_ok = worst <= 1e-5
    fracs = [encoder_fraction(build_network(NetworkConfig(in_channels=i, base_filters=b)))
             for i, b in ((8, 32), (4, 8), (2, 16))]
    frac_ok = all(0.70 <= f <= 0.80 for f in fracs)
    verdict("architecture suite", shape_ok and sums_ok and frac_ok,
            f"output (N,24,24,16)={shape_ok}; max |sum softmax - 1|={worst:.1e} (<=1e-5); "
            f"encoder fractions {', '.join(f'{f:.3f}' for f in fracs)} in [0.70,0.80]",
            time.perf_counter() - t0, 60)


def test_inference_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    case = MultiModalCase("c", (Volume(rng.normal(size=(72, 72, 48))),))
    pm = predict_volume([ConstantNet(0.37)], case, InferenceConfig((4, 4, 1), (24, 24, 16), 512))
    const_ok = float(np.abs(pm.lesion - 0.37).max()) < 1e-6
    interior = pm.coverage[23:49, 23:49, 15:33]
    interior_ok = bool(np.all(interior == 576))
    cover_ok = True
    for shape in ((64, 64, 32), (50, 37, 21), (24, 24, 16), (31, 29, 17)):
        c = MultiModalCase("s", (Volume(np.zeros(shape)),))
        cover_ok &= int(predict_volume([ConstantNet(0.5)], c, InferenceConfig(batch_size=512)).coverage.min()) >= 1
    mono_ok = True
    for _ in range(50):
        prob = (rng.random((16, 16, 10)) ** rng.uniform(0.5, 3)).astype(np.float32)
        t1, t2 = np.sort(rng.uniform(0.05, 0.95, 2))
        s1, s2 = np.sort(rng.integers(1, 60, 2))
        base = binarize(prob, PostprocessParams(float(t1), int(s1))).data
        tighter_t = binarize(prob, PostprocessParams(float(t2), int(s1))).data
        tighter_s = binarize(prob, PostprocessParams(float(t1), int(s2))).data
        mono_ok &= not np.any(tighter_t & ~base) and not np.any(tighter_s & ~base)
    ok = const_ok and interior_ok and cover_ok and mono_ok
    verdict("inference suite", ok,
            f"constant stub -> constant map={const_ok}; interior coverage 576={interior_ok}; "
            f"coverage>=1 everywhere={cover_ok}; binarize monotone over 50 maps={mono_ok}",
            time.perf_counter() - t0, 120)


def _check_pairs(masks, tables, pairs):
    _, d, pp, se, hd = tables
    bad = 0
    for i, j in pairs:
        p, g = masks[i], masks[j]
        bad += not (abs(dsc(p, g) - d[i, j]) < 1e-12 and abs(ppv(p, g) - pp[i, j]) < 1e-12
                    and abs(sensitivity(p, g) - se[i, j]) < 1e-12 and abs(hausdorff(p, g) - hd[i, j]) < 1e-9)
    return bad


def test_metrics_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    failures = {}
    n_pairs = 0
    for shape in ((3, 3, 1), (2, 2, 2)):
        tables = oracles.exhaustive_pair_tables(shape)
        masks = tables[0]
        pairs = [(i, j) for i in range(len(masks)) for j in range(len(masks))]
        failures[f"exhaustive {shape}"] = _check_pairs(masks, tables, pairs)
        n_pairs += len(pairs)
    bad = 0
    for _ in range(5000):
        p = rng.random((3, 3, 3)) < rng.uniform(0, 1)
        g = rng.random((3, 3, 3)) < rng.uniform(0, 1)
        bad += not (dsc(p, g) == pytest.approx(oracles.dsc(p, g), abs=1e-12)
                    and ppv(p, g) == pytest.approx(oracles.ppv(p, g), abs=1e-12)
                    and sensitivity(p, g) == pytest.approx(oracles.sensitivity(p, g), abs=1e-12)
                    and hausdorff(p, g) == pytest.approx(oracles.hausdorff(p, g), abs=1e-9))
    failures["random 3x3x3"] = bad
    bad = 0
    for _ in range(100):
        p = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.7)
        g = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.7)
        bad += not (dsc(p, g) == pytest.approx(oracles.dsc(p, g), abs=1e-12)
                    and ppv(p, g) == pytest.approx(oracles.ppv(p, g), abs=1e-12)
                    and sensitivity(p, g) == pytest.approx(oracles.sensitivity(p, g), abs=1e-12)
                    and hausdorff(p, g) == pytest.approx(oracles.hausdorff(p, g), abs=1e-9))
    failures["random 8^3"] = bad
    table1 = combined_score(0.71, 29.5)
    spots = [(combined_score(0.71, 29.5), 0.3874), (combined_score(1.0, 0.0), 0.5),
             (combined_score(0.0, 200.0), 0.0), (combined_score(0.5, 100.0), 0.25)]
    spot_ok = all(abs(a - b) <= 1e-4 for a, b in spots)
    ok = not any(failures.values()) and spot_ok
    verdict("metrics oracle equivalence", ok,
            f"mismatches {failures} ({n_pairs} exhaustive pairs + 5000 + 100 random); "
            f"score(0.71, 29.5)={table1:.5f} (0.3874+-1e-4); spot values ok={spot_ok}",
            time.perf_counter() - t0, 300)


def test_grid_search_oracle():
    t0 = time.perf_counter()
    maps, golds = synthetic_probability_maps(5, shape=(32, 32, 16), seed=11)
    pms = [ProbabilityMap(np.stack([1 - m, m]), np.ones(m.shape, np.int32)) for m in maps]
    params = grid_search(pms, [Mask(g) for g in golds])
    th, s, best = oracles.exhaustive_grid_search(maps, golds, DEFAULT_THRESHOLDS, DEFAULT_MIN_SIZES)
    ok = (params.threshold, params.min_lesion_size) == (th, s)
    verdict("grid-search oracle", ok,
            f"package argmax (Th={params.threshold}, Smin={params.min_lesion_size}) vs exhaustive rescan "
            f"(Th={th}, Smin={s}, score {best:.4f}) over {len(DEFAULT_THRESHOLDS)}x{len(DEFAULT_MIN_SIZES)} grid, 5 cases",
            time.perf_counter() - t0, 120)


# desk-scale schedule: the criterion fixes data, folds, width and patch budget
E2E_TRAIN = TrainConfig(patience=4, max_epochs=12)


def test_end_to_end_desk_run(tmp_path):
    t0 = time.perf_counter()
    manifest = write_synthetic_dataset(SyntheticSpec(n_cases=8, shape=(64, 64, 32), n_modalities=2), tmp_path / "data")
    cfg = PipelineConfig(manifest=str(manifest), output_dir=str(tmp_path / "run"), folds=2, symmetric=True,
                         sampler=SamplerConfig(goal_per_case=500), network=NetworkConfig(base_filters=8),
                         train=E2E_TRAIN)
    result = run_fold_cv(cfg)
    mean_dsc, mean_hd = result.report.mean("dsc"), result.report.mean("hd")
    ok = mean_dsc >= 0.80 and mean_hd <= 10.0
    verdict("end-to-end desk-scale run", ok,
            f"held-out DSC {mean_dsc:.3f} (>=0.80), HD {mean_hd:.2f} voxels (<=10) with "
            f"Th={result.params.threshold}, Smin={result.params.min_lesion_size}",
            time.perf_counter() - t0, 1200)


def test_registration_recovery():
    t0 = time.perf_counter()
    motions = [((0, 0, 0), (5.0, 0, 0)), ((0, 0, 0), (0, -5.0, 0)), ((0, 0, 0), (0, 0, 5.0)),
               ((5.0, 0, 0), (0, 0, 0)), ((0, -5.0, 0), (0, 0, 0)), ((0, 0, 5.0), (0, 0, 0))]
    motions += [(tuple(r), tuple(t)) for r, t in random_motions(14, seed=4)]
    worst_deg = worst_mm = 0.0
    for rot, shift in motions:
        assert rotation_norm_deg(rot) <= 5.0 + 1e-9 and np.linalg.norm(shift) <= 5.0 + 1e-9
        moving, fixed, true = moved_pair(rot, shift)
        angle, dist = recovery_error(rigid_register(moving, fixed), true)
        worst_deg, worst_mm = max(worst_deg, angle), max(worst_mm, dist)
    ok = worst_deg < 1.0 and worst_mm < 0.5
    verdict("registration recovery", ok,
            f"{len(motions)} motions (<=5 mm, <=5 deg): worst rotation error {worst_deg:.3f} deg (<1), "
            f"worst translation error {worst_mm:.3f} mm (<0.5)",
            time.perf_counter() - t0, 180)
