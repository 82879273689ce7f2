"""Acceptance suite: one pass/fail line per criterion.

Run under pytest (lines are gathered into an "acceptance criteria" summary
section) or directly with ``python tests/test_acceptance.py``.
"""

import filecmp
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES, random_grid  # noqa: E402
from test_citymap import brute_force_map  # noqa: E402
from test_metrics import loop_confusion, random_pair  # noqa: E402

from occrefine import dualflow as df  # noqa: E402
from occrefine.citymap import accumulate_city, assemble, city_argmax, compute_world_bounds  # noqa: E402
from occrefine.cli import main  # noqa: E402
from occrefine.fusion import devoxelize, fuse_window, vote, voxelize_into, VoteAccumulator  # noqa: E402
from occrefine.geometry import Pose  # noqa: E402
from occrefine.kitti_io import (  # noqa: E402
    load_label_map, read_invalid_mask, read_label_grid, write_invalid_mask, write_label_grid,
)
from occrefine.losses import ce_loss, lovasz_loss, softmax  # noqa: E402
from occrefine.metrics import accumulate_confusion, miou, per_class_iou, iou  # noqa: E402
from occrefine.selfcheck import lovasz_has_tie, numeric_grad, random_loss_instance, relative_error  # noqa: E402
from occrefine.synth import NoiseModel, SceneConfig, generate_world, oracle_vote, render_frame  # noqa: E402
from occrefine.voxel import GridSpec  # noqa: E402
from occrefine.weights import WeightProfile, lidar_weight, sensor_weights  # noqa: E402

PROFILES = (WeightProfile.uniform(), WeightProfile.camera(), WeightProfile.lidar())


def record(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def test_01_fusion_matches_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    mismatches = 0
    for k in range(200):
        dims = tuple(int(d) for d in rng.integers(2, 33, size=3))
        spec = GridSpec(dims, tuple(rng.uniform(-4, 0, size=3)), tuple(rng.uniform(0.15, 0.4, size=3)))
        nf = int(rng.integers(1, 12))
        grids = [random_grid(rng, spec, occupancy=0.05) for _ in range(nf)]
        poses = [Pose.random(rng, max_translation=3.0) for _ in range(nf)]
        target = int(rng.integers(nf))
        profile = PROFILES[k % 3]
        got = fuse_window(list(zip(grids, poses)), target, 5, profile)
        want = oracle_vote(grids[max(0, target - 5):target + 6], poses[max(0, target - 5):target + 6],
                           target - max(0, target - 5), profile)
        mismatches += got != want
    elapsed = time.perf_counter() - start
    record(1, "fuse_window equals the loop oracle", mismatches == 0 and elapsed < 60,
           f"{200 - mismatches}/200 identical, {elapsed:.1f}s")


def test_02_round_trip():
    rng = np.random.default_rng(102)
    failures = 0
    for _ in range(100):
        spec = GridSpec(tuple(int(d) for d in rng.integers(1, 24, size=3)), tuple(rng.uniform(-5, 5, size=3)),
                        tuple(rng.uniform(0.1, 0.5, size=3)))
        grid = random_grid(rng, spec, occupancy=rng.uniform(0, 1))
        acc = VoteAccumulator(spec)
        voxelize_into(acc, devoxelize(grid))
        failures += vote(acc) != grid
    record(2, "vote(voxelize(devoxelize(G))) == G", failures == 0, f"{100 - failures}/100 exact")


def test_03_worker_determinism(tmp_path):
    assert main(["synth", str(tmp_path), "--frames", "4", "--seed", "5"]) == 0
    seq = tmp_path / "sequences" / "00"
    outs = {}
    for w in (1, 2, 8):
        assert main(["fuse", str(seq), str(tmp_path / f"fuse{w}"), "-n", "2", "--workers", str(w)]) == 0
        assert main(["citymap", str(seq), str(tmp_path / f"map{w}"), "--chunk-dims", "64", "64", "32",
                     "--ply", "--workers", str(w)]) == 0
        outs[w] = (tmp_path / f"fuse{w}", tmp_path / f"map{w}")
    differing = []
    for w in (2, 8):
        for ref, other in zip(outs[1], outs[w]):
            names = sorted(p.name for p in ref.iterdir())
            if names != sorted(p.name for p in other.iterdir()):
                differing.append(f"{other.name}: file set")
                continue
            _, mismatch, errors = filecmp.cmpfiles(ref, other, names, shallow=False)
            differing += [f"{other.name}/{n}" for n in mismatch + errors]
    n_files = sum(len(list(d.iterdir())) for d in outs[1])
    record(3, "fuse and citymap byte-identical with 1, 2 and 8 workers", not differing,
           f"{n_files} files per run" + (f", differing: {differing}" if differing else ""))


def _street(seed, n_frames=11, step=1.0):
    cfg = SceneConfig.street(seed, n_frames=n_frames, step=step)
    return cfg, generate_world(cfg)


def test_04_noise_recovery():
    start = time.perf_counter()
    gains = []
    for seed in range(20):
        cfg, world = _street(seed)
        rng = np.random.default_rng(seed)
        noisy = [render_frame(world, p, (0.3, 0.1), rng=rng, frame_id=i) for i, p in enumerate(cfg.trajectory)]
        truth = [render_frame(world, p, (0.0, 0.0), frame_id=i) for i, p in enumerate(cfg.trajectory)]
        single = np.mean([miou(accumulate_confusion(f, g))[0] for f, g in zip(noisy, truth)])
        fused = fuse_window(list(zip(noisy, cfg.trajectory)), 5, 5, "uniform")
        gains.append(miou(accumulate_confusion(fused, truth[5]))[0] - single)
    elapsed = time.perf_counter() - start
    worst = min(gains)
    record(4, "fused mIoU beats mean single-frame mIoU by >= 10 pp on 20 seeds", worst >= 10 and elapsed < 120,
           f"smallest gain {worst:.1f} pp, mean {np.mean(gains):.1f} pp, {elapsed:.1f}s")


def test_05_frustum_weighting_beats_uniform():
    camera = WeightProfile.camera()
    noise = NoiseModel(0.3, 0.1, 0.0, far_flip_rate=0.75)
    wins, margins = 0, []
    for seed in range(20):
        cfg, world = _street(seed, step=3.0)
        rng = np.random.default_rng(seed)
        frames = [(render_frame(world, p, noise, frustum=camera, rng=rng, frame_id=i), p)
                  for i, p in enumerate(cfg.trajectory)]
        truth = render_frame(world, cfg.trajectory[5], (0.0, 0.0))
        uniform = miou(accumulate_confusion(fuse_window(frames, 5, 5, "uniform"), truth))[0]
        weighted = miou(accumulate_confusion(fuse_window(frames, 5, 5, camera), truth))[0]
        wins += weighted > uniform
        margins.append(weighted - uniform)
    record(5, "frustum-weighted fusion beats uniform on >= 18/20 seeds", wins >= 18,
           f"{wins}/20 wins, mean margin {np.mean(margins):+.2f} pp")


def test_06_weight_endpoints():
    lidar = WeightProfile.lidar()
    ends = (lidar_weight(0.0, lidar), lidar_weight(lidar.max_range, lidar))
    rng = np.random.default_rng(106)
    pts = rng.uniform((-60, -60, -3), (60, 60, 5), size=(200_000, 3))
    values = set(np.unique(sensor_weights(pts, WeightProfile.camera())).tolist())
    ok = ends == (10.0, 0.1) and values == {1.0, 0.1, 0.01}
    record(6, "weight endpoints and camera levels", ok, f"lidar(0)={ends[0]!r}, lidar(R)={ends[1]!r}, "
           f"camera levels {sorted(values, reverse=True)}")


def test_07_chunking_transparency():
    rng = np.random.default_rng(107)
    frame_spec = GridSpec((12, 10, 6), (0.0, 0.0, 0.0), (0.2, 0.2, 0.2))
    failures = 0
    for _ in range(50):
        poses = [Pose.translation((0.2 * int(rng.integers(0, 15)), 0.2 * int(rng.integers(-5, 6)), 0.0))
                 for _ in range(int(rng.integers(1, 5)))]
        frames = [(random_grid(rng, frame_spec, occupancy=0.4), p) for p in poses]
        chunk_dims = tuple(int(d) for d in rng.integers(1, 13, size=3))
        spec = compute_world_bounds(poses, frame_spec, chunk_dims)
        got = assemble(city_argmax(accumulate_city(frames, spec, "uniform")), spec)
        failures += not np.array_equal(got.labels, brute_force_map(frames, spec))
    record(7, "chunked city argmax equals monolithic argmax", failures == 0, f"{50 - failures}/50 chunkings exact")


def test_08_gradient_checks():
    rng = np.random.default_rng(108)
    worst_ce = worst_lz = 0.0
    lovasz_done = skipped = 0
    for _ in range(100):
        logits, gt = random_loss_instance(rng)
        worst_ce = max(worst_ce, relative_error(ce_loss(logits, gt)[1],
                                                numeric_grad(lambda z: ce_loss(z, gt)[0], logits)))
    while lovasz_done < 100:
        logits, gt = random_loss_instance(rng)
        p = softmax(logits)
        if lovasz_has_tie(p, gt):
            skipped += 1
            continue
        worst_lz = max(worst_lz, relative_error(lovasz_loss(p, gt)[1],
                                                numeric_grad(lambda z: lovasz_loss(z, gt)[0], p)))
        lovasz_done += 1
    record(8, "analytic loss gradients match central differences", max(worst_ce, worst_lz) <= 1e-4,
           f"worst relative error CE {worst_ce:.1e}, Lovasz {worst_lz:.1e}; {skipped} tie instances skipped")


def test_09_kernel_invariants():
    rng = np.random.default_rng(109)
    rows = softmax(rng.normal(size=(500, 19)) * rng.uniform(0.1, 100, size=(500, 1))).sum(axis=1)
    softmax_err = float(np.abs(rows - 1).max())
    split_err = 0.0
    for patch, stride, hw in (((7, 7), (3, 3), (16, 16)), ((7, 7), (3, 3), (13, 22)), ((3, 5), (2, 1), (9, 9))):
        x = rng.normal(size=(2, *hw, 4))
        split_err = max(split_err, float(np.abs(df.soft_composite(df.soft_split(x, patch, stride), hw, patch,
                                                                  stride) - x).max()))
    tokens = rng.normal(size=(2, 4, 4, 32))
    params = df.init_attention(rng, 32)
    params["qkv"] = (np.zeros((32, 96)), np.zeros(96))
    params["out"] = (params["out"][0], np.zeros(32))
    residual_exact = np.array_equal(df.bev_attention(tokens, params, heads=8), tokens)
    ok = softmax_err <= 1e-9 and split_err <= 1e-12 and residual_exact
    record(9, "kernel invariants", ok, f"softmax {softmax_err:.1e}, split/composite {split_err:.1e}, "
           f"zero-QKV residual {'exact' if residual_exact else 'inexact'}")


def _loop_scores(counts):
    k = len(counts) - 1
    tp = sum(counts[g][p] for g in range(1, k + 1) for p in range(1, k + 1))
    fp = sum(counts[0][p] for p in range(1, k + 1))
    fn = sum(counts[g][0] for g in range(1, k + 1))
    geo = 100.0 * tp / (tp + fp + fn)
    per = []
    for c in range(1, k + 1):
        inter = counts[c][c]
        union = sum(counts[c]) + sum(counts[g][c] for g in range(k + 1)) - inter
        per.append(100.0 * inter / union if union else 0.0)
    return geo, per, sum(per) / k


def test_10_metrics_oracle():
    rng = np.random.default_rng(110)
    failures = 0
    for _ in range(100):
        pred, gt = random_pair(rng)
        cm = accumulate_confusion(pred, gt)
        counts, excluded = loop_confusion(pred, gt, 19)
        geo, per, mean = _loop_scores(counts)
        ok = (cm.counts.tolist() == counts and cm.excluded == excluded and iou(cm) == pytest.approx(geo, abs=1e-12)
              and np.allclose(per_class_iou(cm), per, rtol=0, atol=1e-12)
              and miou(cm)[0] == pytest.approx(mean, abs=1e-12))
        failures += not ok
    record(10, "confusion, IoU and mIoU equal the double-loop oracle", failures == 0, f"{100 - failures}/100 pairs")


def test_11_format_fidelity(tmp_path):
    rng = np.random.default_rng(111)
    spec = GridSpec((16, 12, 8))
    raw_ids = np.array(sorted(load_label_map().inverse.values()), dtype="<u2")
    mismatched = 0
    for i in range(20):
        raw = rng.choice(raw_ids, size=spec.num_voxels).astype("<u2").tobytes()
        src, dst = tmp_path / f"{i:06d}.label", tmp_path / f"copy{i}.label"
        src.write_bytes(raw)
        write_label_grid(read_label_grid(src, spec), dst)
        mismatched += dst.read_bytes() != raw
    # handcrafted: byte 0x80 marks voxel (0,0,0); byte 0x01 in position 1 marks linear index 15
    fixture_spec = GridSpec((2, 2, 4))
    (tmp_path / "a.invalid").write_bytes(bytes([0x80, 0x01]))
    mask = read_invalid_mask(tmp_path / "a.invalid", fixture_spec)
    bits_ok = mask.sum() == 2 and mask[0, 0, 0] and mask[1, 1, 3]
    write_invalid_mask(mask, tmp_path / "b.invalid")
    bits_ok &= (tmp_path / "b.invalid").read_bytes() == bytes([0x80, 0x01])
    record(11, "label round trip bytewise and invalid bit order", mismatched == 0 and bool(bits_ok),
           f"{20 - mismatched}/20 label files identical, bit-order fixtures {'ok' if bits_ok else 'wrong'}")


def test_12_scale_smoke(tmp_path):
    ceiling = 4
    start = time.perf_counter()
    cfg, world = _street(0, n_frames=100)
    spec = compute_world_bounds(cfg.trajectory, GridSpec(), (128, 128, 32))
    rng = np.random.default_rng(112)
    frames = ((render_frame(world, p, (0.3, 0.1), rng=rng, frame_id=i), p) for i, p in enumerate(cfg.trajectory))
    acc = accumulate_city(frames, spec, "camera", max_active_chunks=ceiling, spill_dir=tmp_path / "spill")
    n_chunks = sum(1 for _ in city_argmax(acc))
    elapsed = time.perf_counter() - start
    ok = acc.peak_active <= ceiling and n_chunks > ceiling and elapsed < 300
    record(12, "100 full-resolution frames within the active-chunk ceiling", ok,
           f"world {spec.world_spec.dims}, {n_chunks} chunks, peak resident {acc.peak_active}/{ceiling}, "
           f"{elapsed:.1f}s")
    acc.cleanup()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
