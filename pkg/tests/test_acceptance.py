"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are repeated in
the terminal summary. The trained-phantom criteria share two session
fixtures, so the whole file takes roughly a quarter of an hour on one core.
"""
import csv
import json
import math
import time

import numpy as np
import pytest

from spinectx import cli
from spinectx.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from spinectx.losses import bce_loss, composite_loss, confusion, dice_loss
from spinectx.network import (DILATION_PRESETS, ModelConfig, forward, grad_cam, init_params,
                              param_count)
from spinectx.ops import conv3d_forward, kernel_extent
from spinectx.phantom import PhantomSpec, generate_phantom
from spinectx.pipeline import plan_windows, preprocess, reconstruct, sliding_infer
from spinectx.training import SchedulerState, OptimState, scheduler_step
from spinectx.volume import Volume, read_volume, write_volume

from criteria import criterion
from conftest import DESK_TEST_SEEDS
from gradient_suite import (LOSSES, NETWORK_TOL, PRIMITIVES, TOL, loss_errors, network_errors,
                            primitive_errors)
from oracles import brute_force_blend, hand_param_tally, naive_conv3d, rel_err

pytestmark = pytest.mark.acceptance


@criterion(1, "gradient suite")
def test_c01_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for dtype in (np.float32, np.float64):
        for name in PRIMITIVES:
            errs = primitive_errors(name, dtype)
            assert len(errs) >= 20
            worst[name, dtype.__name__] = max(errs)
            assert max(errs) < TOL[dtype], f"{name} {dtype.__name__}: {max(errs):.2e}"
        for name in LOSSES:
            errs = loss_errors(name, dtype)
            assert max(errs) < TOL[dtype], f"loss {name} {dtype.__name__}: {max(errs):.2e}"
        errs = network_errors(dtype)
        assert len(errs) >= 20
        assert max(errs) < NETWORK_TOL[dtype], f"network {dtype.__name__}: {max(errs):.2e}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 120, f"suite took {elapsed:.0f}s"


@criterion(2, "convolution oracle")
def test_c02_conv_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    cases = [(3, r) for r in (1, 2, 3, 4, 8, 16)] + [(1, 1)]
    for k, r in cases:
        pad = r * (k - 1) // 2
        # "same" padding on a small volume, then no padding on the smallest
        # volume the full dilated kernel fits inside
        for p, side in ((pad, 5), (0, kernel_extent(k, r) + 2)):
            x = rng.standard_normal((1, 2, side, side + 1, side + 2))
            w = rng.standard_normal((3, 2, k, k, k))
            b = rng.standard_normal(3)
            ref = naive_conv3d(x, w, b, dilation=r, padding=p)
            got, _ = conv3d_forward(x, w, b, dilation=r, padding=p)
            assert got.shape == ref.shape
            assert rel_err(got, ref) < 1e-5, (k, r, p)
            got32, _ = conv3d_forward(x.astype(np.float32), w.astype(np.float32),
                                      b.astype(np.float32), dilation=r, padding=p)
            assert rel_err(got32, ref) < 1e-5, (k, r, p, "float32")
    assert time.perf_counter() - t0 < 60


@criterion(3, "architecture shapes")
def test_c03_shapes():
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    x = np.random.default_rng(3).standard_normal((1, 1, 64, 128, 128)).astype(np.float32)
    logits, bott = forward(x, cfg, params)
    assert logits.shape == (1, 1, 64, 128, 128)
    assert bott.shape[2:] == (8, 16, 16)
    assert kernel_extent(3, 8) == 17 and kernel_extent(3, 16) == 33


@criterion(4, "parameter accounting")
def test_c04_params():
    n = param_count(ModelConfig())
    assert 1_500_000 <= n <= 1_900_000, n
    counts = {p: param_count(ModelConfig(dilation_rates=r)) for p, r in DILATION_PRESETS.items()}
    assert set(DILATION_PRESETS) == {"default", "abl-1", "abl-2", "abl-3"}
    assert len(set(counts.values())) == 1
    minimal = ModelConfig(encoder_widths=(1, 1, 1), bottleneck_width=1, context_branch_width=1,
                          patch_shape=(8, 8, 8))
    assert param_count(minimal) == hand_param_tally(1, (1, 1, 1), 1, 1, 1) == 624
    assert init_params(minimal, 0).count() == 624


@criterion(5, "loss identities")
def test_c05_losses():
    rng = np.random.default_rng(5)
    y = (rng.random(500) < 0.2).astype(float)
    assert dice_loss(y.copy(), y)[0] == 0.0
    assert dice_loss(np.zeros(40), np.zeros(40))[0] == 0.0
    assert abs(bce_loss(np.full(77, 0.5), y[:77])[0] - math.log(2)) <= 1e-9
    for _ in range(20):
        p = rng.uniform(0.01, 0.99, 300)
        t = (rng.random(300) < 0.3).astype(float)
        total, g = composite_loss(p, t)
        b, gb = bce_loss(p, t)
        d, gd = dice_loss(p, t)
        assert total == b + d
        assert np.array_equal(g, gb + gd)
    for _ in range(1000):
        n = int(rng.integers(2, 120))
        t = (rng.random(n) < 0.3).astype(float)
        p = rng.uniform(0.01, 0.99, n)
        q = p + rng.uniform(0, 1, n) * (t - p)
        assert composite_loss(q, t)[0] <= composite_loss(p, t)[0] + 1e-12


class _Constant:
    def __init__(self, patch, logit=0.0):
        self.patch_shape = patch
        self.logit = logit

    def predict_logits(self, x):
        return np.full(x.shape, self.logit, np.float32)


@criterion(6, "window reconstruction")
def test_c06_reconstruction():
    rng = np.random.default_rng(6)
    patch = (8, 16, 8)
    for _ in range(12):
        dims = tuple(int(v) for v in rng.integers(3, 49, size=3))
        out = sliding_infer(Volume(rng.random(dims).astype(np.float32)), _Constant(patch))
        assert out.dims == dims
        assert np.max(np.abs(out.data - 0.5)) < 1e-6, dims

    small = (4, 6, 4)
    for _ in range(5):
        dims = tuple(int(v) for v in rng.integers(1, 3 * np.array(small) + 1))
        plan = plan_windows(dims, small)
        values = []

        def fn(p):
            v = rng.standard_normal(p.shape)
            values.append(v)
            return v

        got = reconstruct(np.zeros(dims, np.float32), plan, fn)
        ref = brute_force_blend(plan.padded_dims, small, plan.starts, values, plan.weights)
        assert np.max(np.abs(got - ref[:dims[0], :dims[1], :dims[2]])) < 1e-5

    for _ in range(300):
        dims = tuple(int(v) for v in rng.integers(1, 3 * np.array(small) + 1))
        plan = plan_windows(dims, small)
        hits = np.zeros(plan.padded_dims, np.int32)
        for s in plan.starts:
            hits[tuple(slice(a, a + p) for a, p in zip(s, small))] += 1
        assert hits[:dims[0], :dims[1], :dims[2]].min() >= 1, dims


@criterion(7, "metric identities")
def test_c07_metrics():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        pred = rng.random(n) < rng.random()
        truth = rng.random(n) < rng.random()
        m = confusion(pred, truth)
        assert abs(m.dice - m.f1) <= 1e-12
        assert abs(m.iou - m.dice / (2 - m.dice)) <= 1e-12


@pytest.mark.slow
@criterion(8, "phantom training benchmark")
def test_c08_training(trained_default, trained_narrow):
    print(f"default dice {trained_default.mean_dice:.4f} in {trained_default.total_seconds:.0f}s; "
          f"abl-1 dice {trained_narrow.mean_dice:.4f}")
    assert trained_default.total_seconds < 15 * 60
    assert trained_default.mean_dice >= 0.85, trained_default.mean_dice
    assert trained_default.mean_dice >= trained_narrow.mean_dice, (
        f"default {trained_default.mean_dice:.4f} < abl-1 {trained_narrow.mean_dice:.4f}")


@criterion(9, "scheduler contract")
def test_c09_scheduler():
    optim, sched = OptimState(), SchedulerState(patience=5)
    lrs = [scheduler_step(1.0, sched, optim) for _ in range(7)]
    assert lrs[:6] == [1e-3] * 6 and lrs[6] == 1e-3 * 0.1
    optim, sched = OptimState(), SchedulerState(patience=5)
    assert {scheduler_step(1.0 / k, sched, optim) for k in range(1, 60)} == {1e-3}


@criterion(10, "I/O round trips")
def test_c10_io(tmp_path):
    rng = np.random.default_rng(10)
    data = rng.standard_normal((5, 6, 7)).astype(np.float32)
    write_volume(tmp_path / "r.json", Volume(data, spacing=(1.2, 0.9, 0.9)))
    assert read_volume(tmp_path / "r.f32").data.tobytes() == data.tobytes()

    mask = (rng.random((6, 7, 8)) < 0.4).astype(np.float32)
    write_volume(tmp_path / "m.nii.gz", Volume(mask, kind="binary-mask"))
    assert np.array_equal(read_volume(tmp_path / "m.nii.gz").data, mask)

    cfg = ModelConfig(encoder_widths=(2, 3, 4), bottleneck_width=4, context_branch_width=2,
                      patch_shape=(8, 8, 8))
    save_checkpoint(tmp_path / "a.scru", Checkpoint(cfg, init_params(cfg, 1), {"epoch": 1}))
    save_checkpoint(tmp_path / "b.scru", load_checkpoint(tmp_path / "a.scru"))
    assert (tmp_path / "a.scru").read_bytes() == (tmp_path / "b.scru").read_bytes()


def _cli(*argv):
    return cli.main([str(a) for a in argv])


@criterion(11, "determinism")
def test_c11_determinism(tmp_path, capsys):
    run_cfg = {
        "model": {"encoder_widths": [2, 2, 4], "bottleneck_width": 4,
                  "context_branch_width": 2, "patch_shape": [16, 16, 16]},
        "train": {"epochs": 1, "steps_per_epoch": 2, "batch_size": 2},
        "data": {"phantom": {}, "train_seeds": [1], "val_seeds": [2]},
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(run_cfg))
    vol = generate_phantom(PhantomSpec(seed=11))[0]
    write_volume(tmp_path / "ct.nii.gz", vol)
    for tag in ("a", "b"):
        assert _cli("train", "--config", cfg, "--out", tmp_path / tag, "--seed", 3,
                    "--deterministic") == 0
        ck = tmp_path / tag / "checkpoint.scru"
        assert _cli("infer", "--checkpoint", ck, "--in", tmp_path / "ct.nii.gz",
                    "--out", tmp_path / tag, "--deterministic") == 0
        assert _cli("gradcam", "--checkpoint", ck, "--in", tmp_path / "ct.nii.gz",
                    "--out", tmp_path / tag, "--deterministic") == 0
    capsys.readouterr()
    for f in ("checkpoint.scru", "train_log.csv", "ct_prob.nii.gz", "ct_mask.nii.gz",
              "ct_gradcam.nii.gz"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f

    ck = load_checkpoint(tmp_path / "a" / "checkpoint.scru")
    from spinectx.pipeline import NetworkModel
    model = NetworkModel(ck.config, ck.params)
    image = preprocess(vol)
    outs = [sliding_infer(image, model, threads=t).data for t in (1, 2, 4)]
    assert outs[0].tobytes() == outs[1].tobytes() == outs[2].tobytes()


def _cam_volume(ckpt, image):
    cfg = ckpt.config.replace(capture_bottleneck=True)
    plan = plan_windows(image.dims, cfg.patch_shape)
    return reconstruct(image.data, plan, lambda p: grad_cam(p[None, None], cfg, ckpt.params)[0])


@pytest.mark.slow
@criterion(12, "Grad-CAM sanity")
def test_c12_gradcam(trained_default):
    ratios = []
    for seed in DESK_TEST_SEEDS[:3]:
        vol, mask = generate_phantom(PhantomSpec(seed=seed))
        image = preprocess(vol)
        cam = _cam_volume(trained_default.checkpoint, image)
        assert cam.shape == image.dims
        assert cam.min() >= 0 and cam.max() <= 1
        inside = mask.data > 0.5
        ratios.append(cam[inside].mean() / max(cam[~inside].mean(), 1e-12))
    print("in/out CAM ratios", [round(r, 3) for r in ratios])
    assert np.mean(ratios) > 1.5, ratios


@pytest.mark.slow
@criterion(13, "bench harness")
def test_c13_bench(tmp_path, capsys, trained_default):
    ck = tmp_path / "desk.scru"
    save_checkpoint(ck, trained_default.checkpoint)
    cfg = tmp_path / "bench.json"
    dims = [64, 128, 128]
    cfg.write_text(json.dumps({"phantom": {"dims": dims, "seed": 13}}))
    t0 = time.perf_counter()
    assert _cli("bench", "--config", cfg, "--checkpoint", ck, "--out", tmp_path) == 0
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    print(out)
    assert elapsed < 300, f"bench took {elapsed:.0f}s"
    with open(tmp_path / "bench.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == cli.BENCH_FIELDS
    assert [r["run"] for r in rows] == ["1", "2", "3", "mean"]
    assert all(int(r["peak_bytes"]) > 0 for r in rows)
    expected = len(plan_windows(tuple(dims), trained_default.checkpoint.config.patch_shape))
    assert int(out.split("windows")[1].split()[0]) == expected
