import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spinectx.losses import (CSV_FIELDS, bce_loss, composite_loss, confusion, dice_loss,
                             mean_row, metrics_from_counts, metrics_row, pooled_row,
                             write_metrics_csv)


def test_dice_zero_at_perfect_prediction(rng):
    y = (rng.random(500) < 0.1).astype(float)
    assert dice_loss(y, y)[0] == pytest.approx(0, abs=1e-15)


def test_dice_zero_on_empty_masks():
    z = np.zeros(64)
    assert dice_loss(z, z)[0] == 0.0


def test_bce_half_is_ln2(rng):
    y = (rng.random(101) < 0.4).astype(float)
    assert abs(bce_loss(np.full(101, 0.5), y)[0] - math.log(2)) < 1e-9


def test_composite_is_exact_sum(rng):
    for _ in range(50):
        p = rng.random(77)
        y = (rng.random(77) < 0.3).astype(float)
        total, g = composite_loss(p, y)
        lb, gb = bce_loss(p, y)
        ld, gd = dice_loss(p, y)
        assert total == lb + ld
        assert np.array_equal(g, gb + gd)


def test_bce_clamp_keeps_loss_finite():
    loss, g = bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert np.isfinite(loss) and loss == pytest.approx(-math.log(1e-7), rel=1e-6)
    assert np.all(g == 0)


@pytest.mark.parametrize("p,y,match", [
    ([], [], "at least one"),
    ([0.1, 0.2], [1], "differ"),
    ([0.1], [0.5], "0 or 1"),
])
def test_loss_input_validation(p, y, match):
    with pytest.raises(ValueError, match=match):
        composite_loss(np.array(p), np.array(y))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 200))
def test_moving_toward_labels_never_increases_loss(seed, n):
    r = np.random.default_rng(seed)
    y = (r.random(n) < 0.3).astype(float)
    p = r.uniform(0.01, 0.99, n)
    t = r.uniform(0, 1, n)
    q = p + t * (y - p)
    assert composite_loss(q, y)[0] <= composite_loss(p, y)[0] + 1e-12


def test_metrics_empty_conventions():
    m = metrics_from_counts(0, 0, 0, 100)
    assert (m.dice, m.iou, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0, 1.0)
    m = metrics_from_counts(0, 5, 0, 95)
    assert m.dice == 0.0 and m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.bool_, st.integers(1, 300)), st.integers(0, 2 ** 31))
def test_dice_f1_iou_identities(pred, seed):
    truth = np.random.default_rng(seed).random(pred.shape) < 0.5
    m = confusion(pred, truth)
    assert abs(m.dice - m.f1) <= 1e-12
    assert abs(m.iou - m.dice / (2 - m.dice)) <= 1e-12


def test_confusion_counts_by_hand():
    pred = np.zeros((8, 8, 8), bool)
    truth = np.zeros((8, 8, 8), bool)
    pred[:4] = True      # 256 voxels
    truth[2:6] = True    # 256 voxels, 128 shared
    m = confusion(pred, truth)
    assert (m.tp, m.fp, m.fn, m.tn) == (128, 128, 128, 512 - 384)
    assert m.dice == pytest.approx(0.5)
    assert m.iou == pytest.approx(1 / 3)


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError, match="shapes"):
        confusion(np.zeros(3), np.zeros(4))


def test_csv_rows():
    a = metrics_row("a", metrics_from_counts(3, 1, 0, 10))
    b = metrics_row("b", metrics_from_counts(0, 0, 0, 14))
    rows = [a, b, mean_row([a, b]), pooled_row([a, b])]
    buf = io.StringIO()
    write_metrics_csv(rows, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0].split(",") == CSV_FIELDS
    assert len(lines) == 5
    assert rows[2]["dice"] == pytest.approx((6 / 7 + 1.0) / 2)
    assert rows[3]["tp"] == 3 and rows[3]["dice"] == pytest.approx(6 / 7)
