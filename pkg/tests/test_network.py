import numpy as np
import pytest

from spinectx.network import (DILATION_PRESETS, ModelConfig, ParamStore, architecture,
                              extent_report, forward, grad_cam, init_params, param_count,
                              predict_logits, residual_block, summary_rows)
from spinectx.tensor import Tape, Tensor5
from oracles import hand_param_tally


def test_default_count_in_band():
    n = param_count(ModelConfig())
    assert 1_500_000 <= n <= 1_900_000
    assert n == 1_807_345


@pytest.mark.parametrize("preset", sorted(DILATION_PRESETS))
def test_count_is_independent_of_dilation(preset):
    cfg = ModelConfig(dilation_rates=DILATION_PRESETS[preset])
    assert param_count(cfg) == param_count(ModelConfig())


@pytest.mark.parametrize("widths,bott,branch,up", [
    ((1, 1, 1), 1, 1, 1),
    ((2, 3, 4), 4, 2, 1),
    ((4, 8, 16), 32, 8, 3),
    ((16, 32, 64), 128, 32, 1),
])
def test_count_matches_hand_tally(widths, bott, branch, up):
    cfg = ModelConfig(encoder_widths=widths, bottleneck_width=bott, context_branch_width=branch,
                      up_kernel=up, patch_shape=(8, 8, 8))
    assert param_count(cfg) == hand_param_tally(1, widths, bott, branch, 1, up)
    assert init_params(cfg, 0).count() == param_count(cfg)


def test_minimal_config_tally_by_hand():
    # widths all 1: every block is two 27-weight convs plus two BN pairs
    cfg = ModelConfig(encoder_widths=(1, 1, 1), bottleneck_width=1, context_branch_width=1,
                      patch_shape=(8, 8, 8))
    res_same = 27 + 2 + 27 + 2          # 1 -> 1
    res_proj = 2 * 27 * 1 + 2 + 27 + 2 + 2 + 2  # 2 -> 1 with projection
    encoder = 4 * res_same
    context = 4 * 27 + 4 + 2
    decoder = 3 * (1 + 2 + res_proj)
    head = 1 + 1
    assert param_count(cfg) == encoder + context + decoder + head == 624


def test_layer_table_is_in_forward_order(micro_config):
    names = [layer.name for layer in architecture(micro_config)]
    assert names[0] == "enc1.conv1"
    assert names[-1] == "head"
    assert names.index("context.fuse") < names.index("dec3.up")


def test_forward_shapes(micro_config, micro_params, rng):
    x = rng.standard_normal((2, 1, 16, 8, 24)).astype(np.float32)
    logits, bott = forward(x, micro_config, micro_params)
    assert logits.shape == (2, 1, 16, 8, 24)
    assert bott.shape == (2, 4, 2, 1, 3)
    assert logits.dtype == np.float32


def test_forward_rejects_indivisible_dims(micro_config, micro_params):
    with pytest.raises(ValueError, match="divisible by 8.*'h', 12"):
        forward(np.zeros((1, 1, 8, 12, 8), np.float32), micro_config, micro_params)


def test_infer_mode_is_pure(micro_config, rng):
    params = init_params(micro_config, 1)
    before = {k: v.copy() for k, v in params.buffers.items()}
    x = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    a = predict_logits(x, micro_config, params)
    b = predict_logits(x, micro_config, params)
    assert np.array_equal(a, b)
    assert all(np.array_equal(before[k], params.buffers[k]) for k in before)
    forward(x, micro_config, params, "train")
    assert any(not np.array_equal(before[k], params.buffers[k]) for k in before)


def test_missing_projection_is_rejected(micro_params):
    store = micro_params.copy()
    del store.params["enc1.proj.weight"]
    with pytest.raises(ValueError, match="projection"):
        residual_block(Tensor5(np.zeros((1, 1, 8, 8, 8))), store, "enc1", 1, 2)


@pytest.mark.parametrize("bad", [
    dict(encoder_widths=(4, 8)),
    dict(dilation_rates=(1, 2, 4)),
    dict(dilation_rates=(0, 1, 2, 4)),
    dict(patch_shape=(12, 16, 16)),
    dict(up_kernel=2),
    dict(bottleneck_width=0),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_config_round_trip_and_preset():
    cfg = ModelConfig.from_dict({"preset": "abl-3", "encoder_widths": [4, 8, 16]})
    assert cfg.dilation_rates == (1, 4, 8, 16)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="preset"):
        ModelConfig.from_dict({"preset": "abl-9"})


def test_bottleneck_of_default_patch():
    assert ModelConfig().bottleneck_shape == (8, 16, 16)


def test_extent_report_flags_void():
    rows = extent_report(ModelConfig(dilation_rates=DILATION_PRESETS["abl-3"]))
    assert [r["extent"] for r in rows] == [3, 9, 17, 33]
    assert [r["void"] for r in rows] == [False, False, False, True]
    rows = extent_report(ModelConfig())
    assert not any(r["void"] for r in rows)


def test_summary_rows_sum_to_total():
    cfg = ModelConfig()
    assert sum(r["params"] for r in summary_rows(cfg)) == param_count(cfg)


def test_param_store_astype_and_copy_are_independent(micro_params):
    p64 = micro_params.astype(np.float64)
    assert all(t.dtype == np.float64 for t in p64.params.values())
    c = micro_params.copy()
    c.params["head.bias"].data += 1
    assert not np.array_equal(c.params["head.bias"].data, micro_params.params["head.bias"].data)


def test_grad_cam_range_and_shape(micro_config, micro_params, rng):
    x = rng.standard_normal((2, 1, 16, 16, 8)).astype(np.float32)
    cam = grad_cam(x, micro_config, micro_params)
    assert cam.shape == (2, 16, 16, 8)
    assert cam.min() >= 0 and cam.max() <= 1
    assert all(p.grad is None or not p.grad.any() for p in micro_params.params.values())


def test_grad_cam_needs_capture(micro_config, micro_params):
    cfg = micro_config.replace(capture_bottleneck=False)
    with pytest.raises(ValueError, match="bottleneck"):
        grad_cam(np.zeros((1, 1, 8, 8, 8), np.float32), cfg, micro_params)


def test_tape_accumulates_shared_inputs():
    from spinectx.tensor import add
    a = Tensor5(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
    tape = Tape()
    out = add(a, a, tape)
    tape.backward(out, np.ones_like(out.data))
    assert np.all(a.grad == 2)
    assert len(tape) == 0


def test_head_bias_starts_at_prior(micro_config):
    from spinectx.network import HEAD_PRIOR
    b = init_params(micro_config, 0).params["head.bias"].data
    p = 1 / (1 + np.exp(-b.astype(np.float64)))
    assert np.allclose(p, HEAD_PRIOR, rtol=1e-6)
    assert all(not init_params(micro_config, 0).params[k].data.any()
               for k in init_params(micro_config, 0).params if k.endswith(".beta"))
