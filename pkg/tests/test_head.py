import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltd import autograd as ag
from ltd.errors import ConfigError, DimensionError, NumericError
from ltd.head import (HeadConfig, LTDHeadParams, SelectionResult, compute_ltd, default_layer_range, forward_head,
                      gather_window, predict, select_window)
from ltd.nn import block_param_count
from ltd.train import bce_loss
from gradcheck import check_head_gradients


@pytest.mark.parametrize("depth,expected", [(24, (11, 19, 5)), (8, (2, 6, 3)), (12, (3, 10, 5))])
def test_default_layer_range(depth, expected):
    assert default_layer_range(depth) == expected


def test_candidate_counts():
    assert HeadConfig.default(24, 1024).candidates == 5
    assert HeadConfig.default(8, 32).candidates == 3


def test_toy_parameter_count():
    cfg = HeadConfig.default(8, 32)
    assert cfg.parameter_count() == 15236
    assert LTDHeadParams.init(cfg, 0).parameter_count() == 15236


@settings(max_examples=60, deadline=None)
@given(width=st.sampled_from([8, 16, 24]), lo=st.integers(0, 3), span=st.integers(1, 6), window=st.integers(2, 5),
       shared=st.booleans(), pos=st.booleans(), branch=st.sampled_from(["both", "raw", "ltd"]),
       blocks=st.integers(1, 2), hidden=st.sampled_from([None, 5]))
def test_closed_form_count_matches_shape_table(width, lo, span, window, shared, pos, branch, blocks, hidden):
    hi = lo + max(span, window - 1)
    cfg = HeadConfig(width, lo, hi, window, shared_block=shared, pos_enc=pos, branch=branch,
                     trainable_blocks=blocks, head_hidden=hidden, heads=4).validate()
    assert cfg.parameter_count() == sum(int(np.prod(s)) for s in cfg.parameter_shapes().values())


def test_unshared_block_adds_one_block():
    base = HeadConfig.default(8, 32)
    unshared = dataclasses.replace(base, shared_block=False)
    assert unshared.parameter_count() - base.parameter_count() == block_param_count(32, 128)


def test_branch_ablation_removes_tokens():
    base = set(HeadConfig.default(8, 32).parameter_shapes())
    raw = set(HeadConfig.default(8, 32, branch="raw").parameter_shapes())
    ltd = set(HeadConfig.default(8, 32, branch="ltd").parameter_shapes())
    assert base - raw == {"d_cls", "d_pos"}
    assert base - ltd == {"f_cls", "f_pos"}


def test_no_pos_enc_drops_positions():
    names = set(HeadConfig.default(8, 32, pos_enc=False).parameter_shapes())
    assert "f_pos" not in names and "d_pos" not in names


@pytest.mark.parametrize("kwargs", [dict(window=1), dict(layer_lo=5, layer_hi=3), dict(window=6), dict(tau=0.0),
                                    dict(branch="neither"), dict(layer_hi=8)])
def test_bad_head_configs(kwargs):
    with pytest.raises(ConfigError):
        HeadConfig.default(8, 32, **kwargs)


def test_train_selection_is_exact_one_hot(rng):
    pi = ag.Tensor(rng.normal(size=5))
    sel = select_window(pi, 1.0, "train", rng=rng, batch=500)
    assert set(np.unique(sel.hard)) == {0.0, 1.0}
    assert np.all(sel.hard.sum(-1) == 1.0)
    assert np.array_equal(np.argmax(sel.hard, -1), sel.start_index)


def test_uniform_logits_select_uniformly(rng):
    sel = select_window(ag.Tensor(np.zeros(5)), 1.0, "train", rng=rng, batch=20000)
    freq = np.bincount(sel.start_index, minlength=5) / 20000
    assert np.all(np.abs(freq - 0.2) < 0.02)


def test_infer_selection_ignores_shift():
    pi = np.array([0.1, 0.7, -0.2])
    a = select_window(ag.Tensor(pi), 1.0, "infer")
    b = select_window(ag.Tensor(pi + 123.0), 1.0, "infer")
    assert a.start_index == b.start_index == 1


def test_noise_override_decides_argmax():
    sel = select_window(ag.Tensor(np.zeros(3)), 1.0, "train", batch=2, noise=np.array([[0, 0, 5.0], [5.0, 0, 0]]))
    assert list(sel.start_index) == [2, 0]


def test_gather_returns_exact_slice(rng):
    cfg = HeadConfig.default(8, 32)
    feats = rng.normal(size=(4, 8, 32)).astype(np.float32)
    sel = select_window(ag.Tensor(np.zeros(cfg.candidates)), 1.0, "train", rng=rng, batch=4)
    win = gather_window(feats, sel, cfg)
    for i, s in enumerate(sel.start_index):
        lo = cfg.layer_lo + s
        assert np.array_equal(win.data[i], feats[i, lo:lo + cfg.window])


def test_ltd_rows_are_adjacent_differences():
    w = ag.Tensor(np.array([[1.0, 2.0], [4.0, 0.0], [4.5, -1.0]]))
    np.testing.assert_array_equal(compute_ltd(w).data, [[3.0, -2.0], [0.5, -1.0]])
    with pytest.raises(DimensionError):
        compute_ltd(ag.Tensor(np.ones((1, 2))))


def test_zero_output_layer_gives_zero_logits_and_ln2_loss(rng):
    params = LTDHeadParams.init(HeadConfig.default(8, 32), 0)
    feats = rng.normal(size=(6, 8, 32))
    z = forward_head(feats, params, "train", rng=rng)
    assert np.array_equal(z.data, np.zeros(6, np.float32))
    loss = bce_loss(z, [0, 1, 0, 1, 1, 0])
    assert abs(float(loss.data) - np.log(2)) < 1e-6
    ag.reset_tape()


def test_infer_logits_do_not_depend_on_batch_mates(rng):
    params = LTDHeadParams.init(HeadConfig.default(8, 32), 3)
    params["classifier.fc2.weight"].data[:] = rng.normal(size=(32, 1))
    feats = rng.normal(size=(5, 8, 32)).astype(np.float32)
    with ag.no_grad():
        batch = forward_head(feats, params).data
        perm = forward_head(feats[::-1], params).data[::-1]
        single = np.array([float(forward_head(f, params).data) for f in feats])
    np.testing.assert_allclose(batch, perm, rtol=0, atol=1e-6)
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-6)


def test_predict_threshold_is_strict():
    assert predict(0.0) == (0.5, 0)
    prob, label = predict(-3.0)
    assert abs(prob - 0.04742587317756678) < 1e-12 and label == 0
    assert predict(1e-9)[1] == 1
    with pytest.raises(NumericError):
        predict(float("nan"))


def test_width_mismatch(rng):
    params = LTDHeadParams.init(HeadConfig.default(8, 32), 0)
    with pytest.raises(DimensionError):
        forward_head(rng.normal(size=(2, 8, 16)), params)


@pytest.mark.parametrize("overrides", [dict(), dict(shared_block=False), dict(branch="ltd", pos_enc=False),
                                       dict(branch="raw")])
def test_small_head_gradients(overrides):
    cfg = HeadConfig(8, 1, 4, 2, heads=2, **overrides).validate()
    # h small enough that the O(h^2) truncation term stays below the tolerance
    errors, _ = check_head_gradients(LTDHeadParams.init(cfg, 1), h=1e-5, depth=6)
    assert max(errors.values()) < 1e-5, errors


def test_selection_result_shapes(rng):
    sel = select_window(ag.Tensor(np.zeros(4)), 0.5, "train", rng=rng)
    assert isinstance(sel, SelectionResult)
    assert sel.hard.shape == (4,) and sel.soft.shape == (4,)
