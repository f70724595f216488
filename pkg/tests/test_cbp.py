import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wtal_collab.autodiff import Tensor, gradient_check
from wtal_collab.cbp import (CbpModel, classification_loss, default_k, forward_cbp, loss_cls, mil_video_scores,
                             predict_cbp, warmup)
from wtal_collab.checkpoint import checkpoint_bytes
from wtal_collab.errors import DimensionError, ParameterError

from gradcases import cbp_branch_loss


@pytest.fixture
def model():
    return CbpModel(6, 3, d_model=8, blocks=1, heads=2, seed=0)


def test_output_shapes(model, rng):
    P, emb = forward_cbp(model, rng.normal(size=(10, 6)))
    assert P.shape == (10, 3)
    assert emb.shape == (10, 8)
    assert np.all((P.data > 0) & (P.data < 1))


def test_zero_head_gives_half(model, rng):
    model.head.weight.data[:] = 0.0
    model.head.bias.data[:] = 0.0
    assert np.array_equal(predict_cbp(model, rng.normal(size=(5, 6))), np.full((5, 3), 0.5))


def test_head_starts_at_prior(model, rng):
    model.head.weight.data[:] = 0.0
    assert np.allclose(predict_cbp(model, rng.normal(size=(4, 6))), 0.02)


def test_width_mismatch(model):
    with pytest.raises(DimensionError):
        forward_cbp(model, np.zeros((4, 5)))


def test_default_k():
    assert [default_k(T) for T in (1, 8, 9, 128)] == [1, 1, 2, 16]
    assert default_k(50, 3) == 3


def test_equal_pooled_scores_split_evenly():
    assert np.allclose(mil_video_scores(np.full((4, 2), 0.3), 2).data, [0.5, 0.5])


def test_single_frame_pooling_is_identity():
    P = np.array([[0.2, 0.7, 0.4]])
    expect = np.exp(P[0]) / np.exp(P[0]).sum()
    assert np.allclose(mil_video_scores(P, 1).data, expect)
    assert np.allclose(mil_video_scores(P, 1, mode="sigmoid").data, P[0])


def test_pool_size_checked():
    with pytest.raises(ParameterError):
        mil_video_scores(np.zeros((3, 2)), 4)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 4)), elements=st.floats(0, 1)),
       st.integers(0, 2**32 - 1), st.data())
def test_video_scores_ignore_frame_order(P, seed, data):
    k = data.draw(st.integers(1, P.shape[0]))
    perm = np.random.default_rng(seed).permutation(P.shape[0])
    assert np.allclose(mil_video_scores(P, k).data, mil_video_scores(P[perm], k).data, atol=1e-15)


def test_loss_cls_values():
    y = np.array([0, 1, 0])
    assert loss_cls(Tensor([0.0, 1.0, 0.0]), y).item() == pytest.approx(0.0, abs=1e-15)
    assert loss_cls(Tensor([0.25, 0.5, 0.25]), y).item() == pytest.approx(np.log(2))
    # a vanishing positive score is clamped, not infinite
    assert loss_cls(Tensor([1.0, 0.0, 0.0]), y).item() == pytest.approx(-np.log(1e-7))


def test_sigmoid_loss_counts_negatives():
    y = np.array([1, 0])
    expect = -np.log(0.8) - np.log(1 - 0.3)
    assert loss_cls(Tensor([0.8, 0.3]), y, mode="sigmoid").item() == pytest.approx(expect)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(0, 1)), arrays(np.int64, 4, elements=st.integers(0, 1)))
def test_loss_cls_non_negative(y_hat, y):
    assert loss_cls(Tensor(y_hat), y).item() >= 0.0


def test_branch_loss_gradient():
    fn, params = cbp_branch_loss(np.random.default_rng(3))
    assert gradient_check(fn, params) <= 1e-4


def test_warmup_loss_gradient(rng):
    model = CbpModel(3, 2, d_model=4, blocks=1, heads=2, seed=1, window=1)
    feats = rng.uniform(-2, 2, size=(7, 3))
    cfg = type("Cfg", (), {"k": None, "cls_mode": "softmax"})
    fn = lambda: classification_loss(model, feats, np.array([0, 1]), cfg)
    assert gradient_check(fn, list(model.trainable_parameters().values())) <= 1e-4


def test_zero_warmup_leaves_model(tiny_train, fast_cfg):
    cfg = dataclasses.replace(fast_cfg, warmup_iters=0)
    model = CbpModel.from_config(cfg, tiny_train.dim("cbp"), tiny_train.num_classes)
    before = checkpoint_bytes(model.state_dict())
    assert warmup(model, tiny_train, cfg) == []
    assert checkpoint_bytes(model.state_dict()) == before


def _mean_loss(model, dataset, cfg):
    return np.mean([classification_loss(model, dataset.stream(r.video_id, "cbp"), r.labels, cfg).item()
                    for r in dataset])


def test_warmup_lowers_training_loss(tiny_train, fast_cfg):
    cfg = dataclasses.replace(fast_cfg, warmup_iters=30)
    model = CbpModel.from_config(cfg, tiny_train.dim("cbp"), tiny_train.num_classes)
    start = _mean_loss(model, tiny_train, cfg)
    logs = warmup(model, tiny_train, cfg)
    assert len(logs) == 30
    assert _mean_loss(model, tiny_train, cfg) < start


def test_warmup_is_deterministic(tiny_train, fast_cfg):
    states = []
    for _ in range(2):
        model = CbpModel.from_config(fast_cfg, tiny_train.dim("cbp"), tiny_train.num_classes)
        warmup(model, tiny_train, fast_cfg)
        states.append(checkpoint_bytes(model.state_dict()))
    assert states[0] == states[1]
