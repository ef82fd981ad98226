import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradsuite
import oracles
from textrefiner import numkit as nk
from textrefiner import objective as obj


def test_cls_two_class_example():
    loss = obj.cls_loss([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [0], tau=1.0).item()
    assert loss == pytest.approx(0.3132616875182228, abs=1e-15)
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_cls_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    q, e = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    lab = rng.integers(0, 5, 4)
    ref = sum(oracles.nll(qi.tolist(), e.tolist(), int(li), 0.01) for qi, li in zip(q, lab)) / 4
    assert obj.cls_loss(q, e, lab, 0.01).item() == pytest.approx(ref, rel=1e-12)


def test_cls_nonnegative_and_small_when_confident():
    e = np.eye(3)
    assert obj.cls_loss(e, e, [0, 1, 2], 0.01).item() < 1e-30
    assert obj.cls_loss(e, e, [1, 2, 0], 0.01).item() > 50


def test_bad_labels():
    with pytest.raises(obj.LabelError):
        obj.cls_loss(np.ones((2, 2)), np.eye(2), [0, 2], 0.01)
    with pytest.raises(obj.LabelError):
        obj.cls_loss(np.ones((2, 2)), np.eye(2), [0], 0.01)


def test_top_k_descending_stable():
    assert obj.top_k_indices([0.1, 0.5, 0.5, 0.9], 3).tolist() == [3, 1, 2]
    assert obj.top_k_indices([1.0, 2.0], 0).tolist() == []
    with pytest.raises(ValueError):
        obj.top_k_indices([1.0], 2)


def test_semantic_pool_selects_topk_and_mean():
    attn = np.array([[0.1, 0.9, 0.5], [0.7, 0.2, 0.3]])
    tokens = np.arange(18.0).reshape(6, 3)
    out = obj.semantic_token_set(tokens, attn, 2).value
    np.testing.assert_array_equal(out[0], tokens[1])
    np.testing.assert_array_equal(out[1], tokens[2])
    np.testing.assert_allclose(out[2], tokens[:3].mean(axis=0))
    np.testing.assert_array_equal(out[3], tokens[3])
    np.testing.assert_array_equal(out[4], tokens[5])
    np.testing.assert_allclose(out[5], tokens[3:].mean(axis=0))


def test_sem_single_label_broadcasts():
    rng = np.random.default_rng(0)
    s, e = rng.standard_normal((4, 3)), rng.standard_normal((2, 3))
    a = obj.sem_loss(s, e, 1, 0.01).item()
    b = obj.sem_loss(s, e, [1, 1, 1, 1], 0.01).item()
    assert a == b


def test_reg_zero_iff_equal():
    e = np.random.default_rng(0).standard_normal((3, 4))
    assert obj.reg_loss(e, e).item() == 0.0
    assert obj.reg_loss(e, e + 0.5).item() == pytest.approx(0.5)
    with pytest.raises(nk.DimensionError):
        obj.reg_loss(e, e[:2])


def test_combine_with_zero_weights_is_cls_exactly():
    cls, sem, reg = (nk.DiffValue([[v]]) for v in (0.37, 5.1, 2.2))
    assert obj.combine(cls, sem, reg, 0.0, 0.0).item() == 0.37
    bd = obj.total_loss(0.37, 5.1, 2.2, 0.0, 0.0)
    assert bd.total == 0.37


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 1), st.floats(0, 100))
def test_total_is_weighted_sum(c, s, r, l1, l2):
    bd = obj.total_loss(c, s, r, l1, l2)
    assert bd.total == pytest.approx(c + l1 * s + l2 * r)
    assert set(bd.as_dict()) == {"cls", "sem", "reg", "total"}


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        obj.total_loss(1, 1, 1, -0.1, 0)
    with pytest.raises(ValueError):
        obj.LossConfig(tau=0)


def test_predict_argmax_lowest_tie():
    pred, probs = obj.predict([[1.0, 1.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], 0.01)
    assert pred.tolist() == [0, 1]
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


@pytest.mark.parametrize("seed", range(10))
def test_gradients_all_terms_all_params(seed):
    errs = gradsuite.max_errors(seed)
    worst = max(errs, key=errs.get)
    assert errs[worst] <= 1e-5, f"{worst}: {errs[worst]:.3e}"
