import math

import numpy as np
import pytest

from grec.alignment import (
    masked_recovery_loss,
    pairwise_match_scores,
    phrase_features,
    phrase_object_loss,
    phrase_object_map,
    phrase_pooling_matrix,
    text_image_loss,
    global_match_scores,
)
from grec.tensor import ContractError, DimensionError, Tensor, backward, grad_check, sigmoid


def test_text_image_single_pair_is_zero():
    s = Tensor(np.array([[3.7]]))
    assert float(text_image_loss(s, s * 2.0).data[0]) == pytest.approx(0.0, abs=1e-15)


def test_text_image_equal_scores_gives_four_ln2():
    s = Tensor(np.full((2, 2), 0.3))
    out = text_image_loss(s, s)
    np.testing.assert_allclose(out.data, 4 * math.log(2), atol=1e-12)


def test_text_image_matches_direct_formula():
    rng = np.random.default_rng(0)
    st, si = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    expected = np.zeros(3)
    for s in (st, si):
        for i in range(3):
            expected[i] -= s[i, i] - math.log(np.exp(s[i]).sum())
            expected[i] -= s[i, i] - math.log(np.exp(s[:, i]).sum())
    np.testing.assert_allclose(text_image_loss(Tensor(st), Tensor(si)).data, expected, atol=1e-12)


def test_text_image_contract_errors():
    with pytest.raises(ContractError):
        text_image_loss(Tensor(np.zeros((0, 0))), Tensor(np.zeros((0, 0))))
    with pytest.raises(DimensionError):
        text_image_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3))))


def test_phrase_object_uniform_half():
    m, n = 3, 5
    s = Tensor(np.full((m, n), 0.5))
    y = np.random.default_rng(1).integers(0, 2, (m, n))
    assert float(phrase_object_loss(s, y).data) == pytest.approx(m * n * math.log(2), abs=1e-9)


def test_phrase_object_empty_and_mismatch():
    assert float(phrase_object_loss(Tensor(np.zeros((0, 4))), np.zeros((0, 4))).data) == 0.0
    with pytest.raises(DimensionError):
        phrase_object_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


def test_phrase_map_known_value():
    # sigmoid(ln 3) = 0.75
    p = Tensor(np.array([[math.log(3.0)]]))
    o = Tensor(np.array([[1.0]]))
    s = phrase_object_map(p, o, Tensor(np.eye(1)), Tensor(np.eye(1)))
    assert float(s.data[0, 0]) == pytest.approx(0.75)
    with pytest.raises(DimensionError):
        phrase_object_map(p, o, Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3))))


def test_recovery_loss_alpha_zero_has_zero_gradient():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    r = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    loss = masked_recovery_loss(w, r, 0.0)
    assert float(loss.data) == 0.0
    backward(loss)
    assert np.all(w.grad == 0.0) and np.all(r.grad == 0.0)


def test_recovery_loss_identical_is_zero_and_opposite_is_two():
    w = Tensor(np.random.default_rng(3).normal(size=(3, 5)))
    assert float(masked_recovery_loss(w, w * 1.0, 1.0).data) == pytest.approx(0.0, abs=1e-12)
    assert float(masked_recovery_loss(w, -w, 1.0).data) == pytest.approx(2.0, abs=1e-12)


def test_recovery_loss_respects_word_mask():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(2, 4, 6))
    r = w.copy()
    r[:, 3] = -w[:, 3]  # padded word disagrees, must not count
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 0]], dtype=bool)
    np.testing.assert_allclose(masked_recovery_loss(Tensor(w), Tensor(r), [1.0, 1.0], mask).data, 0.0, atol=1e-12)


def test_phrase_features_and_pooling_agree():
    rng = np.random.default_rng(5)
    words = rng.normal(size=(6, 4))
    spans = [(0, 2), (3, 6)]
    direct = phrase_features(Tensor(words), spans).data
    pool = phrase_pooling_matrix([spans], 3, 6)[0]
    np.testing.assert_allclose(pool[:2] @ words, direct)
    assert np.all(pool[2] == 0)
    with pytest.raises(ContractError):
        phrase_features(Tensor(words), [(4, 8)])


def test_single_word_single_object_scores_are_dot_product():
    rng = np.random.default_rng(6)
    o, w = rng.normal(size=(1, 1, 5)), rng.normal(size=(1, 1, 5))
    st, si = pairwise_match_scores(Tensor(o), Tensor(w))
    dot = float(o[0, 0] @ w[0, 0])
    assert float(st.data[0, 0]) == pytest.approx(dot)
    assert float(si.data[0, 0]) == pytest.approx(dot)


def test_single_word_degenerate_attention():
    # with one word the text-side attention is 1, so S_T is the mean object-word dot
    rng = np.random.default_rng(7)
    o, w = rng.normal(size=(1, 4, 5)), rng.normal(size=(1, 1, 5))
    st, _ = pairwise_match_scores(Tensor(o), Tensor(w))
    assert float(st.data[0, 0]) == pytest.approx(float((o[0] @ w[0, 0]).mean()))


def test_pairwise_scores_match_single_pair_function():
    rng = np.random.default_rng(8)
    objs, words = rng.normal(size=(3, 4, 6)), rng.normal(size=(3, 5, 6))
    st, si = pairwise_match_scores(Tensor(objs), Tensor(words))
    eye = Tensor(np.eye(6))
    for i in range(3):
        for t in range(3):
            a, b = global_match_scores(Tensor(objs[i]), Tensor(words[t]), eye, eye)
            assert float(a.data) == pytest.approx(st.data[i, t])
            assert float(b.data) == pytest.approx(si.data[i, t])


def test_padded_words_do_not_change_scores():
    rng = np.random.default_rng(9)
    objs, words = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 0]], dtype=bool)
    a = pairwise_match_scores(Tensor(objs), Tensor(words), mask)
    words2 = words.copy()
    words2[~mask] = rng.normal(size=(int((~mask).sum()), 4)) * 50
    b = pairwise_match_scores(Tensor(objs), Tensor(words2), mask)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.data, y.data, atol=1e-10)


def test_alignment_gradients_small_dims():
    rng = np.random.default_rng(10)
    c, n, k, m, b = 8, 5, 4, 2, 3
    y = (rng.random((m, n)) > 0.5).astype(float)
    w1, w2 = rng.normal(size=(c, 4)) * 0.3, rng.normal(size=(c, 4)) * 0.3
    objs = Tensor(rng.normal(size=(n, c)))
    words = rng.normal(size=(k, c))
    assert grad_check(lambda p: phrase_object_loss(phrase_object_map(p, objs, Tensor(w1), Tensor(w2)), y),
                      Tensor(rng.normal(size=(m, c)))) < 1e-3
    assert grad_check(lambda r: masked_recovery_loss(Tensor(words), r, 1.0), Tensor(rng.normal(size=(k, c)))) < 1e-3
    wb = Tensor(rng.normal(size=(b, k, c)) * 0.5)

    def t2i(o):
        st, si = pairwise_match_scores(o, wb)
        return text_image_loss(st, si).sum()

    assert grad_check(t2i, Tensor(rng.normal(size=(b, n, c)) * 0.5)) < 1e-3


def test_sigmoid_of_ln3():
    assert float(sigmoid(Tensor(math.log(3))).data) == pytest.approx(0.75)
