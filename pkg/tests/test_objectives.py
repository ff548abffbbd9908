import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hicropl.encoders import DualEncoder, EncoderConfig, tokenize
from hicropl.errors import ConfigError, DegenerateVectorError, DimensionError, NumericWarning, TemplateError
from hicropl.numcore import Tensor, parameter
from hicropl.objectives import (
    ce_loss,
    consistency_loss,
    cross_entropy_logits,
    fill_template,
    load_templates,
    predict,
    teacher_image_embedding,
    teacher_text_embeddings,
    total_loss,
)

finite = st.floats(-10, 10, allow_nan=False)


# -- prediction -----------------------------------------------------------------------

def test_identical_classes_give_uniform(rng):
    row = rng.normal(size=6)
    p = predict(rng.normal(size=6), np.tile(row, (5, 1))).data
    np.testing.assert_allclose(p, np.full(5, 0.2), atol=1e-15)


def test_aligned_class_dominates():
    text = np.eye(4)
    p = predict(np.array([1.0, 0, 0, 0]), text, tau=0.01).data
    assert p[0] > 0.999
    assert p[0] == pytest.approx(1 / (1 + 3 * math.exp(-100)), abs=1e-15)


@given(arrays(np.float64, (3, 5), elements=finite), arrays(np.float64, (7, 5), elements=finite),
       st.floats(0.005, 2.0))
def test_probabilities_sum_to_one(images, text, tau):
    if (np.linalg.norm(images, axis=1) < 1e-6).any() or (np.linalg.norm(text, axis=1) < 1e-6).any():
        return
    p = predict(images, text, tau).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert (p >= 0).all()


def test_predict_zero_vector_is_degenerate():
    with pytest.raises(DegenerateVectorError):
        predict(np.zeros(3), np.eye(3))


def test_predict_rejects_nonpositive_tau():
    with pytest.raises(ConfigError):
        predict(np.ones(3), np.eye(3), tau=0.0)


def test_predict_width_mismatch():
    with pytest.raises(DimensionError):
        predict(np.ones(3), np.ones((2, 4)))


# -- cross entropy --------------------------------------------------------------------

def test_ce_of_certain_label_is_zero():
    assert ce_loss(np.array([0.0, 1.0, 0.0]), 1).item() == 0.0


@pytest.mark.parametrize("label", range(4))
def test_ce_of_uniform_is_log_n(label):
    assert ce_loss(np.full(4, 0.25), label).item() == pytest.approx(math.log(4), abs=1e-12)


def test_ce_clamps_and_warns():
    with pytest.warns(NumericWarning):
        value = ce_loss(np.array([1.0, 0.0]), 1).item()
    assert value == pytest.approx(-math.log(1e-12))


def test_ce_label_out_of_range():
    with pytest.raises(DimensionError):
        ce_loss(np.full(3, 1 / 3), 3)


def test_logit_ce_matches_probability_ce(rng):
    logits = rng.normal(size=(4, 5))
    labels = np.array([0, 3, 1, 4])
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert cross_entropy_logits(Tensor(logits), labels).item() == pytest.approx(
        ce_loss(p, labels).item(), abs=1e-12)


# -- consistency ----------------------------------------------------------------------

def test_zero_teacher_gives_zero(rng):
    for _ in range(100):
        vp, wp = rng.normal(size=8), rng.normal(size=8)
        assert consistency_loss(np.zeros(8), vp, np.zeros(8), wp).item() == 0.0


def test_anti_parallel_teacher_gives_four(rng):
    for _ in range(100):
        vp, wp = rng.normal(size=8), rng.normal(size=8)
        assert consistency_loss(-2 * vp, vp, -2 * wp, wp).item() == 4.0


def test_consistency_range_on_many_quadruples():
    rng = np.random.default_rng(0)
    n, d = 100_000, 6
    scale = rng.choice([0.1, 1.0, 10.0], size=(4, n, 1))
    v, vp, w, wp = (rng.normal(size=(n, d)) * s for s in scale)
    values = consistency_loss(v, vp, w, wp, reduce=False).data
    assert values.shape == (n,)
    assert values.min() >= 0.0 and values.max() <= 4.0


@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite),
       arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_consistency_bounds_property(v, vp, w, wp):
    try:
        value = consistency_loss(v, vp, w, wp).item()
    except DegenerateVectorError:
        return
    assert 0.0 <= value <= 4.0


def test_consistency_degenerate_sum():
    vp = np.array([1.0, 2.0])
    with pytest.raises(DegenerateVectorError):
        consistency_loss(-vp, vp, np.zeros(2), vp)


def test_l1_and_mse_criteria(rng):
    v, vp, w, wp = (rng.normal(size=(3, 4)) for _ in range(4))
    l1 = consistency_loss(v, vp, w, wp, criterion="l1").item()
    mse = consistency_loss(v, vp, w, wp, criterion="mse").item()
    assert l1 == pytest.approx(np.abs(v - vp).mean() + np.abs(w - wp).mean(), abs=1e-14)
    assert mse == pytest.approx(((v - vp) ** 2).mean() + ((w - wp) ** 2).mean(), abs=1e-14)
    assert consistency_loss(v, v, w, w, criterion="l1").item() == 0.0


def test_unknown_criterion():
    with pytest.raises(ConfigError):
        consistency_loss(np.ones(2), np.ones(2), np.ones(2), np.ones(2), criterion="kl")


def test_consistency_shape_mismatch():
    with pytest.raises(DimensionError):
        consistency_loss(np.ones(2), np.ones(3), np.ones(2), np.ones(2))


def test_consistency_gradient_only_reaches_prompted(rng):
    vp, wp = parameter(rng.normal(size=5)), parameter(rng.normal(size=5))
    v, w = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
    consistency_loss(v, vp, w, wp).backward()
    assert vp.grad is not None and wp.grad is not None
    assert v.grad is None and w.grad is None


# -- total loss -----------------------------------------------------------------------

def test_zero_weight_total_is_ce_exactly():
    assert total_loss(0.731, 0.4, 0.0).total == 0.731


def test_total_arithmetic():
    out = total_loss(1.0, 0.25, 12.0)
    assert out.total == 4.0 and out.ce == 1.0 and out.cons == 0.25 and out.weight == 12.0


def test_total_with_tensors():
    assert total_loss(Tensor(1.0), Tensor(0.25), 12.0).item() == 4.0


def test_negative_weight_rejected():
    with pytest.raises(ConfigError):
        total_loss(1.0, 1.0, -1.0)


# -- teacher embeddings ---------------------------------------------------------------

@pytest.fixture(scope="module")
def frozen():
    return DualEncoder(EncoderConfig(), seed=11).freeze()


def test_packaged_templates_have_slots(templates):
    assert len(templates) >= 2 and all("{}" in t for t in templates)


def test_single_template_equals_normalized_encoding(frozen, vocab):
    emb = teacher_text_embeddings(["red square"], ["a photo of a {}"], frozen, vocab)[0]
    raw = frozen.encode_text(tokenize("a photo of a red square", vocab)).data
    np.testing.assert_allclose(emb, raw / np.linalg.norm(raw), atol=1e-14)


def test_duplicate_templates_change_nothing(frozen, vocab):
    one = teacher_text_embeddings(["blue circle"], ["a small {}"], frozen, vocab)
    three = teacher_text_embeddings(["blue circle"], ["a small {}"] * 3, frozen, vocab)
    np.testing.assert_allclose(one, three, atol=1e-14)


def test_ensemble_is_normalized_mean(frozen, vocab, templates):
    emb = teacher_text_embeddings(["green triangle"], templates, frozen, vocab)[0]
    raw = np.stack([frozen.encode_text(tokenize(t.format("green triangle"), vocab)).data for t in templates])
    mean = raw.mean(axis=0)
    np.testing.assert_allclose(emb, mean / np.linalg.norm(mean), atol=1e-13)


def test_template_without_slot(frozen, vocab):
    with pytest.raises(TemplateError):
        teacher_text_embeddings(["red square"], ["a photo"], frozen, vocab)
    with pytest.raises(TemplateError):
        fill_template("a {0} {1}", "red")


def test_empty_template_file(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("\n\n")
    with pytest.raises(TemplateError):
        load_templates(path)


def test_teacher_image_embedding_is_repeatable(frozen, rng):
    img = rng.uniform(size=(32, 32, 3))
    a, b = teacher_image_embedding(img, frozen), teacher_image_embedding(img, frozen)
    assert np.array_equal(a, b)


def test_teacher_embeddings_leave_weights_untouched(frozen, vocab, templates):
    h = frozen.state_hash()
    teacher_text_embeddings(["red square", "blue circle"], templates, frozen, vocab)
    assert frozen.state_hash() == h and frozen.frozen
