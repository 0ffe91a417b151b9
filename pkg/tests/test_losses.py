import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selftrain.errors import EmptyBatch, InvalidTemperature, ShapeMismatch
from selftrain.losses import (
    Batch,
    LossSpec,
    PseudoLabelConfig,
    apply_temperature,
    ce_and_grad,
    consistency_loss,
    make_pseudo_labels,
    mixed_loss,
    pixel_ce,
    pseudo_labels_from_logits,
)
from selftrain.numkit import softmax
from selftrain.segmodel import TeacherState
from selftrain.synthgen import IGNORE

from conftest import random_params

# -ln(e^2/(e^2+1)) and e^0.4/(e^0.4+1), mpmath at 30 digits
CE_2_0 = 0.126928011042972496
TS_04 = 0.598687660112452000


def brute_ce(logits, labels):
    """Per-pixel loop, no vectorisation, no shared helpers."""
    total, n = 0.0, 0
    for idx in np.ndindex(labels.shape):
        y = labels[idx]
        if y == IGNORE:
            continue
        z = logits[idx]
        m = max(z)
        lse = m + np.log(sum(np.exp(v - m) for v in z))
        total += lse - z[y]
        n += 1
    return total / n if n else 0.0


def test_uniform_logits_two_classes():
    assert pixel_ce(np.zeros((4, 4, 2)), np.zeros((4, 4), np.uint8)) == pytest.approx(np.log(2), abs=1e-15)


def test_large_margin_limit():
    logits = np.zeros((3, 3, 2))
    logits[..., 0] = 60.0
    assert pixel_ce(logits, np.zeros((3, 3), np.uint8)) < 1e-25


def test_single_pixel_value():
    assert pixel_ce(np.array([[[2.0, 0.0]]]), np.array([[0]], np.uint8)) == pytest.approx(CE_2_0, abs=1e-12)


def test_all_ignore_is_empty():
    loss, grad, empty = ce_and_grad(np.ones((2, 2, 3)), np.full((2, 2), IGNORE, np.uint8))
    assert loss == 0.0 and empty and np.all(grad == 0)


def test_ce_matches_brute_force():
    g = np.random.default_rng(0)
    for _ in range(30):
        logits = g.normal(size=(8, 8, 4)) * 3
        labels = g.integers(0, 4, size=(8, 8)).astype(np.uint8)
        labels[g.random((8, 8)) < 0.25] = IGNORE
        assert abs(pixel_ce(logits, labels) - brute_ce(logits, labels)) < 1e-12


def test_ce_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        pixel_ce(np.zeros((4, 4, 2)), np.zeros((4, 5), np.uint8))


def _batches(seed=0, c=3):
    g = np.random.default_rng(seed)
    lab = Batch(g.normal(size=(2, 8, 8, 3)), g.integers(0, c, (2, 8, 8)).astype(np.uint8))
    pse = Batch(g.normal(size=(2, 8, 8, 3)), g.integers(0, c, (2, 8, 8)).astype(np.uint8))
    return lab, pse


def test_mixed_loss_reduces_to_each_term():
    p = random_params(1)
    lab, pse = _batches()
    assert mixed_loss(lab, pse, p, LossSpec(alpha=1.0)) == mixed_loss(lab, None, p, LossSpec(alpha=1.0))
    l0 = mixed_loss(None, pse, p, LossSpec(alpha=0.0))
    from selftrain.segmodel import forward

    assert l0 == pytest.approx(pixel_ce(forward(p, pse.features), pse.labels) * 1.0, abs=0)
    l1 = mixed_loss(lab, None, p, LossSpec(alpha=1.0))
    assert mixed_loss(lab, pse, p, LossSpec(alpha=0.75)) == pytest.approx(0.75 * l1 + 0.25 * l0, abs=1e-12)


def test_mixed_loss_missing_batches():
    p = random_params(1)
    lab, pse = _batches()
    with pytest.raises(EmptyBatch):
        mixed_loss(None, pse, p, LossSpec(alpha=0.5))
    with pytest.raises(EmptyBatch):
        mixed_loss(lab, None, p, LossSpec(alpha=0.5))


def test_temperature_examples():
    z = np.array([2.0, 0.0])
    np.testing.assert_array_equal(apply_temperature(z, 1.0), z)
    np.testing.assert_allclose(softmax(apply_temperature(z, 0.2)), [TS_04, 1 - TS_04], atol=1e-12)
    with pytest.raises(InvalidTemperature):
        apply_temperature(z, 0.0)
    with pytest.raises(InvalidTemperature):
        PseudoLabelConfig(temperature=-1)


@settings(max_examples=200)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.floats(1e-3, 10))
def test_temperature_preserves_argmax(z, tau):
    z = np.array(z)
    assert np.argmax(apply_temperature(z, tau)) == np.argmax(z)


def test_pseudo_label_thresholds():
    g = np.random.default_rng(3)
    logits = g.normal(size=(6, 6, 4)) * 4
    plain = pseudo_labels_from_logits(logits, PseudoLabelConfig(erase_threshold=0.0))
    np.testing.assert_array_equal(plain, logits.argmax(-1))
    none_kept = pseudo_labels_from_logits(logits, PseudoLabelConfig(erase_threshold=1.0 + 1e-7))
    assert np.all(none_kept == IGNORE)
    lo = pseudo_labels_from_logits(logits, PseudoLabelConfig(erase_threshold=0.5, ts_enabled=False))
    hi = pseudo_labels_from_logits(logits, PseudoLabelConfig(erase_threshold=0.9, ts_enabled=False))
    assert np.all((lo == IGNORE) <= (hi == IGNORE))
    # surviving pixels keep the argmax class regardless of TS
    keep = lo != IGNORE
    np.testing.assert_array_equal(lo[keep], logits.argmax(-1)[keep])


def test_erase_disabled_keeps_everything():
    logits = np.zeros((3, 3, 4))
    out = pseudo_labels_from_logits(logits, PseudoLabelConfig(erase_threshold=0.99, erase_enabled=False))
    assert np.all(out == 0)


def test_make_pseudo_labels_uses_the_model():
    p = random_params(2)
    x = np.random.default_rng(2).normal(size=(5, 8, 8, 3))
    from selftrain.segmodel import forward

    labels = make_pseudo_labels(p, x, PseudoLabelConfig(erase_threshold=0.0), chunk=2)
    np.testing.assert_array_equal(labels, forward(p, x).argmax(-1))


def test_consistency_examples():
    g = np.random.default_rng(4)
    a, b = g.normal(size=(4, 4, 3)), g.normal(size=(4, 4, 3))
    assert consistency_loss(a, a) == 0.0
    assert consistency_loss(a, b) == pytest.approx(consistency_loss(b, a), abs=1e-15)
    assert consistency_loss(a, b) > 0
    # uniform student vs confident teacher, C = 2, hand formula
    student = np.zeros((2, 2, 2))
    teacher = np.zeros((2, 2, 2))
    teacher[..., 0] = 3.0
    pt = np.exp(3.0) / (np.exp(3.0) + 1.0)
    expected = ((0.5 - pt) ** 2 + (0.5 - (1 - pt)) ** 2) / 2
    assert consistency_loss(student, teacher) == pytest.approx(expected, abs=1e-15)
    with pytest.raises(ShapeMismatch):
        consistency_loss(a, b[:2])


def test_consistency_is_nonnegative():
    g = np.random.default_rng(5)
    for _ in range(50):
        a, b = g.normal(size=(3, 3, 4)) * 5, g.normal(size=(3, 3, 4)) * 5
        assert consistency_loss(a, b) >= 0
        assert consistency_loss(a, a + 2.0) < 1e-30  # shift-invariant softmax


def test_mixed_loss_with_consistency_is_affine_in_alpha():
    p, t = random_params(6), TeacherState(random_params(7))
    lab, pse = _batches(6)
    spec = lambda a: LossSpec(alpha=a, consistency_weight=0.5, consistency_enabled=True)
    l1 = mixed_loss(lab, pse, p, spec(1.0), t)
    l0 = mixed_loss(lab, pse, p, spec(0.0), t)
    # the CL term rides along unchanged at every alpha
    cl = l1 - mixed_loss(lab, pse, p, LossSpec(alpha=1.0), t)
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        la = mixed_loss(lab, pse, p, spec(a), t)
        assert la == pytest.approx(a * l1 + (1 - a) * l0, abs=1e-12)
    assert cl > 0
