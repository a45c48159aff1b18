"""Randomized invariants (hypothesis)."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evseg.affine import AffineParams, FlowField, affine_flow, flow_linearity_check
from evseg.events import EventSlice, SensorGeometry, normalize_timestamps
from evseg.layers import ActivationConfig, LayerLogits, apply_activation, compose_flow, hard_masks, softmax_maxout
from evseg.metrics import bounding_box, detection_rate, iou
from evseg.objective import contrast_loss, timestamp_images, warp_events
from evseg.voxel import build_voxel_grid

SETTINGS = settings(max_examples=40, deadline=None)


@st.composite
def event_slices(draw, max_n=60):
    w = draw(st.integers(2, 12))
    h = draw(st.integers(2, 12))
    n = draw(st.integers(0, max_n))
    t = np.sort(np.array(draw(st.lists(st.integers(0, 10_000), min_size=n, max_size=n)), dtype=np.int64))
    x = np.array(draw(st.lists(st.integers(0, w - 1), min_size=n, max_size=n)), dtype=np.int64)
    y = np.array(draw(st.lists(st.integers(0, h - 1), min_size=n, max_size=n)), dtype=np.int64)
    p = np.array(draw(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n)), dtype=np.int8)
    return EventSlice(SensorGeometry(w, h), t, x, y, p)


masks = arrays(bool, (9, 11))


@SETTINGS
@given(event_slices(), st.integers(1, 7))
def test_voxel_mass_conserved(s, bins):
    if len(s) == 0 or s.t[0] == s.t[-1]:
        return
    v = build_voxel_grid(s, bins)
    # endpoints fall exactly on the first/last bin centre, so every event contributes its full weight
    np.testing.assert_allclose(v.values.sum(), s.p.astype(float).sum(), atol=1e-9)


@SETTINGS
@given(event_slices())
def test_timestamp_images_bounded(s):
    if len(s) == 0:
        return
    norm = normalize_timestamps(s)
    im = timestamp_images(warp_events(norm, FlowField.zeros(s.geometry), 1.0), s.geometry)
    assert im.t_plus.min() >= 0 and im.t_plus.max() <= 1
    assert im.t_minus.min() >= 0 and im.t_minus.max() <= 1
    assert 0 <= contrast_loss(im) <= 2


@SETTINGS
@given(arrays(float, 6, elements=st.floats(-3, 3)), arrays(float, 6, elements=st.floats(-3, 3)))
def test_affine_flow_linear(a, b):
    assert flow_linearity_check(AffineParams(a), AffineParams(b), SensorGeometry(7, 5))


@SETTINGS
@given(arrays(float, (2, 5, 6), elements=st.floats(-3, 3)), st.sampled_from([10.0, 100.0]))
def test_maxout_masks(values, gamma):
    g = SensorGeometry(6, 5)
    m = softmax_maxout(apply_activation(LayerLogits(g, values), ActivationConfig("leaky_dorelu", gamma)))
    hard = hard_masks(m)
    assert np.all(hard[0] ^ hard[1])
    kept = m.values.max(axis=0)
    assert np.all(kept >= 0.5 - 1e-12) and np.all(kept <= 1)
    assert np.all((m.values == 0).sum(axis=0) == 1)
    w1 = affine_flow(AffineParams.translation(1, 0), g)
    w2 = affine_flow(AffineParams.translation(0, 1), g)
    c = compose_flow(m, w1, w2)
    np.testing.assert_allclose(c.u + c.v, kept)


@SETTINGS
@given(masks, masks)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0 <= v <= 1
    if a.any() and (v == 1) != np.array_equal(a, b):
        raise AssertionError("IoU 1 must mean equal masks")


@SETTINGS
@given(masks, masks, st.integers(0, 5), st.integers(0, 5))
def test_detection_rate_shift_invariant(a, b, dy, dx):
    pa = np.zeros((20, 22), bool)
    pb = np.zeros((20, 22), bool)
    pa[:9, :11], pb[:9, :11] = a, b
    sa = np.roll(np.roll(pa, dy, 0), dx, 1)
    sb = np.roll(np.roll(pb, dy, 0), dx, 1)
    for mode in ("gt_box", "box_iou"):
        assert detection_rate(pa, pb, mode) == detection_rate(sa, sb, mode)


@SETTINGS
@given(masks)
def test_bounding_box_tight(m):
    box = bounding_box(m)
    if not m.any():
        assert box is None
        return
    ys, xs = np.nonzero(m)
    assert np.all(box.contains(xs, ys))
    assert xs.min() == box.x_min and xs.max() == box.x_max
    assert ys.min() == box.y_min and ys.max() == box.y_max
