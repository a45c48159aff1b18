import numpy as np
import pytest

from evseg.affine import AffineParams, FlowField
from evseg.events import NormalizedEvents, SensorGeometry, normalize_timestamps
from evseg.layers import LayerLogits
from evseg.objective import (ObjectiveConfig, WarpedEvents, charbonnier_smoothness, contrast_loss, evaluate,
                             loss_gradient, smoothness, timestamp_images, total_loss, warp_events)

G = SensorGeometry(8, 6)


def events(t, x, y, p, g=G):
    return NormalizedEvents(g, np.asarray(t, float), np.asarray(x, np.int64), np.asarray(y, np.int64), np.asarray(p, np.int8), 1000)


def const_flow(u, v, g=G):
    return FlowField(g, np.full(g.shape, float(u)), np.full(g.shape, float(v)))


def test_warp():
    ev = events([0.5], [3], [2], [1])
    z = warp_events(ev, FlowField.zeros(G), 1.0)
    assert z.x[0] == 3 and z.y[0] == 2
    fw = warp_events(ev, const_flow(2, 0), 1.0)
    bw = warp_events(ev, const_flow(2, 0), 0.0)
    assert fw.x[0] == 4 and bw.x[0] == 2 and fw.y[0] == 2


def test_average_timestamp():
    ev = events([0.2, 0.8], [3, 3], [2, 2], [1, 1])
    im = timestamp_images(warp_events(ev, FlowField.zeros(G), 1.0), G)
    assert im.t_plus[2, 3] == pytest.approx(0.5, abs=1e-8)
    assert not im.t_minus.any()


def test_half_pixel_split():
    w = WarpedEvents(np.array([4.5]), np.array([2.0]), np.array([1.0]), np.array([1], np.int8), 1.0)
    im = timestamp_images(w, G)
    assert im.t_plus[2, 4] == pytest.approx(1, abs=1e-8)
    assert im.t_plus[2, 5] == pytest.approx(1, abs=1e-8)
    assert np.count_nonzero(im.occupancy) == 2


def test_off_image_contributions_dropped():
    w = WarpedEvents(np.array([1.0, 100.0]), np.array([1.0, -50.0]), np.array([0.5, 1.0]),
                     np.array([1, 1], np.int8), 1.0)
    im = timestamp_images(w, G)
    assert im.occupancy.sum() == pytest.approx(1)
    assert contrast_loss(im) == pytest.approx(0.25, rel=1e-8)


def test_contrast_values():
    empty = timestamp_images(warp_events(events([], [], [], []), FlowField.zeros(G), 1.0), G)
    assert contrast_loss(empty) == 0
    one = timestamp_images(warp_events(events([0.5], [1], [1], [1]), FlowField.zeros(G), 1.0), G)
    assert contrast_loss(one) == pytest.approx(0.25 / (1 + 1e-9), rel=1e-8)


def test_smoothness_values():
    assert smoothness(const_flow(3, -2)) == pytest.approx(1e-3)
    _, gu, gv = charbonnier_smoothness(np.full((4, 4), 3.0), np.zeros((4, 4)), need_grad=True)
    assert not gu.any() and not gv.any()
    # a 1x2 field with a unit step in both channels: every difference is 1
    val = charbonnier_smoothness(np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]))
    assert val == pytest.approx(np.sqrt(1 + 1e-6))


def test_smoothness_monotone_in_scale():
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=(2, 6, 8))
    base = smoothness(FlowField(G, u, v))
    for s in (1.0, 1.5, 4.0):
        assert smoothness(FlowField(G, s * u, s * v)) >= base - 1e-15


def test_total_symmetry_at_zero_flow():
    rng = np.random.default_rng(1)
    n = 300
    ev = events(np.sort(rng.random(n)), rng.integers(0, 8, n), rng.integers(0, 6, n), rng.choice([-1, 1], n))
    zero = LayerLogits(G, np.zeros((2, 6, 8)))
    b = total_loss(ev, AffineParams.zeros(), AffineParams.zeros(), zero)
    assert b.contrast_fw == b.contrast_bw
    b0 = total_loss(ev, AffineParams.zeros(), AffineParams.zeros(), zero, ObjectiveConfig(lam=0))
    assert b0.total == b0.contrast_fw + b0.contrast_bw
    assert ObjectiveConfig().lam == 0.001


def test_zero_events_zero_gradient():
    ev = events([], [], [], [])
    lg = LayerLogits(G, np.random.default_rng(2).normal(size=(2, 6, 8)))
    g = loss_gradient(ev, AffineParams([1, 0.1, 0, 2, 0, 0.1]), AffineParams.zeros(), lg, ObjectiveConfig(lam=0))
    assert not g.flat().any()


def test_smoothness_gradient_zero_at_constant_flow():
    rng = np.random.default_rng(3)
    n = 100
    ev = events(np.sort(rng.random(n)), rng.integers(0, 8, n), rng.integers(0, 6, n), rng.choice([-1, 1], n))
    lg = LayerLogits(G, np.zeros((2, 6, 8)))
    with_s = loss_gradient(ev, AffineParams.translation(1, 0), AffineParams.zeros(), lg)
    without = loss_gradient(ev, AffineParams.translation(1, 0), AffineParams.zeros(), lg, ObjectiveConfig(lam=0))
    assert np.allclose(with_s.flat(), without.flat(), atol=1e-15)


def _fd_check(ev, p1, p2, lg, cfg, h=1e-6):
    g = evaluate(ev, p1, p2, lg, cfg)[1].flat()
    theta = np.concatenate([p1.coeffs, p2.coeffs, lg.values.ravel()])
    shape = lg.values.shape

    def f(th):
        return evaluate(ev, AffineParams(th[:6]), AffineParams(th[6:12]), LayerLogits(ev.geometry, th[12:].reshape(shape)),
                        cfg, need_grad=False)[0].total

    idx = list(range(12)) + list(np.random.default_rng(0).choice(np.arange(12, theta.size), 30, replace=False))
    for i in idx:
        e = np.zeros_like(theta)
        e[i] = h
        fd = (f(theta + e) - f(theta - e)) / (2 * h)
        assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), abs(g[i])) + 1e-8, i


@pytest.mark.parametrize("kw", [dict(), dict(kappa=0.2), dict(splat_scale=2), dict(smooth_target="layers", lam=0.1)])
def test_gradient_variants(kw):
    rng = np.random.default_rng(4)
    g = SensorGeometry(12, 10)
    n = 150
    ev = events(np.sort(rng.random(n)), rng.integers(0, 12, n), rng.integers(0, 10, n), rng.choice([-1, 1], n), g)
    p1 = AffineParams(rng.normal(0, [1.5, 0.05, 0.05, 1.5, 0.05, 0.05]))
    p2 = AffineParams(rng.normal(0, [1.5, 0.05, 0.05, 1.5, 0.05, 0.05]))
    lg = LayerLogits(g, rng.normal(0.5, 0.8, (2, 10, 12)))
    _fd_check(ev, p1, p2, lg, ObjectiveConfig(**kw))


def test_surrogate_is_continuous_in_flow():
    # the exact loss jumps when an event leaves an integer pixel; kappa > 0 does not
    ev = events([0.0, 1.0], [2, 5], [2, 2], [1, 1])
    lg = LayerLogits(G, np.zeros((2, 6, 8)))
    cfg = ObjectiveConfig(lam=0, kappa=0.1)
    a = total_loss(ev, AffineParams.zeros(), AffineParams.zeros(), lg, cfg).total
    b = total_loss(ev, AffineParams.translation(1e-7, 0), AffineParams.zeros(), lg, cfg).total
    assert abs(a - b) < 1e-5
    ex = ObjectiveConfig(lam=0)
    a = total_loss(ev, AffineParams.zeros(), AffineParams.zeros(), lg, ex).total
    b = total_loss(ev, AffineParams.translation(1e-7, 0), AffineParams.zeros(), lg, ex).total
    assert abs(a - b) > 1e-3


def test_geometry_mismatch():
    ev = events([0.5], [1], [1], [1])
    with pytest.raises(ValueError):
        total_loss(ev, AffineParams.zeros(), AffineParams.zeros(), LayerLogits(SensorGeometry(4, 4), np.zeros((2, 4, 4))))


def test_translation_oracle():
    from evseg.simulator import SceneSpec, make_texture, render_events
    g = SensorGeometry(48, 48)
    spec = SceneSpec(g, make_texture((48, 48), seed=5, sigma=1.5, low=0.05), AffineParams.translation(4, 0),
                     threshold=0.2, dt=2e-3)
    ev, _ = render_events(spec)
    norm = normalize_timestamps(ev)
    span = norm.duration_us / 1e6

    def c(u):
        f = const_flow(u, 0, g)
        return sum(contrast_loss(timestamp_images(warp_events(norm, f, r), g)) for r in (0.0, 1.0))

    assert c(4 * span) < c(0) and c(4 * span) < c(-4 * span)
