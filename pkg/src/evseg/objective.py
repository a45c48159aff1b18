"""Event warping, average-timestamp images and the deblurring loss.

Events (normalized to [0, 1] in time) are propagated along the combined flow
to the window end (forward, t_ref = 1) and start (backward, t_ref = 0).  For
each reference time the warped events are splatted bilinearly into one
average-timestamp image per polarity; the loss is the sum of squared
average timestamps divided by the number of occupied pixels.  A Charbonnier
penalty on 4-neighbour flow differences regularizes the field.

``loss_gradient`` returns the exact derivative of the total loss, computed
by hand-written reverse-mode passes.  Floor operations in the splat, the
maxout choice and the occupied-pixel count are held fixed (piecewise
differentiation).
"""
from dataclasses import dataclass, field

import numpy as np

from .affine import AffineParams, FlowField, affine_flow, affine_flow_adjoint
from .events import NormalizedEvents, SensorGeometry
from .layers import (ActivationConfig, LayerLogits, activation_derivative, apply_activation,
                     compose_flow, softmax2, softmax_maxout)

T_REF_FORWARD = 1.0
T_REF_BACKWARD = 0.0
SMOOTH_TARGETS = ("combined", "layers")


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 1e-3
    charbonnier_eps: float = 1e-3
    eps: float = 1e-9
    occupancy_threshold: float = 1e-9
    activation: ActivationConfig = field(default_factory=ActivationConfig)
    smooth_target: str = "combined"
    # > 1 splats onto a grid coarsened by this factor (a widened bilinear
    # kernel); used for coarse-to-fine fitting only.  1 is the exact loss.
    splat_scale: int = 1
    # > 0 replaces eps by kappa in the timestamp average and the occupied
    # pixel count by sum(occ / (occ + kappa)), making the loss continuous in
    # the event positions (fitting surrogate; 0 is the exact loss)
    kappa: float = 0.0

    def __post_init__(self):
        if self.smooth_target not in SMOOTH_TARGETS:
            raise ValueError(f"smooth_target must be one of {SMOOTH_TARGETS}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if int(self.splat_scale) < 1:
            raise ValueError("splat_scale must be >= 1")


@dataclass(frozen=True, eq=False)
class WarpedEvents:
    x: np.ndarray  # float positions, may lie outside the image
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    t_ref: float


@dataclass(frozen=True, eq=False)
class TimestampImages:
    t_plus: np.ndarray
    t_minus: np.ndarray
    occupancy: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    contrast_fw: float
    contrast_bw: float
    smoothness: float
    total: float
    lam: float

    def is_finite(self):
        return all(np.isfinite([self.contrast_fw, self.contrast_bw, self.smoothness, self.total]))


@dataclass(frozen=True, eq=False)
class LossGradient:
    params1: np.ndarray  # (6,)
    params2: np.ndarray  # (6,)
    logits: np.ndarray   # (2, H, W)

    def flat(self):
        return np.concatenate([self.params1, self.params2, self.logits.ravel()])


def warp_events(events: NormalizedEvents, flow: FlowField, t_ref: float) -> WarpedEvents:
    if flow.geometry != events.geometry:
        raise ValueError(f"flow geometry {flow.geometry} does not match events {events.geometry}")
    dt = t_ref - events.t
    return WarpedEvents(events.x + dt * flow.u[events.y, events.x],
                        events.y + dt * flow.v[events.y, events.x],
                        events.t, events.p, float(t_ref))


def _splat_weights(xw, yw, geometry):
    """Bilinear corners of each warped event.

    Returns flat pixel indices, weights, in-image flags and the weight
    derivatives w.r.t. x' and y', each shaped (4, N).
    """
    H, W = geometry.shape
    x0 = np.floor(xw)
    y0 = np.floor(yw)
    fx = xw - x0
    fy = yw - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    cx = np.stack([x0, x0 + 1, x0, x0 + 1])
    cy = np.stack([y0, y0, y0 + 1, y0 + 1])
    wx = np.stack([1 - fx, fx, 1 - fx, fx])
    wy = np.stack([1 - fy, 1 - fy, fy, fy])
    sx = np.array([-1.0, 1.0, -1.0, 1.0])[:, None]
    sy = np.array([-1.0, -1.0, 1.0, 1.0])[:, None]
    inside = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
    idx = np.where(inside, cy * W + cx, 0)
    return idx, wx * wy, inside, sx * wy, wx * sy


def _accumulate(warped, geometry, eps):
    H, W = geometry.shape
    hw = H * W
    idx, w, inside, dwdx, dwdy = _splat_weights(warped.x, warped.y, geometry)
    chan = np.where(warped.p < 0, hw, 0)
    flat = (idx + chan)[inside]
    tt = np.broadcast_to(warped.t, w.shape)
    num = np.bincount(flat, weights=(w * tt)[inside], minlength=2 * hw)
    den = np.bincount(flat, weights=w[inside], minlength=2 * hw)
    T = num / (den + eps)
    return T, den, (idx + chan, inside, dwdx, dwdy)


def timestamp_images(warped: WarpedEvents, geometry: SensorGeometry, eps=1e-9) -> TimestampImages:
    H, W = geometry.shape
    T, den, _ = _accumulate(warped, geometry, eps)
    T = T.reshape(2, H, W)
    den = den.reshape(2, H, W)
    return TimestampImages(T[0], T[1], den[0] + den[1])


def contrast_loss(images: TimestampImages, eps=1e-9, occupancy_threshold=1e-9) -> float:
    count = np.count_nonzero(images.occupancy > occupancy_threshold)
    return float((np.sum(images.t_plus ** 2) + np.sum(images.t_minus ** 2)) / (count + eps))


def _coarse_geometry(geometry, scale):
    if scale == 1:
        return geometry
    return SensorGeometry(max(2, -(-geometry.width // scale)), max(2, -(-geometry.height // scale)))


def _contrast_with_grad(x, y, t, p, uc, vc, t_ref, geometry, cfg, need_grad):
    """Contrast loss at one reference time and its gradient w.r.t. the
    per-event flow samples (uc, vc)."""
    dt = t_ref - t
    scale = int(cfg.splat_scale)
    if scale != 1:
        # pixel centres of a coarse cell average to ((scale - 1) / 2) / scale
        off = (scale - 1) / 2.0
        geometry = _coarse_geometry(geometry, scale)
        x = (x - off) / scale
        y = (y - off) / scale
        dt = dt / scale
    warped = WarpedEvents(x + dt * uc, y + dt * vc, t, p, t_ref)
    kappa = cfg.kappa
    eps = kappa if kappa > 0 else cfg.eps
    T, den, (flat_all, inside, dwdx, dwdy) = _accumulate(warped, geometry, eps)
    hw = geometry.height * geometry.width
    occ = den[:hw] + den[hw:]
    if kappa > 0:
        norm = np.sum(occ / (occ + kappa)) + cfg.eps
    else:
        norm = np.count_nonzero(occ > cfg.occupancy_threshold) + cfg.eps
    sq = np.sum(T * T)
    loss = float(sq / norm)
    if not need_grad:
        return loss, None, None
    gT = 2.0 * T / norm
    gnum = gT / (den + eps)
    gden = -gT * T / (den + eps)
    if kappa > 0:
        gocc = -sq / norm ** 2 * kappa / (occ + kappa) ** 2
        gden = gden + np.concatenate([gocc, gocc])
    gw = np.where(inside, gnum[flat_all] * t + gden[flat_all], 0.0)
    gx = np.sum(gw * dwdx, axis=0)
    gy = np.sum(gw * dwdy, axis=0)
    return loss, gx * dt, gy * dt


def charbonnier_smoothness(u, v, eps=1e-3, need_grad=False):
    """Mean Charbonnier penalty sqrt(d^2 + eps^2) over horizontal and vertical
    neighbour differences of both flow channels."""
    diffs = []
    for a in (u, v):
        diffs.append(a[:, 1:] - a[:, :-1])
        diffs.append(a[1:, :] - a[:-1, :])
    n = sum(d.size for d in diffs)
    if n == 0:
        return (0.0, np.zeros_like(u), np.zeros_like(v)) if need_grad else 0.0
    val = sum(np.sum(np.sqrt(d * d + eps * eps)) for d in diffs) / n
    if not need_grad:
        return float(val)
    grads = []
    for dh, dv in (diffs[0:2], diffs[2:4]):
        g = np.zeros_like(u)
        rh = dh / np.sqrt(dh * dh + eps * eps) / n
        rv = dv / np.sqrt(dv * dv + eps * eps) / n
        g[:, 1:] += rh
        g[:, :-1] -= rh
        g[1:, :] += rv
        g[:-1, :] -= rv
        grads.append(g)
    return float(val), grads[0], grads[1]


def smoothness(flow: FlowField, eps=1e-3) -> float:
    return charbonnier_smoothness(flow.u, flow.v, eps)


def _check_shapes(events, params1, params2, logits):
    if logits.geometry != events.geometry:
        raise ValueError(f"logit geometry {logits.geometry} does not match events {events.geometry}")
    for p in (params1, params2):
        if not isinstance(p, AffineParams):
            raise TypeError("affine parameters must be AffineParams")


def evaluate(events: NormalizedEvents, params1: AffineParams, params2: AffineParams,
             logits: LayerLogits, cfg: ObjectiveConfig = ObjectiveConfig(), need_grad=True):
    """Total loss breakdown and (optionally) its gradient.

    Returns ``(LossBreakdown, LossGradient or None, combined FlowField)``.
    """
    _check_shapes(events, params1, params2, logits)
    geometry = events.geometry
    H, W = geometry.shape
    w1 = affine_flow(params1, geometry)
    w2 = affine_flow(params2, geometry)
    act = apply_activation(logits, cfg.activation)
    masks = softmax_maxout(act)
    wc = compose_flow(masks, w1, w2)

    pix = events.y * W + events.x
    uc = wc.u.ravel()[pix]
    vc = wc.v.ravel()[pix]
    terms = {}
    gu_ev = np.zeros(len(pix))
    gv_ev = np.zeros(len(pix))
    for name, t_ref in (("fw", T_REF_FORWARD), ("bw", T_REF_BACKWARD)):
        loss, gu, gv = _contrast_with_grad(events.x, events.y, events.t, events.p, uc, vc,
                                           t_ref, geometry, cfg, need_grad)
        terms[name] = loss
        if need_grad:
            gu_ev += gu
            gv_ev += gv

    if cfg.smooth_target == "combined":
        sm = charbonnier_smoothness(wc.u, wc.v, cfg.charbonnier_eps, need_grad)
    else:
        s1 = charbonnier_smoothness(w1.u, w1.v, cfg.charbonnier_eps, need_grad)
        s2 = charbonnier_smoothness(w2.u, w2.v, cfg.charbonnier_eps, need_grad)
        sm = (s1[0] + s2[0], s1, s2) if need_grad else s1 + s2
    smooth_val = sm[0] if need_grad else sm
    total = terms["fw"] + terms["bw"] + cfg.lam * smooth_val
    breakdown = LossBreakdown(terms["fw"], terms["bw"], float(smooth_val), float(total), cfg.lam)
    if not need_grad:
        return breakdown, None, wc

    # d total / d combined flow, per pixel
    gu_c = np.bincount(pix, weights=gu_ev, minlength=H * W).reshape(H, W)
    gv_c = np.bincount(pix, weights=gv_ev, minlength=H * W).reshape(H, W)
    g1u = g1v = g2u = g2v = 0.0
    if cfg.smooth_target == "combined":
        gu_c = gu_c + cfg.lam * sm[1]
        gv_c = gv_c + cfg.lam * sm[2]
    else:
        g1u, g1v = cfg.lam * sm[1][1], cfg.lam * sm[1][2]
        g2u, g2v = cfg.lam * sm[2][1], cfg.lam * sm[2][2]

    a0, a1 = masks.values
    g1u = g1u + a0 * gu_c
    g1v = g1v + a0 * gv_c
    g2u = g2u + a1 * gu_c
    g2v = g2v + a1 * gv_c
    g_alpha0 = gu_c * w1.u + gv_c * w1.v
    g_alpha1 = gu_c * w2.u + gv_c * w2.v

    soft = softmax2(act.values)
    # only the kept alpha carries gradient; then through the softmax
    win0 = masks.winner == 0
    g_keep = np.where(win0, g_alpha0, g_alpha1)
    s_keep = np.where(win0, soft[0], soft[1])
    g_act = np.stack([g_keep * s_keep * (win0 - soft[0]),
                      g_keep * s_keep * (~win0 - soft[1])])
    g_logits = g_act * activation_derivative(logits.values, cfg.activation)

    grad = LossGradient(affine_flow_adjoint(g1u, g1v), affine_flow_adjoint(g2u, g2v), g_logits)
    return breakdown, grad, wc


def total_loss(events, params1, params2, logits, cfg: ObjectiveConfig = ObjectiveConfig()) -> LossBreakdown:
    return evaluate(events, params1, params2, logits, cfg, need_grad=False)[0]


def loss_gradient(events, params1, params2, logits, cfg: ObjectiveConfig = ObjectiveConfig()) -> LossGradient:
    return evaluate(events, params1, params2, logits, cfg, need_grad=True)[1]


def warped_event_image(warped: WarpedEvents, geometry, polarity=None) -> np.ndarray:
    """Splatted event count (image of warped events); ``polarity`` in {None, +1, -1}."""
    if polarity is not None:
        keep = warped.p == polarity
        warped = WarpedEvents(warped.x[keep], warped.y[keep], warped.t[keep], warped.p[keep],
                              warped.t_ref)
    idx, w, inside, _, _ = _splat_weights(warped.x, warped.y, geometry)
    img = np.bincount(idx[inside], weights=w[inside], minlength=geometry.height * geometry.width)
    return img.reshape(geometry.shape)


def to_uint8(image, vmax=None) -> np.ndarray:
    """Scale a non-negative image to 0..255 by its maximum (or ``vmax``)."""
    image = np.asarray(image, dtype=np.float64)
    vmax = float(image.max()) if vmax is None else float(vmax)
    if vmax <= 0:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.clip(np.round(255.0 * image / vmax), 0, 255).astype(np.uint8)
