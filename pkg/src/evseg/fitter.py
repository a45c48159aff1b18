"""Direct per-window fitting of two affine layers and a mask-logit grid.

Adam minimizes the total deblurring loss over the 12 affine coefficients and
the (2, H, W) logit grid.  Internally the affine coefficients are optimized
in centred, scaled pixel coordinates so that a single learning rate suits
both the translation terms and the coordinate-coupled ones; results are
reported in the plain top-left-origin convention.
"""
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .affine import AffineParams, FlowField
from .events import EventSlice, normalize_timestamps
from .layers import ActivationConfig, AlphaMasks, LayerLogits, apply_activation, hard_masks, softmax_maxout
from .metrics import iou
from .objective import LossBreakdown, ObjectiveConfig, evaluate


class FitError(RuntimeError):
    """Raised when the loss stops being finite during a fit."""


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 800
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lam: float = 1e-3
    activation: ActivationConfig = field(default_factory=ActivationConfig)
    seed: int = 0
    init_scale_affine: float = 0.5
    init_scale_coupled: float = 0.005
    init_scale_logits: float = 0.01
    charbonnier_eps: float = 1e-3
    smooth_target: str = "combined"
    # coarse-to-fine splat scales, iterations split evenly; last stage should be 1
    pyramid: tuple = (2, 1)
    # Gaussian sigma (pixels) applied to the logit gradient before each step; 0 disables
    logit_grad_sigma: float = 0.0
    # continuity smoothing of the loss used for the steps (ObjectiveConfig.kappa)
    kappa: float = 0.1
    # logits are held on a grid coarsened by this factor and upsampled by
    # block repetition; 1 optimizes every pixel independently
    logit_cell: int = 1
    # initial logit offset favouring layer 0 (0 = symmetric start)
    init_logit_bias: float = 0.0

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.pyramid or any(int(s) < 1 for s in self.pyramid):
            raise ValueError("pyramid must be a non-empty sequence of scales >= 1")
        if int(self.logit_cell) < 1:
            raise ValueError("logit_cell must be >= 1")

    def objective(self, splat_scale=1, kappa=0.0) -> ObjectiveConfig:
        return ObjectiveConfig(lam=self.lam, charbonnier_eps=self.charbonnier_eps,
                               activation=self.activation, smooth_target=self.smooth_target,
                               splat_scale=int(splat_scale), kappa=kappa)

    def stage_scales(self):
        """Splat scale used at each iteration."""
        n, k = int(self.iterations), len(self.pyramid)
        bounds = [round(n * (i + 1) / k) for i in range(k)]
        return [int(self.pyramid[next(j for j, b in enumerate(bounds) if it < b)])
                for it in range(n)]

    @classmethod
    def original_preset(cls, **overrides):
        """Optimizer settings used to train the original network (lr 1e-5, 400 epochs)."""
        return replace(cls(iterations=400, learning_rate=1e-5), **overrides)


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    params1: AffineParams
    params2: AffineParams
    logits: LayerLogits
    masks: AlphaMasks
    hard: np.ndarray           # (2, H, W) bool
    loss_trace: tuple          # LossBreakdown per iteration, plus the final one
    flow: FlowField            # combined flow at the final parameters
    seed: int

    @property
    def initial_loss(self) -> LossBreakdown:
        return self.loss_trace[0]

    @property
    def final_loss(self) -> LossBreakdown:
        return self.loss_trace[-1]


def _coordinate_transform(geometry):
    """Matrix T with a = T b, mapping centred/scaled coefficients b to plain ones a."""
    cx = (geometry.width - 1) / 2.0
    cy = (geometry.height - 1) / 2.0
    s = max(geometry.width, geometry.height) / 2.0
    blk = np.array([[1.0, -cx / s, -cy / s], [0.0, 1.0 / s, 0.0], [0.0, 0.0, 1.0 / s]])
    t = np.zeros((6, 6))
    t[:3, :3] = blk
    t[3:, 3:] = blk
    return t


def _cell_shape(geometry, cell):
    return (-(-geometry.height // cell), -(-geometry.width // cell))


def _upsample(z, cell, shape):
    if cell == 1:
        return z
    return np.repeat(np.repeat(z, cell, axis=-2), cell, axis=-1)[..., :shape[0], :shape[1]]


def _block_sum(g, cell, coarse):
    if cell == 1:
        return g
    H, W = coarse[0] * cell, coarse[1] * cell
    pad = np.zeros(g.shape[:-2] + (H, W))
    pad[..., :g.shape[-2], :g.shape[-1]] = g
    return pad.reshape(g.shape[:-2] + (coarse[0], cell, coarse[1], cell)).sum(axis=(-3, -1))


def initial_state(geometry, cfg: FitConfig, rng):
    """Random start ``(a1, a2, logits)``; logits live on the ``logit_cell`` grid."""
    scale = np.array([cfg.init_scale_affine, cfg.init_scale_coupled, cfg.init_scale_coupled] * 2)
    a1 = rng.uniform(-1.0, 1.0, 6) * scale
    a2 = rng.uniform(-1.0, 1.0, 6) * scale
    logits = rng.normal(0.0, cfg.init_scale_logits, (2,) + _cell_shape(geometry, int(cfg.logit_cell)))
    logits[0] += cfg.init_logit_bias
    return a1, a2, logits


class Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def fit(events: EventSlice, geometry=None, cfg: FitConfig = FitConfig(), init=None,
        callback=None) -> SegmentationResult:
    """Fit two affine layers and alpha masks to one event window.

    ``init`` optionally overrides the random start with ``(a1, a2, logits)``
    arrays, the logits shaped like the ``logit_cell`` grid.  ``callback(iteration, LossBreakdown)`` is called once per
    evaluated loss.
    """
    if len(events) == 0:
        raise ValueError("cannot fit an empty event window")
    geometry = geometry or events.geometry
    if geometry != events.geometry:
        raise ValueError(f"geometry {geometry} does not match events {events.geometry}")
    norm = normalize_timestamps(events)
    exact = cfg.objective()
    scales = cfg.stage_scales()
    rng = np.random.default_rng(cfg.seed)
    a1, a2, logits = init if init is not None else initial_state(geometry, cfg, rng)

    T = _coordinate_transform(geometry)
    T_inv = np.linalg.inv(T)
    n_aff = 12
    cell = int(cfg.logit_cell)
    coarse = _cell_shape(geometry, cell)
    logits = np.asarray(logits, float)
    if logits.shape != (2,) + coarse:
        raise ValueError(f"initial logits must have shape {(2,) + coarse}, got {logits.shape}")
    theta = np.concatenate([T_inv @ np.asarray(a1, float), T_inv @ np.asarray(a2, float),
                            logits.ravel()])
    opt = Adam(theta.shape, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)

    def unpack(th):
        lg = _upsample(th[n_aff:].reshape((2,) + coarse), cell, geometry.shape)
        return AffineParams(T @ th[:6]), AffineParams(T @ th[6:n_aff]), LayerLogits(geometry, lg)

    trace = []
    for it in range(int(cfg.iterations) + 1):
        p1, p2, lg = unpack(theta)
        need_grad = it < cfg.iterations
        scale = scales[it] if need_grad else 1
        if scale == 1 and cfg.kappa == 0:
            loss, grad, flow = evaluate(norm, p1, p2, lg, exact, need_grad=need_grad)
        else:
            # the trace always holds the exact loss; the step follows the coarse one
            loss, _, flow = evaluate(norm, p1, p2, lg, exact, need_grad=False)
            _, grad, _ = evaluate(norm, p1, p2, lg, cfg.objective(scale, kappa=cfg.kappa))
        if not loss.is_finite():
            raise FitError(f"non-finite loss at iteration {it}: {loss}")
        trace.append(loss)
        if callback is not None:
            callback(it, loss)
        if not need_grad:
            break
        g_logits = grad.logits
        if cfg.logit_grad_sigma > 0:
            g_logits = ndimage.gaussian_filter(g_logits, (0, cfg.logit_grad_sigma, cfg.logit_grad_sigma),
                                               mode="nearest")
        g_logits = _block_sum(g_logits, cell, coarse)
        g = np.concatenate([T.T @ grad.params1, T.T @ grad.params2, g_logits.ravel()])
        if not np.all(np.isfinite(g)):
            raise FitError(f"non-finite gradient at iteration {it}")
        theta = opt.step(theta, g)

    masks = softmax_maxout(apply_activation(lg, cfg.activation))
    return SegmentationResult(p1, p2, lg, masks, hard_masks(masks), tuple(trace), flow, cfg.seed)


def fit_best_of(events, geometry=None, cfg: FitConfig = FitConfig(), seeds=(0, 1, 2)):
    """Run one fit per seed; return ``(best, all_results)`` with best = lowest final total loss."""
    results = [fit(events, geometry, replace(cfg, seed=int(s))) for s in seeds]
    best = min(results, key=lambda r: r.final_loss.total)
    return best, results


def resolve_foreground(result: SegmentationResult, gt_mask) -> int:
    """Layer whose hard mask best overlaps the ground-truth foreground (ties -> 0)."""
    scores = [iou(result.hard[k], gt_mask) for k in range(2)]
    return 1 if scores[1] > scores[0] else 0
