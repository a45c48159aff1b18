"""Fixed-step 2D layered-scene event simulator.

A scene is a grayscale background plus alpha-matted sprites, each layer
moving under its own affine model.  The layer displacement at time fraction
``s`` (0 at the start, 1 at the end of the sequence) is ``s * A [1, x, y]``
evaluated at the layer's starting position, i.e. every point moves along
its flow vector at constant speed.  Frames are rendered every ``dt`` seconds
and per-pixel log intensity is compared against a reference level; each
multiple of the contrast threshold ``C`` crossed emits one event whose
timestamp is linearly interpolated within the step.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .affine import AffineParams, FlowField, affine_flow, pixel_grid, save_flow
from .events import EventSlice, SensorGeometry, ensure_dir, save_events, save_mask

GT_MODES = ("sprite_alpha", "flow_threshold")
_CROSSING_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Sprite:
    image: np.ndarray        # (h, w) intensities in (0, 1]
    alpha: np.ndarray        # (h, w) in [0, 1]
    position: tuple          # (x, y) of the sprite's top-left pixel at s = 0
    motion: AffineParams = field(default_factory=AffineParams.zeros)

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if img.ndim != 2 or img.shape != alpha.shape:
            raise ValueError("sprite image and alpha must be 2D arrays of equal shape")
        if np.any(img <= 0):
            raise ValueError("sprite intensities must be > 0")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "alpha", np.clip(alpha, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    geometry: SensorGeometry
    background: np.ndarray
    background_motion: AffineParams = field(default_factory=AffineParams.zeros)
    sprites: tuple = ()
    threshold: float = 0.5
    dt: float = 1e-3
    duration: float = 1.0
    seed: int = 0
    noise_rate: float = 0.0  # uniform noise events per pixel per second

    def __post_init__(self):
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.ndim != 2:
            raise ValueError("background must be a 2D grayscale image")
        if np.any(bg <= 0):
            raise ValueError("background intensities must be > 0")
        if not (self.duration > 0 and self.dt > 0 and self.threshold > 0):
            raise ValueError("duration, dt and threshold must all be > 0")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be >= 0")
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "sprites", tuple(self.sprites))

    def describe(self) -> dict:
        """JSON-friendly summary of the scalar parameters."""
        return {
            "width": self.geometry.width, "height": self.geometry.height,
            "threshold": self.threshold, "dt": self.dt, "duration": self.duration,
            "seed": self.seed, "noise_rate": self.noise_rate,
            "background_shape": list(self.background.shape),
            "background_motion": self.background_motion.tolist(),
            "sprites": [{"shape": list(s.image.shape), "position": [float(v) for v in s.position],
                         "motion": s.motion.tolist()} for s in self.sprites],
        }


@dataclass(frozen=True, eq=False)
class GroundTruth:
    times: tuple             # seconds
    masks: np.ndarray        # (n_times, H, W) bool, sprite_alpha labels
    flows: tuple             # FlowField per time, displacement over the full sequence
    background_params: AffineParams
    sprite_params: tuple

    def at(self, t_ref):
        i = int(np.argmin(np.abs(np.asarray(self.times) - t_ref)))
        return self.masks[i], self.flows[i]


def _source_coords(motion, s, xs, ys):
    """Invert p = p0 + s * A [1, p0] for the layer's starting coordinates p0."""
    a = motion.matrix
    m = np.eye(2) + s * a[:, 1:]
    inv = np.linalg.inv(m)
    qx = xs - s * a[0, 0]
    qy = ys - s * a[1, 0]
    return inv[0, 0] * qx + inv[0, 1] * qy, inv[1, 0] * qx + inv[1, 1] * qy


def _sprite_layer(sprite, s, xs, ys):
    sx, sy = _source_coords(sprite.motion, s, xs, ys)
    lx = sx - sprite.position[0]
    ly = sy - sprite.position[1]
    coords = [ly.ravel(), lx.ravel()]
    img = ndimage.map_coordinates(sprite.image, coords, order=1, mode="constant", cval=1.0)
    alpha = ndimage.map_coordinates(sprite.alpha, coords, order=1, mode="constant", cval=0.0)
    return img.reshape(xs.shape), alpha.reshape(xs.shape)


def render_frame(spec: SceneSpec, s: float) -> np.ndarray:
    """Intensity image at time fraction ``s``; alpha-over compositing, back to front."""
    xs, ys = pixel_grid(spec.geometry)
    bx, by = _source_coords(spec.background_motion, s, xs, ys)
    frame = ndimage.map_coordinates(spec.background, [by.ravel(), bx.ravel()], order=1,
                                    mode="grid-wrap").reshape(xs.shape)
    for sprite in spec.sprites:
        img, alpha = _sprite_layer(sprite, s, xs, ys)
        frame = alpha * img + (1.0 - alpha) * frame
    return frame


def sprite_coverage(spec: SceneSpec, s: float) -> np.ndarray:
    """Max sprite alpha per pixel at time fraction ``s``."""
    xs, ys = pixel_grid(spec.geometry)
    cov = np.zeros(spec.geometry.shape)
    for sprite in spec.sprites:
        _, alpha = _sprite_layer(sprite, s, xs, ys)
        cov = np.maximum(cov, alpha)
    return cov


def render_events(spec: SceneSpec):
    """Simulate the event stream of a scene.  Returns ``(EventSlice, GroundTruth)``."""
    H, W = spec.geometry.shape
    n_steps = max(1, int(round(spec.duration / spec.dt)))
    step_s = 1.0 / n_steps
    step_us = spec.duration * 1e6 / n_steps
    C = spec.threshold

    log_prev = np.log(render_frame(spec, 0.0)).ravel()
    log_ref = log_prev.copy()
    chunks_t, chunks_pix, chunks_p = [], [], []
    for k in range(n_steps):
        log_new = np.log(render_frame(spec, (k + 1) * step_s)).ravel()
        diff = log_new - log_ref
        n_cross = np.floor(np.abs(diff) / C + _CROSSING_TOL).astype(np.int64)
        active = np.flatnonzero(n_cross)
        if active.size:
            counts = n_cross[active]
            pix = np.repeat(active, counts)
            # crossing index j = 1..n within each pixel
            j = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            sign = np.sign(diff[pix])
            level = log_ref[pix] + sign * j * C
            delta = log_new[pix] - log_prev[pix]
            frac = np.clip((level - log_prev[pix]) / delta, 0.0, 1.0)
            chunks_t.append(np.round((k + frac) * step_us).astype(np.int64))
            chunks_pix.append(pix)
            chunks_p.append(sign.astype(np.int8))
            log_ref[active] += np.sign(diff[active]) * counts * C
        log_prev = log_new

    if spec.noise_rate > 0:
        rng = np.random.default_rng(spec.seed)
        n_noise = rng.poisson(spec.noise_rate * H * W * spec.duration)
        chunks_t.append(rng.integers(0, int(round(spec.duration * 1e6)) + 1, n_noise))
        chunks_pix.append(rng.integers(0, H * W, n_noise))
        chunks_p.append(rng.choice(np.array([-1, 1], dtype=np.int8), n_noise))

    if chunks_t:
        t = np.concatenate(chunks_t)
        pix = np.concatenate(chunks_pix)
        p = np.concatenate(chunks_p)
        order = np.lexsort((pix, t))
        t, pix, p = t[order], pix[order], p[order]
    else:
        t = pix = np.zeros(0, dtype=np.int64)
        p = np.zeros(0, dtype=np.int8)
    events = EventSlice(spec.geometry, t, pix % W, pix // W, p)
    return events, ground_truth(spec)


def true_flow(spec: SceneSpec, t_ref: float) -> FlowField:
    """Per-pixel flow of the visible layer at ``t_ref`` seconds (sprite where alpha > 0.5)."""
    geometry = spec.geometry
    bg = affine_flow(spec.background_motion, geometry)
    u, v = bg.u.copy(), bg.v.copy()
    s = t_ref / spec.duration
    xs, ys = pixel_grid(geometry)
    for sprite in spec.sprites:
        _, alpha = _sprite_layer(sprite, s, xs, ys)
        f = affine_flow(sprite.motion, geometry)
        on = alpha > 0.5
        u[on] = f.u[on]
        v[on] = f.v[on]
    return FlowField(geometry, u, v)


def ground_truth_mask(spec: SceneSpec, t_ref: float, mode="sprite_alpha", tau=None) -> np.ndarray:
    if not 0 <= t_ref <= spec.duration:
        raise ValueError(f"t_ref={t_ref} outside [0, {spec.duration}]")
    if mode == "sprite_alpha":
        return sprite_coverage(spec, t_ref / spec.duration) > 0.5
    if mode == "flow_threshold":
        if tau is None:
            raise ValueError("flow_threshold mode requires tau")
        return true_flow(spec, t_ref).magnitude() > tau
    raise ValueError(f"unknown ground-truth mode {mode!r}; choose from {GT_MODES}")


def ground_truth(spec: SceneSpec, fractions=(0.0, 0.5, 1.0)) -> GroundTruth:
    times = tuple(f * spec.duration for f in fractions)
    masks = np.stack([ground_truth_mask(spec, t) for t in times])
    flows = tuple(true_flow(spec, t) for t in times)
    return GroundTruth(times, masks, flows, spec.background_motion,
                       tuple(s.motion for s in spec.sprites))


# -- scene building helpers ---------------------------------------------------

def make_texture(shape, seed=0, sigma=2.0, low=0.15, high=1.0):
    """Smoothed random texture with values in [low, high], periodic at the borders."""
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)
    return low + (high - low) * img


def square_sprite(size, seed=0, sigma=1.5, position=(0, 0), motion=None, low=0.15, high=1.0):
    """Opaque textured square sprite."""
    return Sprite(make_texture((size, size), seed, sigma, low, high), np.ones((size, size)),
                  tuple(float(v) for v in position), motion or AffineParams.zeros())


def two_layer_scene(size=128, background_shift=(6.0, 0.0), sprite_shift=(-8.0, 0.0),
                    sprite_size=24, sprite_position=None, threshold=0.2, dt=1e-3,
                    duration=1.0, seed=0, noise_rate=0.0, texture_sigma=1.5):
    """Textured background and one textured square sprite, both translating."""
    geometry = SensorGeometry(size, size)
    bg = make_texture((size, size), seed=seed, sigma=texture_sigma, low=0.05)
    if sprite_position is None:
        c = (size - sprite_size) / 2.0
        sprite_position = (c - sprite_shift[0] / 2.0, c - sprite_shift[1] / 2.0)
    sprite = square_sprite(sprite_size, seed=seed + 1000, sigma=texture_sigma, low=0.05,
                           position=sprite_position,
                           motion=AffineParams.translation(*sprite_shift))
    return SceneSpec(geometry, bg, AffineParams.translation(*background_shift), (sprite,),
                     threshold, dt, duration, seed, noise_rate)


def full_scale_scene(seed=0):
    """640x480 sensor, C = 0.5, 1 s sequence; fine high-contrast texture so
    the sequence holds more than 200,000 events."""
    geometry = SensorGeometry(640, 480)
    bg = make_texture((480, 640), seed=seed, sigma=1.0, low=0.02)
    sprite = square_sprite(96, seed=seed + 1000, sigma=1.0, low=0.02, position=(292.0, 192.0),
                           motion=AffineParams.translation(-28.0, 0.0))
    return SceneSpec(geometry, bg, AffineParams.translation(20.0, 0.0), (sprite,),
                     threshold=0.5, dt=1e-3, duration=1.0, seed=seed)


def generate_dataset(specs, out_dir, names=None) -> dict:
    """Render each scene and write events, ground truth and a JSON manifest.

    Layout per sequence: ``<name>/events.bin``, ``<name>/gt_mask.png``
    (mid-sequence sprite mask), ``<name>/gt_mask_t{k}.png`` for every
    ground-truth time, ``<name>/gt_flow.f32`` (mid-sequence true flow).
    """
    ensure_dir(out_dir)
    names = names or [f"seq_{i:03d}" for i in range(len(specs))]
    if len(names) != len(specs):
        raise ValueError("names and specs differ in length")
    entries = []
    for name, spec in zip(names, specs):
        seq_dir = ensure_dir(os.path.join(out_dir, name))
        events, gt = render_events(spec)
        save_events(events, os.path.join(seq_dir, "events.bin"), "binary")
        mid = len(gt.times) // 2
        save_mask(gt.masks[mid], os.path.join(seq_dir, "gt_mask.png"))
        mask_files = []
        for k, m in enumerate(gt.masks):
            fn = f"gt_mask_t{k}.png"
            save_mask(m, os.path.join(seq_dir, fn))
            mask_files.append(fn)
        save_flow(gt.flows[mid], os.path.join(seq_dir, "gt_flow.f32"))
        entries.append({
            "name": name,
            "events": f"{name}/events.bin",
            "gt_mask": f"{name}/gt_mask.png",
            "gt_masks": [f"{name}/{fn}" for fn in mask_files],
            "gt_times": list(gt.times),
            "gt_flow": f"{name}/gt_flow.f32",
            "num_events": len(events),
            "seed": spec.seed,
            "scene": spec.describe(),
        })
    manifest = {"sequences": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest
