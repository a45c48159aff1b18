"""Command-line entry point: ``evseg <command> ...``.

Commands
--------
simulate     render scenes from a JSON config into a dataset directory
segment      fit two layers to an event window (or every sequence of a manifest)
deblur       write event images before and after warping with a flow
eval         score segmentation bundles against a simulated dataset
voxelize     write the voxel grid of an event window
render-flow  color-wheel PNG of a flow tensor

Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric error.
Log lines go to stderr, written output paths to stdout.
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np
from jsonschema import Draft7Validator
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from . import simulator as sim
from .affine import AffineParams, FlowField, load_flow, save_flow
from .events import (EventFormatError, SensorGeometry, ensure_dir, load_events, load_mask, normalize_timestamps,
                     save_gray, save_mask, take_window)
from .fitter import FitConfig, FitError, fit
from .layers import ActivationConfig
from .metrics import DR_NORMALIZATIONS, aggregate, detection_rate, iou
from .objective import T_REF_FORWARD, contrast_loss, timestamp_images, to_uint8, warp_events, warped_event_image
from .tensorio import TensorFormatError
from .voxel import DEFAULT_BINS, build_voxel_grid, save_voxel_grid

log = logging.getLogger("evseg")

DEFAULT_N_EVENTS = 200_000
DEFAULT_RESTARTS = 2


class UsageError(Exception):
    """Bad arguments or config (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config schemas -----------------------------------------------------------

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec2 = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_vec6 = {"type": "array", "items": _num, "minItems": 6, "maxItems": 6}
_int = {"type": "integer"}

FIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "iterations": {"type": "integer", "minimum": 1},
        "learning_rate": _pos,
        "beta1": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "eps_adam": _pos,
        "lam": {"type": "number", "minimum": 0},
        "activation": {
            "type": "object", "additionalProperties": False,
            "properties": {"kind": {"enum": ["leaky_dorelu", "leaky_relu"]},
                           "gamma": {"type": "number", "exclusiveMinimum": 1}},
        },
        "init_scale_affine": {"type": "number", "minimum": 0},
        "init_scale_coupled": {"type": "number", "minimum": 0},
        "init_scale_logits": {"type": "number", "minimum": 0},
        "init_logit_bias": _num,
        "charbonnier_eps": _pos,
        "smooth_target": {"enum": ["combined", "layers"]},
        "pyramid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "logit_grad_sigma": {"type": "number", "minimum": 0},
        "kappa": {"type": "number", "minimum": 0},
        "logit_cell": {"type": "integer", "minimum": 1},
    },
}

SEGMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "fit": FIT_SCHEMA,
        "n_events": {"type": "integer", "minimum": 1},
        "seed": _int,
        "seeds": {"type": "integer", "minimum": 1},
        "geometry": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 2, "maxItems": 2},
    },
}

_common_scene = {
    "name": {"type": "string", "minLength": 1},
    "preset": {"enum": ["two_layer", "full_scale", "custom"]},
    "seed": _int,
}

TWO_LAYER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": dict(_common_scene, size={"type": "integer", "minimum": 8},
                       background_shift=_vec2, sprite_shift=_vec2,
                       sprite_size={"type": "integer", "minimum": 1}, sprite_position=_vec2,
                       threshold=_pos, dt=_pos, duration=_pos, noise_rate={"type": "number", "minimum": 0},
                       texture_sigma={"type": "number", "minimum": 0}),
}

FULL_SCALE_SCHEMA = {"type": "object", "additionalProperties": False, "properties": dict(_common_scene)}

_texture = {
    "type": "object", "additionalProperties": False,
    "properties": {"seed": _int, "sigma": {"type": "number", "minimum": 0},
                   "low": _pos, "high": _pos},
}

CUSTOM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["width", "height", "background"],
    "properties": dict(
        _common_scene,
        width={"type": "integer", "minimum": 2},
        height={"type": "integer", "minimum": 2},
        background={"type": "object", "additionalProperties": False,
                    "properties": {"image": {"type": "string"}, "texture": _texture}},
        background_motion=_vec6,
        sprites={"type": "array", "items": {
            "type": "object", "additionalProperties": False, "required": ["position"],
            "properties": {"image": {"type": "string"}, "size": {"type": "integer", "minimum": 1},
                           "texture": _texture, "position": _vec2, "motion": _vec6},
        }},
        threshold=_pos, dt=_pos, duration=_pos, noise_rate={"type": "number", "minimum": 0},
    ),
}

SIMULATE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["sequences"],
    "properties": {"seed": _int, "sequences": {"type": "array", "minItems": 1, "items": {"type": "object"}}},
}

_SCENE_SCHEMAS = {"two_layer": TWO_LAYER_SCHEMA, "full_scale": FULL_SCALE_SCHEMA, "custom": CUSTOM_SCHEMA}


def _field_path(prefix, error):
    parts = [prefix] if prefix else []
    for p in error.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts).lstrip(".") or "<root>"


def validate(doc, schema, prefix=""):
    errors = sorted(Draft7Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise UsageError(f"config field {_field_path(prefix, e)}: {e.message}")


def read_config(path, schema):
    if path is None:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from None
    validate(doc, schema)
    return doc


# -- scenes from config -------------------------------------------------------

def _load_image(path, field, base_dir):
    full = path if os.path.isabs(path) else os.path.join(base_dir, path)
    if not os.path.isfile(full):
        raise UsageError(f"config field {field}: image file not found: {path}")
    img = np.asarray(Image.open(full).convert("L"), dtype=np.float64)
    return (img + 1.0) / 256.0  # strictly positive intensities


def _texture(shape, spec, seed):
    spec = spec or {}
    return sim.make_texture(shape, seed=spec.get("seed", seed), sigma=spec.get("sigma", 1.5),
                            low=spec.get("low", 0.05), high=spec.get("high", 1.0))


def scene_from_config(entry, index, base_dir, seed_override=None) -> sim.SceneSpec:
    field = f"sequences[{index}]"
    preset = entry.get("preset", "two_layer")
    if preset not in _SCENE_SCHEMAS:
        raise UsageError(f"config field {field}.preset: unknown preset {preset!r}")
    validate(entry, _SCENE_SCHEMAS[preset], field)
    seed = entry.get("seed", index) if seed_override is None else seed_override + index
    if preset == "full_scale":
        return sim.full_scale_scene(seed)
    if preset == "two_layer":
        kw = {k: v for k, v in entry.items() if k not in ("name", "preset", "seed")}
        for k in ("background_shift", "sprite_shift", "sprite_position"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return sim.two_layer_scene(seed=seed, **kw)

    geometry = SensorGeometry(entry["width"], entry["height"])
    bg_cfg = entry["background"]
    if "image" in bg_cfg:
        bg = _load_image(bg_cfg["image"], f"{field}.background.image", base_dir)
    else:
        bg = _texture(geometry.shape, bg_cfg.get("texture"), seed)
    sprites = []
    for j, sp in enumerate(entry.get("sprites", [])):
        sfield = f"{field}.sprites[{j}]"
        if "image" in sp:
            img = _load_image(sp["image"], f"{sfield}.image", base_dir)
        else:
            size = sp.get("size", 24)
            img = _texture((size, size), sp.get("texture"), seed + 1000 + j)
        sprites.append(sim.Sprite(img, np.ones_like(img), tuple(sp["position"]),
                                  AffineParams(sp.get("motion", [0.0] * 6))))
    try:
        return sim.SceneSpec(geometry, bg, AffineParams(entry.get("background_motion", [0.0] * 6)),
                             tuple(sprites), threshold=entry.get("threshold", 0.2), dt=entry.get("dt", 1e-3),
                             duration=entry.get("duration", 1.0), seed=seed,
                             noise_rate=entry.get("noise_rate", 0.0))
    except ValueError as e:
        raise UsageError(f"config field {field}: {e}") from None


# -- commands -------------------------------------------------------------------

def cmd_simulate(args):
    doc = read_config(args.config, SIMULATE_SCHEMA)
    if not doc:
        raise UsageError("simulate needs --config")
    base_dir = os.path.dirname(os.path.abspath(args.config))
    seed = args.seed if args.seed is not None else doc.get("seed")
    entries = doc["sequences"]
    specs = [scene_from_config(e, i, base_dir, seed) for i, e in enumerate(entries)]
    names = [e.get("name", f"seq_{i:03d}") for i, e in enumerate(entries)]
    if len(set(names)) != len(names):
        raise UsageError("config field sequences: sequence names must be unique")
    for name, spec in zip(names, specs):
        log.info("simulating %s (%dx%d)", name, spec.geometry.width, spec.geometry.height)
    sim.generate_dataset(specs, args.out, names)
    print(os.path.join(args.out, "manifest.json"))
    return 0


def fit_config_from(doc, args) -> FitConfig:
    kw = dict(doc.get("fit", {}))
    act = dict(kw.pop("activation", {}))
    if args.activation is not None:
        act["kind"] = args.activation
    if args.gamma is not None:
        act["gamma"] = args.gamma
    if args.lam is not None:
        kw["lam"] = args.lam
    if args.iterations is not None:
        kw["iterations"] = args.iterations
    if "pyramid" in kw:
        kw["pyramid"] = tuple(kw["pyramid"])
    try:
        return FitConfig(activation=ActivationConfig(**act), **kw)
    except ValueError as e:
        raise UsageError(f"fit config: {e}") from None


def _geometry_arg(args, doc):
    g = args.geometry or doc.get("geometry")
    return SensorGeometry(*g) if g else None


def write_bundle(result, out_dir, cfg, extra=None):
    ensure_dir(out_dir)
    save_mask(result.hard[0], os.path.join(out_dir, "layer0.png"))
    save_mask(result.hard[1], os.path.join(out_dir, "layer1.png"))
    save_flow(result.flow, os.path.join(out_dir, "flow.f32"))
    with open(os.path.join(out_dir, "trace.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "contrast_fw", "contrast_bw", "smoothness", "total"])
        for i, b in enumerate(result.loss_trace):
            w.writerow([i, repr(b.contrast_fw), repr(b.contrast_bw), repr(b.smoothness), repr(b.total)])
    params = {
        "seed": result.seed,
        "params1": result.params1.tolist(),
        "params2": result.params2.tolist(),
        "initial_loss": dataclasses.asdict(result.initial_loss),
        "final_loss": dataclasses.asdict(result.final_loss),
        "fit_config": dataclasses.asdict(cfg),
    }
    params.update(extra or {})
    with open(os.path.join(out_dir, "params.json"), "w") as f:
        json.dump(params, f, indent=2)
    return out_dir


def segment_one(events, cfg, out_dir, seeds, extra):
    """Fit once per seed; write seed sub-bundles (if several) and the best bundle."""
    results = []
    for s in seeds:
        c = dataclasses.replace(cfg, seed=int(s))
        log.info("fitting %d events, seed %d, %d iterations", len(events), s, c.iterations)
        r = fit(events, cfg=c)
        log.info("seed %d: loss %.6f -> %.6f", s, r.initial_loss.total, r.final_loss.total)
        if len(seeds) > 1:
            write_bundle(r, os.path.join(out_dir, f"seed_{s}"), c, extra)
        results.append((r, c))
    best, best_cfg = min(results, key=lambda rc: rc[0].final_loss.total)
    summary = dict(extra)
    summary["best_seed"] = best.seed
    summary["runs"] = [{"seed": r.seed, "final_total": r.final_loss.total} for r, _ in results]
    return write_bundle(best, out_dir, best_cfg, summary)


def cmd_segment(args):
    doc = read_config(args.config, SEGMENT_SCHEMA)
    cfg = fit_config_from(doc, args)
    n_events = args.n_events or doc.get("n_events", DEFAULT_N_EVENTS)
    base_seed = args.seed if args.seed is not None else doc.get("seed", 0)
    n_seeds = args.seeds or doc.get("seeds", DEFAULT_RESTARTS)
    seeds = list(range(base_seed, base_seed + n_seeds))

    if args.manifest:
        manifest = _read_manifest(args.manifest)
        root = os.path.dirname(os.path.abspath(args.manifest))
        jobs = [(e["name"], os.path.join(root, e["events"])) for e in manifest["sequences"]]
        outs = [(name, os.path.join(args.out, name)) for name, _ in jobs]
    elif args.events:
        jobs = [(None, args.events)]
        outs = [(None, args.out)]
    else:
        raise UsageError("segment needs an events file or --manifest")

    geometry = _geometry_arg(args, doc)
    for (name, path), (_, out_dir) in zip(jobs, outs):
        events = take_window(load_events(path, geometry=geometry), n_events)
        extra = {"events": os.path.abspath(path), "n_events": len(events)}
        if name:
            extra["name"] = name
        print(segment_one(events, cfg, out_dir, seeds, extra))
    return 0


def _read_manifest(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise UsageError(f"manifest not found: {path}") from None


def event_image_pair(events, flow, t_ref=T_REF_FORWARD):
    """Unwarped and warped event-count images of one window."""
    norm = normalize_timestamps(events)
    zero = FlowField.zeros(events.geometry)
    before = warped_event_image(warp_events(norm, zero, t_ref), events.geometry)
    after = warped_event_image(warp_events(norm, flow, t_ref), events.geometry)
    return before, after


def cmd_deblur(args):
    doc = read_config(args.config, SEGMENT_SCHEMA)
    geometry = _geometry_arg(args, doc)
    events = take_window(load_events(args.events, geometry=geometry),
                         args.n_events or doc.get("n_events", DEFAULT_N_EVENTS))
    if args.flow:
        if not os.path.isfile(args.flow):
            raise UsageError(f"flow file not found: {args.flow}")
        flow = load_flow(args.flow)
        if flow.geometry != events.geometry:
            raise UsageError(f"flow geometry {flow.geometry} does not match events {events.geometry}")
    else:
        cfg = fit_config_from(doc, args)
        seed = args.seed if args.seed is not None else doc.get("seed", 0)
        log.info("no --flow given, fitting one (seed %d)", seed)
        flow = fit(events, cfg=dataclasses.replace(cfg, seed=seed)).flow

    before, after = event_image_pair(events, flow)
    ensure_dir(args.out)
    vmax = max(before.max(), after.max())
    save_gray(to_uint8(before, vmax), os.path.join(args.out, "before.png"))
    save_gray(to_uint8(after, vmax), os.path.join(args.out, "after.png"))
    norm = normalize_timestamps(events)
    stats = {
        "nonzero_before": int(np.count_nonzero(before > 1e-9)),
        "nonzero_after": int(np.count_nonzero(after > 1e-9)),
        "contrast_before": contrast_loss(timestamp_images(
            warp_events(norm, FlowField.zeros(events.geometry), T_REF_FORWARD), events.geometry)),
        "contrast_after": contrast_loss(timestamp_images(
            warp_events(norm, flow, T_REF_FORWARD), events.geometry)),
    }
    with open(os.path.join(args.out, "deblur.json"), "w") as f:
        json.dump(stats, f, indent=2)
    for fn in ("before.png", "after.png", "deblur.json"):
        print(os.path.join(args.out, fn))
    return 0


def _gt_mask(entry, root, mode, tau):
    if mode == "sprite_alpha":
        return load_mask(os.path.join(root, entry["gt_mask"]))
    if tau is None:
        raise UsageError("--gt-mode flow_threshold needs --tau")
    return load_flow(os.path.join(root, entry["gt_flow"])).magnitude() > tau


def evaluate_results(results_dir, gt_dir, gt_mode="sprite_alpha", tau=None, normalization="gt_box"):
    """Per-sequence IoU / DR rows plus the aggregate means."""
    manifest = _read_manifest(os.path.join(gt_dir, "manifest.json"))
    gt_names = [e["name"] for e in manifest["sequences"]]
    result_names = sorted(d for d in os.listdir(results_dir)
                          if os.path.isfile(os.path.join(results_dir, d, "layer0.png")))
    missing = sorted(set(gt_names) - set(result_names))
    extra = sorted(set(result_names) - set(gt_names))
    if missing or extra:
        raise UsageError(f"unmatched sequence names: missing results for {missing}, "
                         f"no ground truth for {extra}")
    rows = []
    for entry in manifest["sequences"]:
        name = entry["name"]
        gt = _gt_mask(entry, gt_dir, gt_mode, tau)
        layers = [load_mask(os.path.join(results_dir, name, f"layer{k}.png")) for k in (0, 1)]
        scores = [iou(m, gt) for m in layers]
        k = 1 if scores[1] > scores[0] else 0
        rows.append({"name": name, "foreground_layer": k, "iou": scores[k],
                     "dr": detection_rate(layers[k], gt, normalization)})
    mean_iou, mean_dr = aggregate((r["iou"], r["dr"]) for r in rows)
    return rows, {"mean_iou": mean_iou, "mean_dr": mean_dr, "gt_mode": gt_mode, "tau": tau,
                  "dr_normalization": normalization, "n": len(rows)}


def cmd_eval(args):
    rows, summary = evaluate_results(args.results, args.gt, args.gt_mode, args.tau, args.dr_normalization)
    ensure_dir(args.out)
    csv_path = os.path.join(args.out, "report.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["name", "foreground_layer", "iou", "dr"])
        w.writeheader()
        w.writerows(rows)
    json_path = os.path.join(args.out, "report.json")
    with open(json_path, "w") as f:
        json.dump({"rows": rows, "aggregate": summary}, f, indent=2)
    log.info("mean IoU %.4f, mean DR %.4f over %d sequences", summary["mean_iou"], summary["mean_dr"],
             summary["n"])
    print(csv_path)
    print(json_path)
    return 0


def cmd_voxelize(args):
    events = load_events(args.events, geometry=_geometry_arg(args, {}))
    if len(events) == 0:
        raise UsageError(f"{args.events}: no events")
    if args.n_events:
        events = take_window(events, args.n_events)
    save_voxel_grid(build_voxel_grid(events, args.bins), args.out)
    print(args.out)
    return 0


def flow_to_rgb(flow: FlowField) -> np.ndarray:
    """Hue from direction, saturation from magnitude / max magnitude, full value.
    Zero flow renders white."""
    mag = flow.magnitude()
    peak = mag.max()
    hue = (np.arctan2(flow.v, flow.u) / (2 * np.pi)) % 1.0
    sat = mag / peak if peak > 0 else np.zeros_like(mag)
    rgb = hsv_to_rgb(np.stack([hue, sat, np.ones_like(mag)], axis=-1))
    return np.round(rgb * 255).astype(np.uint8)


def cmd_render_flow(args):
    if not os.path.isfile(args.flow):
        raise UsageError(f"flow file not found: {args.flow}")
    rgb = flow_to_rgb(load_flow(args.flow))
    Image.fromarray(rgb, mode="RGB").save(args.out)
    print(args.out)
    return 0


# -- argument parsing -------------------------------------------------------------

def build_parser():
    p = _Parser(prog="evseg", description="Layered event-based motion segmentation by direct fitting.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def fit_flags(sp):
        sp.add_argument("--config", help="JSON config (fit options, n_events, seeds, geometry)")
        sp.add_argument("--n-events", type=int, help=f"window size (default {DEFAULT_N_EVENTS})")
        sp.add_argument("--seed", type=int, help="first seed")
        sp.add_argument("--gamma", type=float, help="activation leak parameter")
        sp.add_argument("--activation", choices=["leaky_dorelu", "leaky_relu"])
        sp.add_argument("--lambda", dest="lam", type=float, help="smoothness weight")
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--geometry", type=int, nargs=2, metavar=("W", "H"), help="sensor size for CSV input")

    s = sub.add_parser("simulate", help="render a dataset from a scene config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override scene seeds (seed + sequence index)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("segment", help="fit layers and masks")
    s.add_argument("events", nargs="?")
    s.add_argument("--manifest", help="segment every sequence of a dataset manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, help=f"number of restarts (default {DEFAULT_RESTARTS})")
    fit_flags(s)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("deblur", help="event images before/after warping")
    s.add_argument("events")
    s.add_argument("--flow", help="flow tensor; fitted when omitted")
    s.add_argument("--out", required=True)
    fit_flags(s)
    s.set_defaults(func=cmd_deblur)

    s = sub.add_parser("eval", help="score result bundles against ground truth")
    s.add_argument("results")
    s.add_argument("gt", help="dataset directory holding manifest.json")
    s.add_argument("--out", required=True)
    s.add_argument("--gt-mode", choices=list(sim.GT_MODES), default="sprite_alpha")
    s.add_argument("--tau", type=float, help="flow magnitude threshold for --gt-mode flow_threshold")
    s.add_argument("--dr-normalization", choices=list(DR_NORMALIZATIONS), default="gt_box")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("voxelize", help="write a voxel grid tensor")
    s.add_argument("events")
    s.add_argument("--bins", type=int, default=DEFAULT_BINS)
    s.add_argument("--n-events", type=int)
    s.add_argument("--geometry", type=int, nargs=2, metavar=("W", "H"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("render-flow", help="color-wheel PNG of a flow tensor")
    s.add_argument("flow")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render_flow)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return 1
    except (EventFormatError, TensorFormatError) as e:
        log.error("%s", e)
        return 1
    except (FitError, FloatingPointError) as e:
        log.error("%s", e)
        return 2
    except (OSError, ValueError) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
