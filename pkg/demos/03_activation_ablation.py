"""
Activation ablation
===================

Same two-layer scene, three mask activations: leaky DoReLU with gamma 100
and 10, and a plain leaky ReLU.  One seed each, shorter fits on a smaller
scene so this runs in a couple of minutes.  At desk scale there is no
reason to expect the full-scale ordering; the point is a like-for-like
report.
"""
from evseg.fitter import FitConfig, fit, resolve_foreground
from evseg.layers import ActivationConfig
from evseg.metrics import detection_rate, iou
from evseg.simulator import ground_truth_mask, render_events, two_layer_scene

spec = two_layer_scene(size=64, sprite_size=16, background_shift=(4, 0), sprite_shift=(-6, 0))
events, _ = render_events(spec)
mask = ground_truth_mask(spec, 0.5)

print(f"{'activation':<22}{'loss':>9}{'IoU':>8}{'DR':>4}")
for name, act in [("leaky DoReLU g=100", ActivationConfig("leaky_dorelu", 100.0)),
                  ("leaky DoReLU g=10", ActivationConfig("leaky_dorelu", 10.0)),
                  ("leaky ReLU g=100", ActivationConfig("leaky_relu", 100.0))]:
    r = fit(events, cfg=FitConfig(iterations=300, activation=act))
    k = resolve_foreground(r, mask)
    print(f"{name:<22}{r.final_loss.total:>9.4f}{iou(r.hard[k], mask):>8.3f}{detection_rate(r.hard[k], mask):>4}")
