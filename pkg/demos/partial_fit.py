"""
Fitting a half-visible body
===========================

Only the top half of the image is kept. The predictor cannot see the legs,
so their bones start at rest. Oracle-extrapolated keypoints (ground truth
plus 2 px noise) stand in for keypoints detected on a completed image and
are merged with the visible ones.
"""

from bodyfit.metrics import evaluate_fit
from bodyfit.model import JOINT_NAMES, build_template_model
from bodyfit.optim import default_config, fit_staged
from bodyfit.synth import generate_scene, merge_keypoints

model = build_template_model()
scene = generate_scene(model, seed=4, partial_fraction=0.5)
print("crop row", scene.truncation)
print("extrapolated", [JOINT_NAMES[k.id] for k in scene.extrapolated])

merged = scene.observation.with_keypoints(merge_keypoints(scene.observation.keypoints, scene.extrapolated))
for name, obs in (("visible only", scene.observation), ("merged", merged)):
    params, _ = fit_staged(model, None, obs, default_config(), scene.init_params)
    print(f"{name:12s} PA-V2V {evaluate_fit(model, scene, params).pa_v2v * 1e3:.1f} mm")
