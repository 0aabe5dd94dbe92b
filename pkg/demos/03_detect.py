"""
Detecting Trojan models from their decision boundaries
======================================================

Uses the zoo written by ``02_poison_and_zoo.py``. For every model we compare
the margin and the spectrum of boundary normals, then run the detector: one
shared perturbation of fixed norm built from 40 probe images per class, and
a verdict from the error it causes on the rest of the validation set.
"""
from pathlib import Path

import numpy as np

from trojanscope import analysis, data, detector, zoo

out = Path("demo_out")
manifest = zoo.load_manifest(out / "zoo")
_, validation, _ = data.read_dataset_dir(out / "data")

samples = analysis.analysis_samples(validation, 20, seed=0)
cfg = detector.DetectorConfig()
print(f"{'model':<18} {'margin':>7} {'E(10)':>6} {'err':>6} {'pert.err':>8}  verdict")
for record in manifest["records"]:
    model = zoo.load_record_model(manifest, record)
    margin, spectrum = analysis.analyze_model(model, samples, k=100)
    v = detector.classify_model(model, validation, cfg)
    label = "trojan" if v.is_trojan else "clean"
    print(f"{record['record_id']:<18} {margin.margin:7.3f} {spectrum.energy_at(10):6.3f} "
          f"{v.clean_error:6.3f} {v.perturbed_error:8.3f}  {label}")

# the shared perturbation of the last model, as a coarse picture
r = v.r_X[0]
print(f"\n|r| = {np.linalg.norm(r):.3f} after {v.outer_iters_used} pass(es)")
for row in r[::2, ::2]:
    print("".join("#" if x > 0.3 else "+" if x > 0.1 else "-" if x < -0.1 else " " for x in row))
