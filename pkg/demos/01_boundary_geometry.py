"""
Distances to the decision boundary on a 2-D toy
================================================

Train a small ReLU network on three Gaussian blobs, push every point onto its
nearest decision boundary and look at what the normals say about the shape
of the boundary. Runs in a few seconds.
"""
import numpy as np

from trojanscope import geometry, nn
from trojanscope.data import LabeledSet

rng = np.random.default_rng(0)
centers = np.array([[-2.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
xs = np.concatenate([c + 0.6 * rng.standard_normal((80, 2)) for c in centers])
ys = np.repeat(np.arange(3), 80)

layers = [nn.dense(2, 16), nn.relu(), nn.dense(16, 3)]
model = nn.Model("toy", 3, (2,), layers, nn.init_params(layers, (2,), rng))
model = nn.train(model, LabeledSet(xs, ys), nn.TrainConfig(epochs=30, batch_size=16, seed=0))
print("train accuracy", nn.accuracy(model, xs, ys))

# one point, step by step
res = geometry.project_to_boundary(model, xs[0])
print(f"x = {xs[0].round(3)}  label {res.start_label} -> {res.final_label}"
      f"  |T| = {res.distance:.4f} after {res.iterations} iteration(s)")

# the whole set at once: margin = mean distance over points that crossed
est = geometry.estimate_margin(model, xs)
print(f"margin {est.margin:.4f} over {est.n_used}/{len(xs)} points")

# unit normals as columns of S; a flat boundary puts all energy in a few directions
S = geometry.normal_matrix(model, xs)
spec = geometry.singular_spectrum(S.columns)
print("scaled singular values", spec.scaled.round(3))
print("energy captured by the first direction", round(spec.energy_at(1), 3))

# a linear model has one normal per pair of classes, so the spectrum collapses
w = rng.standard_normal((2, 2))
lin = nn.Model("lin", 2, (2,), [nn.dense(2, 2)], [{"weight": w, "bias": np.zeros(2)}])
flat = geometry.singular_spectrum(geometry.normal_matrix(lin, xs[:50]).columns)
print("linear model energy_at(1):", round(flat.energy_at(1), 6))
