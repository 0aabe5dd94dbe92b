"""Decision-boundary geometry: boundary projections, margin, normal-vector spectra.

The multi-class projection linearises the classifier at the current point,
moves to the nearest linearised one-vs-predicted boundary, and repeats
(DeepFool iteration) until the predicted label changes. The accumulated
step is the minimal crossing perturbation, and also the boundary normal at
the projected point.

On piecewise-linear networks the last linearised step often lands well past
the boundary, so by default that step is bisected back to the first label
change along it (``refine=True``).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, InputShapeError, NumericalError, ProjectionError
from .linalg import jacobi_singular_values

DEFAULT_OVERSHOOT = 0.02
DEFAULT_MAX_ITER = 50
REFINE_STEPS = 30


def project_linear_binary(w, b, x):
    """Orthogonal projection of ``x`` onto the hyperplane ``w.x + b = 0``.

    Returns the displacement ``T = -(w / |w|) * (w.x + b) / |w|``.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    norm_sq = float(np.dot(w.ravel(), w.ravel()))
    if norm_sq == 0.0:
        raise ValueError("zero weight vector has no decision boundary")
    score = float(np.dot(w.ravel(), x.ravel())) + float(b)
    return -(score / norm_sq) * w


@dataclass
class ProjectionResult:
    T_x: np.ndarray
    iterations: int
    crossed: bool
    final_label: int
    start_label: int
    per_step_norms: list = field(default_factory=list)

    @property
    def distance(self):
        return float(np.linalg.norm(self.T_x))


@dataclass
class BatchProjection:
    """Projections of a batch; ``failed`` marks non-finite steps."""
    T: np.ndarray
    iterations: np.ndarray
    crossed: np.ndarray
    final_labels: np.ndarray
    start_labels: np.ndarray
    failed: np.ndarray
    step_norms: list
    fail_iteration: np.ndarray

    def __len__(self):
        return len(self.T)

    @property
    def distances(self):
        return np.linalg.norm(self.T.reshape(len(self.T), -1), axis=1)

    def result(self, i):
        return ProjectionResult(self.T[i], int(self.iterations[i]), bool(self.crossed[i]),
                                int(self.final_labels[i]), int(self.start_labels[i]), list(self.step_norms[i]))


def boundary_step(logits, jac, k0):
    """Single linearised step for each row: ``(|m_l| / |n_l|^2) n_l``.

    ``logits`` [n, c], ``jac`` [n, c, d], ``k0`` [n] reference labels.
    Returns steps [n, d] (NaN rows where every ``n_j`` vanishes) and the
    chosen boundary index ``l`` per row.
    """
    rows = np.arange(len(logits))
    m = logits - logits[rows, k0][:, None]
    normals = jac - jac[rows, k0][:, None, :]
    norms = np.linalg.norm(normals, axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(m) / norms
    ratio[rows, k0] = np.inf
    ratio = np.where(np.isnan(ratio), np.inf, ratio)
    l = np.argmin(ratio, axis=1)
    n_l = normals[rows, l]
    with np.errstate(divide="ignore", invalid="ignore"):
        step = (np.abs(m[rows, l]) / norms[rows, l] ** 2)[:, None] * n_l
    return step, l


def _refine_last_step(model, x0, total, last, k0, overshoot, shape):
    """Fraction of the last step at which the path first leaves class ``k0``.

    Bisects s in [0, 1] on ``x0 + total - (1 - s) last`` (no overshoot), so a
    step that already ends on the boundary is kept whole. Samples whose
    shortened perturbation no longer crosses at the overshoot keep s = 1.
    """
    n = len(x0)
    lo, hi = np.zeros(n), np.ones(n)
    for _ in range(REFINE_STEPS):
        mid = 0.5 * (lo + hi)
        pts = x0 + total - (1.0 - mid)[:, None] * last
        flip = nn.predict(model, pts.reshape((n,) + shape)) != k0
        hi = np.where(flip, mid, hi)
        lo = np.where(flip, lo, mid)
    shortened = total - (1.0 - hi)[:, None] * last
    still_crossed = nn.predict(model, (x0 + (1.0 + overshoot) * shortened).reshape((n,) + shape)) != k0
    return np.where(still_crossed, hi, 1.0)


def project_batch(model, images, max_iter=DEFAULT_MAX_ITER, overshoot=DEFAULT_OVERSHOOT, refine=True):
    """DeepFool projection of every sample in ``images`` onto the nearest boundary."""
    if max_iter < 1:
        raise ConfigError("max_iter must be >= 1")
    x0 = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    n, d = x0.shape
    shape = model.input_shape
    k0 = nn.predict(model, x0.reshape((n,) + shape))
    total = np.zeros((n, d))
    last = np.zeros((n, d))
    iters = np.zeros(n, dtype=np.int64)
    failed = np.zeros(n, dtype=bool)
    fail_iter = np.full(n, -1)
    step_norms = [[] for _ in range(n)]
    active = np.ones(n, dtype=bool)

    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        current = x0[idx] + (1.0 + overshoot) * total[idx]
        logits, jac = nn.input_jacobian(model, current.reshape((idx.size,) + shape))
        still = np.argmax(logits, axis=1) == k0[idx]
        done = idx[~still]
        active[done] = False
        done = done[iters[done] > 0]
        if refine and done.size:
            frac = _refine_last_step(model, x0[done], total[done], last[done], k0[done], overshoot, shape)
            total[done] -= (1.0 - frac)[:, None] * last[done]
            for i, f in zip(done, frac):
                step_norms[i][-1] *= float(f)
        if it == max_iter:
            break
        idx, logits, jac = idx[still], logits[still], jac[still].reshape(still.sum(), model.class_count, d)
        if idx.size == 0:
            break
        step, _ = boundary_step(logits, jac, k0[idx])
        bad = ~np.all(np.isfinite(step), axis=1)
        if bad.any():
            failed[idx[bad]] = True
            fail_iter[idx[bad]] = it
            active[idx[bad]] = False
        good = idx[~bad]
        total[good] += step[~bad]
        last[good] = step[~bad]
        iters[good] += 1
        for i, sn in zip(good, np.linalg.norm(step[~bad], axis=1)):
            step_norms[i].append(float(sn))

    final = nn.predict(model, (x0 + (1.0 + overshoot) * total).reshape((n,) + shape))
    crossed = (final != k0) & ~failed
    return BatchProjection(total.reshape((n,) + shape), iters, crossed, final, k0, failed, step_norms, fail_iter)


def project_to_boundary(model, x, max_iter=DEFAULT_MAX_ITER, overshoot=DEFAULT_OVERSHOOT, refine=True):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise InputShapeError(f"sample shape {x.shape} != {model.input_shape}")
    batch = project_batch(model, x[None], max_iter, overshoot, refine)
    if batch.failed[0]:
        raise NumericalError("non-finite projection step", iteration=int(batch.fail_iteration[0]))
    return batch.result(0)


def _images(samples):
    return samples.images if hasattr(samples, "images") else np.asarray(samples)


@dataclass
class MarginEstimate:
    margin: float
    n_used: int
    n_excluded: int
    distances: np.ndarray

    def __float__(self):
        return self.margin


def estimate_margin(model, samples, max_iter=DEFAULT_MAX_ITER, overshoot=DEFAULT_OVERSHOOT, projection=None):
    """Mean boundary distance over samples whose projection crossed the boundary."""
    images = _images(samples)
    if len(images) == 0:
        raise ProjectionError("no samples to estimate a margin from")
    proj = projection if projection is not None else project_batch(model, images, max_iter, overshoot)
    dist = proj.distances[proj.crossed]
    if dist.size == 0:
        raise ProjectionError(f"all {len(images)} projections failed to cross the boundary")
    return MarginEstimate(float(dist.mean()), int(dist.size), int(len(images) - dist.size), dist)


@dataclass
class NormalMatrix:
    columns: np.ndarray  # [d, n], unit-norm columns
    sample_ids: list
    skipped: list = field(default_factory=list)

    @property
    def shape(self):
        return self.columns.shape


def normal_matrix(model, samples, sample_ids=None, max_iter=DEFAULT_MAX_ITER, overshoot=DEFAULT_OVERSHOOT,
                  projection=None):
    """Matrix whose columns are the unit boundary normals ``T_x / |T_x|``."""
    images = _images(samples)
    ids = list(range(len(images))) if sample_ids is None else list(sample_ids)
    proj = projection if projection is not None else project_batch(model, images, max_iter, overshoot)
    flat = proj.T.reshape(len(proj), -1)
    norms = np.linalg.norm(flat, axis=1)
    usable = proj.crossed & (norms > 0)
    if usable.sum() < 2:
        raise ProjectionError(f"only {int(usable.sum())} usable boundary normals (need >= 2)")
    cols = (flat[usable] / norms[usable, None]).T
    return NormalMatrix(cols, [ids[i] for i in np.flatnonzero(usable)],
                        [ids[i] for i in np.flatnonzero(~usable)])


@dataclass
class SpectrumReport:
    singular_values: np.ndarray
    scaled: np.ndarray
    energy: np.ndarray  # energy[k-1] = sum_{i<=k} s_i^2 / sum_j s_j^2
    dim: int

    @property
    def rank_bound(self):
        return len(self.singular_values)

    def energy_at(self, k):
        if k < 1:
            raise ValueError("k must be >= 1")
        return float(self.energy[min(k, len(self.energy)) - 1])


def singular_spectrum(S):
    cols = S.columns if isinstance(S, NormalMatrix) else np.asarray(S, dtype=np.float64)
    if cols.size == 0:
        raise ValueError("empty matrix")
    sigma = jacobi_singular_values(cols)
    top = sigma[0] if sigma[0] > 0 else 1.0
    sq = sigma ** 2
    total = sq.sum()
    energy = np.cumsum(sq) / total if total > 0 else np.ones_like(sq)
    energy[-1] = 1.0 if total > 0 else energy[-1]
    return SpectrumReport(sigma, sigma / top, energy, cols.shape[0])


@dataclass
class ComparisonTable:
    k: int
    summary: dict   # label -> {"n", "energy_mean", "energy_std"}
    curves: list    # rows (label, index, mean, std) of the scaled spectrum

    def energy(self, label):
        return self.summary[label]["energy_mean"]


def compare_spectra(reports, k=100):
    """Aggregate ``(label, SpectrumReport)`` pairs into per-label energy and curve statistics."""
    if not reports:
        raise ValueError("no spectra to compare")
    dims = {r.dim for _, r in reports}
    if len(dims) != 1:
        raise ValueError(f"spectra come from different input dimensions: {sorted(dims)}")
    grouped = {}
    for label, rep in reports:
        grouped.setdefault(label, []).append(rep)
    summary, curves = {}, []
    for label in sorted(grouped):
        reps = grouped[label]
        e = np.array([r.energy_at(k) for r in reps])
        summary[label] = {"n": len(reps), "energy_mean": float(e.mean()), "energy_std": float(e.std())}
        length = min(len(r.scaled) for r in reps)
        stacked = np.stack([r.scaled[:length] for r in reps])
        for i in range(length):
            curves.append((label, i + 1, float(stacked[:, i].mean()), float(stacked[:, i].std())))
    return ComparisonTable(k, summary, curves)


# -- plot-data files -----------------------------------------------------------

MARGIN_FIELDS = ["model_id", "is_trojan", "mapping", "margin", "n_used"]
SPECTRUM_FIELDS = ["index", "sigma", "sigma_scaled", "energy_cum"]


def write_margins_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MARGIN_FIELDS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "margin": repr(float(row["margin"]))})


def write_spectrum_csv(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SPECTRUM_FIELDS)
        for i, (s, sc, e) in enumerate(zip(report.singular_values, report.scaled, report.energy)):
            writer.writerow([i + 1, repr(float(s)), repr(float(sc)), repr(float(e))])


def write_comparison_csv(path, table):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "index", "mean_scaled", "std_scaled"])
        for label, i, mean, std in table.curves:
            writer.writerow([label, i, repr(mean), repr(std)])
