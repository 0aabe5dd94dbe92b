"""Perturbation-alignment Trojan detector and its k-fold benchmark harness.

Step 1 builds one shared perturbation ``r`` from a probe batch ``X``: at each
outer iteration every ``x + r`` is linearly projected onto its nearest
boundary, the unit projection directions are summed onto ``r``, and ``r`` is
rescaled to norm ``xi``. The loop stops after ``J + 1`` passes or once the
probe error exceeds ``rho``. Step 2 adds ``r`` to the held-out remainder of
the validation set; the model is called Trojan when its error there reaches
``delta``.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DatasetError, DegenerateDirectionError, NumericalError
from .geometry import boundary_step

ERR_REFERENCES = ("ground_truth", "clean_prediction")


@dataclass
class DetectorConfig:
    xi: float | None = None   # None: 5 for 1-channel inputs, 10 for 3-channel
    rho: float = 0.5
    J: int = 10
    delta: float = 0.5
    probe_per_class: int = 40
    seed: int = 0
    err_reference: str = "ground_truth"
    clamp: bool = False
    max_failed_fraction: float = 0.5

    def __post_init__(self):
        if self.xi is not None and self.xi <= 0:
            raise ConfigError("xi must be positive")
        if not 0 < self.rho <= 1:
            raise ConfigError("rho must lie in (0, 1]")
        if self.J < 0:
            raise ConfigError("J must be >= 0")
        if not 0 <= self.delta <= 1:
            raise ConfigError("delta must lie in [0, 1]")
        if self.probe_per_class < 1:
            raise ConfigError("probe_per_class must be >= 1")
        if self.err_reference not in ERR_REFERENCES:
            raise ConfigError(f"err_reference must be one of {ERR_REFERENCES}")

    def resolved_xi(self, input_shape):
        if self.xi is not None:
            return float(self.xi)
        return 5.0 if input_shape[0] == 1 else 10.0


@dataclass
class DetectorVerdict:
    is_trojan: bool
    perturbed_error: float
    clean_error: float
    r_X: np.ndarray
    outer_iters_used: int
    skipped_steps: int = 0
    probe_size: int = 0
    heldout_size: int = 0


def error_rate(model, data, labels=None):
    """Fraction of samples whose prediction differs from ``labels`` (default: the set's labels)."""
    images = data.images if hasattr(data, "images") else np.asarray(data)
    if len(images) == 0:
        raise DatasetError("error rate of an empty set is undefined")
    ref = data.labels if labels is None else np.asarray(labels)
    return float(np.mean(nn.predict(model, images) != ref))


def _perturb(images, r, clamp):
    out = np.asarray(images, dtype=np.float64) + r
    return np.clip(out, 0.0, 1.0) if clamp else out


def _reference_labels(model, data, cfg):
    if cfg.err_reference == "ground_truth":
        return data.labels
    return nn.predict(model, data.images)


def detector_perturbation(model, X, cfg):
    """Shared perturbation for the probe batch ``X``.

    Returns ``(r, iterations, skipped)`` where ``skipped`` counts per-sample
    steps that could not be computed.
    """
    if len(X) == 0:
        raise DatasetError("empty probe batch")
    xi = cfg.resolved_xi(model.input_shape)
    images = np.asarray(X.images, dtype=np.float64)
    ref = _reference_labels(model, X, cfg)
    n = len(images)
    d = model.input_dim
    r = np.zeros(model.input_shape)
    j = 0
    skipped = 0
    while j <= cfg.J and error_rate(model, _perturb(images, r, cfg.clamp), ref) <= cfg.rho:
        current = _perturb(images, r, cfg.clamp)
        logits, jac = nn.input_jacobian(model, current)
        k = np.argmax(logits, axis=1)
        steps, _ = boundary_step(logits, jac.reshape(n, model.class_count, d), k)
        norms = np.linalg.norm(steps, axis=1)
        ok = np.isfinite(norms) & (norms > 0)
        failed = n - int(ok.sum())
        if failed > cfg.max_failed_fraction * n:
            raise NumericalError(f"boundary steps failed for {failed}/{n} probe samples", iteration=j)
        skipped += failed
        direction = r.ravel() + (steps[ok] / norms[ok, None]).sum(axis=0)
        length = np.linalg.norm(direction)
        if not np.isfinite(length) or length == 0:
            raise DegenerateDirectionError("probe directions cancel exactly", iteration=j)
        r = (xi * direction / length).reshape(model.input_shape)
        j += 1
    return r, j, skipped


def stratified_probe(data, per_class, seed):
    """Seeded per-class draw of the probe batch; returns ``(probe_idx, rest_idx)``."""
    rng = np.random.default_rng([seed, 17])
    picked = []
    for c in np.unique(data.labels):
        members = np.flatnonzero(data.labels == c)
        take = min(per_class, len(members))
        picked.append(np.sort(rng.choice(members, size=take, replace=False)))
    probe = np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)
    rest = np.setdiff1d(np.arange(len(data)), probe)
    return probe, rest


def classify_model(model, validation, cfg):
    probe_idx, rest_idx = stratified_probe(validation, cfg.probe_per_class, cfg.seed)
    if rest_idx.size == 0:
        raise ConfigError("validation set leaves no held-out samples after drawing the probe batch")
    X = validation.subset(probe_idx)
    rest = validation.subset(rest_idx)
    r, iters, skipped = detector_perturbation(model, X, cfg)
    ref = _reference_labels(model, rest, cfg)
    clean_err = error_rate(model, rest.images, ref)
    perturbed_err = error_rate(model, _perturb(rest.images, r, cfg.clamp), ref)
    return DetectorVerdict(perturbed_err >= cfg.delta, perturbed_err, clean_err, r, iters, skipped,
                           len(probe_idx), len(rest_idx))


# -- benchmark harness ---------------------------------------------------------

def binary_metrics(truth, predicted):
    """Precision, recall and accuracy with Trojan as the positive class."""
    truth = np.asarray(truth, dtype=bool)
    predicted = np.asarray(predicted, dtype=bool)
    tp = int(np.sum(truth & predicted))
    fp = int(np.sum(~truth & predicted))
    fn = int(np.sum(truth & ~predicted))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {"precision": precision, "recall": recall, "accuracy": float(np.mean(truth == predicted))}


def fold_assignment(truth, folds, seed):
    """Stratified fold id for each model (clean and Trojan dealt round-robin)."""
    truth = np.asarray(truth, dtype=bool)
    if folds < 1:
        raise ConfigError("folds must be >= 1")
    if min(truth.sum(), (~truth).sum()) < folds:
        raise ConfigError(f"need at least {folds} clean and {folds} Trojan models for {folds} folds")
    rng = np.random.default_rng([seed, 23])
    assign = np.empty(len(truth), dtype=np.int64)
    for cls in (False, True):
        members = rng.permutation(np.flatnonzero(truth == cls))
        assign[members] = np.arange(len(members)) % folds
    return assign


@dataclass
class MetricsReport:
    rows: list
    folds: list
    aggregate: dict
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"config": self.config, "models": self.rows, "folds": self.folds, "aggregate": self.aggregate}


def summarize(rows, folds, seed=0):
    truth = [row["truth"] for row in rows]
    verdict = [row["verdict"] for row in rows]
    assign = fold_assignment(truth, folds, seed)
    per_fold = []
    for f in range(folds):
        sel = assign == f
        m = binary_metrics(np.asarray(truth)[sel], np.asarray(verdict)[sel])
        per_fold.append(dict(fold=f, n=int(sel.sum()), **m))
    aggregate = {}
    for key in ("precision", "recall", "accuracy"):
        vals = np.array([pf[key] for pf in per_fold])
        aggregate[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    aggregate["overall"] = binary_metrics(truth, verdict)
    err = np.array([row["perturbed_error"] for row in rows])
    t = np.asarray(truth, dtype=bool)
    aggregate["mean_perturbed_error"] = {"trojan": float(err[t].mean()), "clean": float(err[~t].mean())}
    aggregate["perturbed_error_gap"] = float(err[t].mean() - err[~t].mean())
    for row, f in zip(rows, assign):
        row["fold"] = int(f)
    return per_fold, aggregate


def _verdict_job(args):
    model_id, path, truth, mapping, validation, cfg = args
    from .serialization import load_model

    v = classify_model(load_model(path), validation, cfg)
    return {"model_id": model_id, "truth": bool(truth), "mapping": mapping, "verdict": bool(v.is_trojan),
            "perturbed_error": v.perturbed_error, "clean_error": v.clean_error, "iters": v.outer_iters_used,
            "skipped_steps": v.skipped_steps}


def evaluate_detector(entries, validation, cfg, folds=5, workers=1):
    """Run the detector on every ``(model_id, model_path, is_trojan, mapping)`` entry and fold the results."""
    entries = list(entries)
    if not entries:
        raise ConfigError("no models to evaluate")
    jobs = [(mid, str(path), truth, mapping, validation, cfg) for mid, path, truth, mapping in entries]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_verdict_job, jobs))
    else:
        rows = [_verdict_job(job) for job in jobs]
    per_fold, aggregate = summarize(rows, folds, cfg.seed)
    return MetricsReport(rows, per_fold, aggregate, config=asdict(cfg))


REPORT_FIELDS = ["model_id", "truth", "mapping", "verdict", "perturbed_error", "clean_error", "iters", "fold"]


def write_report(out_dir, report):
    """Write ``detector_report`` (JSON text) and ``detector_report.csv``."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "detector_report").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out_dir / "detector_report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row)
    return out_dir / "detector_report"
