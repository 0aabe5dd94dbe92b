"""Zoo-level margin and spectrum analysis and its CSV outputs."""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import geometry
from .detector import stratified_probe
from .errors import ConfigError
from .serialization import load_model


def model_label(record):
    return record["mapping_kind"] or "clean"


def analysis_samples(validation, samples_per_class, seed):
    idx, _ = stratified_probe(validation, samples_per_class, seed)
    return validation.subset(idx)


def analyze_model(model, samples, k=100):
    """Margin and singular spectrum of one model from a shared projection of ``samples``."""
    proj = geometry.project_batch(model, samples.images)
    margin = geometry.estimate_margin(model, samples, projection=proj)
    spectrum = geometry.singular_spectrum(geometry.normal_matrix(model, samples, projection=proj))
    return margin, spectrum


def _job(args):
    record, path, samples, k = args
    margin, spectrum = analyze_model(load_model(path), samples, k)
    return record, margin, spectrum


def analyze_zoo(manifest, validation, samples_per_class=40, k=100, seed=0, workers=1):
    """Return ``[(record, MarginEstimate, SpectrumReport)]`` for every record in ``manifest``."""
    from .zoo import model_path

    records = manifest.get("records", [])
    if not records:
        raise ConfigError("empty manifest: no models listed")
    samples = analysis_samples(validation, samples_per_class, seed)
    jobs = [(r, str(model_path(manifest, r)), samples, k) for r in records]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_job, jobs))
    return [_job(job) for job in jobs]


def clean_first(summary):
    """``summary`` items ordered with the clean group first."""
    return sorted(summary.items(), key=lambda kv: (kv[0] != "clean", kv[0]))


def margin_rows(results):
    return [{"model_id": r["record_id"], "is_trojan": r["is_trojan"], "mapping": model_label(r),
             "margin": m.margin, "n_used": m.n_used} for r, m, _ in results]


def margin_table(rows):
    """Mean and std of the margin per label, clean first."""
    table = []
    labels = sorted({row["mapping"] for row in rows}, key=lambda s: (s != "clean", s))
    for label in labels:
        vals = np.array([row["margin"] for row in rows if row["mapping"] == label])
        table.append({"label": label, "n": len(vals), "margin_mean": float(vals.mean()),
                      "margin_std": float(vals.std())})
    return table


def write_margin_outputs(out_dir, results):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = margin_rows(results)
    geometry.write_margins_csv(out_dir / "margins.csv", rows)
    table = margin_table(rows)
    with open(out_dir / "margin_table.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "n", "margin_mean", "margin_std"])
        for t in table:
            writer.writerow([t["label"], t["n"], repr(t["margin_mean"]), repr(t["margin_std"])])
    return rows, table


def write_spectrum_outputs(out_dir, results, k=100):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for record, _, spectrum in results:
        geometry.write_spectrum_csv(out_dir / f"spectrum_{record['record_id']}.csv", spectrum)
        kk = min(k, spectrum.rank_bound)
        summary.append({"model_id": record["record_id"], "is_trojan": record["is_trojan"],
                        "mapping": model_label(record), "rank": spectrum.rank_bound, "k": kk,
                        "energy_at_k": spectrum.energy_at(kk)})
    with open(out_dir / "spectra.csv", "w", newline="") as fh:
        fields = ["model_id", "is_trojan", "mapping", "rank", "k", "energy_at_k"]
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in summary:
            writer.writerow({**row, "energy_at_k": repr(row["energy_at_k"])})
    table = geometry.compare_spectra([(model_label(r), s) for r, _, s in results], k=k)
    geometry.write_comparison_csv(out_dir / "spectrum_comparison.csv", table)
    with open(out_dir / "energy_table.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "n", "energy_mean", "energy_std"])
        for label, s in clean_first(table.summary):
            writer.writerow([label, s["n"], repr(s["energy_mean"]), repr(s["energy_std"])])
    return summary, table
