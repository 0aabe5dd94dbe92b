"""Populations of clean and Trojan models with validity screening."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, nn
from .errors import ConfigError, DatasetError
from .poison import PoisonConfig, PoisonTemplate, poison_dataset
from .serialization import load_model, save_model

log = logging.getLogger(__name__)

MANIFEST_NAME = "zoo_manifest"

# Desk-scale attack ranges: on small CNNs a 1-3% patch is learned too
# unreliably for the M2M permutation to reach the fooling-rate bar.
DESK_TEMPLATE = PoisonTemplate(area_range=(0.03, 0.06), patterns=("checkerboard", "random_bits", "cross"))
DESK_TRAIN = nn.TrainConfig(epochs=15)


def fooling_rate(model, trigger_eval, mapping=None):
    """Fraction of triggered samples classified as their mapped target.

    With a Mixed ``mapping`` (and source labels on the set) samples whose
    label the mapping leaves unchanged are dropped from the denominator.
    """
    labels = trigger_eval.labels
    images = trigger_eval.images
    if mapping is not None and mapping.kind == "Mixed" and trigger_eval.source_labels is not None:
        keep = np.array([mapping.changes(int(y)) for y in trigger_eval.source_labels], dtype=bool)
        labels, images = labels[keep], images[keep]
    if len(labels) == 0:
        raise DatasetError("fooling rate of an empty trigger set is undefined")
    return float(np.mean(nn.predict(model, images) == labels))


@dataclass
class ZooConfig:
    arch_ids: tuple = ("cnn_s",)
    n_clean: int = 20
    n_trojan_per_mapping: int = 10
    mappings: tuple = ("M2O", "M2M", "Mixed")
    poison_template: PoisonTemplate = field(default_factory=lambda: DESK_TEMPLATE)
    train_cfg: nn.TrainConfig = field(default_factory=lambda: DESK_TRAIN)
    va_gap_max: float = 0.02
    fr_min: float = 0.90
    master_seed: int = 0
    hidden: int = 64
    dataset_id: str = "shapes"

    def __post_init__(self):
        if self.n_clean < 1:
            raise ConfigError("n_clean must be >= 1")
        if self.n_trojan_per_mapping < 0:
            raise ConfigError("n_trojan_per_mapping must be >= 0")
        if self.va_gap_max <= 0:
            raise ConfigError("va_gap_max must be positive")

    def to_dict(self):
        d = asdict(self)
        d["arch_ids"] = list(self.arch_ids)
        d["mappings"] = list(self.mappings)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["arch_ids"] = tuple(d["arch_ids"])
        d["mappings"] = tuple(d["mappings"])
        pt = dict(d["poison_template"])
        d["poison_template"] = PoisonTemplate(**{k: tuple(v) if isinstance(v, list) else v for k, v in pt.items()})
        d["train_cfg"] = nn.TrainConfig(**d["train_cfg"])
        return cls(**d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Slot:
    record_id: str
    arch_id: str
    mapping_kind: str | None  # None for clean
    index: int


def _slots(cfg):
    slots = []
    for arch in cfg.arch_ids:
        slots += [Slot(f"{arch}-clean-{i:03d}", arch, None, i) for i in range(cfg.n_clean)]
        for kind in cfg.mappings:
            slots += [Slot(f"{arch}-{kind.lower()}-{i:03d}", arch, kind, i)
                      for i in range(cfg.n_trojan_per_mapping)]
    return slots


def _slot_rng(cfg, slot, attempt):
    key = sum(ord(ch) * 31 ** i for i, ch in enumerate(slot.record_id)) % (2 ** 32)
    return np.random.default_rng([cfg.master_seed, key, attempt])


def train_one(cfg, slot, attempt, train, validation, model_dir, poison_cfg=None):
    """Train the model for ``slot``; returns a record dict (model saved under ``model_dir``)."""
    rng = _slot_rng(cfg, slot, attempt)
    init_seed, train_seed = (int(v) for v in rng.integers(2 ** 31, size=2))
    trigger_eval = None
    data = train
    if slot.mapping_kind is not None:
        if poison_cfg is None:
            class_count = int(train.labels.max()) + 1
            poison_cfg = cfg.poison_template.draw(slot.mapping_kind, class_count, train.input_shape[0], rng)
        data, trigger_eval = poison_dataset(train, poison_cfg, validation)
    class_count = int(max(train.labels.max(), validation.labels.max())) + 1
    model = nn.build_model(slot.arch_id, train.input_shape, class_count, seed=init_seed, hidden=cfg.hidden)
    tcfg = nn.TrainConfig(**{**asdict(cfg.train_cfg), "seed": train_seed})
    model = nn.train(model, data, tcfg)
    model.meta["record_id"] = slot.record_id
    va = nn.accuracy(model, validation.images, validation.labels)
    fr = None if trigger_eval is None else fooling_rate(model, trigger_eval, poison_cfg.mapping)
    save_model(model, model_dir)
    return {
        "record_id": slot.record_id,
        "arch_id": slot.arch_id,
        "is_trojan": slot.mapping_kind is not None,
        "mapping_kind": slot.mapping_kind,
        "poison_cfg": None if poison_cfg is None else poison_cfg.to_dict(),
        "va": va,
        "fooling_rate": fr,
        "seed": init_seed,
        "train_seed": train_seed,
        "attempt": attempt,
        "model_path": f"models/{slot.record_id}",
    }


def _job(args):
    cfg, slot, attempt, train, validation, out_dir = args
    rec = train_one(cfg, slot, attempt, train, validation, Path(out_dir) / "models" / slot.record_id)
    fr = "-" if rec["fooling_rate"] is None else f"{rec['fooling_rate']:.4f}"
    log.info("%s attempt %d: va=%.4f fr=%s", slot.record_id, attempt, rec["va"], fr)
    return rec


def _run_jobs(jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_job, jobs))
    return [_job(job) for job in jobs]


def is_valid(record, reference_va, cfg):
    return (abs(record["va"] - reference_va) <= cfg.va_gap_max
            and record["fooling_rate"] is not None and record["fooling_rate"] >= cfg.fr_min)


def build_zoo(cfg, train, validation, out_dir, workers=1):
    """Train, screen and persist a zoo; returns the manifest dict (also written to disk).

    Trojan models failing the validity rule are retrained once with fresh
    seeds and dropped if they fail again.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slots = _slots(cfg)
    first = _run_jobs([(cfg, s, 0, train, validation, str(out_dir)) for s in slots], workers)
    records = {r["record_id"]: r for r in first}

    reference = {}
    for arch in cfg.arch_ids:
        vas = [r["va"] for r in first if r["arch_id"] == arch and not r["is_trojan"]]
        reference[arch] = float(np.mean(vas))

    retry_slots = [s for s in slots if s.mapping_kind is not None
                   and not is_valid(records[s.record_id], reference[s.arch_id], cfg)]
    first_failures = {s.record_id: records[s.record_id] for s in retry_slots}
    for s in retry_slots:
        shutil.rmtree(out_dir / "models" / s.record_id, ignore_errors=True)
    for r in _run_jobs([(cfg, s, 1, train, validation, str(out_dir)) for s in retry_slots], workers):
        records[r["record_id"]] = r

    dropped, warnings = [], []
    for s in retry_slots:
        r = records[s.record_id]
        if not is_valid(r, reference[s.arch_id], cfg):
            shutil.rmtree(out_dir / "models" / s.record_id, ignore_errors=True)
            del records[s.record_id]
            prev = first_failures[s.record_id]
            dropped.append({"record_id": s.record_id, "attempts": [
                {"va": prev["va"], "fooling_rate": prev["fooling_rate"]},
                {"va": r["va"], "fooling_rate": r["fooling_rate"]}]})
            warnings.append(f"{s.record_id}: invalid after retrain, dropped")
            log.warning("%s dropped: va=%.4f fr=%.4f", s.record_id, r["va"], r["fooling_rate"])

    manifest = {
        "toolkit_version": __version__,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "clean_reference_va": reference,
        "records": [records[s.record_id] for s in slots if s.record_id in records],
        "dropped": dropped,
        "warnings": warnings,
    }
    write_manifest(out_dir, manifest)
    manifest["_root"] = str(out_dir)
    return manifest


def write_manifest(out_dir, manifest):
    path = Path(out_dir) / MANIFEST_NAME
    body = {k: v for k, v in manifest.items() if not k.startswith("_")}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"zoo manifest not found: {path}")
    manifest = json.loads(path.read_text())
    manifest["_root"] = str(path.parent)
    return manifest


def model_path(manifest, record):
    return Path(manifest.get("_root", ".")) / record["model_path"]


def load_record_model(manifest, record):
    return load_model(model_path(manifest, record))


def sweep_poison_ratio(cfg, train, validation, p_values, kind="M2O", out_dir=None, with_clean=True):
    """One Trojan model per poisoning ratio, all other randomness fixed.

    Every model shares the init/training seeds and the trigger/mapping draw
    of one base slot, so only ``P`` varies. Returns a list of
    ``{"P", "va", "fooling_rate", "record_id"}`` rows, plus a leading
    ``P = 0`` clean row when ``with_clean`` is set.
    """
    p_values = [float(p) for p in p_values]
    if not p_values or any(not 0 < p <= 0.5 for p in p_values):
        raise ConfigError("poisoning ratios must lie in (0, 0.5]")
    arch = cfg.arch_ids[0]
    base = Slot(f"{arch}-sweep-{kind.lower()}", arch, kind, 0)
    class_count = int(train.labels.max()) + 1
    template = cfg.poison_template.draw(kind, class_count, train.input_shape[0], _slot_rng(cfg, base, 0))
    tmp = tempfile.mkdtemp() if out_dir is None else None
    root = Path(tmp or out_dir) / "models"
    jobs = [(None, f"{arch}-sweep-clean")] if with_clean else []
    jobs += [(p, f"{arch}-sweep-{kind.lower()}-p{p:.3f}") for p in p_values]
    rows = []
    try:
        for p, record_id in jobs:
            pc = None if p is None else PoisonConfig(template.trigger, template.mapping, p,
                                                     template.noise_amplitude, template.seed)
            slot = Slot(base.record_id, arch, None if p is None else kind, 0)
            rec = train_one(cfg, slot, 0, train, validation, root / record_id, poison_cfg=pc)
            rows.append({"P": 0.0 if p is None else p, "va": rec["va"], "fooling_rate": rec["fooling_rate"],
                         "record_id": record_id})
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
    return rows


SWEEP_FIELDS = ["P", "va", "fooling_rate", "record_id"]


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "va": repr(row["va"]),
                             "fooling_rate": "" if row["fooling_rate"] is None else repr(row["fooling_rate"])})
