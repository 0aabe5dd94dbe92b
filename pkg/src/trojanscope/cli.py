"""Command-line entry point: ``trojanscope <group> <action> [options] --out DIR``.

Every run writes ``run_config`` (JSON) into its output directory with all
resolved options; ``trojanscope rerun run_config`` replays it. Exit codes:
0 success, 1 domain failure, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, analysis, data, detector, nn, zoo
from .errors import TrojanScopeError
from .poison import MAPPING_KINDS
from .serialization import load_model

RUN_CONFIG = "run_config"
WORKERS_ENV = "TROJANSCOPE_WORKERS"
EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2

log = logging.getLogger("trojanscope")


class GateFailure(TrojanScopeError):
    """Benchmark accuracy fell below the requested gate."""


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _mappings(text):
    lookup = {k.lower(): k for k in MAPPING_KINDS}
    out = []
    for v in text.split(","):
        v = v.strip().lower()
        if v not in lookup:
            raise argparse.ArgumentTypeError(f"unknown mapping {v!r}; choose from {', '.join(lookup)}")
        out.append(lookup[v])
    return out


def _add_train(p):
    p.add_argument("--arch", default="cnn_s", choices=("mlp2", "cnn_s", "cnn_m"))
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epochs", type=int, default=zoo.DESK_TRAIN.epochs)
    p.add_argument("--batch-size", type=int, default=zoo.DESK_TRAIN.batch_size)
    p.add_argument("--lr", type=float, default=zoo.DESK_TRAIN.learning_rate)


def _add_detector(p):
    p.add_argument("--xi", type=float, default=None, help="default: 5 for 1-channel, 10 for 3-channel inputs")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--J", type=int, default=10)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--probe-per-class", type=int, default=40)
    p.add_argument("--err-reference", default="ground_truth", choices=detector.ERR_REFERENCES)
    p.add_argument("--clamp", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="trojanscope", description="Trojan model zoo, geometry and detection toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--workers", type=int, default=1, help=f"pool size (overridden by ${WORKERS_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")
    groups = parser.add_subparsers(dest="group", required=True)

    ds = groups.add_parser("dataset").add_subparsers(dest="action", required=True)
    p = ds.add_parser("synth", help="generate the seeded shapes dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--size", type=int, default=28)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--background", type=float, default=0.1, help="upper bound of the noise background")
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p = ds.add_parser("prepare", help="convert IDX image/label files")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    zg = groups.add_parser("zoo").add_subparsers(dest="action", required=True)
    p = zg.add_parser("build", help="train and screen a model zoo")
    p.add_argument("--data", required=True)
    p.add_argument("--clean", type=int, default=20)
    p.add_argument("--trojan-per-mapping", type=int, default=10)
    p.add_argument("--mappings", type=_mappings, default=list(MAPPING_KINDS))
    p.add_argument("--fr-min", type=float, default=0.90, help="fooling-rate floor for Trojan validity")
    p.add_argument("--va-gap-max", type=float, default=0.02, help="allowed VA gap to the clean reference")
    p.add_argument("--seed", type=int, default=0)
    _add_train(p)
    p.add_argument("--out", required=True)
    p = zg.add_parser("sweep", help="fooling rate and accuracy against the poisoning ratio")
    p.add_argument("--data", required=True)
    p.add_argument("--p", type=_floats, default=[0.05, 0.10, 0.15, 0.20])
    p.add_argument("--mapping", type=lambda s: _mappings(s)[0], default="M2O")
    p.add_argument("--no-clean", action="store_true", help="skip the P=0 reference model")
    p.add_argument("--seed", type=int, default=0)
    _add_train(p)
    p.add_argument("--out", required=True)

    ag = groups.add_parser("analyze").add_subparsers(dest="action", required=True)
    for name in ("margin", "spectrum"):
        p = ag.add_parser(name)
        p.add_argument("--manifest", required=True)
        p.add_argument("--data", default=None, help="dataset directory (default: the one the zoo was built from)")
        p.add_argument("--samples-per-class", type=int, default=40)
        p.add_argument("--seed", type=int, default=0)
        if name == "spectrum":
            p.add_argument("--k", type=int, default=100)
        p.add_argument("--out", required=True)

    dg = groups.add_parser("detect").add_subparsers(dest="action", required=True)
    p = dg.add_parser("single", help="verdict for one model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _add_detector(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p = dg.add_parser("bench", help="k-fold detector benchmark over a zoo")
    p.add_argument("--manifest", required=True)
    p.add_argument("--data", default=None)
    _add_detector(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--min-accuracy", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = groups.add_parser("rerun", help="replay a run_config file")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="write to a different output directory")
    return parser


# -- helpers -----------------------------------------------------------------

def resolve_workers(requested):
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise TrojanScopeError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    else:
        n = requested
    if n < 1:
        raise TrojanScopeError("worker count must be >= 1")
    return n


def write_run_config(out_dir, options):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    body = {"toolkit_version": __version__, "options": options}
    (out_dir / RUN_CONFIG).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _train_cfg(opts):
    return nn.TrainConfig(epochs=opts["epochs"], batch_size=opts["batch_size"], learning_rate=opts["lr"])


def _detector_cfg(opts):
    return detector.DetectorConfig(xi=opts["xi"], rho=opts["rho"], J=opts["J"], delta=opts["delta"],
                                   probe_per_class=opts["probe_per_class"], seed=opts["seed"],
                                   err_reference=opts["err_reference"], clamp=opts["clamp"])


def _zoo_cfg(opts, n_clean, per_mapping, mappings):
    return zoo.ZooConfig(arch_ids=(opts["arch"],), n_clean=n_clean, n_trojan_per_mapping=per_mapping,
                         mappings=tuple(mappings), train_cfg=_train_cfg(opts), master_seed=opts["seed"],
                         hidden=opts["hidden"], dataset_id=str(Path(opts["data"]).resolve()),
                         fr_min=opts.get("fr_min", 0.90), va_gap_max=opts.get("va_gap_max", 0.02))


def _manifest_and_validation(opts):
    manifest = zoo.load_manifest(opts["manifest"])
    data_dir = opts["data"] or manifest["config"]["dataset_id"]
    _, validation, _ = data.read_dataset_dir(data_dir)
    return manifest, validation, data_dir


# -- commands ----------------------------------------------------------------

def cmd_dataset(opts):
    out = Path(opts["out"])
    if opts["action"] == "synth":
        full = data.synthetic_shapes(opts["n"], opts["classes"], opts["size"], opts["channels"], opts["seed"],
                                     background=opts["background"])
        info = {"source": "shapes", "class_count": opts["classes"]}
    else:
        full = data.from_idx(opts["images"], opts["labels"])
        info = {"source": "idx", "class_count": int(full.labels.max()) + 1}
    train, validation = data.split(full, opts["validation_fraction"], opts["seed"])
    data.write_dataset_dir(out, train, validation, info)
    print(f"dataset: {len(train)} train / {len(validation)} validation -> {out}")


def cmd_zoo(opts):
    out = Path(opts["out"])
    train, validation, _ = data.read_dataset_dir(opts["data"])
    if opts["action"] == "build":
        cfg = _zoo_cfg(opts, opts["clean"], opts["trojan_per_mapping"], opts["mappings"])
        manifest = zoo.build_zoo(cfg, train, validation, out, workers=opts["workers"])
        n_trojan = sum(r["is_trojan"] for r in manifest["records"])
        print(f"zoo: {len(manifest['records'])} models ({n_trojan} Trojan), {len(manifest['dropped'])} dropped -> {out}")
        for w in manifest["warnings"]:
            print(f"warning: {w}")
    else:
        cfg = _zoo_cfg(opts, 1, 1, [opts["mapping"]])
        rows = zoo.sweep_poison_ratio(cfg, train, validation, opts["p"], kind=opts["mapping"], out_dir=out,
                                      with_clean=not opts["no_clean"])
        zoo.write_sweep_csv(out / "sweep.csv", rows)
        for row in rows:
            fr = "-" if row["fooling_rate"] is None else f"{row['fooling_rate']:.4f}"
            print(f"P={row['P']:.3f}  va={row['va']:.4f}  fr={fr}")


def cmd_analyze(opts):
    manifest, validation, _ = _manifest_and_validation(opts)
    out = Path(opts["out"])
    k = opts.get("k", 100)
    results = analysis.analyze_zoo(manifest, validation, opts["samples_per_class"], k, opts["seed"],
                                   workers=opts["workers"])
    if opts["action"] == "margin":
        _, table = analysis.write_margin_outputs(out, results)
        for t in table:
            print(f"{t['label']:>6}  n={t['n']:<3d} margin={t['margin_mean']:.4f} +- {t['margin_std']:.4f}")
    else:
        _, table = analysis.write_spectrum_outputs(out, results, k)
        for label, s in analysis.clean_first(table.summary):
            print(f"{label:>6}  n={s['n']:<3d} energy_at({k})={s['energy_mean']:.4f} +- {s['energy_std']:.4f}")


def cmd_detect(opts):
    out = Path(opts["out"])
    cfg = _detector_cfg(opts)
    if opts["action"] == "single":
        model = load_model(opts["model"])
        _, validation, _ = data.read_dataset_dir(opts["data"])
        v = detector.classify_model(model, validation, cfg)
        out.mkdir(parents=True, exist_ok=True)
        body = {"model": opts["model"], "is_trojan": v.is_trojan, "perturbed_error": v.perturbed_error,
                "clean_error": v.clean_error, "outer_iters_used": v.outer_iters_used,
                "r_norm": float((v.r_X ** 2).sum() ** 0.5)}
        (out / "verdict").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        print(f"verdict: {'trojan' if v.is_trojan else 'clean'}  perturbed_error={v.perturbed_error:.4f}")
        return
    manifest, validation, _ = _manifest_and_validation(opts)
    if not manifest.get("records"):
        raise TrojanScopeError("empty manifest: no models listed")
    entries = [(r["record_id"], zoo.model_path(manifest, r), r["is_trojan"], analysis.model_label(r))
               for r in manifest["records"]]
    report = detector.evaluate_detector(entries, validation, cfg, folds=opts["folds"], workers=opts["workers"])
    detector.write_report(out, report)
    agg = report.aggregate
    print(f"{opts['folds']}-fold detector benchmark over {len(entries)} models")
    for key in ("accuracy", "precision", "recall"):
        print(f"  {key:<9} {agg[key]['mean']:.4f} +- {agg[key]['std']:.4f}")
    print(f"  perturbed error: trojan {agg['mean_perturbed_error']['trojan']:.4f}"
          f"  clean {agg['mean_perturbed_error']['clean']:.4f}")
    gate = opts["min_accuracy"]
    if gate is not None and agg["accuracy"]["mean"] < gate:
        raise GateFailure(f"mean accuracy {agg['accuracy']['mean']:.4f} below --min-accuracy {gate}")


COMMANDS = {"dataset": cmd_dataset, "zoo": cmd_zoo, "analyze": cmd_analyze, "detect": cmd_detect}


def execute(opts):
    """Run one resolved option set: echo it, then dispatch."""
    write_run_config(opts["out"], opts)
    COMMANDS[opts["group"]](opts)


def _load_run_config(path, out=None):
    body = json.loads(Path(path).read_text())
    opts = body["options"]
    if out is not None:
        opts["out"] = out
    return opts


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.group == "rerun":
            opts = _load_run_config(args.config, args.out)
        else:
            opts = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
        opts["workers"] = resolve_workers(opts.get("workers", 1))
        execute(opts)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrojanScopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
