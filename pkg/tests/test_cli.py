import csv
import json

import pytest

from trojanscope import cli, zoo

TRAIN = ["--arch", "mlp2", "--hidden", "12", "--epochs", "2", "--batch-size", "32"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("dataset", "synth", "--classes", 4, "--n", 400, "--size", 12, "--seed", 1, "--out", root / "data") == 0
    assert run("zoo", "build", "--data", root / "data", "--clean", 5, "--trojan-per-mapping", 2,
               "--mappings", "m2o,m2m", "--fr-min", 0, "--va-gap-max", 1, *TRAIN, "--out", root / "zoo") == 0
    return root


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("dataset", "synth", "--n", 300, "--size", 10, "--seed", 1, "--out", tmp_path / name) == 0
    for f in ("train.npz", "validation.npz", "dataset.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    info = json.loads((tmp_path / "a" / "dataset.json").read_text())
    assert info["n_train"] == 270 and info["n_validation"] == 30


def test_prepare_rejects_wrong_magic(tmp_path, capsys):
    (tmp_path / "img").write_bytes(b"\x00\x00\x08\x01" + b"\x00" * 12)
    (tmp_path / "lab").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x00")
    assert run("dataset", "prepare", "--images", tmp_path / "img", "--labels", tmp_path / "lab",
               "--out", tmp_path / "o") == 1
    assert "0x00000803" in capsys.readouterr().err


def test_zoo_build_counting(tmp_path, workdir):
    assert run("zoo", "build", "--data", workdir / "data", "--clean", 10, "--trojan-per-mapping", 4,
               "--mappings", "m2o,m2m,mixed", "--fr-min", 0, "--va-gap-max", 1, *TRAIN, "--out", tmp_path) == 0
    manifest = zoo.load_manifest(tmp_path)
    assert len(manifest["records"]) == 22
    assert sum(r["is_trojan"] for r in manifest["records"]) == 12
    for r in manifest["records"]:
        if r["is_trojan"]:
            assert 0.15 <= r["poison_cfg"]["ratio"] <= 0.20


def test_zoo_sweep_rows(tmp_path, workdir):
    assert run("zoo", "sweep", "--data", workdir / "data", "--p", "0.05,0.1,0.15,0.2", "--no-clean", *TRAIN,
               "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert [float(r["P"]) for r in rows] == [0.05, 0.1, 0.15, 0.2]


def test_analyze_outputs(tmp_path, workdir):
    assert run("analyze", "margin", "--manifest", workdir / "zoo", "--samples-per-class", 5, "--out", tmp_path / "m") == 0
    rows = list(csv.DictReader(open(tmp_path / "m" / "margins.csv")))
    assert len(rows) == len(zoo.load_manifest(workdir / "zoo")["records"])
    assert run("analyze", "spectrum", "--manifest", workdir / "zoo", "--samples-per-class", 5, "--k", 100,
               "--out", tmp_path / "s") == 0
    spectra = list(csv.DictReader(open(tmp_path / "s" / "spectra.csv")))
    assert "energy_at_k" in spectra[0] and (tmp_path / "s" / f"spectrum_{rows[0]['model_id']}.csv").is_file()


def test_analyze_empty_manifest_is_domain_error(tmp_path, workdir, capsys):
    body = json.loads((workdir / "zoo" / zoo.MANIFEST_NAME).read_text())
    body["records"] = []
    (tmp_path / "z").mkdir()
    (tmp_path / "z" / zoo.MANIFEST_NAME).write_text(json.dumps(body))
    assert run("analyze", "margin", "--manifest", tmp_path / "z", "--out", tmp_path / "o") == 1
    assert "empty" in capsys.readouterr().err.lower()


def test_missing_model_is_io_error(tmp_path, workdir):
    assert run("detect", "single", "--model", tmp_path / "nope", "--data", workdir / "data", "--out", tmp_path) == 2
    assert run("analyze", "margin", "--manifest", tmp_path / "nope", "--out", tmp_path / "o") == 2


def test_detect_single_and_bench(tmp_path, workdir, capsys):
    rec = zoo.load_manifest(workdir / "zoo")["records"][0]
    assert run("detect", "single", "--model", workdir / "zoo" / rec["model_path"], "--data", workdir / "data",
               "--xi", 2, "--rho", 0.5, "--J", 10, "--delta", 0.5, "--probe-per-class", 5, "--out", tmp_path / "v") == 0
    assert capsys.readouterr().out.startswith("verdict: ")
    verdict = json.loads((tmp_path / "v" / "verdict").read_text())
    assert verdict["r_norm"] == pytest.approx(2.0, abs=1e-5) or verdict["outer_iters_used"] == 0
    assert run("detect", "bench", "--manifest", workdir / "zoo", "--folds", 2, "--probe-per-class", 5,
               "--out", tmp_path / "b") == 0
    report = json.loads((tmp_path / "b" / "detector_report").read_text())
    assert len(report["folds"]) == 2 and set(report["aggregate"]["accuracy"]) == {"mean", "std"}
    assert run("detect", "bench", "--manifest", workdir / "zoo", "--folds", 2, "--probe-per-class", 5,
               "--min-accuracy", 1.01, "--out", tmp_path / "g") == 1


def test_rerun_reproduces_reports(tmp_path, workdir):
    out = tmp_path / "first"
    assert run("detect", "bench", "--manifest", workdir / "zoo", "--folds", 2, "--probe-per-class", 5,
               "--out", out) == 0
    assert run("rerun", out / "run_config", "--out", tmp_path / "second") == 0
    for f in ("detector_report", "detector_report.csv"):
        assert (out / f).read_bytes() == (tmp_path / "second" / f).read_bytes()
    assert run("zoo", "build", "--data", workdir / "data", "--clean", 1, "--trojan-per-mapping", 1,
               "--mappings", "m2o", "--fr-min", 0, "--va-gap-max", 1, *TRAIN, "--out", tmp_path / "z1") == 0
    assert run("rerun", tmp_path / "z1" / "run_config", "--out", tmp_path / "z2") == 0
    assert (tmp_path / "z1" / zoo.MANIFEST_NAME).read_bytes() == (tmp_path / "z2" / zoo.MANIFEST_NAME).read_bytes()


def test_workers_env(monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    assert cli.resolve_workers(1) == 3
    monkeypatch.setenv(cli.WORKERS_ENV, "x")
    with pytest.raises(cli.TrojanScopeError):
        cli.resolve_workers(1)
    monkeypatch.delenv(cli.WORKERS_ENV)
    assert cli.resolve_workers(2) == 2


def test_bad_mapping_is_usage_error():
    with pytest.raises(SystemExit):
        cli.main(["zoo", "build", "--data", "x", "--mappings", "bogus", "--out", "y"])
