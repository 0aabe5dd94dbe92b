import csv

import numpy as np
import pytest

from trojanscope import geometry, nn
from trojanscope.data import LabeledSet
from trojanscope.errors import ProjectionError

from oracles import blobs, linear_model, mlp_2d, ray_search_distance


def test_closed_form_examples():
    np.testing.assert_allclose(geometry.project_linear_binary([1, 0], 0, [2, 0]), [-2, 0])
    np.testing.assert_allclose(geometry.project_linear_binary([1, 0], 0, [0, 5]), [0, 0])
    t = geometry.project_linear_binary([3, 4], 0, [1, 1])
    np.testing.assert_allclose(t, -(7 / 25) * np.array([3, 4]))
    assert np.linalg.norm(t) == pytest.approx(7 / 5)
    with pytest.raises(ValueError):
        geometry.project_linear_binary([0, 0], 1, [1, 1])


def test_closed_form_lands_on_hyperplane():
    rng = np.random.default_rng(0)
    for _ in range(200):
        d = int(rng.integers(1, 20))
        w, x, b = rng.standard_normal(d), rng.standard_normal(d) * 3, float(rng.standard_normal())
        t = geometry.project_linear_binary(w, b, x)
        assert abs(w @ (x + t) + b) < 1e-6


def _binary_linear(rng, d):
    w = rng.standard_normal((2, d))
    return linear_model(w, rng.standard_normal(2)), w[1] - w[0]


def test_projection_agrees_with_closed_form():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = int(rng.integers(2, 10))
        m, w = _binary_linear(rng, d)
        b = m.params[0]["bias"][1] - m.params[0]["bias"][0]
        x = rng.standard_normal(d)
        res = geometry.project_to_boundary(m, x)
        assert res.crossed and res.iterations == 1
        np.testing.assert_allclose(res.T_x, geometry.project_linear_binary(w, b, x), atol=1e-5)


def test_three_class_linear_example():
    m = linear_model(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]), np.zeros(3))
    x = np.array([1.0, 0.2])
    # candidates: class 1 |m|/|n| = 0.8/sqrt(2) = 0.566, class 2: 2.2/sqrt(5) = 0.984
    logits, jac = nn.input_jacobian(m, x[None])
    _, l = geometry.boundary_step(logits, jac.reshape(1, 3, 2), np.array([0]))
    assert l[0] == 1
    res = geometry.project_to_boundary(m, x)
    assert res.iterations == 1 and res.crossed and res.final_label == 1
    np.testing.assert_allclose(res.T_x, [-0.4, 0.4], atol=1e-8)


def test_linear_margin_and_normals_are_closed_form():
    rng = np.random.default_rng(2)
    m, w = _binary_linear(rng, 4)
    b = m.params[0]["bias"][1] - m.params[0]["bias"][0]
    xs = rng.standard_normal((30, 4))
    est = geometry.estimate_margin(m, xs)
    expected = np.abs(xs @ w + b) / np.linalg.norm(w)
    assert est.margin == pytest.approx(expected.mean(), abs=1e-5) and est.n_used == 30
    S = geometry.normal_matrix(m, xs)
    np.testing.assert_allclose(np.abs(S.columns.T @ w) / np.linalg.norm(w), 1.0, atol=1e-6)
    sigma = geometry.singular_spectrum(S).singular_values
    assert sigma[0] == pytest.approx(np.sqrt(30)) and np.all(sigma[1:] < 1e-6)


def test_duplicate_samples_give_identical_columns():
    rng = np.random.default_rng(3)
    m = mlp_2d(rng, 6, 3)
    x = rng.standard_normal(2)
    S = geometry.normal_matrix(m, np.stack([x, x]))
    np.testing.assert_array_equal(S.columns[:, 0], S.columns[:, 1])
    np.testing.assert_allclose(np.linalg.norm(S.columns, axis=0), 1.0, atol=1e-5)


def _toy(seed, classes=2, hidden=8):
    rng = np.random.default_rng(seed)
    centers = [(-2.0, 0.0), (2.0, 0.0), (0.0, 3.0)][:classes]
    xs, ys = blobs(rng, 100, centers, 0.5)
    m = mlp_2d(rng, hidden, classes)
    m = nn.train(m, LabeledSet(xs, ys), nn.TrainConfig(epochs=30, batch_size=16, learning_rate=0.05, seed=seed))
    return m, xs, rng


def test_projection_matches_ray_search_on_blob_mlp():
    m, xs, rng = _toy(0)
    pts = xs[rng.choice(len(xs), 50, replace=False)]
    proj = geometry.project_batch(m, pts)
    assert proj.crossed.mean() >= 0.98
    ray = np.array([ray_search_distance(m, p) for p in pts])
    rel = np.abs(proj.distances - ray) / ray
    assert np.mean(rel < 0.05) >= 0.95


def test_refinement_never_lengthens_and_keeps_crossing():
    m, xs, _ = _toy(1, classes=3)
    coarse = geometry.project_batch(m, xs[:60], refine=False)
    fine = geometry.project_batch(m, xs[:60])
    assert np.all(fine.distances <= coarse.distances + 1e-12)
    assert fine.crossed.all()
    flipped = nn.predict(m, xs[:60] + 1.02 * fine.T)
    assert np.all(flipped != fine.start_labels)


def test_logit_scaling_invariance():
    rng = np.random.default_rng(4)
    m = linear_model(rng.standard_normal((3, 5)), rng.standard_normal(3))
    scaled = m.copy()
    for k in scaled.params[0]:
        scaled.params[0][k] = scaled.params[0][k] * 7.5
    xs = rng.standard_normal((10, 5))
    a, b = geometry.project_batch(m, xs), geometry.project_batch(scaled, xs)
    np.testing.assert_allclose(a.T, b.T, atol=1e-10)


def test_projection_failures_are_reported():
    m = linear_model(np.zeros((2, 3)), np.array([1.0, 0.0]))
    proj = geometry.project_batch(m, np.zeros((4, 3)))
    assert proj.failed.all() and not proj.crossed.any()
    with pytest.raises(ProjectionError):
        geometry.estimate_margin(m, np.zeros((4, 3)))
    with pytest.raises(ProjectionError):
        geometry.normal_matrix(m, np.zeros((4, 3)))
    from trojanscope.errors import NumericalError
    with pytest.raises(NumericalError):
        geometry.project_to_boundary(m, np.zeros(3))


def test_spectrum_examples():
    q, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((12, 4)))
    rep = geometry.singular_spectrum(q)
    np.testing.assert_allclose(rep.singular_values, 1.0)
    np.testing.assert_allclose(rep.energy, np.arange(1, 5) / 4)
    rep = geometry.singular_spectrum(np.array([[3.0, 0.0], [0.0, 4.0], [0.0, 0.0]]))
    np.testing.assert_allclose(rep.singular_values, [4.0, 3.0])
    assert rep.energy_at(1) == pytest.approx(16 / 25) and rep.scaled[0] == 1.0
    assert rep.energy_at(50) == 1.0


def test_spectrum_invariants():
    rng = np.random.default_rng(6)
    S = rng.standard_normal((30, 20))
    S /= np.linalg.norm(S, axis=0)
    rep = geometry.singular_spectrum(S)
    assert np.all(np.diff(rep.energy) >= -1e-15) and rep.energy[-1] == 1.0
    perm = geometry.singular_spectrum(S[:, rng.permutation(20)])
    np.testing.assert_allclose(perm.singular_values, rep.singular_values, rtol=1e-10)
    assert (rep.singular_values ** 2).sum() == pytest.approx(20.0)


def test_compare_spectra():
    rng = np.random.default_rng(7)
    rep = geometry.singular_spectrum(rng.standard_normal((10, 6)))
    table = geometry.compare_spectra([("clean", rep), ("M2O", rep)], k=3)
    assert table.energy("clean") == table.energy("M2O")
    assert {row[0] for row in table.curves} == {"clean", "M2O"}
    other = geometry.singular_spectrum(rng.standard_normal((11, 6)))
    with pytest.raises(ValueError):
        geometry.compare_spectra([("clean", rep), ("M2O", other)])


def test_csv_writers(tmp_path):
    rep = geometry.singular_spectrum(np.eye(3))
    geometry.write_spectrum_csv(tmp_path / "s.csv", rep)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["index", "sigma", "sigma_scaled", "energy_cum"] and len(rows) == 4
    geometry.write_margins_csv(tmp_path / "m.csv", [{"model_id": "a", "is_trojan": False, "mapping": "clean",
                                                       "margin": 1.5, "n_used": 3}])
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert rows[0]["margin"] == "1.5"
