import json
import math

import numpy as np
import pytest

import orinorm


def test_baseline_orients_a_sphere_outward():
    s = orinorm.sample_shape("sphere", n=2000, seed=4)
    normals = orinorm.estimate_baseline(s["points"])
    assert normals.shape == (2000, 3)
    assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)
    outward = np.einsum("ij,ij->i", normals, s["points"]) > 0
    assert outward.mean() >= 0.999
    assert orinorm.rmse(normals, s["normals"]) < 2.0


def test_cnd_equals_rmse_without_noise():
    s = orinorm.sample_shape("torus", n=800, seed=2)
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(800, 3))
    pred /= np.linalg.norm(pred, axis=1, keepdims=True)
    a = orinorm.cnd(pred, s["points"], s["clean_points"], s["clean_normals"])
    b = orinorm.rmse(pred, s["normals"])
    assert math.isclose(a, b, abs_tol=1e-9)


def test_pca_normals_are_sign_free():
    s = orinorm.sample_shape("cube", n=1500, noise=0.6, seed=1)
    n = orinorm.pca_normals(s["points"], k=16)
    assert orinorm.rmse(n, s["normals"]) == pytest.approx(orinorm.rmse(-n, s["normals"]))


def test_bad_input_raises():
    with pytest.raises(ValueError):
        orinorm.estimate_baseline(np.zeros((10, 2)))
    with pytest.raises(ValueError):
        orinorm.sample_shape("teapot")


def test_train_estimate_evaluate(tmp_path):
    manifest = orinorm.generate_benchmark(
        tmp_path / "data", shapes=["sphere"], noise=[0.0, 0.6], densities=["uniform"], n=400, seed=3
    )
    toy = {
        "n_p": 32,
        "n_d": 32,
        "rho_p": [0.75, 0.75, 1.0, 1.0],
        "rho_d": [0.5, 0.5, 1.0],
        "lfe_scales": [4, 8],
        "lfe_scale_d": 4,
        "hgif_scales": [6, 6, 4, 4],
        "hgif_scales_d": [4, 4, 4],
        "pff_neighbors": 4,
        "width": 6,
        "feature_dim": 8,
        "pos_width": 4,
    }
    losses = orinorm.train(
        manifest,
        tmp_path / "ckpt",
        {"epochs": 2, "batch_size": 2, "queries_per_shape": 4, "model": toy},
    )
    assert len(losses) == 2 and all(math.isfinite(x) for x in losses)

    model = orinorm.Model.load(tmp_path / "ckpt" / "final")
    assert model.parameter_count > 0
    assert model.config["n_p"] == 32

    entries = json.loads(manifest.read_text())["entries"]
    preds = tmp_path / "pred"
    preds.mkdir()
    for e in entries:
        pts = np.loadtxt(tmp_path / "data" / e["noisy"])
        normals = model.estimate(pts, subset=20)
        assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)
        orinorm.write_normals(normals, preds / (e["noisy"][:-4] + ".normals"))

    report = orinorm.evaluate(manifest, preds, model_id="smoke", timestamp="fixed")
    assert report["metadata"]["model_id"] == "smoke"
    assert [c["name"] for c in report["categories"]] == ["none", "0.6%"]
    assert report == orinorm.evaluate(manifest, preds, model_id="smoke", timestamp="fixed")
