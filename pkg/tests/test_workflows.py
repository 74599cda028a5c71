import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from tpnngp import workflows as wf
from tpnngp.kernels import NetworkConfig, nngp_gram
from tpnngp.posterior import RegressionTask


def write_csv(path, x, y, header=None):
    header = header or [f"x{j}" for j in range(x.shape[1])] + ["y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, t in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [t])
    return path


def regression_data(rng, n=60, d=2):
    x = rng.uniform(-2, 2, (n, d))
    y = np.sin(2 * x[:, 0]) + 0.3 * x[:, 1] + 0.1 * rng.standard_normal(n)
    return x, 5.0 + 3.0 * y


def two_moons(rng, n=200, noise=0.1):
    t = rng.uniform(0, np.pi, n)
    lab = rng.integers(0, 2, n)
    x = np.where(lab[:, None] == 0, np.c_[np.cos(t), np.sin(t)], np.c_[1 - np.cos(t), 0.5 - np.sin(t)])
    return x + noise * rng.standard_normal((n, 2)), lab


class TestLoadCsv:
    def test_split_sizes(self, tmp_path, rng):
        path = write_csv(tmp_path / "d.csv", rng.standard_normal((10, 2)), rng.standard_normal(10))
        ds = wf.load_csv(path)
        assert [len(s) for s in ds.split] == [8, 1, 1]
        assert sorted(np.concatenate(ds.split)) == list(range(10))

    def test_seed_determinism(self, tmp_path, rng):
        path = write_csv(tmp_path / "d.csv", rng.standard_normal((30, 2)), rng.standard_normal(30))
        a, b, c = wf.load_csv(path, seed=4), wf.load_csv(path, seed=4), wf.load_csv(path, seed=5)
        assert all(np.array_equal(p, q) for p, q in zip(a.split, b.split))
        assert not all(np.array_equal(p, q) for p, q in zip(a.split, c.split))

    def test_standardized_on_train(self, tmp_path, rng):
        x, y = regression_data(rng)
        ds = wf.load_csv(write_csv(tmp_path / "d.csv", x, y))
        x_tr, y_tr = ds.part("train")
        assert_allclose(x_tr.mean(0), 0, atol=1e-12)
        assert_allclose(x_tr.std(0), 1, rtol=1e-12)
        assert y_tr.mean() == pytest.approx(0, abs=1e-12)
        assert_allclose(ds.raw_targets("test"), y[ds.split[2]], rtol=1e-12)

    def test_target_by_name_and_index(self, tmp_path, rng):
        x = rng.standard_normal((12, 3))
        path = write_csv(tmp_path / "d.csv", x, rng.standard_normal(12), ["a", "b", "c", "y"])
        by_name = wf.load_csv(path, target="b")
        by_index = wf.load_csv(path, target=1)
        assert by_name.input_dim == 3
        assert_allclose(by_name.targets, by_index.targets)
        with pytest.raises(wf.ConfigError, match="not in"):
            wf.load_csv(path, target="zz")

    def test_missing_rows_dropped(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,y\n1,2\n2,\n3,4\n4,5\nNA,1\n5,6\n")
        with pytest.warns(UserWarning, match="dropped 2 rows"):
            ds = wf.load_csv(path, ratios=(0.5, 0.25, 0.25))
        assert ds.features.shape == (4, 1)

    def test_non_numeric_target(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,y\n1,x\n2,y\n3,z\n")
        with pytest.raises(wf.ConfigError, match="not numeric"):
            wf.load_csv(path)

    def test_classification_labels(self, tmp_path, rng):
        x = rng.standard_normal((20, 2))
        ds = wf.load_csv(write_csv(tmp_path / "d.csv", x, [3, 7] * 10), kind="classification")
        assert ds.n_classes == 2 and set(ds.labels) == {0, 1}
        assert_allclose(ds.targets.sum(1), 1)

    def test_bad_ratios(self, rng):
        with pytest.raises(wf.ConfigError):
            wf.dataset_from_arrays(rng.standard_normal((10, 1)), rng.standard_normal(10), ratios=(0.5, 0.5, 0.5))


class TestExperimentConfig:
    def test_exact_needs_closed_form_prior(self):
        with pytest.raises(wf.ConfigError):
            wf.ExperimentConfig(prior="burr:2,2", inference="exact")
        wf.ExperimentConfig(prior="burr:2,2", inference="is:100")

    def test_round_trip(self, tmp_path):
        cfg = wf.ExperimentConfig(NetworkConfig(depth=2), "point:1.5", "is:500", 0.01, 3, {"width": 64})
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        back = wf.ExperimentConfig.from_json(path)
        assert back.digest() == cfg.digest()

    def test_overrides(self):
        cfg = wf.ExperimentConfig.from_dict({"seed": 1, "options": {"width": 8}}, seed=5, options={"n_nets": 3})
        assert cfg.seed == 5 and cfg.opt("width") == 8 and cfg.opt("n_nets") == 3

    def test_hash_changes_with_any_field(self):
        base = wf.ExperimentConfig()
        variants = [
            replace(base, seed=1),
            replace(base, prior="invgamma:2,3"),
            replace(base, inference="is:10"),
            replace(base, noise_variance=0.1),
            replace(base, network=NetworkConfig(depth=2)),
            replace(base, options={"width": 7}),
        ]
        digests = {base.digest()} | {v.digest() for v in variants}
        assert len(digests) == len(variants) + 1

    @pytest.mark.parametrize(
        "raw", [{"bogus": 1}, {"options": {"nope": 1}}, {"seed": -1}, {"network": {"depth": 0}}, {"prior": "gamma:1"}]
    )
    def test_invalid(self, raw):
        with pytest.raises(wf.ConfigError):
            wf.ExperimentConfig.from_dict(raw)

    def test_parse_inference(self):
        assert wf.parse_inference("IS:200") == ("is", 200)
        assert wf.parse_inference("svtp") == ("svtp", None)
        with pytest.raises(wf.ConfigError):
            wf.parse_inference("mcmc")


class TestRegression:
    @pytest.fixture
    def ds(self, rng):
        return wf.dataset_from_arrays(*regression_data(rng))

    def test_nll_jacobian_identity(self, ds):
        cfg = wf.ExperimentConfig(noise_variance=0.05)
        metrics, rows = wf.run_regression(cfg, ds)
        y_raw = ds.raw_targets("test")
        loc = np.array([r[2] for r in rows])
        scale = np.array([r[3] for r in rows])
        dof = rows[0][4]
        direct = -np.mean(stats.t.logpdf(y_raw, dof, loc, scale))
        assert abs(metrics["nll"] - direct) < 1e-10

    def test_train_rmse_near_zero(self, ds):
        metrics, _ = wf.run_regression(wf.ExperimentConfig(noise_variance=0.0), ds, eval_split="train")
        assert metrics["rmse"] < 1e-3 * ds.y_std

    def test_exact_vs_importance_sampling(self, ds):
        exact, _ = wf.run_regression(wf.ExperimentConfig(noise_variance=0.05), ds)
        approx, _ = wf.run_regression(wf.ExperimentConfig(noise_variance=0.05, inference="is:100000"), ds)
        assert abs(exact["nll"] - approx["nll"]) < 0.01
        assert exact["rmse"] == pytest.approx(approx["rmse"], rel=1e-8)

    def test_point_mass_is_gaussian_nngp(self, ds):
        cfg = wf.ExperimentConfig(prior="point:1.3", noise_variance=0.05)
        metrics, _ = wf.run_regression(cfg, ds)
        x_tr, y_tr = ds.part("train")
        x_te, _ = ds.part("test")
        g = nngp_gram(x_tr, x_te, replace(cfg.network, input_dim=2))
        noise = RegressionTask(x_tr, y_tr, x_te, 0.05).noise(g)
        a = 1.3 * (g.k_trtr + noise * np.eye(len(y_tr)))
        mean = 1.3 * g.k_tetr @ np.linalg.solve(a, y_tr)
        var = 1.3 * (np.diag(g.k_tete) + noise) - 1.3**2 * np.einsum("ij,ji->i", g.k_tetr, np.linalg.solve(a, g.k_tetr.T))
        y_raw = ds.raw_targets("test")
        ref = -np.mean(stats.norm.logpdf(y_raw, mean * ds.y_std + ds.y_mean, np.sqrt(var) * ds.y_std))
        assert metrics["nll"] == pytest.approx(ref, abs=1e-10)

    def test_validation_split_untouched(self, ds):
        cfg = wf.ExperimentConfig(noise_variance=0.05)
        val = ds.split[1]
        targets = ds.targets.copy()
        targets[val] += 100.0
        feats = ds.features.copy()
        feats[val] = 9.9
        poisoned = replace(ds, targets=targets, features=feats)
        a, _ = wf.run_regression(cfg, ds)
        b, _ = wf.run_regression(cfg, poisoned)
        assert a["nll"] == b["nll"] and a["rmse"] == b["rmse"]

    def test_outputs_deterministic(self, ds, tmp_path):
        cfg = wf.ExperimentConfig(noise_variance=0.05, inference="is:2000", seed=4)
        wf.run_regression(cfg, ds, tmp_path / "a")
        wf.run_regression(cfg, ds, tmp_path / "b")
        for name in ("metrics.json", "predictions.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_rejects_classification(self, rng):
        ds = wf.dataset_from_arrays(rng.standard_normal((10, 1)), [0, 1] * 5, kind="classification")
        with pytest.raises(wf.ConfigError):
            wf.run_regression(wf.ExperimentConfig(), ds)


class TestKernelExport:
    @pytest.fixture
    def ds(self, rng):
        return wf.dataset_from_arrays(*regression_data(rng, n=30))

    @pytest.mark.parametrize("kind", ["nngp", "ntk"])
    def test_round_trip_bit_exact(self, ds, kind, tmp_path):
        path, gram = wf.export_kernel(wf.ExperimentConfig(), ds, kind, tmp_path)
        back = wf.load_kernel(path)
        for a, b in ((gram.k_trtr, back.k_trtr), (gram.k_tetr, back.k_tetr), (gram.k_tete, back.k_tete)):
            assert np.array_equal(a, b)
        assert back.kind == gram.kind

    def test_sidecar_hash(self, ds, tmp_path):
        a, _ = wf.export_kernel(wf.ExperimentConfig(), ds, "nngp", tmp_path / "a")
        b, _ = wf.export_kernel(wf.ExperimentConfig(seed=1), ds, "nngp", tmp_path / "b")
        ma, mb = json.loads(a.read_text()), json.loads(b.read_text())
        assert ma["config_hash"] != mb["config_hash"]
        assert ma["data_hash"] == mb["data_hash"] == ds.source_hash

    def test_loaded_gram_gives_identical_nll(self, ds, tmp_path):
        cfg = wf.ExperimentConfig(noise_variance=0.05)
        path, _ = wf.export_kernel(cfg, ds, "nngp", tmp_path)
        direct, _ = wf.run_regression(cfg, ds)
        loaded, _ = wf.run_regression(cfg, ds, gram=wf.load_kernel(path))
        assert abs(direct["nll"] - loaded["nll"]) < 1e-12


class TestClassification:
    def test_untrained_accuracy_is_chance(self, rng):
        c = 4
        x = rng.standard_normal((2000, 2))
        ds = wf.dataset_from_arrays(x, np.repeat(np.arange(c), 500), ratios=(0.5, 0.0, 0.5), kind="classification")
        cfg = wf.ExperimentConfig(inference="svgp", options={"steps": 0, "n_inducing": 8, "predict_mc": 16})
        metrics, _ = wf.run_classification_sv(cfg, ds)
        n = metrics["n_test"]
        assert abs(metrics["accuracy"] - 1 / c) < 3 * math.sqrt((1 / c) * (1 - 1 / c) / n)

    def test_model_switch_and_outputs(self, rng, tmp_path):
        x, y = two_moons(rng, 80)
        ds = wf.dataset_from_arrays(x, y, kind="classification")
        base = {"steps": 5, "n_inducing": 6, "batch_size": 32, "predict_mc": 16}
        for model in ("svgp", "svtp"):
            metrics, _ = wf.run_classification_sv(wf.ExperimentConfig(inference=model, options=base), ds, tmp_path / model)
            assert metrics["model"] == model
            assert {p.name for p in (tmp_path / model).iterdir()} == {"metrics.json", "trace.csv", "predictions.csv"}
        assert json.loads((tmp_path / "svtp" / "metrics.json").read_text())["scale_post"] is not None

    def test_two_moons_svtp(self, rng):
        x, y = two_moons(rng, 400)
        ds = wf.dataset_from_arrays(x, y, kind="classification")
        opts = {"steps": 400, "n_inducing": 16, "batch_size": 64, "learning_rate": 0.03, "predict_mc": 64}
        metrics, _ = wf.run_classification_sv(wf.ExperimentConfig(inference="svtp", options=opts), ds)
        assert metrics["accuracy"] >= 0.9

    def test_deterministic_metrics(self, rng, tmp_path):
        x, y = two_moons(rng, 60)
        ds = wf.dataset_from_arrays(x, y, kind="classification")
        cfg = wf.ExperimentConfig(inference="svtp", options={"steps": 5, "n_inducing": 4, "predict_mc": 8})
        wf.run_classification_sv(cfg, ds, tmp_path / "a")
        wf.run_classification_sv(cfg, ds, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()

    def test_needs_sv_inference(self, rng):
        ds = wf.dataset_from_arrays(rng.standard_normal((10, 1)), [0, 1] * 5, kind="classification")
        with pytest.raises(wf.ConfigError):
            wf.run_classification_sv(wf.ExperimentConfig(), ds)


class TestVerify:
    def test_lemma_b3_passes(self, tmp_path):
        report = wf.run_verify(wf.ExperimentConfig(), "lemmab3", tmp_path)
        assert report["pass"] and report["ks_statistic"] < 0.01
        assert json.loads((tmp_path / "metrics.json").read_text())["pass"] is True
        with open(tmp_path / "samples.csv") as fh:
            assert next(csv.reader(fh)) == ["sample", "source", "coordinate", "value"]

    def test_lemma_b3_negative_control_fails(self):
        cfg = wf.ExperimentConfig(prior="invgamma:1,1", options={"negative_control": True})
        assert not wf.run_verify(cfg, "lemmab3")["pass"]

    def test_prior_small_run(self, tmp_path):
        cfg = wf.ExperimentConfig(options={"width": 64, "n_nets": 50})
        report = wf.run_verify(cfg, "prior", tmp_path)
        assert report["n_samples"] == 50 and 0 <= report["p_value"] <= 1
        with open(tmp_path / "samples.csv") as fh:
            assert len(list(csv.reader(fh))) == 51

    def test_readout_small_run(self):
        report = wf.run_verify(wf.ExperimentConfig(options={"width": 64, "n_nets": 20}), "readout")
        assert report["theorem"] == "readout" and report["n_samples"] == 20

    def test_fullgd_small_run(self):
        cfg = wf.ExperimentConfig(prior="invgamma:1,1", options={"width": 64, "n_nets": 3, "gd_c": 0.9})
        report = wf.run_verify(cfg, "fullgd")
        assert report["all_converged"] and report["median_steps"] > 0

    def test_ntk_kernel_rate(self):
        cfg = wf.ExperimentConfig(options={"ntk_widths": [128, 2048], "n_nets": 6})
        report = wf.run_verify(cfg, "ntkkernel")
        assert report["pass"], report

    def test_unknown(self):
        with pytest.raises(wf.ConfigError):
            wf.run_verify(wf.ExperimentConfig(), "nothing")

    def test_sin_task(self):
        t = wf.sin_task(0.5)
        assert t.n_train == 10 and t.x_te[0, 0] == 0.5
        assert_allclose(t.y_tr, np.sin(t.x_tr[:, 0]))


class TestGrid:
    def test_selects_by_validation(self, rng, tmp_path):
        ds = wf.dataset_from_arrays(*regression_data(rng, n=80))
        cfg = wf.ExperimentConfig(options={"grid": [1.0, 3.0], "grid_noise": [0.01, 0.1]})
        summary, table = wf.run_grid(cfg, ds, tmp_path)
        assert summary["n_trials"] == len(table) == 8
        best = min(table, key=lambda r: r["val_nll"])
        assert summary["best"]["prior"] == best["prior"]
        assert summary["best"]["val_nll"] == best["val_nll"]
        chosen = wf.ExperimentConfig(prior=best["prior"], noise_variance=best["noise_variance"])
        assert summary["test_nll"] == pytest.approx(wf.run_regression(chosen, ds)[0]["nll"], abs=1e-12)
        assert (tmp_path / "grid.csv").exists()


def test_worker_count(monkeypatch):
    monkeypatch.setenv("TPNNGP_THREADS", "3")
    assert wf.worker_count() == 3
    monkeypatch.setenv("TPNNGP_THREADS", "x")
    with pytest.raises(wf.ConfigError):
        wf.worker_count()
