import numpy as np
import pytest

from hyperclust.distributions import ghd_mean_cov
from hyperclust.em import FitConfig, fit
from hyperclust.errors import UsageError
from hyperclust.missing_data import inject_missingness
from hyperclust.selection import ModelGrid, adjusted_rand_index
from hyperclust.simulation import (
    DESIGN_IDS,
    SimDesign,
    align_components,
    builtin_design,
    estimates,
    generate,
    run_study,
)


class TestDesigns:
    def test_sim3(self):
        d = builtin_design("Sim3")
        assert (d.family, d.structure, d.dofs) == ("MST", "VEI", (7.0, 5.0))

    def test_sim1(self):
        d = builtin_design("sim1")
        assert d.lams == (-0.5, 1.0) and d.omegas == (6.0, 6.0)
        assert d.structure == "VEE"

    def test_sim5_gaussian(self):
        d = builtin_design("Sim5")
        assert d.family == "GMM" and d.structure == "VEE"
        assert np.all(d.betas == 0) and d.components() is None
        assert d.fit_family == "MGHD"

    @pytest.mark.parametrize("design_id", DESIGN_IDS)
    def test_structure_consistent(self, design_id):
        """Built-in dispersions have the pattern of the declared structure."""
        d = builtin_design(design_id)
        vals = [np.linalg.eigvalsh(s) for s in d.sigmas]
        dets = [np.prod(v) for v in vals]
        assert dets[0] != pytest.approx(dets[1])  # variable volume
        np.testing.assert_allclose(vals[0] / dets[0] ** 0.5, vals[1] / dets[1] ** 0.5)  # equal shape
        if d.structure.endswith("I"):
            assert np.all(d.sigmas[:, 0, 1] == 0)

    def test_overlap_halves_gap(self):
        a, b = builtin_design("Sim1"), builtin_design("Sim2")
        np.testing.assert_allclose(b.mus, a.mus / 2)

    def test_unknown(self):
        with pytest.raises(UsageError):
            builtin_design("Sim7")

    def test_validation(self):
        d = builtin_design("Sim1")
        with pytest.raises(UsageError):
            SimDesign(id="x", family="MGHD", structure="VEE", separation="", mus=d.mus, sigmas=d.sigmas,
                      betas=d.betas, lams=(1.0,), omegas=(1.0,))
        with pytest.raises(UsageError):
            SimDesign(id="x", family="LAPLACE", structure="VEE", separation="", mus=d.mus,
                      sigmas=d.sigmas, betas=d.betas)

    def test_true_values_layout(self):
        tv = builtin_design("Sim3").true_values()
        np.testing.assert_allclose(tv["mu1+beta1"], [2.0, -2.0])
        assert tv["nu1"].tolist() == [7.0] and tv["Sigma1"].size == 3


class TestGenerate:
    def test_counts(self):
        data, labels = generate(builtin_design("Sim1"), seed=0)
        assert data.shape == (400, 2)
        assert np.bincount(labels).tolist() == [200, 200]

    @pytest.mark.parametrize("design_id", DESIGN_IDS)
    def test_deterministic(self, design_id):
        a = generate(builtin_design(design_id), 5)
        b = generate(builtin_design(design_id), 5)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert not np.array_equal(a[0], generate(builtin_design(design_id), 6)[0])

    @pytest.mark.parametrize("design_id", ["Sim1", "Sim3", "Sim5"])
    def test_component_means_within_clt_bands(self, design_id):
        d = builtin_design(design_id, n_per_component=20000)
        data, labels = generate(d, seed=1)
        for g in range(d.G):
            if d.family == "MGHD":
                mean, cov = ghd_mean_cov(d.components()[g])
            elif d.family == "MST":
                v = d.dofs[g]
                ew, var_w = v / (v - 2), 2 * v**2 / ((v - 2) ** 2 * (v - 4))
                mean = d.mus[g] + ew * d.betas[g]
                cov = ew * d.sigmas[g] + var_w * np.outer(d.betas[g], d.betas[g])
            else:
                mean, cov = d.mus[g], d.sigmas[g]
            x = data[labels == g]
            z = (x.mean(axis=0) - mean) / np.sqrt(np.diag(cov) / len(x))
            assert np.all(np.abs(z) < 4.5), z


class TestAlignment:
    def test_swapped_labels(self):
        truth = np.array([0, 0, 0, 1, 1, 1])
        fitted = np.array([1, 1, 0, 0, 0, 0])
        assert align_components(truth, fitted, 2).tolist() == [1, 0]

    def test_estimates_reordered(self):
        d = builtin_design("Sim3")
        from hyperclust.em import MixtureModel

        model = MixtureModel("MST", [0.5, 0.5], tuple(d.components()), "VEI")
        est = estimates(model, np.array([1, 0]))
        np.testing.assert_array_equal(est["mu1"], d.mus[1])
        assert est["nu2"].tolist() == [7.0]


CFG = FitConfig(max_iter=40, n_starts=1, epsilon=1e-4)


class TestStudy:
    def test_single_replication_equals_single_fit(self):
        d = builtin_design("Sim3", n_per_component=80)
        res = run_study(d, ("MCAR",), (0.1,), replications=1, cfg=CFG, seed=4)
        data, labels = generate(d, 4)
        from hyperclust.simulation import _replication_seed

        ds = inject_missingness(data, "MCAR", 0.1, _replication_seed(4, 0, 0, 0))
        rep = fit(ds, 2, "MST", "VEI", CFG)
        row = res.summary_rows()[0]
        assert row["replications"] == row["fitted"] == 1
        assert row["mean_ari"] == adjusted_rand_index(labels, rep.map_labels)
        assert row["mean_bic"] == rep.bic
        assert np.isnan(row["sd_ari"])

    def test_bias_is_mean_minus_truth(self):
        d = builtin_design("Sim3", n_per_component=80)
        res = run_study(d, ("MCAR", "MAR1"), (0.05,), replications=3, cfg=CFG, seed=1)
        truth = d.true_values()
        rows = res.parameter_rows()
        assert {r["mechanism"] for r in rows} == {"MCAR", "MAR1"}
        for r in rows:
            assert r["bias"] == pytest.approx(r["mean"] - truth[r["parameter"]][r["coordinate"] - 1], abs=1e-12)
            assert r["n"] == 3

    def test_threads_match_serial(self):
        d = builtin_design("Sim1", n_per_component=60)
        a = run_study(d, replications=2, cfg=CFG, seed=2, workers=1)
        b = run_study(d, replications=2, cfg=CFG, seed=2, workers=2)
        assert a.summary_rows() == b.summary_rows()

    def test_grid_selection_and_failures(self):
        d = builtin_design("Sim5", n_per_component=60)
        res = run_study(d, replications=2, grid=ModelGrid((1, 2)), cfg=CFG, seed=3)
        row = res.summary_rows()[0]
        assert row["fitted"] + len(res.cells[0].failures) == 2
        assert all(g in (1, 2) for g in res.cells[0].chosen_G)
        # Gaussian designs are fitted by MGHD; no index/concentration truth exists
        for r in res.parameter_rows():
            if r["parameter"].startswith(("lambda", "omega")):
                assert np.isnan(r["bias"])

    def test_bad_replications(self):
        with pytest.raises(UsageError):
            run_study(builtin_design("Sim1"), replications=0)
