"""Acceptance suite: eleven end-to-end criteria, each printing one PASS/FAIL line.

Criteria 5-8 fit many models and are marked ``slow``; deselect them with
``-m "not slow"``.
"""

import itertools
import math

import mpmath as mp
import numpy as np
import pytest
from scipy import linalg

from gaussian_em import gaussian_em_step
from hyperclust import cli
from hyperclust.distributions import (
    GhdParams,
    GhFullParams,
    GigParams,
    StParams,
    conditional,
    gh_full_log_density,
    gig_expect_log,
    gig_moment,
    log_density,
    marginal,
    st_log_density,
)
from hyperclust.em import FitConfig, MixtureModel, e_step, fit, initialize, m_step
from hyperclust.gpcm import ALL_STRUCTURES, ScatterSet, constrain, criterion
from hyperclust.missing_data import inject_missingness
from hyperclust.selection import ModelGrid, search
from hyperclust.simulation import DESIGN_IDS, builtin_design, generate, run_study


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return emit


def spd(rng, p, scale=1.0):
    a = rng.normal(size=(p, p))
    return scale * (a @ a.T / p + 0.5 * np.eye(p))


# 1 ---------------------------------------------------------------------------


def test_01_closure_identity(verdict):
    rng = np.random.default_rng(101)
    worst = 0.0
    for k in range(200):
        family = ("ghd", "st")[k % 2]
        mu, sigma, beta = rng.normal(size=4), spd(rng, 4), rng.normal(size=4)
        if family == "ghd":
            par = GhdParams(mu=mu, sigma=sigma, beta=beta, lam=rng.uniform(-3, 3), omega=rng.uniform(0.2, 5))
        else:
            par = StParams(mu=mu, sigma=sigma, beta=beta, dof=rng.uniform(2.5, 30))
        idx1 = rng.choice(4, size=2, replace=False)
        idx2 = np.setdiff1d(np.arange(4), idx1)
        x = mu + rng.normal(size=4) * 1.5
        split = log_density(x[idx1], marginal(par, idx1)) + gh_full_log_density(
            x[idx2], conditional(par, idx1, x[idx1])
        )
        worst = max(worst, abs(log_density(x, par) - split))
    verdict(1, worst <= 1e-10, f"200 parameter sets, max |joint - (marginal + conditional)| = {worst:.2e} (tol 1e-10)")


# 2 ---------------------------------------------------------------------------


def _gig_quad(lam, chi, psi, g):
    kern = lambda w: w ** (lam - 1) * mp.exp(-(psi * w + chi / w) / 2)
    mode = ((lam - 1) + math.sqrt((lam - 1) ** 2 + chi * psi)) / psi
    pts = [0, mode / 4, mode, 4 * mode, 40 * mode, mp.inf]
    return mp.quad(lambda w: g(w) * kern(w), pts) / mp.quad(kern, pts)


def test_02_gig_moment_oracle(verdict):
    mp.mp.dps = 30
    lams = (-2.5, -0.5, 0.3, 1.0, 3.0)
    pairs = ((0.2, 0.2), (0.2, 3.0), (1.0, 1.0), (1.0, 0.1), (3.0, 0.5),
             (0.5, 3.0), (5.0, 5.0), (2.0, 8.0), (8.0, 2.0), (10.0, 0.3))
    worst = {"E[W]": 0.0, "E[1/W]": 0.0, "E[log W]": 0.0}
    for lam, (chi, psi) in itertools.product(lams, pairs):
        gp = GigParams(lam=lam, chi=chi, psi=psi)
        for name, got, g in (
            ("E[W]", gig_moment(1, gp), lambda w: w),
            ("E[1/W]", gig_moment(-1, gp), lambda w: 1 / w),
            ("E[log W]", gig_expect_log(gp), mp.log),
        ):
            ref = float(_gig_quad(lam, chi, psi, g))
            worst[name] = max(worst[name], abs(got - ref) / abs(ref))
    ok = max(worst.values()) <= 1e-8
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, ok, f"50 grid points, max relative error: {detail} (tol 1e-8)")


# 3 ---------------------------------------------------------------------------


def _mass(params, tol=1e-7, max_panels=128):
    """Total mass over the plane, adaptively refined.

    Whitened coordinates ``z = L^-1 (x - m)`` are mapped to the square
    (-pi/2, pi/2)^2 by ``z = tan(u)``; composite 16-point Gauss-Legendre panels
    are doubled until two successive totals agree within ``tol``.
    """
    L = np.linalg.cholesky(params.sigma)
    m = params.mu + params.beta
    nodes, weights = np.polynomial.legendre.leggauss(16)
    prev, panels = None, 8
    while panels <= max_panels:
        edges = np.linspace(-np.pi / 2, np.pi / 2, panels + 1)
        half = 0.5 * (edges[1] - edges[0])
        u = ((edges[:-1] + edges[1:]) / 2)[:, None] + half * nodes[None, :]
        w = (half * np.broadcast_to(weights, u.shape)).ravel()
        u = u.ravel()
        z, jac = np.tan(u), 1 / np.cos(u) ** 2
        zz = np.stack(np.meshgrid(z, z, indexing="ij"), axis=-1).reshape(-1, 2)
        x = m + zz @ L.T
        dens = np.exp(log_density(x, params)).reshape(u.size, u.size)
        total = abs(np.linalg.det(L)) * np.einsum("i,j,ij->", w * jac, w * jac, dens)
        if prev is not None and abs(total - prev) < tol:
            return total
        prev, panels = total, 2 * panels
    return total


def test_03_density_normalization(verdict):
    s1 = np.array([[1.0, 0.3], [0.3, 0.6]])
    s2 = np.array([[2.0, -0.8], [-0.8, 1.0]])
    sets = [
        GhdParams(mu=[0, 0], sigma=s1, beta=[0, 0], lam=-0.5, omega=1.0),
        GhdParams(mu=[1, -1], sigma=s2, beta=[1, 1], lam=1.0, omega=6.0),
        GhdParams(mu=[0, 0], sigma=s1, beta=[3, 3], lam=-0.5, omega=6.0),
        GhdParams(mu=[0, 0], sigma=s2, beta=[3, -1], lam=2.0, omega=0.5),
        GhdParams(mu=[0, 0], sigma=np.eye(2), beta=[-2, 3], lam=-2.0, omega=2.0),
        StParams(mu=[0, 0], sigma=s1, beta=[0, 0], dof=5.0),
        StParams(mu=[1, -1], sigma=s2, beta=[1, 1], dof=7.0),
        StParams(mu=[0, 0], sigma=s1, beta=[3, 3], dof=10.0),
        StParams(mu=[0, 0], sigma=np.eye(2), beta=[3, -2], dof=20.0),
        StParams(mu=[0, 0], sigma=s2, beta=[0.5, 2], dof=3.0),
    ]
    masses = [_mass(p) for p in sets]
    worst = max(abs(m - 1) for m in masses)
    verdict(3, worst <= 1e-3, f"10 parameter sets, max |mass - 1| = {worst:.1e} (tol 1e-3)")


# 4 ---------------------------------------------------------------------------


def test_04_skew_t_as_gh_limit(verdict):
    rng = np.random.default_rng(104)
    v = 5.0
    mu, sigma, beta = np.array([1.0, -2.0]), np.array([[2.0, -0.3], [-0.3, 0.5]]), np.array([0.8, -0.5])
    st_par = StParams(mu=mu, sigma=sigma, beta=beta, dof=v)
    monotone, final = True, 0.0
    for x in mu + rng.normal(size=(20, 2)) * 2:
        gaps = [
            abs(st_log_density(x, st_par)
                - gh_full_log_density(x, GhFullParams(mu=mu, sigma=sigma, beta=beta, lam=-v / 2, chi=v, psi=10.0**-k)))
            for k in range(2, 9)
        ]
        monotone &= all(b < a for a, b in zip(gaps, gaps[1:]))
        final = max(final, gaps[-1])
    verdict(4, monotone and final < 1e-5, f"20 points, gaps decreasing in k={monotone}, max gap at psi=1e-8 {final:.1e} (tol 1e-5)")


# 5 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_05_em_monotone(verdict):
    cfg = FitConfig(max_iter=200, n_starts=1)
    worst, runs, failures = 0.0, 0, []
    for did in DESIGN_IDS:
        design = builtin_design(did)
        for seed in range(3):
            data, _ = generate(design, seed)
            for mech, rate in itertools.product(("MCAR", "MAR1", "MAR2"), (0.05, 0.15, 0.30)):
                ds = inject_missingness(data, mech, rate, seed)
                try:
                    rep = fit(ds, 2, design.fit_family, design.structure, FitConfig(**{**cfg.__dict__, "seed": seed}))
                except Exception as exc:  # recorded, counted as a failure of the criterion
                    failures.append(f"{did}/{mech}/{rate}/{seed}: {exc}")
                    continue
                runs += 1
                worst = max(worst, -float(np.min(np.diff(rep.loglik_trace), initial=0.0)))
    ok = worst <= 1e-8 and not failures
    verdict(5, ok, f"{runs} runs ({len(failures)} failed), largest log-likelihood decrease {worst:.1e} (tol 1e-8)")


# 6 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_06_parameter_recovery_sim3(verdict):
    res = run_study(builtin_design("Sim3"), ("MCAR",), (0.05,), replications=10, seed=0)
    est = res.cells[0].estimates
    mb = np.mean([e["mu1+beta1"] for e in est], axis=0)
    nu = float(np.mean([e["nu1"][0] for e in est]))
    ok = len(est) == 10 and np.all(np.abs(mb - [2.0, -2.0]) <= 0.25) and 5 <= nu <= 14
    verdict(6, ok, f"{len(est)} replications, mean mu1+beta1 = ({mb[0]:.3f}, {mb[1]:.3f}) "
                   f"(target (2, -2) +/- 0.25), mean nu1 = {nu:.2f} (band [5, 14])")


# 7 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_07_ari_sim1(verdict):
    grid = ModelGrid((2,), ("VVV",), ("MGHD",))
    res = run_study(builtin_design("Sim1"), ("MCAR",), (0.05, 0.15, 0.30), replications=10, grid=grid,
                    cfg=FitConfig(n_starts=2), seed=0)
    a = [r["mean_ari"] for r in res.summary_rows()]
    ok = a[0] >= 0.85 and a[0] >= a[1] >= a[2] - 0.05
    verdict(7, ok, f"mean ARI at r=0.05/0.15/0.30: {a[0]:.4f}/{a[1]:.4f}/{a[2]:.4f} "
                   f"(need >= 0.85 and ARI(.05) >= ARI(.15) >= ARI(.30) - 0.05)")


# 8 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_08_bic_selects_two(verdict):
    design = builtin_design("Sim1")
    grid = ModelGrid((1, 2, 3, 4), ("VVV",), ("MGHD",))
    chosen, fallback = [], 0
    for seed in range(10):
        data, _ = generate(design, seed)
        ds = inject_missingness(data, "MCAR", 0.05, seed)
        rep = search(ds, grid, FitConfig(n_starts=2, seed=seed), workers=1)
        chosen.append(rep.best_by_bic.G)
        fallback += rep.from_unconverged
    hits = sum(g == 2 for g in chosen)
    verdict(8, hits >= 8, f"BIC picks G=2 in {hits}/10 seeds (need >= 8); choices {chosen}; "
                          f"{fallback} searches had no converged cell")


# 9 ---------------------------------------------------------------------------


def test_09_gpcm_projection(verdict):
    rng = np.random.default_rng(109)
    closed = {"EII", "VII", "EEI", "EVI", "VVI", "EEE", "EEV", "EVV", "VVV"}
    rank = {"I": 0, "E": 1, "V": 2}
    nested = lambda a, b: a[0] <= b[0] and all(rank[x] <= rank[y] for x, y in zip(a[1:], b[1:]))
    problems = []
    for k in range(100):
        ws, ns = [], []
        for _ in range(3):
            n = int(rng.integers(5, 60))
            x = rng.normal(size=(n, 3)) @ rng.normal(size=(3, 3))
            ws.append(x.T @ x)
            ns.append(n)
        sc = ScatterSet(np.array(ws), np.array(ns, float))
        crit = {}
        for s in ALL_STRUCTURES:
            tag = s.value
            out = constrain(sc, s)
            crit[tag] = criterion(out, sc)
            dets = np.array([np.linalg.det(m) for m in out])
            if tag[0] == "E" and np.max(np.abs(dets / dets[0] - 1)) > 1e-10:
                problems.append(f"set {k} {tag}: determinants differ")
            if tag[2] == "I" and any(np.any(m[~np.eye(3, dtype=bool)] != 0) for m in out):
                problems.append(f"set {k} {tag}: not diagonal")
            if tag[2] == "E":
                vecs = [np.linalg.eigh(m)[1] for m in out]
                for v in vecs[1:]:
                    match = np.abs(vecs[0].T @ v)
                    for j in range(3):
                        other = v[:, [int(np.argmax(match[j]))]]
                        if np.max(linalg.subspace_angles(vecs[0][:, [j]], other)) >= 1e-6:
                            problems.append(f"set {k} {tag}: orientations differ")
        for a, b in itertools.permutations(crit, 2):
            if b in closed and nested(a, b) and crit[a] > crit[b] + 1e-9 * (1 + abs(crit[b])):
                problems.append(f"set {k}: {a} beats {b}")
        if max(crit.values()) > crit["VVV"] + 1e-9 * (1 + abs(crit["VVV"])):
            problems.append(f"set {k}: VVV not dominant")
    verdict(9, not problems, f"100 scatter sets x 14 structures, {len(problems)} violations"
            + (f" (first: {problems[0]})" if problems else ""))


# 10 --------------------------------------------------------------------------


def test_10_gaussian_collapse(verdict):
    rng = np.random.default_rng(110)
    ds = inject_missingness(rng.normal(size=(50, 3)), "MCAR", 0.2, 110)
    start = initialize(ds, 2, "MST")
    comps = tuple(c.replace(beta=np.zeros(3), dof=1e6) for c in start.components)
    model = MixtureModel("MST", start.weights, comps, "VVV")
    new = m_step(e_step(ds, model), ds, model, freeze_skew=True, update_mixing=False)
    _, mus, sigmas, _ = gaussian_em_step(ds.data, ds.mask, model.weights, [c.mu for c in comps],
                                         [c.sigma for c in comps])
    gap_mu = max(np.abs(c.mu - mus[g]).max() for g, c in enumerate(new.components))
    gap_sig = max(np.abs(c.sigma - sigmas[g]).max() for g, c in enumerate(new.components))
    ok = gap_mu <= 1e-6 and gap_sig <= 1e-6
    verdict(10, ok, f"max |mu - mu_gauss| = {gap_mu:.1e}, max |Sigma - Sigma_gauss| = {gap_sig:.1e} (tol 1e-6)")


# 11 --------------------------------------------------------------------------


def test_11_cli_determinism(verdict, tmp_path):
    outputs = []
    for run in range(2):
        d = tmp_path / f"run{run}"
        d.mkdir()
        steps = [
            ["simulate", "--design", "Sim1", "--seed", "11", "--rate", "0.05",
             "--out", str(d / "data.csv"), "--labels-out", str(d / "truth.csv")],
            ["fit", str(d / "data.csv"), "-G", "2", "--seed", "11", "--n-starts", "2", "--max-iter", "300",
             "--truth", str(d / "truth.csv"), "--out-dir", str(d / "fit")],
            ["evaluate", "--labels", str(d / "fit" / "labels.csv"), "--truth", str(d / "truth.csv"),
             "--out", str(d / "ari.json")],
        ]
        codes = [cli.main(s) for s in steps]
        files = sorted(p for p in d.rglob("*") if p.is_file())
        outputs.append((codes, {p.relative_to(d).as_posix(): p.read_bytes() for p in files}))
    (c0, f0), (c1, f1) = outputs
    ok = c0 == c1 == [0, 0, 0] and f0 == f1
    verdict(11, ok, f"exit codes {c0} / {c1}; {len(f0)} files compared, identical={f0 == f1}")
