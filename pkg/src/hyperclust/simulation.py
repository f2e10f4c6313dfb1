"""
Simulation designs and studies.

Six two-component bivariate designs are built in: generalized hyperbolic
(Sim1, Sim2), skew-t (Sim3, Sim4) and Gaussian (Sim5, Sim6) mixtures, each in
a well-separated and an overlapping version.  The dispersions and locations
are reconstructions (they are chosen so that the sampling distributions of the
fitted parameters centre where the published recovery tables do) and can be
overridden by constructing :class:`SimDesign` directly.

A study generates ``replications`` datasets per (mechanism, rate), fits a
model grid to each and aggregates ARI, BIC, the number of correct component
counts, and means / standard deviations / biases of the estimates.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .distributions import GhdParams, StParams, cholesky_factor, sample_ghd, sample_st
from .em import FitConfig, Family
from .errors import HyperclustError, UsageError
from .gpcm import CovarianceStructure
from .missing_data import inject_missingness
from .selection import ModelGrid, adjusted_rand_index, search

DESIGN_IDS = ("Sim1", "Sim2", "Sim3", "Sim4", "Sim5", "Sim6")

_SIGMA_VEE = np.array([[5.0, 4.0], [4.0, 5.0]]) / 3.0
_SIGMA_VEI = np.diag([3.0, 1.0 / 3.0])
_MU_SEPARATED = ((1.0, -3.0), (-1.0, 3.0))
_MU_OVERLAP = ((0.5, -1.5), (-0.5, 1.5))
_BETA = ((1.0, 1.0), (-1.0, -1.0))


@dataclass(frozen=True, eq=False)
class SimDesign:
    id: str
    family: str  # "MGHD", "MST" or "GMM"
    structure: str
    separation: str
    mus: np.ndarray
    sigmas: np.ndarray
    betas: np.ndarray
    lams: tuple = ()
    omegas: tuple = ()
    dofs: tuple = ()
    n_per_component: int = 200

    def __post_init__(self):
        fam = str(self.family).upper()
        if fam not in ("MGHD", "MST", "GMM"):
            raise UsageError(f"unknown design family {self.family!r}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "structure", CovarianceStructure.parse(self.structure).value)
        for name in ("mus", "sigmas", "betas"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        G = self.mus.shape[0]
        if self.sigmas.shape[0] != G or self.betas.shape != self.mus.shape:
            raise UsageError("design parameters disagree on the number of components")
        if fam == "MGHD" and (len(self.lams) != G or len(self.omegas) != G):
            raise UsageError("MGHD designs need one index and concentration per component")
        if fam == "MST" and len(self.dofs) != G:
            raise UsageError("MST designs need degrees of freedom per component")
        if self.n_per_component < 1:
            raise UsageError("n_per_component must be positive")

    @property
    def G(self):
        return self.mus.shape[0]

    @property
    def p(self):
        return self.mus.shape[1]

    @property
    def fit_family(self):
        """Family whose parameters are comparable with the design's."""
        return "MST" if self.family == "MST" else "MGHD"

    def components(self):
        if self.family == "MGHD":
            return [
                GhdParams(mu=m, sigma=s, beta=b, lam=l, omega=o)
                for m, s, b, l, o in zip(self.mus, self.sigmas, self.betas, self.lams, self.omegas)
            ]
        if self.family == "MST":
            return [
                StParams(mu=m, sigma=s, beta=b, dof=v)
                for m, s, b, v in zip(self.mus, self.sigmas, self.betas, self.dofs)
            ]
        return None

    def true_values(self):
        """Parameter name -> true value, in the layout of :func:`estimates`."""
        out = {}
        for g in range(self.G):
            k = g + 1
            out[f"mu{k}"] = self.mus[g]
            out[f"beta{k}"] = self.betas[g]
            out[f"mu{k}+beta{k}"] = self.mus[g] + self.betas[g]
            out[f"Sigma{k}"] = self.sigmas[g][np.triu_indices(self.p)]
            if self.family == "MGHD":
                out[f"lambda{k}"] = np.array([self.lams[g]])
                out[f"omega{k}"] = np.array([self.omegas[g]])
            elif self.family == "MST":
                out[f"nu{k}"] = np.array([self.dofs[g]])
        return out


def builtin_design(design_id, n_per_component=200):
    """One of the six built-in designs ("Sim1" .. "Sim6")."""
    key = str(design_id).capitalize()
    if key not in DESIGN_IDS:
        raise UsageError(f"unknown design {design_id!r}; expected one of {DESIGN_IDS}")
    k = DESIGN_IDS.index(key)
    overlap = k % 2 == 1
    mus = _MU_OVERLAP if overlap else _MU_SEPARATED
    sep = "overlapping" if overlap else "well-separated"
    common = dict(id=key, separation=sep, mus=mus, n_per_component=n_per_component)
    if k < 2:
        return SimDesign(
            family="MGHD", structure="VEE", sigmas=[_SIGMA_VEE, 2 * _SIGMA_VEE], betas=_BETA,
            lams=(-0.5, 1.0), omegas=(6.0, 6.0), **common,
        )
    if k < 4:
        return SimDesign(
            family="MST", structure="VEI", sigmas=[_SIGMA_VEI, 2 * _SIGMA_VEI], betas=_BETA,
            dofs=(7.0, 5.0), **common,
        )
    return SimDesign(
        family="GMM", structure="VEE", sigmas=[_SIGMA_VEE, 2 * _SIGMA_VEE], betas=np.zeros((2, 2)),
        **common,
    )


def generate(design, seed):
    """Draw ``n_per_component`` rows per component; returns (data, labels 0..G-1)."""
    seeds = np.random.SeedSequence(seed).spawn(design.G)
    n = design.n_per_component
    blocks = []
    comps = design.components()
    for g in range(design.G):
        s = seeds[g]
        if design.family == "MGHD":
            blocks.append(sample_ghd(comps[g], n, s))
        elif design.family == "MST":
            blocks.append(sample_st(comps[g], n, s))
        else:
            rng = np.random.default_rng(s)
            lower = cholesky_factor(design.sigmas[g]).lower
            blocks.append(design.mus[g] + rng.standard_normal((n, design.p)) @ lower.T)
    labels = np.repeat(np.arange(design.G), n)
    return np.vstack(blocks), labels


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------


def align_components(true_labels, fitted_labels, G_fit):
    """Permutation ``perm`` with fitted component ``perm[g]`` matched to true g.

    Maximizes the matched counts of the confusion matrix (Hungarian method).
    """
    G_true = int(np.max(true_labels)) + 1
    conf = np.zeros((G_true, G_fit))
    np.add.at(conf, (np.asarray(true_labels), np.asarray(fitted_labels)), 1)
    rows, cols = linear_sum_assignment(-conf)
    perm = np.full(G_true, -1)
    perm[rows] = cols
    return perm


def estimates(model, perm):
    """Fitted parameters of ``model`` reordered to the true components."""
    out = {}
    p = model.p
    for g, h in enumerate(perm):
        k = g + 1
        c = model.components[h]
        out[f"mu{k}"] = c.mu
        out[f"beta{k}"] = c.beta
        out[f"mu{k}+beta{k}"] = c.mu + c.beta
        out[f"Sigma{k}"] = c.sigma[np.triu_indices(p)]
        if model.family is Family.MGHD:
            out[f"lambda{k}"] = np.array([c.lam])
            out[f"omega{k}"] = np.array([c.omega])
        else:
            out[f"nu{k}"] = np.array([c.dof])
    return out


@dataclass
class StudyCell:
    mechanism: str
    rate: float
    ari: list = field(default_factory=list)
    bic: list = field(default_factory=list)
    chosen_G: list = field(default_factory=list)
    estimates: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    traces: list = field(default_factory=list)


@dataclass
class StudyResult:
    design: SimDesign
    grid: ModelGrid
    cells: list

    def summary_rows(self):
        """One row per (mechanism, rate): averages of ARI and BIC and correct-G count."""
        rows = []
        for c in self.cells:
            ok = len(c.ari)
            rows.append(
                dict(
                    design=self.design.id,
                    mechanism=c.mechanism,
                    rate=c.rate,
                    replications=ok + len(c.failures),
                    fitted=ok,
                    mean_ari=float(np.mean(c.ari)) if ok else float("nan"),
                    sd_ari=float(np.std(c.ari, ddof=1)) if ok > 1 else float("nan"),
                    mean_bic=float(np.mean(c.bic)) if ok else float("nan"),
                    correct_G=int(sum(g == self.design.G for g in c.chosen_G)),
                    converged=int(sum(c.converged)),
                )
            )
        return rows

    def parameter_rows(self):
        """Mean, standard deviation and bias of each estimated coordinate."""
        truth = self.design.true_values()
        rows = []
        for c in self.cells:
            if not c.estimates:
                continue
            for name in c.estimates[0]:
                vals = np.array([e[name] for e in c.estimates])
                mean = vals.mean(axis=0)
                sd = vals.std(axis=0, ddof=1) if len(vals) > 1 else np.full(mean.shape, np.nan)
                ref = truth.get(name)
                bias = mean - ref if ref is not None else np.full(mean.shape, np.nan)
                for j in range(mean.size):
                    rows.append(
                        dict(
                            design=self.design.id,
                            mechanism=c.mechanism,
                            rate=c.rate,
                            parameter=name,
                            coordinate=j + 1,
                            mean=float(mean[j]),
                            sd=float(sd[j]),
                            bias=float(bias[j]),
                            n=len(vals),
                        )
                    )
        return rows


def _replication_seed(seed, rep, mech_idx, rate_idx):
    return int(np.random.SeedSequence([seed, rep, mech_idx, rate_idx]).generate_state(1)[0])


def _one_replication(design, mechanisms, rates, grid, cfg, seed, rep):
    """Fits for every (mechanism, rate) of one replication, in cell order."""
    single = len(grid.cells()) == 1
    data, labels = generate(design, seed + rep)
    out = []
    for mi, mech in enumerate(mechanisms):
        for ri, rate in enumerate(rates):
            try:
                ds = inject_missingness(data, mech, rate, _replication_seed(seed, rep, mi, ri))
                report = search(ds, grid, replace(cfg, seed=cfg.seed + rep), workers=1,
                                keep_reports=True)
                row = report.rows[0] if single else report.best_by_bic
                if row is None or row.report is None:
                    raise HyperclustError("no usable model in the grid")
            except HyperclustError as exc:
                out.append(f"replication {rep + 1}: {type(exc).__name__}: {exc}")
                continue
            out.append((labels, row.report))
    return out


def run_study(design, mechanisms=("MCAR",), rates=(0.05,), replications=10, grid=None, cfg=None,
              seed=0, workers=1):
    """
    Replicated fits of ``grid`` to data from ``design`` under each
    (mechanism, rate).

    Replication ``r`` draws complete data with seed ``seed + r`` (shared by all
    mechanisms and rates) and deletes cells with a seed derived from
    (seed, r, mechanism, rate).  The model reported per replication is the
    BIC-best cell chosen by :func:`search`, or the single cell when the grid has
    one.  Failures are recorded, not raised.  Replications may run on
    ``workers`` threads; aggregation follows replication order regardless.
    """
    if replications < 1:
        raise UsageError("replications must be at least 1")
    mechanisms = tuple(mechanisms)
    rates = tuple(float(r) for r in rates)
    grid = grid or ModelGrid(G_values=(design.G,), structures=(design.structure,),
                             families=(design.fit_family,))
    cfg = cfg or FitConfig()
    cells = [StudyCell(m, r) for m in mechanisms for r in rates]

    def job(rep):
        return _one_replication(design, mechanisms, rates, grid, cfg, seed, rep)

    if workers > 1 and replications > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(replications)))
    else:
        results = [job(r) for r in range(replications)]
    for outcomes in results:
        for cell, res in zip(cells, outcomes):
            if isinstance(res, str):
                cell.failures.append(res)
                continue
            labels, fit = res
            cell.ari.append(adjusted_rand_index(labels, fit.map_labels))
            cell.bic.append(fit.bic)
            cell.chosen_G.append(fit.model.G)
            cell.converged.append(fit.converged)
            cell.traces.append(fit.loglik_trace)
            if fit.model.G == design.G and fit.model.family.value == design.fit_family:
                perm = align_components(labels, fit.map_labels, fit.model.G)
                cell.estimates.append(estimates(fit.model, perm))
    return StudyResult(design, grid, cells)
