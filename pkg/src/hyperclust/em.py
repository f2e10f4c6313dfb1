"""
EM for mixtures of generalized hyperbolic (MGHD) and skew-t (MST)
distributions with values missing at random.

Each component is a normal mean-variance mixture ``X = mu + W beta + sqrt(W) U``.
The E-step needs, per row i and component g,

* the responsibility ``z_ig`` from the observed-block marginal density,
* ``a = E[W]``, ``b = E[1/W]`` and ``c = E[log W]`` under the GIG posterior
  of ``W`` given the observed block,
* the missing-block moments ``E[X_m]``, ``E[X_m / W]`` and ``E[X_m X_m' / W]``.

The M-step is then closed form for the weights, locations and skewness,
uses the parsimonious structures of :mod:`hyperclust.gpcm` for the
dispersions, and updates (lam, omega) or the degrees of freedom per component.
All factorizations are done once per (missing pattern, component).
"""

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import optimize, special
from scipy.cluster.vq import kmeans2

from .distributions import (
    ST_SYMMETRIC_THRESHOLD,
    GhdParams,
    StParams,
    LOG_2PI,
    _log_h,
    _st_from_terms,
    cholesky_factor,
    gig_moments_array,
    gig_posterior_terms,
    log_density,
    marginal,
)
from .errors import (
    DecompositionError,
    DegenerateComponentError,
    DomainError,
    FitError,
    UsageError,
)
from .gpcm import CovarianceStructure, ScatterSet, constrain, free_parameter_count
from .missing_data import (
    MaskedDataset,
    MissingBlockMoments,
    conditional_missing_moments,
    extract_patterns,
    mean_impute,
    partition_component,
)
from .selection import aitken_converged, bic, icl
from .special_math import DEFAULT_ORDER_DERIVATIVE, dlog_bessel_k_dorder, log_bessel_k

OMEGA_BOUNDS = (1e-4, 1e4)
DOF_BOUNDS = (2.001, 200.0)
MAX_HALVINGS = 20
INITIAL_SKEW = 1e-3
INITIAL_DOF = 50.0


class Family(str, Enum):
    MGHD = "MGHD"
    MST = "MST"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).upper())
        except ValueError:
            raise UsageError(f"unknown family {name!r}; expected MGHD or MST") from None

    def __str__(self):
        return self.value


@dataclass(frozen=True, eq=False)
class MixtureModel:
    family: Family
    weights: np.ndarray
    components: tuple
    structure: CovarianceStructure

    def __post_init__(self):
        fam = Family.parse(self.family)
        w = np.array(self.weights, dtype=float).reshape(-1)
        comps = tuple(self.components)
        if w.size != len(comps) or w.size == 0:
            raise UsageError("one weight per component is required")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixing weights must be positive and sum to one")
        kind = GhdParams if fam is Family.MGHD else StParams
        if not all(isinstance(c, kind) for c in comps):
            raise UsageError(f"{fam.value} components must be {kind.__name__}")
        if len({c.p for c in comps}) != 1:
            raise UsageError("components differ in dimension")
        w.setflags(write=False)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "structure", CovarianceStructure.parse(self.structure))

    @property
    def G(self):
        return len(self.components)

    @property
    def p(self):
        return self.components[0].p

    @property
    def sigmas(self):
        return np.array([c.sigma for c in self.components])


@dataclass(eq=False)
class EStepCache:
    """E-step output.  ``mm[(k, g)]`` holds missing-block moments for the rows
    of pattern group ``k`` under component ``g`` (absent for complete rows)."""

    resp: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    log_dens: np.ndarray
    loglik: float
    groups: list
    mm: dict = field(default_factory=dict)

    def xhat(self, ds, g):
        """Rows with missing cells replaced by E[X_m | x_o, z_g = 1]."""
        out = np.where(ds.mask, 0.0, ds.data)
        for k, grp in enumerate(self.groups):
            mom = self.mm.get((k, g))
            if mom is not None:
                out[np.ix_(grp.row_indices, grp.missing)] = mom.xhat_m
        return out


@dataclass(frozen=True, eq=False)
class SufficientStats:
    n_g: np.ndarray
    abar: np.ndarray
    bbar: np.ndarray
    cbar: np.ndarray
    xbar: np.ndarray  # G x p, imputed with E[X_m]


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 1000
    epsilon: float = 1e-6
    n_starts: int = 5
    init: str = "kmeans"
    seed: int = 0
    labels: tuple = None
    kmeans_iter: int = 10
    ridge: bool = True
    order_step: float = DEFAULT_ORDER_DERIVATIVE.step

    def __post_init__(self):
        if self.max_iter < 1:
            raise UsageError("max_iter must be at least 1")
        if not self.epsilon > 0:
            raise UsageError("epsilon must be positive")
        if self.n_starts < 1:
            raise UsageError("n_starts must be at least 1")
        if self.init not in ("kmeans", "random", "labels"):
            raise UsageError(f"unknown init {self.init!r}")
        if self.init == "labels" and self.labels is None:
            raise UsageError("init='labels' needs labels")


@dataclass(eq=False)
class FitReport:
    model: MixtureModel
    loglik_trace: list
    bic: float
    icl: float
    converged: bool
    iterations: int
    map_labels: np.ndarray
    imputed: np.ndarray
    resp: np.ndarray
    n_params: int
    diagnostics: list = field(default_factory=list)
    start: int = 0

    @property
    def loglik(self):
        return self.loglik_trace[-1]


# ---------------------------------------------------------------------------
# likelihood and E-step
# ---------------------------------------------------------------------------


def _check_dims(ds, model):
    if ds.p != model.p:
        raise UsageError(f"model dimension {model.p} does not match data dimension {ds.p}")


def _logsumexp_rows(m):
    top = m.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return (top + np.log(np.exp(m - top).sum(axis=1, keepdims=True)))[:, 0]


def observed_log_likelihood(ds, model):
    """sum_i log sum_g pi_g f_g(x_i^o), using marginal laws of each pattern's
    observed coordinates."""
    _check_dims(ds, model)
    log_dens = np.empty((ds.n, model.G))
    for grp in extract_patterns(ds):
        obs = grp.observed
        x_o = ds.data[np.ix_(grp.row_indices, obs)]
        for g, comp in enumerate(model.components):
            try:
                m = marginal(comp, obs)
                log_dens[grp.row_indices, g] = log_density(x_o, m)
            except DecompositionError as exc:
                raise DecompositionError(
                    f"component {g + 1}, pattern {grp.pattern.astype(int).tolist()}: {exc}"
                ) from exc
    return float(_logsumexp_rows(log_dens + np.log(model.weights)).sum())


def e_step(ds, model, groups=None, cfg=DEFAULT_ORDER_DERIVATIVE):
    """Responsibilities, latent-scale moments and missing-block moments."""
    _check_dims(ds, model)
    groups = extract_patterns(ds) if groups is None else groups
    n, G = ds.n, model.G
    log_dens = np.empty((n, G))
    a = np.empty((n, G))
    b = np.empty((n, G))
    c = np.empty((n, G))
    mm = {}
    mst = model.family is Family.MST
    for k, grp in enumerate(groups):
        rows = grp.row_indices
        x_o = ds.data[np.ix_(rows, grp.observed)]
        for g, comp in enumerate(model.components):
            try:
                pc = partition_component(comp.mu, comp.beta, comp.sigma, grp.pattern)
            except DecompositionError as exc:
                raise DegenerateComponentError(str(exc), g) from exc
            delta, xb = pc.quadratic_terms(x_o)
            logdet = pc.sigma_oo_chol.logdet
            const = xb - 0.5 * pc.p_o * LOG_2PI - 0.5 * logdet
            if mst:
                lam, chi, psi = -0.5 * (comp.dof + pc.p_o), comp.dof + delta, pc.q
                h0 = _log_h(-0.5 * comp.dof, comp.dof, 0.0)
            else:
                lam, chi, psi = comp.lam - 0.5 * pc.p_o, comp.omega + delta, comp.omega + pc.q
                h0 = log_bessel_k(comp.lam, comp.omega)
            if mst and psi < ST_SYMMETRIC_THRESHOLD:
                # symmetric skew-t: t density and inverse-gamma posterior
                log_dens[rows, g] = _st_from_terms(delta, xb, psi, comp.dof, pc.p_o, logdet)
                ew, einv, elog = gig_moments_array(lam, chi, 0.0, cfg)
            else:
                ew, einv, elog, lk = gig_posterior_terms(lam, chi, psi, cfg)
                # the density shares log K_lam'(sqrt(chi' psi')) with the moments
                log_dens[rows, g] = 0.5 * lam * (np.log(chi) - np.log(psi)) + lk - h0 + const
            a[rows, g], b[rows, g], c[rows, g] = ew, einv, elog
            if pc.p_m:
                mm[(k, g)] = conditional_missing_moments(x_o, pc, ew, einv)
    weighted = log_dens + np.log(model.weights)
    row_ll = _logsumexp_rows(weighted)
    resp = np.exp(weighted - row_ll[:, None])
    resp /= resp.sum(axis=1, keepdims=True)
    return EStepCache(resp, a, b, c, log_dens, float(row_ll.sum()), groups, mm)


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def _moment_sums(cache, ds, g):
    """Weighted sums for component g: (sum z xhat, sum z xtilde, sum z E[XX'/W])."""
    p = ds.p
    z = cache.resp[:, g]
    s_hat = np.zeros(p)
    s_til = np.zeros(p)
    s_sq = np.zeros((p, p))
    for k, grp in enumerate(cache.groups):
        rows, o, m = grp.row_indices, grp.observed, grp.missing
        zk = z[rows]
        bk = cache.b[rows, g]
        x_o = ds.data[np.ix_(rows, o)]
        s_hat[o] += zk @ x_o
        s_til[o] += (zk * bk) @ x_o
        s_sq[np.ix_(o, o)] += (x_o * (zk * bk)[:, None]).T @ x_o
        if m.size:
            mom = cache.mm[(k, g)]
            s_hat[m] += zk @ mom.xhat_m
            s_til[m] += zk @ mom.xtilde_m
            cross = (x_o * zk[:, None]).T @ mom.xtilde_m
            s_sq[np.ix_(o, m)] += cross
            s_sq[np.ix_(m, o)] += cross.T
            s_sq[np.ix_(m, m)] += np.einsum("i,ijk->jk", zk, mom.xtt_m)
    return s_hat, s_til, 0.5 * (s_sq + s_sq.T)


def sufficient_stats(cache, ds):
    G = cache.resp.shape[1]
    n_g = cache.resp.sum(axis=0)
    abar = (cache.resp * cache.a).sum(axis=0) / n_g
    bbar = (cache.resp * cache.b).sum(axis=0) / n_g
    cbar = (cache.resp * cache.c).sum(axis=0) / n_g
    xbar = np.array([_moment_sums(cache, ds, g)[0] / n_g[g] for g in range(G)])
    return SufficientStats(n_g, abar, bbar, cbar, xbar)


@dataclass(frozen=True, eq=False)
class _LocationUpdate:
    weights: np.ndarray
    mu: np.ndarray
    beta: np.ndarray
    scatter: np.ndarray  # unconstrained weighted scatter W_g = n_g Sigma_hat_g
    n_g: np.ndarray


def m_step_weights_location_skew(cache, ds, freeze_skew=False):
    """
    Mixing weights, locations and skewness.

    ``mu_g = sum z (abar xtilde_i - xhat_i) / sum z (abar b_i - 1)`` and
    ``beta_g = sum z (bbar xhat_i - xtilde_i) / sum z (abar b_i - 1)``, where
    ``xhat_i`` stacks (x_o, E[X_m]) and ``xtilde_i`` stacks (b_i x_o, E[X_m/W]).
    With ``freeze_skew`` the skewness stays at zero and
    ``mu_g = sum z xtilde_i / sum z b_i``.

    Returns (weights, mu, beta), each with a leading component axis.
    """
    upd = _location_and_scatter(cache, ds, freeze_skew)
    return upd.weights, upd.mu, upd.beta


def _scatter(s_hat, s_til, s_sq, sum_b, abar, n_g, m, bt):
    """n_g times the unconstrained dispersion estimate at location m, skewness bt."""
    # sum_i z E[(X - mu)(X - mu)' / W]
    s = s_sq - np.outer(s_til, m) - np.outer(m, s_til) + sum_b * np.outer(m, m)
    d = s_hat / n_g - m
    cov = s / n_g - np.outer(d, bt) - np.outer(bt, d) + abar * np.outer(bt, bt)
    return n_g * 0.5 * (cov + cov.T)


def _location_and_scatter(cache, ds, freeze_skew=False):
    n, G = cache.resp.shape
    p = ds.p
    n_g = cache.resp.sum(axis=0)
    mu = np.empty((G, p))
    beta = np.zeros((G, p))
    scatter = np.empty((G, p, p))
    for g in range(G):
        if n_g[g] < p + 1:
            raise DegenerateComponentError(
                f"component {g + 1} has effective size {n_g[g]:.3g} < p + 1", g
            )
        z = cache.resp[:, g]
        s_hat, s_til, s_sq = _moment_sums(cache, ds, g)
        sum_b = z @ cache.b[:, g]
        abar = (z @ cache.a[:, g]) / n_g[g]
        if freeze_skew:
            m = s_til / sum_b
            bt = np.zeros(p)
        else:
            bbar = sum_b / n_g[g]
            denom = abar * sum_b - n_g[g]
            if abs(denom) < 1e-12:
                raise DegenerateComponentError(
                    f"component {g + 1}: location/skewness system is singular", g
                )
            m = (abar * s_til - s_hat) / denom
            bt = (bbar * s_hat - s_til) / denom
        mu[g], beta[g] = m, bt
        scatter[g] = _scatter(s_hat, s_til, s_sq, sum_b, abar, n_g[g], m, bt)
    return _LocationUpdate(n_g / n, mu, beta, scatter, n_g)


def m_step_scale(cache, ds, mu, beta, structure, previous=None):
    """Dispersion update: the unconstrained estimate projected onto ``structure``.

    ``mu`` and ``beta`` must be the values returned by the location step for
    this cache.  ``previous`` (the current dispersions) warm-starts iterative
    structures and guarantees the structured criterion does not decrease.
    """
    upd = _scatter_at(cache, ds, np.asarray(mu, float), np.asarray(beta, float))
    return _project(upd, CovarianceStructure.parse(structure), previous)


def _scatter_at(cache, ds, mu, beta):
    n, G = cache.resp.shape
    n_g = cache.resp.sum(axis=0)
    scatter = np.empty((G, ds.p, ds.p))
    for g in range(G):
        z = cache.resp[:, g]
        s_hat, s_til, s_sq = _moment_sums(cache, ds, g)
        sum_b = z @ cache.b[:, g]
        abar = (z @ cache.a[:, g]) / n_g[g]
        scatter[g] = _scatter(s_hat, s_til, s_sq, sum_b, abar, n_g[g], mu[g], beta[g])
    return _LocationUpdate(n_g / n, mu, beta, scatter, n_g)


def _project(upd, structure, previous=None, ridge=True, flags=None):
    sc = ScatterSet(upd.scatter, upd.n_g)
    try:
        sig = constrain(sc, structure, start=previous)
    except DegenerateComponentError:
        raise
    out = []
    for g, s in enumerate(sig):
        try:
            f = cholesky_factor(s)
        except DecompositionError as exc:
            raise DegenerateComponentError(f"component {g + 1}: {exc}", g) from exc
        if f.ridged:
            if not ridge:
                raise DegenerateComponentError(f"component {g + 1}: near-singular dispersion", g)
            s = f.lower @ f.lower.T
            if flags is not None:
                flags.append(f"ridge applied to component {g + 1}")
        out.append(0.5 * (s + s.T))
    return np.array(out)


def _q_index(lam, omega, abar, bbar, cbar):
    return -log_bessel_k(lam, omega) + (lam - 1.0) * cbar - 0.5 * omega * (abar + bbar)


def update_index_concentration(cache_or_stats, model, cfg=DEFAULT_ORDER_DERIVATIVE, ds=None):
    """
    Index and concentration update for each MGHD component.

    With ``q(lam, omega) = -log K_lam(omega) + (lam - 1) cbar - omega/2 (abar + bbar)``:
    ``lam' = cbar lam / (d/dlam log K_lam(omega))``, kept only when it does not
    lower ``q`` (otherwise a safeguarded Newton step in ``lam``), followed by one
    Newton step in ``omega`` with finite-difference derivatives, clamped to
    [1e-4, 1e4] and halved up to 20 times until ``q`` does not decrease.

    Returns (lam, omega, notes) arrays of length G plus a list of fallbacks taken.
    """
    stats = cache_or_stats
    if isinstance(cache_or_stats, EStepCache):
        n_g = cache_or_stats.resp.sum(axis=0)
        r = cache_or_stats.resp
        stats = SufficientStats(
            n_g,
            (r * cache_or_stats.a).sum(axis=0) / n_g,
            (r * cache_or_stats.b).sum(axis=0) / n_g,
            (r * cache_or_stats.c).sum(axis=0) / n_g,
            None,
        )
    lams, omegas, notes = [], [], []
    for g, comp in enumerate(model.components):
        ab, bb, cb = stats.abar[g], stats.bbar[g], stats.cbar[g]
        lam, om = comp.lam, comp.omega
        lam_new, note = _update_lambda(lam, om, ab, bb, cb, cfg)
        if note:
            notes.append(f"component {g + 1}: {note}")
        om_new, note = _update_omega(lam_new, om, ab, bb, cb)
        if note:
            notes.append(f"component {g + 1}: {note}")
        lams.append(lam_new)
        omegas.append(om_new)
    return np.array(lams), np.array(omegas), notes


def _update_lambda(lam, om, ab, bb, cb, cfg):
    q0 = _q_index(lam, om, ab, bb, cb)
    deriv = dlog_bessel_k_dorder(lam, om, cfg)
    if abs(deriv) >= 1e-12:
        cand = cb * lam / deriv
        if np.isfinite(cand) and _q_index(cand, om, ab, bb, cb) >= q0:
            return float(cand), ""
    # q is concave in lam: Newton with step halving
    h = cfg.step
    grad = cb - deriv
    curv = -(log_bessel_k(lam + h, om) - 2 * log_bessel_k(lam, om) + log_bessel_k(lam - h, om)) / h**2
    if not (np.isfinite(grad) and np.isfinite(curv)):
        return lam, "index update skipped (non-finite derivative)"
    step = -grad / curv if curv < 0 else np.sign(grad)
    for _ in range(MAX_HALVINGS + 1):
        cand = lam + step
        if _q_index(cand, om, ab, bb, cb) >= q0:
            return float(cand), ""
        step *= 0.5
    return lam, "index kept (no ascent step found)"


def _update_omega(lam, om, ab, bb, cb):
    def q(w):
        return _q_index(lam, w, ab, bb, cb)

    h = 1e-4 * om
    q0, qp, qm = q(om), q(om + h), q(om - h)
    grad = (qp - qm) / (2 * h)
    curv = (qp - 2 * q0 + qm) / h**2
    if not (np.isfinite(grad) and np.isfinite(curv)):
        return om, "concentration update skipped (non-finite derivative)"
    step = -grad / curv if curv < 0 else np.sign(grad) * 0.5 * om
    lo, hi = OMEGA_BOUNDS
    for _ in range(MAX_HALVINGS + 1):
        cand = float(np.clip(om + step, lo, hi))
        if q(cand) >= q0:
            return cand, ""
        step *= 0.5
    return om, "concentration kept (no ascent step found)"


def _dof_equation(v, s):
    return np.log(0.5 * v) + 1.0 - special.digamma(0.5 * v) - s


def update_dof(cache, model=None):
    """
    Degrees of freedom for each MST component.

    Solves ``log(v/2) + 1 - digamma(v/2) - s_g = 0`` with
    ``s_g = sum_i z_ig (c_ig + b_ig) / n_g`` on [2.001, 200]; without a sign
    change the nearer bound is returned (the objective is concave in v, so
    the bound is the constrained maximizer) and a note is recorded.

    Returns (dof array, notes).
    """
    r = cache.resp
    n_g = r.sum(axis=0)
    s = (r * (cache.c + cache.b)).sum(axis=0) / n_g
    lo, hi = DOF_BOUNDS
    out, notes = [], []
    for g, sg in enumerate(s):
        f_lo, f_hi = _dof_equation(lo, sg), _dof_equation(hi, sg)
        if f_lo <= 0:
            out.append(lo)
            notes.append(f"component {g + 1}: degrees of freedom clamped at {lo}")
        elif f_hi >= 0:
            out.append(hi)
            notes.append(f"component {g + 1}: degrees of freedom clamped at {hi}")
        else:
            out.append(optimize.brentq(_dof_equation, lo, hi, args=(sg,), xtol=1e-13, rtol=1e-15))
    return np.array(out), notes


def m_step(cache, ds, model, freeze_skew=False, update_mixing=True, notes=None, ridge=True):
    """One full M-step; returns the new :class:`MixtureModel`."""
    notes = [] if notes is None else notes
    upd = _location_and_scatter(cache, ds, freeze_skew)
    sig = _project(upd, model.structure, previous=model.sigmas, ridge=ridge, flags=notes)
    weights = upd.weights / upd.weights.sum()
    comps = []
    if model.family is Family.MGHD:
        if update_mixing:
            lams, omegas, extra = update_index_concentration(cache, model)
            notes.extend(extra)
        else:
            lams = [c.lam for c in model.components]
            omegas = [c.omega for c in model.components]
        for g in range(model.G):
            comps.append(
                GhdParams(mu=upd.mu[g], sigma=sig[g], beta=upd.beta[g], lam=lams[g], omega=omegas[g])
            )
    else:
        if update_mixing:
            dofs, extra = update_dof(cache, model)
            notes.extend(extra)
        else:
            dofs = [c.dof for c in model.components]
        for g in range(model.G):
            comps.append(StParams(mu=upd.mu[g], sigma=sig[g], beta=upd.beta[g], dof=dofs[g]))
    return MixtureModel(model.family, weights, tuple(comps), model.structure)


# ---------------------------------------------------------------------------
# initialization and the fit loop
# ---------------------------------------------------------------------------


def _canonical_order(x):
    """Row order that depends only on the row values (for permutation invariance)."""
    return np.lexsort(x.T[::-1])


def _kmeans_labels(x, G, iters, rng, rounds=5):
    """k-means++ labels that do not waste a cluster on a few outlying rows.

    Rows of a cluster with fewer than p + 1 members are set aside and k-means
    is rerun on the rest (up to ``rounds`` times); set-aside rows then join
    the nearest final centroid.  Heavy-tailed data otherwise lets k-means++
    seed a centre on an extreme row and keep it as a singleton.
    """
    n, p = x.shape
    keep = np.ones(n, dtype=bool)
    for _ in range(rounds):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cent, lab = kmeans2(x[keep], G, iter=iters, minit="++", seed=rng, missing="warn")
        small = np.flatnonzero(np.bincount(lab, minlength=G) < p + 1)
        if small.size == 0 or keep.sum() - np.isin(lab, small).sum() < G * (p + 1):
            break
        keep[np.flatnonzero(keep)[np.isin(lab, small)]] = False
    out = np.empty(n, dtype=int)
    out[keep] = lab
    if not keep.all():
        d = ((x[~keep, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
        out[~keep] = np.argmin(d, axis=1)
    return out


def _initial_labels(x, G, cfg, seed):
    n = x.shape[0]
    if cfg.init == "labels":
        labels = np.asarray(cfg.labels, dtype=int).reshape(-1)
        if labels.size != n:
            raise UsageError("provided labels do not match the number of rows")
        uniq = np.unique(labels)
        if uniq.size != G:
            raise UsageError(f"provided labels have {uniq.size} groups, expected {G}")
        return np.searchsorted(uniq, labels)
    order = _canonical_order(x)
    rng = np.random.default_rng(seed)
    if cfg.init == "random" or G == 1:
        lab_sorted = rng.integers(0, G, size=n) if G > 1 else np.zeros(n, dtype=int)
    else:
        lab_sorted = _kmeans_labels(x[order], G, cfg.kmeans_iter, rng)
    labels = np.empty(n, dtype=int)
    labels[order] = lab_sorted
    return labels


def initialize(ds, G, family, cfg=None, structure="VVV", seed=None):
    """
    Starting model from hard labels.

    Missing cells are mean-imputed, rows are clustered by seeded k-means
    (10 Lloyd iterations), and each cluster's size, mean and covariance give
    the weights, locations and dispersions (projected onto ``structure``).
    Skewness starts at 1e-3 in every coordinate; MGHD starts at omega = 1,
    lam = -1/2 and MST at v = 50.
    """
    cfg = cfg or FitConfig()
    family = Family.parse(family)
    structure = CovarianceStructure.parse(structure)
    if not 1 <= G <= ds.n:
        raise UsageError(f"G must lie in [1, n={ds.n}], got {G}")
    seed = cfg.seed if seed is None else seed
    x = mean_impute(ds)
    p = ds.p
    labels = _initial_labels(x, G, cfg, seed)
    counts = np.bincount(labels, minlength=G)
    if np.any(counts < p + 1):
        raise DegenerateComponentError(
            f"initial partition has a cluster with fewer than {p + 1} rows",
            int(np.argmin(counts)),
        )
    scatters = np.empty((G, p, p))
    mus = np.empty((G, p))
    for g in range(G):
        xg = x[labels == g]
        mus[g] = xg.mean(axis=0)
        d = xg - mus[g]
        scatters[g] = d.T @ d
    upd = _LocationUpdate(counts / ds.n, mus, None, scatters, counts.astype(float))
    sig = _project(upd, structure, ridge=cfg.ridge)
    beta = np.full(p, INITIAL_SKEW)
    if family is Family.MGHD:
        comps = tuple(GhdParams(mu=mus[g], sigma=sig[g], beta=beta, lam=-0.5, omega=1.0) for g in range(G))
    else:
        comps = tuple(StParams(mu=mus[g], sigma=sig[g], beta=beta, dof=INITIAL_DOF) for g in range(G))
    return MixtureModel(family, counts / counts.sum(), comps, structure)


def _map_labels(resp):
    return np.argmax(resp, axis=1)  # first maximum: ties go to the lowest index


def _imputed(ds, cache, labels):
    out = np.where(ds.mask, 0.0, ds.data)
    for k, grp in enumerate(cache.groups):
        if not grp.missing.size:
            continue
        for g in range(cache.resp.shape[1]):
            sel = labels[grp.row_indices] == g
            if np.any(sel):
                rows = grp.row_indices[sel]
                out[np.ix_(rows, grp.missing)] = cache.mm[(k, g)].xhat_m[sel]
    return out


def _run(ds, groups, model, cfg, order_cfg):
    """EM from one starting model; returns (model, cache, trace, converged, iters, notes)."""
    notes = []
    cache = e_step(ds, model, groups, order_cfg)
    trace = [cache.loglik]
    converged = False
    it = 0
    while it < cfg.max_iter:
        step_notes = []
        try:
            new_model = m_step(cache, ds, model, notes=step_notes, ridge=cfg.ridge)
            new_cache = e_step(ds, new_model, groups, order_cfg)
        except (DegenerateComponentError, DecompositionError, DomainError) as exc:
            notes.append(f"iteration {it + 1}: {type(exc).__name__}: {exc}; kept previous iterate")
            break
        if not np.isfinite(new_cache.loglik):
            notes.append(f"iteration {it + 1}: non-finite log-likelihood; kept previous iterate")
            break
        it += 1
        notes.extend(f"iteration {it}: {s}" for s in step_notes)
        model, cache = new_model, new_cache
        trace.append(cache.loglik)
        if len(trace) >= 3 and aitken_converged(trace[-3], trace[-2], trace[-1], cfg.epsilon):
            converged = True
            break
    return model, cache, trace, converged, it, notes


def _report(ds, model, cache, trace, converged, iters, notes, start=0):
    labels = _map_labels(cache.resp)
    rho = free_parameter_count(model.structure, model.p, model.G, model.family.value)
    b = bic(trace[-1], rho, ds.n)
    return FitReport(
        model=model,
        loglik_trace=list(map(float, trace)),
        bic=float(b),
        icl=float(icl(b, cache.resp)),
        converged=converged,
        iterations=iters,
        map_labels=labels,
        imputed=_imputed(ds, cache, labels),
        resp=cache.resp,
        n_params=rho,
        diagnostics=notes,
        start=start,
    )


def fit(ds, G, family="MGHD", structure="VVV", cfg=None):
    """
    Fit a G-component mixture by EM from ``cfg.n_starts`` starts.

    Start ``s`` uses seed ``cfg.seed + s``; the run with the largest final
    observed log-likelihood is reported.  A run that meets a degenerate
    component stops at its last good iterate and is marked not converged.

    Raises
    ------
    FitError
        When no start produces a usable model.
    """
    cfg = cfg or FitConfig()
    if not isinstance(ds, MaskedDataset):
        ds = MaskedDataset.from_array(ds)
    family = Family.parse(family)
    structure = CovarianceStructure.parse(structure)
    groups = extract_patterns(ds)
    order_cfg = type(DEFAULT_ORDER_DERIVATIVE)(cfg.order_step)
    best, diagnostics = None, []
    n_starts = 1 if cfg.init == "labels" else cfg.n_starts
    for s in range(n_starts):
        try:
            model = initialize(ds, G, family, cfg, structure, seed=cfg.seed + s)
            run = _run(ds, groups, model, cfg, order_cfg)
        except (DegenerateComponentError, DecompositionError, DomainError) as exc:
            diagnostics.append(f"start {s + 1}: {type(exc).__name__}: {exc}")
            continue
        rep = _report(ds, *run, start=s)
        if best is None or rep.loglik > best.loglik:
            best = rep
    if best is None:
        raise FitError("all starts failed", diagnostics)
    best.diagnostics = diagnostics + best.diagnostics
    return best


def predict(model, ds):
    """(responsibilities, MAP labels, imputed data) from one E-step pass."""
    if not isinstance(ds, MaskedDataset):
        ds = MaskedDataset.from_array(ds)
    cache = e_step(ds, model)
    labels = _map_labels(cache.resp)
    return cache.resp, labels, _imputed(ds, cache, labels)
