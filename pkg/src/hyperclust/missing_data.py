"""
Bookkeeping for incomplete data.

Rows are grouped by their missingness pattern so that every factorisation of
the observed block of a dispersion matrix is computed once per
(pattern, component) rather than once per row.

For a component with location ``mu``, skewness ``beta`` and dispersion
``Sigma`` partitioned into observed (o) and missing (m) blocks, the missing
block given the observed one and the latent scale ``w`` is

    X_m | x_o, w ~ N(mu_m|o + w beta_m|o, w Sigma_m|o)

with ``mu_m|o = mu_m + S_mo S_oo^-1 (x_o - mu_o)``,
``beta_m|o = beta_m - S_mo S_oo^-1 beta_o`` and
``Sigma_m|o = S_mm - S_mo S_oo^-1 S_om``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .distributions import (
    CholeskyFactor,
    GhdParams,
    StParams,
    cholesky_factor,
    gig_moments_array,
)
from .errors import GenerationError, UsageError, ValidationError

MECHANISMS = ("MCAR", "MAR1", "MAR2")

# Per-block deletion proportions for the two MAR patterns; at n = 400 these
# remove (10, 3, 6, 1) cells (pattern 1, r = 0.05) and so on.
MAR_PROPORTIONS = {
    "MAR1": (10, 3, 6, 1),
    "MAR2": (1, 6, 3, 10),
}


@dataclass(frozen=True, eq=False)
class MaskedDataset:
    """An n x p matrix with a boolean mask (True = missing).

    Missing cells hold NaN, which is never read by the numerical code.
    """

    data: np.ndarray
    mask: np.ndarray
    column_names: tuple = None

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if data.ndim != 2 or mask.shape != data.shape:
            raise ValidationError("data and mask must be n x p arrays of equal shape")
        n, p = data.shape
        if n == 0 or p == 0:
            raise ValidationError("dataset is empty")
        if not np.all(np.isfinite(data[~mask])):
            raise ValidationError("observed cells must be finite")
        empty = np.flatnonzero(mask.all(axis=1))
        if empty.size:
            raise ValidationError(f"row {empty[0] + 1} has no observed values")
        data[mask] = np.nan
        names = self.column_names
        names = tuple(f"x{j + 1}" for j in range(p)) if names is None else tuple(map(str, names))
        if len(names) != p:
            raise ValidationError("column_names must have one entry per column")
        data.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "column_names", names)

    @classmethod
    def from_array(cls, x, column_names=None):
        """Build from an array in which NaN marks a missing value."""
        x = np.asarray(x, dtype=float)
        return cls(x, np.isnan(x), column_names)

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def p(self):
        return self.data.shape[1]

    def take(self, rows):
        rows = np.asarray(rows)
        return MaskedDataset(self.data[rows], self.mask[rows], self.column_names)


@dataclass(frozen=True, eq=False)
class MissingPatternGroup:
    pattern: np.ndarray  # p booleans, True = missing
    row_indices: np.ndarray

    @property
    def observed(self):
        return np.flatnonzero(~self.pattern)

    @property
    def missing(self):
        return np.flatnonzero(self.pattern)


def extract_patterns(ds):
    """Group rows by missingness pattern, patterns in lexicographic order
    (False < True), rows ascending inside each group."""
    mask = np.asarray(ds.mask, dtype=bool)
    empty = np.flatnonzero(mask.all(axis=1))
    if empty.size:
        raise ValidationError(f"row {empty[0] + 1} has no observed values")
    patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    groups = []
    for k, pat in enumerate(patterns):
        pat = pat.copy()
        pat.setflags(write=False)
        rows = np.flatnonzero(inverse == k)
        rows.setflags(write=False)
        groups.append(MissingPatternGroup(pat, rows))
    return groups


@dataclass(frozen=True, eq=False)
class PartitionedComponent:
    """Blocks of (mu, beta, Sigma) for one pattern, plus derived regression terms."""

    obs: np.ndarray
    mis: np.ndarray
    mu_o: np.ndarray
    mu_m: np.ndarray
    beta_o: np.ndarray
    beta_m: np.ndarray
    sigma_oo: np.ndarray
    sigma_om: np.ndarray
    sigma_mm: np.ndarray
    sigma_oo_chol: CholeskyFactor
    coef: np.ndarray  # S_oo^-1 S_om, shape (p_o, p_m)
    beta_mo: np.ndarray  # beta_m|o
    sigma_mo: np.ndarray  # Sigma_m|o
    q: float  # beta_o' S_oo^-1 beta_o

    @property
    def p_o(self):
        return self.obs.size

    @property
    def p_m(self):
        return self.mis.size

    def quadratic_terms(self, x_o):
        """delta and (x_o - mu_o)' S_oo^-1 beta_o for rows of observed values."""
        x_o = np.atleast_2d(x_o)
        zx = self.sigma_oo_chol.whiten((x_o - self.mu_o).T)
        zb = self.sigma_oo_chol.whiten(self.beta_o)
        return np.einsum("ij,ij->j", zx, zx), zb @ zx

    def mu_mo(self, x_o):
        """Conditional location of the missing block, one row per observed row."""
        x_o = np.atleast_2d(x_o)
        return self.mu_m + (x_o - self.mu_o) @ self.coef


def partition_component(mu, beta, sigma, pattern):
    """Split component parameters by a missingness pattern (True = missing)."""
    pattern = np.asarray(pattern, dtype=bool)
    mu = np.asarray(mu, dtype=float)
    beta = np.asarray(beta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if pattern.shape != mu.shape:
        raise UsageError("pattern length does not match the component dimension")
    if pattern.all():
        raise UsageError("pattern has no observed coordinate")
    obs = np.flatnonzero(~pattern)
    mis = np.flatnonzero(pattern)
    s_oo = sigma[np.ix_(obs, obs)]
    s_om = sigma[np.ix_(obs, mis)]
    s_mm = sigma[np.ix_(mis, mis)]
    factor = cholesky_factor(s_oo)
    cf = (factor.lower, True)
    coef = linalg.cho_solve(cf, s_om, check_finite=False)
    zb = factor.whiten(beta[obs])
    sigma_mo = s_mm - s_om.T @ coef
    return PartitionedComponent(
        obs=obs,
        mis=mis,
        mu_o=mu[obs],
        mu_m=mu[mis],
        beta_o=beta[obs],
        beta_m=beta[mis],
        sigma_oo=s_oo,
        sigma_om=s_om,
        sigma_mm=s_mm,
        sigma_oo_chol=factor,
        coef=coef,
        beta_mo=beta[mis] - coef.T @ beta[obs],
        sigma_mo=0.5 * (sigma_mo + sigma_mo.T),
        q=float(zb @ zb),
    )


def reassemble(pc):
    """Inverse of :func:`partition_component`: (mu, beta, Sigma) in original order."""
    p = pc.p_o + pc.p_m
    mu = np.empty(p)
    beta = np.empty(p)
    sigma = np.empty((p, p))
    mu[pc.obs], mu[pc.mis] = pc.mu_o, pc.mu_m
    beta[pc.obs], beta[pc.mis] = pc.beta_o, pc.beta_m
    sigma[np.ix_(pc.obs, pc.obs)] = pc.sigma_oo
    sigma[np.ix_(pc.obs, pc.mis)] = pc.sigma_om
    sigma[np.ix_(pc.mis, pc.obs)] = pc.sigma_om.T
    sigma[np.ix_(pc.mis, pc.mis)] = pc.sigma_mm
    return mu, beta, sigma


@dataclass(frozen=True)
class LatentPosterior:
    """GIG(lam, chi, psi) law of W given the observed block.

    ``psi == 0`` (skew-t with zero observed skewness) is the inverse-gamma
    law with shape ``-lam`` and scale ``chi / 2``.
    """

    lam: np.ndarray
    chi: np.ndarray
    psi: np.ndarray

    @property
    def is_inverse_gamma(self):
        return bool(np.all(np.asarray(self.psi) == 0))

    def moments(self):
        """(E[W], E[1/W], E[log W])."""
        return gig_moments_array(self.lam, self.chi, self.psi)


def latent_w_posterior(x_o, pc, component):
    """Posterior of the latent scale for observed rows ``x_o`` (one or many).

    MGHD: lam - p_o/2, chi = omega + delta, psi = omega + q.
    MST:  -(v + p_o)/2, chi = v + delta, psi = q.
    """
    single = np.ndim(x_o) == 1
    delta, _ = pc.quadratic_terms(x_o)
    if isinstance(component, GhdParams):
        lam = component.lam - 0.5 * pc.p_o
        chi = component.omega + delta
        psi = component.omega + pc.q
    elif isinstance(component, StParams):
        lam = -0.5 * (component.dof + pc.p_o)
        chi = component.dof + delta
        psi = pc.q
    else:
        raise TypeError(f"unsupported component type {type(component).__name__}")
    lam, chi, psi = np.broadcast_arrays(np.float64(lam), chi, np.float64(psi))
    if single:
        return LatentPosterior(float(lam[0]), float(chi[0]), float(psi[0]))
    return LatentPosterior(lam.copy(), chi.copy(), psi.copy())


@dataclass(frozen=True, eq=False)
class MissingBlockMoments:
    """E[X_m], E[X_m / W] and E[X_m X_m' / W] given the observed block.

    Arrays carry a leading row axis when computed for several rows.
    """

    xhat_m: np.ndarray
    xtilde_m: np.ndarray
    xtt_m: np.ndarray


def conditional_missing_moments(x_o, pc, a, b):
    """Missing-block moments for observed rows ``x_o`` with E[W] = a, E[1/W] = b."""
    single = np.ndim(x_o) == 1
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    mu = pc.mu_mo(x_o)  # (k, m)
    beta = pc.beta_mo
    xhat = mu + a[:, None] * beta
    xtilde = b[:, None] * mu + beta
    mb = mu[:, :, None] * beta[None, None, :]
    xtt = (
        pc.sigma_mo[None]
        + b[:, None, None] * mu[:, :, None] * mu[:, None, :]
        + mb
        + np.swapaxes(mb, 1, 2)
        + a[:, None, None] * np.outer(beta, beta)[None]
    )
    if single:
        return MissingBlockMoments(xhat[0], xtilde[0], xtt[0])
    return MissingBlockMoments(xhat, xtilde, xtt)


# ---------------------------------------------------------------------------
# synthetic missingness
# ---------------------------------------------------------------------------


def _count(n, rate, share=1.0):
    # the small offset keeps exact products such as 400 * 0.15 * 0.15 from flooring low
    return int(np.floor(n * rate * share + 1e-9))


def _mcar(mask, rate, rng):
    n, p = mask.shape
    k = _count(n, rate)
    for j in range(p):
        others_observed = (~mask).sum(axis=1) - (~mask[:, j]) >= 1
        eligible = np.flatnonzero(~mask[:, j] & others_observed)
        if eligible.size < k:
            raise GenerationError(
                f"cannot remove {k} cells from column {j + 1} without emptying a row"
            )
        mask[rng.choice(eligible, size=k, replace=False), j] = True


def _mar(data, mask, rate, pattern, rng):
    n, p = mask.shape
    order = np.argsort(-data[:, 0], kind="stable")
    blocks = np.array_split(order, 4)
    props = np.array(MAR_PROPORTIONS[pattern], dtype=float)
    props = props / props.sum()
    for j in range(1, p):
        for rows, share in zip(blocks, props):
            k = _count(n, rate, share)
            if k > rows.size:
                raise GenerationError(
                    f"rate {rate} needs {k} removals from a block of {rows.size} rows"
                )
            mask[rng.choice(rows, size=k, replace=False), j] = True


def inject_missingness(data, mechanism, rate, seed, column_names=None):
    """
    Delete cells from a complete matrix.

    Parameters
    ----------
    data : ndarray (n, p)
        Complete data.
    mechanism : {"MCAR", "MAR1", "MAR2"}
        MCAR removes ``floor(n * rate)`` cells per column uniformly at random
        (never emptying a row).  MAR1/MAR2 sort rows on column 1 (descending),
        split them into four blocks and remove ``floor(n * rate * share)``
        cells of columns 2..p in each block, with block shares 10:3:6:1
        (pattern 1) or 1:6:3:10 (pattern 2).
    rate : float
        Missingness rate in [0, 1).
    seed : int
        Seed for the deterministic generator.

    Returns
    -------
    MaskedDataset
    """
    data = np.array(data, dtype=float)
    if data.ndim != 2 or not np.all(np.isfinite(data)):
        raise ValidationError("data must be a finite n x p matrix")
    mechanism = str(mechanism).upper()
    if mechanism not in MECHANISMS:
        raise UsageError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
    if not (0.0 <= rate < 1.0):
        raise UsageError(f"rate must lie in [0, 1), got {rate}")
    n, p = data.shape
    mask = np.zeros((n, p), dtype=bool)
    if rate > 0:
        if p < 2:
            raise GenerationError("a single column cannot lose values without emptying rows")
        rng = np.random.default_rng(seed)
        if mechanism == "MCAR":
            _mcar(mask, rate, rng)
        else:
            _mar(data, mask, rate, mechanism, rng)
    return MaskedDataset(data, mask, column_names)


def mean_impute(ds):
    """Replace missing cells by the mean of the observed cells of their column."""
    obs = ~ds.mask
    counts = obs.sum(axis=0)
    if np.any(counts == 0):
        j = int(np.flatnonzero(counts == 0)[0])
        raise ValidationError(f"column {ds.column_names[j]!r} has no observed values")
    filled = np.where(obs, ds.data, 0.0)
    means = filled.sum(axis=0) / counts
    return np.where(obs, ds.data, means)
