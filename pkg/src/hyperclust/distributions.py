"""
GIG, generalized hyperbolic and skew-t distributions.

Parameter bundles are immutable dataclasses.  Densities are returned on the
log scale and accept either a single point (shape ``(p,)``) or a batch of
rows (shape ``(n, p)``).

The generalized hyperbolic density in the (lambda, chi, psi) parameterization
is assembled from one helper,

    h(nu, chi, psi) = log[ (chi / psi)^(nu / 2) K_nu(sqrt(chi psi)) ],

as ``h(lam - p/2, chi + delta, psi + q) - h(lam, chi, psi) + (x - mu)' S^-1 beta
- p/2 log(2 pi) - 1/2 log|S|`` with ``delta`` the squared Mahalanobis distance
and ``q = beta' S^-1 beta``.  For ``nu < 0`` the helper has a finite limit as
``psi -> 0``, which is how the skew-t density and the psi = 0 conditionals of
the skew-t are evaluated.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special, stats

from .errors import DecompositionError, DomainError, UsageError
from .special_math import (
    DEFAULT_ORDER_DERIVATIVE,
    dlog_bessel_k_dorder,
    log_bessel_k,
)

LOG_2PI = np.log(2.0 * np.pi)

# below this value of beta' S^-1 beta the skew-t is evaluated as a symmetric t
ST_SYMMETRIC_THRESHOLD = 1e-12
# near-singular dispersion: min eigenvalue below this fraction of the max
NEAR_SINGULAR_RATIO = 1e-10
RIDGE_FRACTION = 1e-8


# ---------------------------------------------------------------------------
# parameter bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GigParams:
    """GIG(lambda, chi, psi) with density proportional to
    w^(lambda-1) exp(-(psi w + chi / w) / 2)."""

    lam: float
    chi: float
    psi: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.chi > 0 and self.psi > 0):
            raise DomainError(f"invalid GIG parameters {self}")

    def to_browne(self):
        return GigBrowneParams(
            lam=self.lam, eta=np.sqrt(self.chi / self.psi), omega=np.sqrt(self.chi * self.psi)
        )


@dataclass(frozen=True)
class GigBrowneParams:
    """GIG with scale ``eta`` and concentration ``omega``."""

    lam: float
    eta: float
    omega: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.eta > 0 and self.omega > 0):
            raise DomainError(f"invalid GIG parameters {self}")

    def to_classical(self):
        return GigParams(lam=self.lam, chi=self.omega * self.eta, psi=self.omega / self.eta)


def _vector(v, name):
    v = np.array(v, dtype=float).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} must be finite")
    return v


def _dispersion(sigma, p):
    sigma = np.array(sigma, dtype=float)
    if sigma.shape != (p, p):
        raise DomainError(f"dispersion must be {p}x{p}, got {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise DomainError("dispersion must be finite")
    scale = max(np.abs(sigma).max(), 1.0)
    if np.abs(sigma - sigma.T).max() > 1e-12 * scale:
        raise DomainError("dispersion matrix is not symmetric")
    return 0.5 * (sigma + sigma.T)


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True, eq=False)
class _LocationScale:
    mu: np.ndarray
    sigma: np.ndarray
    beta: np.ndarray

    def _init_arrays(self):
        mu = _vector(self.mu, "mu")
        p = mu.size
        beta = _vector(self.beta, "beta")
        if beta.size != p:
            raise DomainError("beta and mu lengths differ")
        sigma = _dispersion(self.sigma, p)
        _freeze(mu, beta, sigma)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma", sigma)

    @property
    def p(self):
        return self.mu.size


@dataclass(frozen=True, eq=False)
class GhdParams(_LocationScale):
    """Generalized hyperbolic with index ``lam``, concentration ``omega`` and
    mixing scale fixed at one."""

    lam: float = -0.5
    omega: float = 1.0

    def __post_init__(self):
        self._init_arrays()
        if not (np.isfinite(self.lam) and np.isfinite(self.omega) and self.omega > 0):
            raise DomainError(f"invalid index/concentration ({self.lam}, {self.omega})")

    def replace(self, **kw):
        d = dict(mu=self.mu, sigma=self.sigma, beta=self.beta, lam=self.lam, omega=self.omega)
        d.update(kw)
        return GhdParams(**d)


@dataclass(frozen=True, eq=False)
class GhFullParams(_LocationScale):
    """Generalized hyperbolic in the (lambda, chi, psi) parameterization.

    ``psi == 0`` is allowed only with ``lam < 0`` (a skew-t-type limit)."""

    lam: float = -0.5
    chi: float = 1.0
    psi: float = 1.0

    def __post_init__(self):
        self._init_arrays()
        if not (np.isfinite(self.lam) and self.chi > 0 and self.psi >= 0):
            raise DomainError(f"invalid GH parameters ({self.lam}, {self.chi}, {self.psi})")
        if self.psi == 0 and self.lam >= 0:
            raise DomainError("psi = 0 requires a negative index")


@dataclass(frozen=True, eq=False)
class StParams(_LocationScale):
    """Skew-t with ``dof`` degrees of freedom (inverse-gamma mixing)."""

    dof: float = 10.0

    def __post_init__(self):
        self._init_arrays()
        if not (np.isfinite(self.dof) and self.dof > 0):
            raise DomainError(f"degrees of freedom must be positive, got {self.dof}")

    def replace(self, **kw):
        d = dict(mu=self.mu, sigma=self.sigma, beta=self.beta, dof=self.dof)
        d.update(kw)
        return StParams(**d)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    lower: np.ndarray
    logdet: float
    ridged: bool = False

    def whiten(self, v):
        """L^-1 v for a vector or for the columns of a (p, n) array."""
        return linalg.solve_triangular(self.lower, v, lower=True, check_finite=False)


def cholesky_factor(sigma):
    """Cholesky factor of an SPD matrix.

    A near-singular matrix (min eigenvalue below 1e-10 of the max) is
    regularised with a ridge of 1e-8 * trace / p and flagged; an indefinite
    one raises :class:`DecompositionError`.
    """
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.shape[0]
    ridged = False
    eig = np.linalg.eigvalsh(sigma)
    if not np.all(np.isfinite(eig)) or eig[-1] <= 0:
        raise DecompositionError("dispersion matrix is not positive definite")
    if eig[0] < NEAR_SINGULAR_RATIO * eig[-1]:
        if eig[0] < -NEAR_SINGULAR_RATIO * eig[-1]:
            raise DecompositionError("dispersion matrix is not positive definite")
        sigma = sigma + RIDGE_FRACTION * np.trace(sigma) / p * np.eye(p)
        ridged = True
    try:
        lower = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(str(exc)) from exc
    return CholeskyFactor(lower, 2.0 * np.log(np.diag(lower)).sum(), ridged)


def _quadratic_terms(x, mu, beta, factor):
    """delta_i, (x_i - mu)' S^-1 beta and beta' S^-1 beta for rows x."""
    zx = factor.whiten((x - mu).T)
    zb = factor.whiten(beta)
    delta = np.einsum("ij,ij->j", zx, zx)
    return delta, zb @ zx, float(zb @ zb)


# ---------------------------------------------------------------------------
# GIG
# ---------------------------------------------------------------------------


def _log_h(nu, chi, psi):
    """log[(chi/psi)^(nu/2) K_nu(sqrt(chi psi))], with its psi -> 0 limit for nu < 0."""
    nu, chi, psi = np.broadcast_arrays(
        np.asarray(nu, float), np.asarray(chi, float), np.asarray(psi, float)
    )
    out = np.empty(nu.shape)
    zero = psi <= 0
    if np.any(~zero):
        c, s, n = chi[~zero], psi[~zero], nu[~zero]
        out[~zero] = 0.5 * n * (np.log(c) - np.log(s)) + log_bessel_k(n, np.sqrt(c * s))
    if np.any(zero):
        m = -nu[zero]
        if np.any(m <= 0):
            raise DomainError("psi = 0 limit requires a negative index")
        out[zero] = special.gammaln(m) + (m - 1.0) * np.log(2.0) - m * np.log(chi[zero])
    return out if out.ndim else float(out)


def _gig_classical(params):
    if isinstance(params, GigBrowneParams):
        return params.to_classical()
    return params


def gig_log_pdf(w, params):
    """Log density of a GIG law at ``w > 0``.

    Accepts :class:`GigParams` or :class:`GigBrowneParams`.
    """
    w_arr = np.asarray(w, dtype=float)
    if np.any(~np.isfinite(w_arr)) or np.any(w_arr <= 0):
        raise DomainError("GIG density is supported on w > 0")
    if isinstance(params, GigBrowneParams):
        lam, eta, om = params.lam, params.eta, params.omega
        out = (
            (lam - 1.0) * np.log(w_arr / eta)
            - np.log(2.0 * eta)
            - log_bessel_k(lam, om)
            - 0.5 * om * (w_arr / eta + eta / w_arr)
        )
    else:
        lam, chi, psi = params.lam, params.chi, params.psi
        out = (
            0.5 * lam * np.log(psi / chi)
            + (lam - 1.0) * np.log(w_arr)
            - np.log(2.0)
            - log_bessel_k(lam, np.sqrt(chi * psi))
            - 0.5 * (psi * w_arr + chi / w_arr)
        )
    return float(out) if np.ndim(out) == 0 else out


def gig_moment(alpha, params):
    """E[W^alpha] = (chi/psi)^(alpha/2) K_{lam+alpha}(sqrt(chi psi)) / K_lam(sqrt(chi psi))."""
    g = _gig_classical(params)
    z = np.sqrt(g.chi * g.psi)
    return float(
        np.exp(
            0.5 * alpha * np.log(g.chi / g.psi)
            + log_bessel_k(g.lam + alpha, z)
            - log_bessel_k(g.lam, z)
        )
    )


def gig_expect_log(params, cfg=DEFAULT_ORDER_DERIVATIVE):
    """E[log W] = log sqrt(chi/psi) + d/dlam log K_lam(sqrt(chi psi))."""
    g = _gig_classical(params)
    z = np.sqrt(g.chi * g.psi)
    return float(0.5 * np.log(g.chi / g.psi) + dlog_bessel_k_dorder(g.lam, z, cfg))


def _log_k_orders(orders, z):
    """log K at several orders (rows) for a vector of arguments (columns)."""
    with np.errstate(over="ignore", divide="ignore"):
        out = np.log(special.kve(orders[:, None], z[None, :])) - z[None, :]
    bad = ~np.isfinite(out)
    if bad.any():
        nu = np.broadcast_to(orders[:, None], out.shape)
        out[bad] = log_bessel_k(nu[bad], np.broadcast_to(z[None, :], out.shape)[bad])
    return out


def gig_posterior_terms(lam, chi, psi, cfg=DEFAULT_ORDER_DERIVATIVE):
    """E[W], E[1/W], E[log W] and log K_lam(sqrt(chi psi)) for GIG laws with a
    common scalar index ``lam`` and ``psi > 0`` (arrays ``chi``, ``psi``)."""
    chi, psi = np.broadcast_arrays(np.asarray(chi, float), np.asarray(psi, float))
    chi = chi.reshape(-1)
    psi = psi.reshape(-1)
    z = np.sqrt(chi * psi)
    h = cfg.step
    half_log = 0.5 * (np.log(chi) - np.log(psi))
    if lam <= 0:
        lk = _log_k_orders(np.array([lam, lam + 1.0, lam + h, lam - h]), z)
        ew = np.exp(half_log + lk[1] - lk[0])
        # both terms are nonnegative for lam <= 0
        einv = np.exp(-half_log + lk[1] - lk[0]) - 2.0 * lam / chi
        lk = lk[[0, 1, 1, 2, 3]]
    else:
        lk = _log_k_orders(np.array([lam, lam + 1.0, lam - 1.0, lam + h, lam - h]), z)
        ew = np.exp(half_log + lk[1] - lk[0])
        # sqrt(psi/chi) K_{lam+1}/K_lam - 2 lam/chi cancels for lam > 0; the
        # three-term recurrence turns it into sqrt(psi/chi) K_{lam-1}/K_lam
        einv = np.exp(-half_log + lk[2] - lk[0])
    elog = half_log + (lk[3] - lk[4]) / (2.0 * h)
    return ew, einv, elog, lk[0]


def gig_moments_array(lam, chi, psi, cfg=DEFAULT_ORDER_DERIVATIVE):
    """Vectorized (E[W], E[1/W], E[log W]) for GIG laws given by arrays.

    ``psi == 0`` entries are the inverse-gamma limit (shape -lam, scale chi/2),
    which needs ``lam < 0`` (and ``lam < -1`` for a finite E[W]).
    """
    lam, chi, psi = np.broadcast_arrays(
        np.asarray(lam, float), np.asarray(chi, float), np.asarray(psi, float)
    )
    shape_out = lam.shape
    lam, chi, psi = lam.reshape(-1), chi.reshape(-1), psi.reshape(-1)
    ew = np.empty(lam.shape)
    einv = np.empty(lam.shape)
    elog = np.empty(lam.shape)
    pos = psi > 0
    for value in np.unique(lam[pos]):
        sel = pos & (lam == value)
        ew[sel], einv[sel], elog[sel], _ = gig_posterior_terms(value, chi[sel], psi[sel], cfg)
    if np.any(~pos):
        shape, scale = inverse_gamma_limit(lam[~pos], chi[~pos])
        with np.errstate(divide="ignore"):
            ew[~pos] = np.where(shape > 1.0, scale / np.maximum(shape - 1.0, 0.0), np.inf)
        einv[~pos] = shape / scale
        elog[~pos] = np.log(scale) - special.digamma(shape)
    return ew.reshape(shape_out), einv.reshape(shape_out), elog.reshape(shape_out)


def inverse_gamma_limit(lam, chi):
    """(shape, scale) of the psi -> 0 limit of GIG(lam, chi, psi), lam < 0."""
    shape = -np.asarray(lam, float)
    if np.any(shape <= 0):
        raise DomainError("psi = 0 requires a negative GIG index")
    return shape, 0.5 * np.asarray(chi, float)


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------


def _rows(x, p):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != p:
        raise DomainError(f"expected points of dimension {p}, got {x2.shape[1]}")
    return x2, single


def _gh_from_terms(delta, xb, q, lam, chi, psi, p, logdet):
    """GH log density from precomputed quadratic terms (vectorized over rows)."""
    return (
        _log_h(lam - 0.5 * p, chi + delta, psi + q)
        - _log_h(lam, chi, psi)
        + xb
        - 0.5 * p * LOG_2PI
        - 0.5 * logdet
    )


def _student_t_from_terms(delta, dof, p, logdet):
    return (
        special.gammaln(0.5 * (dof + p))
        - special.gammaln(0.5 * dof)
        - 0.5 * p * np.log(dof * np.pi)
        - 0.5 * logdet
        - 0.5 * (dof + p) * np.log1p(delta / dof)
    )


def _st_from_terms(delta, xb, q, dof, p, logdet):
    if q < ST_SYMMETRIC_THRESHOLD:
        return _student_t_from_terms(delta, dof, p, logdet)
    return _gh_from_terms(delta, xb, q, -0.5 * dof, dof, 0.0, p, logdet)


def _finish(out, single):
    return float(out[0]) if single else out


def ghd_log_density(x, params, factor=None):
    """Log density of GHD(lam, omega, mu, Sigma, beta) at x (one point or rows)."""
    x2, single = _rows(x, params.p)
    factor = factor or cholesky_factor(params.sigma)
    delta, xb, q = _quadratic_terms(x2, params.mu, params.beta, factor)
    out = _gh_from_terms(
        delta, xb, q, params.lam, params.omega, params.omega, params.p, factor.logdet
    )
    return _finish(np.atleast_1d(out), single)


def gh_full_log_density(x, params, factor=None):
    """Log density of GH(lam, chi, psi, mu, Sigma, beta); psi = 0 uses the GIG limit."""
    x2, single = _rows(x, params.p)
    factor = factor or cholesky_factor(params.sigma)
    delta, xb, q = _quadratic_terms(x2, params.mu, params.beta, factor)
    if params.psi == 0 and q < ST_SYMMETRIC_THRESHOLD and params.chi > 0:
        # both psi and beta vanish: W is inverse gamma, X is a scaled t
        out = _gh_from_terms(delta, xb, 0.0, params.lam, params.chi, 0.0, params.p, factor.logdet)
    else:
        out = _gh_from_terms(
            delta, xb, q, params.lam, params.chi, params.psi, params.p, factor.logdet
        )
    return _finish(np.atleast_1d(out), single)


def st_log_density(x, params, factor=None):
    """Log density of the skew-t ST(dof, mu, Sigma, beta)."""
    x2, single = _rows(x, params.p)
    factor = factor or cholesky_factor(params.sigma)
    delta, xb, q = _quadratic_terms(x2, params.mu, params.beta, factor)
    out = _st_from_terms(delta, xb, q, params.dof, params.p, factor.logdet)
    return _finish(np.atleast_1d(out), single)


def log_density(x, params, factor=None):
    """Dispatch on the parameter type."""
    if isinstance(params, GhdParams):
        return ghd_log_density(x, params, factor)
    if isinstance(params, StParams):
        return st_log_density(x, params, factor)
    if isinstance(params, GhFullParams):
        return gh_full_log_density(x, params, factor)
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def ghd_mean_cov(params):
    """Mean mu + E[W] beta and covariance E[W] Sigma + Var(W) beta beta'."""
    mix = GigParams(params.lam, params.omega, params.omega)
    ew = gig_moment(1.0, mix)
    var_w = gig_moment(2.0, mix) - ew**2
    return params.mu + ew * params.beta, ew * params.sigma + var_w * np.outer(
        params.beta, params.beta
    )


# ---------------------------------------------------------------------------
# closure under affine maps, marginals and conditionals
# ---------------------------------------------------------------------------


def affine(params, B, b):
    """Distribution of B X + b; same family, mixing parameters unchanged."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    if B.shape[1] != params.p or b.size != B.shape[0]:
        raise UsageError("affine map has incompatible shape")
    mu = B @ params.mu + b
    sigma = B @ params.sigma @ B.T
    sigma = 0.5 * (sigma + sigma.T)
    beta = B @ params.beta
    if isinstance(params, GhdParams):
        return GhdParams(mu=mu, sigma=sigma, beta=beta, lam=params.lam, omega=params.omega)
    if isinstance(params, StParams):
        return StParams(mu=mu, sigma=sigma, beta=beta, dof=params.dof)
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def _index_set(idx, p, allow_full=True):
    idx = [int(i) for i in np.atleast_1d(idx)]
    if not idx:
        raise UsageError("index set must be nonempty")
    if len(set(idx)) != len(idx) or min(idx) < 0 or max(idx) >= p:
        raise UsageError(f"invalid index set {idx} for dimension {p}")
    if not allow_full and len(idx) == p:
        raise UsageError("conditioning set must be a proper subset")
    return np.array(idx, dtype=int)


def marginal(params, idx):
    """Marginal law of the coordinates ``idx`` (0-based, order preserved)."""
    idx = _index_set(idx, params.p)
    sub = dict(
        mu=params.mu[idx], sigma=params.sigma[np.ix_(idx, idx)], beta=params.beta[idx]
    )
    if isinstance(params, GhdParams):
        return GhdParams(lam=params.lam, omega=params.omega, **sub)
    if isinstance(params, StParams):
        return StParams(dof=params.dof, **sub)
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def conditional(params, idx1, x1):
    """Law of the remaining coordinates (ascending order) given X[idx1] = x1.

    Returns :class:`GhFullParams`.  For a skew-t input ``psi`` is
    ``beta1' S11^-1 beta1`` and may be zero.
    """
    idx1 = _index_set(idx1, params.p, allow_full=False)
    idx2 = np.array([i for i in range(params.p) if i not in set(idx1.tolist())])
    x1 = _vector(x1, "x1")
    if x1.size != idx1.size:
        raise UsageError("x1 length does not match the conditioning set")
    s11 = params.sigma[np.ix_(idx1, idx1)]
    s12 = params.sigma[np.ix_(idx1, idx2)]
    s22 = params.sigma[np.ix_(idx2, idx2)]
    f11 = cholesky_factor(s11)
    # S11^-1 S12 via the factor
    coef = linalg.cho_solve((f11.lower, True), s12, check_finite=False)
    r1 = x1 - params.mu[idx1]
    delta1 = float(r1 @ linalg.cho_solve((f11.lower, True), r1, check_finite=False))
    b1 = params.beta[idx1]
    q1 = float(b1 @ linalg.cho_solve((f11.lower, True), b1, check_finite=False))
    mu = params.mu[idx2] + coef.T @ r1
    sigma = s22 - s12.T @ coef
    sigma = 0.5 * (sigma + sigma.T)
    beta = params.beta[idx2] - coef.T @ b1
    d1 = idx1.size
    if isinstance(params, GhdParams):
        lam, chi, psi = params.lam - 0.5 * d1, params.omega + delta1, params.omega + q1
    elif isinstance(params, StParams):
        lam, chi, psi = -0.5 * (params.dof + d1), params.dof + delta1, q1
    else:
        raise TypeError(f"unsupported parameter type {type(params).__name__}")
    return GhFullParams(mu=mu, sigma=sigma, beta=beta, lam=lam, chi=chi, psi=psi)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _normal_mixture_draws(rng, params, w):
    factor = cholesky_factor(params.sigma)
    u = rng.standard_normal((w.size, params.p)) @ factor.lower.T
    return params.mu + w[:, None] * params.beta + np.sqrt(w)[:, None] * u


def sample_gig(params, n, rng):
    g = _gig_classical(params)
    return stats.geninvgauss.rvs(
        g.lam, np.sqrt(g.chi * g.psi), scale=np.sqrt(g.chi / g.psi), size=n, random_state=rng
    )


def sample_ghd(params, n, seed):
    """n draws of mu + W beta + sqrt(W) U with W ~ GIG(lam, eta=1, omega)."""
    if n < 1:
        raise UsageError("n must be at least 1")
    rng = np.random.default_rng(seed)
    w = np.atleast_1d(sample_gig(GigBrowneParams(params.lam, 1.0, params.omega), n, rng))
    return _normal_mixture_draws(rng, params, w)


def sample_st(params, n, seed):
    """n draws of mu + W beta + sqrt(W) U with W ~ InvGamma(dof/2, dof/2)."""
    if n < 1:
        raise UsageError("n must be at least 1")
    rng = np.random.default_rng(seed)
    half = 0.5 * params.dof
    w = half / rng.gamma(half, 1.0, size=n)
    return _normal_mixture_draws(rng, params, w)
