"""
Parsimonious eigen-decomposed dispersion structures.

Each component dispersion is written ``Sigma_g = lam_g D_g A_g D_g'`` with
volume ``lam_g``, orientation ``D_g`` (orthogonal) and shape ``A_g`` (diagonal,
unit determinant).  A three-letter tag says whether volume, shape and
orientation are Equal across components, Variable, or the Identity.

Given weighted scatter matrices ``W_g`` and weights ``n_g`` (so that the
unconstrained estimate is ``W_g / n_g``), :func:`constrain` maximizes

    C(Sigma) = -1/2 sum_g [ n_g log|Sigma_g| + tr(Sigma_g^-1 W_g) ]

over dispersions of the requested form.  Closed forms are used where they
exist; VEI, VEE and VEV alternate exact block updates, and EVE, VVE update
the common orientation with a majorize-minimize step.  Every inner step is
an exact block maximizer or an MM step, so ``C`` never decreases inside the
iteration.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateComponentError, UsageError

INNER_TOL = 1e-8
INNER_MAX_ITER = 100


class CovarianceStructure(str, Enum):
    EII = "EII"
    VII = "VII"
    EEI = "EEI"
    VEI = "VEI"
    EVI = "EVI"
    VVI = "VVI"
    EEE = "EEE"
    VEE = "VEE"
    EVE = "EVE"
    EEV = "EEV"
    VVE = "VVE"
    VEV = "VEV"
    EVV = "EVV"
    VVV = "VVV"

    @classmethod
    def parse(cls, tag):
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).upper())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise UsageError(f"unknown covariance structure {tag!r}; valid tags: {valid}") from None

    def __str__(self):
        return self.value


ALL_STRUCTURES = tuple(CovarianceStructure)


@dataclass(frozen=True, eq=False)
class ScatterSet:
    """Weighted scatter matrices W_g (G x p x p) with weights n_g."""

    scatters: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.scatters, dtype=float)
        n = np.array(self.weights, dtype=float).reshape(-1)
        if w.ndim != 3 or w.shape[1] != w.shape[2] or w.shape[0] != n.size:
            raise UsageError("scatters must be G x p x p with one weight per component")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(n))):
            raise UsageError("scatters and weights must be finite")
        if np.any(n <= 0):
            raise UsageError("weights must be positive")
        scale = np.maximum(np.abs(w).max(axis=(1, 2)), 1.0)
        if np.any(np.abs(w - np.swapaxes(w, 1, 2)).max(axis=(1, 2)) > 1e-10 * scale):
            raise UsageError("scatter matrices must be symmetric")
        w = 0.5 * (w + np.swapaxes(w, 1, 2))
        object.__setattr__(self, "scatters", w)
        object.__setattr__(self, "weights", n)

    @property
    def G(self):
        return self.scatters.shape[0]

    @property
    def p(self):
        return self.scatters.shape[1]


@dataclass(frozen=True, eq=False)
class ConstrainResult:
    sigmas: np.ndarray
    criterion: float
    converged: bool = True
    iterations: int = 0


def _eigh_desc(m):
    """Eigenpairs in descending order; each eigenvector's first nonzero entry is positive."""
    vals, vecs = np.linalg.eigh(m)
    vals = vals[::-1]
    vecs = vecs[:, ::-1]
    for j in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > 1e-12)
        if nz.size and vecs[nz[0], j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vals, vecs


def _unit_det(d):
    """Scale a positive vector of diagonal entries to unit product."""
    return d / np.exp(np.mean(np.log(d)))


def _unit_det_matrix(m):
    sign, logdet = np.linalg.slogdet(m)
    if sign <= 0:
        raise DegenerateComponentError("scatter matrix is not positive definite")
    return m / np.exp(logdet / m.shape[0])


def criterion(sigmas, sc):
    """-1/2 sum_g [n_g log|Sigma_g| + tr(Sigma_g^-1 W_g)]; -inf for a non-PD input."""
    total = 0.0
    for s, w, n in zip(sigmas, sc.scatters, sc.weights):
        try:
            lower = np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            return -np.inf
        logdet = 2.0 * np.log(np.diag(lower)).sum()
        inv_l = np.linalg.solve(lower, np.eye(s.shape[0]))
        total += n * logdet + np.einsum("ij,ij->", inv_l.T @ inv_l, w)
    return -0.5 * total


def _diag_stack(rows):
    return np.stack([np.diag(r) for r in rows])


def _orientation_mm(scatters, inv_shapes, d):
    """One MM step for a common orientation.

    Minimizes sum_g tr(W_g D M_g D') over orthogonal D, where ``inv_shapes``
    holds the diagonals of M_g.  The bound is built from W_g = a_g I -
    (a_g I - W_g) with a_g the largest eigenvalue of W_g.
    """
    grad = np.zeros_like(d)
    for w, m in zip(scatters, inv_shapes):
        alpha = np.linalg.eigvalsh(w)[-1]
        grad += (alpha * np.eye(w.shape[0]) - w) @ d * m[None, :]
    u, _, vt = np.linalg.svd(grad)
    return u @ vt


def _iterate(update, state, sc, sigmas_of):
    """Run block updates until the criterion stalls; returns (sigmas, crit, converged, iters)."""
    sig = sigmas_of(state)
    crit = criterion(sig, sc)
    for it in range(1, INNER_MAX_ITER + 1):
        state = update(state)
        new_sig = sigmas_of(state)
        new_crit = criterion(new_sig, sc)
        if new_crit < crit:
            # rounding-level reversal: keep the better iterate and stop
            return sig, crit, True, it
        done = new_crit - crit <= INNER_TOL * (1.0 + abs(new_crit))
        sig, crit = new_sig, new_crit
        if done:
            return sig, crit, True, it
    return sig, crit, False, INNER_MAX_ITER


def _start_orientation(start, sc):
    base = start[0] if start is not None else sc.scatters.sum(axis=0)
    return _eigh_desc(base)[1]


def constrain(sc, structure, start=None, return_info=False):
    """
    Maximize the structured dispersion criterion.

    Parameters
    ----------
    sc : ScatterSet
    structure : CovarianceStructure or str
    start : ndarray (G, p, p), optional
        Dispersions already satisfying ``structure`` (typically the previous
        EM iterate).  Iterative structures warm-start from it, and the result
        is never worse than ``start`` under the criterion.
    return_info : bool
        Return a :class:`ConstrainResult` instead of the bare array.

    Returns
    -------
    ndarray (G, p, p) or ConstrainResult
    """
    structure = CovarianceStructure.parse(structure)
    W, n = sc.scatters, sc.weights
    G, p = sc.G, sc.p
    N = n.sum()
    eye = np.eye(p)
    converged, iters = True, 0
    tag = structure.value
    diag_w = np.diagonal(W, axis1=1, axis2=2)

    if tag == "EII":
        sig = np.broadcast_to(np.trace(W, axis1=1, axis2=2).sum() / (N * p) * eye, (G, p, p))
    elif tag == "VII":
        sig = (np.trace(W, axis1=1, axis2=2) / (n * p))[:, None, None] * eye
    elif tag == "EEI":
        sig = np.broadcast_to(np.diag(diag_w.sum(axis=0) / N), (G, p, p))
    elif tag == "VVI":
        sig = _diag_stack(diag_w / n[:, None])
    elif tag == "EVI":
        if np.any(diag_w <= 0):
            raise DegenerateComponentError("scatter has a non-positive diagonal entry")
        shapes = np.array([_unit_det(d) for d in diag_w])
        lam = np.exp(np.mean(np.log(diag_w), axis=1)).sum() / N
        sig = _diag_stack(lam * shapes)
    elif tag == "EEE":
        sig = np.broadcast_to(W.sum(axis=0) / N, (G, p, p))
    elif tag == "EVV":
        c = np.array([_unit_det_matrix(w) for w in W])
        lam = sum(np.exp(np.linalg.slogdet(w)[1] / p) for w in W) / N
        sig = lam * c
    elif tag == "EEV":
        vecs, vals = [], []
        for w in W:
            v, d = _eigh_desc(w)
            vals.append(v)
            vecs.append(d)
        omega = np.sum(vals, axis=0)
        if np.any(omega <= 0):
            raise DegenerateComponentError("pooled eigenvalues are not positive")
        lam = np.exp(np.mean(np.log(omega))) / N
        shape = _unit_det(omega)
        sig = np.array([lam * (d * shape) @ d.T for d in vecs])
    elif tag == "VVV":
        sig = W / n[:, None, None]
    elif tag == "VEI":
        # state: common unit-det diagonal shape A
        if start is not None:
            a0 = _unit_det(np.diag(start[0]).copy())
        else:
            a0 = _unit_det(diag_w.sum(axis=0))

        def vols(a):
            return (diag_w / a).sum(axis=1) / (p * n)

        def update(a):
            lam = vols(a)
            return _unit_det((diag_w / lam[:, None]).sum(axis=0))

        sig, _, converged, iters = _iterate(
            update, a0, sc, lambda a: _diag_stack(vols(a)[:, None] * a)
        )
    elif tag == "VEE":
        c0 = _unit_det_matrix(start[0] if start is not None else W.sum(axis=0))

        def vols(c):
            ci = np.linalg.inv(c)
            return np.einsum("ij,gji->g", ci, W) / (p * n)

        def update(c):
            lam = vols(c)
            return _unit_det_matrix((W / lam[:, None, None]).sum(axis=0))

        sig, _, converged, iters = _iterate(
            update, c0, sc, lambda c: vols(c)[:, None, None] * c[None]
        )
    elif tag == "VEV":
        decomp = [_eigh_desc(w) for w in W]
        omegas = np.array([v for v, _ in decomp])
        dirs = [d for _, d in decomp]
        if start is not None:
            a0 = _unit_det(_eigh_desc(start[0])[0])
        else:
            a0 = _unit_det(omegas.sum(axis=0))

        def vols(a):
            return (omegas / a).sum(axis=1) / (p * n)

        def update(a):
            lam = vols(a)
            return _unit_det(np.sort((omegas / lam[:, None]).sum(axis=0))[::-1])

        sig, _, converged, iters = _iterate(
            update,
            a0,
            sc,
            lambda a: np.array([l * (d * a) @ d.T for l, d in zip(vols(a), dirs)]),
        )
    elif tag in ("EVE", "VVE"):
        d0 = _start_orientation(start, sc)

        def diag_terms(d):
            return np.array([np.diag(d.T @ w @ d) for w in W])

        def scales(d):
            # per-component diagonal of D' Sigma_g D given the orientation
            dt = diag_terms(d)
            if np.any(dt <= 0):
                raise DegenerateComponentError("projected scatter has a non-positive entry")
            if tag == "VVE":
                return dt / n[:, None]
            shapes = np.array([_unit_det(x) for x in dt])
            lam = (dt / shapes).sum() / (p * N)
            return lam * shapes

        def update(d):
            return _orientation_mm(W, 1.0 / scales(d), d)

        sig, _, converged, iters = _iterate(
            update, d0, sc, lambda d: np.array([(d * s) @ d.T for s in scales(d)])
        )
    else:  # pragma: no cover - the enum is exhaustive
        raise UsageError(f"unsupported structure {tag}")

    sig = np.array(sig, dtype=float)
    sig = 0.5 * (sig + np.swapaxes(sig, 1, 2))
    crit = criterion(sig, sc)
    if start is not None:
        start = np.asarray(start, dtype=float)
        start_crit = criterion(start, sc)
        if start_crit > crit:
            sig, crit = start.copy(), start_crit
    if not np.isfinite(crit):
        raise DegenerateComponentError("constrained dispersion is not positive definite")
    if return_info:
        return ConstrainResult(sig, crit, converged, iters)
    return sig


def scale_parameter_count(structure, p, G):
    """Free parameters in the G dispersion matrices."""
    tag = CovarianceStructure.parse(structure).value
    r = p * (p + 1) // 2
    rot = p * (p - 1) // 2
    return {
        "EII": 1,
        "VII": G,
        "EEI": p,
        "VEI": p + G - 1,
        "EVI": 1 + G * (p - 1),
        "VVI": G * p,
        "EEE": r,
        "VEE": r + G - 1,
        "EVE": 1 + G * (p - 1) + rot,
        "EEV": p + G * rot,
        "VVE": G * p + rot,
        "VEV": G + (p - 1) + G * rot,
        "EVV": 1 + G * (r - 1),
        "VVV": G * r,
    }[tag]


def free_parameter_count(structure, p, G, family):
    """Total free parameters of a G-component MGHD or MST mixture."""
    if p < 1 or G < 1:
        raise UsageError("p and G must be at least 1")
    family = str(family).upper()
    if family == "MGHD":
        extra = 2 * G
    elif family == "MST":
        extra = G
    else:
        raise UsageError(f"unknown family {family!r}")
    return (G - 1) + 2 * G * p + scale_parameter_count(structure, p, G) + extra
