"""
Model selection: information criteria, the Aitken stopping rule, the
adjusted Rand index, and a grid search over families, structures and G.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb

from .errors import HyperclustError, SearchError, UsageError
from .gpcm import CovarianceStructure

THREADS_ENV = "HYPERCLUST_THREADS"


def bic(loglik, rho, n):
    """BIC = 2 l - rho log n (larger is better)."""
    if n < 1:
        raise UsageError("n must be at least 1")
    return 2.0 * loglik - rho * np.log(n)


def _map_log_resp(resp):
    resp = np.atleast_2d(np.asarray(resp, dtype=float))
    top = resp[np.arange(resp.shape[0]), np.argmax(resp, axis=1)]
    with np.errstate(divide="ignore"):
        # a MAP entry of 0 is only possible for an all-zero row; 0 log 0 = 0
        return np.where(top > 0, np.log(np.where(top > 0, top, 1.0)), 0.0)


def icl(bic_value, resp):
    """ICL = BIC + 2 sum_i log z_i,MAP, so ICL <= BIC."""
    return bic_value + 2.0 * _map_log_resp(resp).sum()


def aitken_converged(l_prev2, l_prev, l_curr, epsilon):
    """
    Aitken-accelerated stopping rule.

    With ``a = (l_curr - l_prev) / (l_prev - l_prev2)`` the asymptotic estimate
    is ``l_inf = l_prev + (l_curr - l_prev) / (1 - a)``; converged when
    ``0 <= l_inf - l_prev < epsilon``.  A zero denominator or ``a >= 1`` is
    never treated as converged.
    """
    denom = l_prev - l_prev2
    if denom == 0 or not np.isfinite(denom):
        return False
    a = (l_curr - l_prev) / denom
    if not np.isfinite(a) or a >= 1:
        return False
    l_inf = l_prev + (l_curr - l_prev) / (1.0 - a)
    diff = l_inf - l_prev
    return bool(0 <= diff < epsilon)


def adjusted_rand_index(labels_a, labels_b):
    """Hubert-Arabie adjusted Rand index of two partitions."""
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    if a.size != b.size:
        raise UsageError("label vectors have different lengths")
    n = a.size
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1 if n else 0, ib.max() + 1 if n else 0))
    np.add.at(table, (ia, ib), 1)
    sum_cells = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial in the same way (e.g. n < 2, or both constant)
        nz = table > 0
        same = n == 0 or (nz.sum(axis=0).max() <= 1 and nz.sum(axis=1).max() <= 1)
        return 1.0 if same else 0.0
    return float((sum_cells - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelGrid:
    G_values: tuple = (1, 2, 3, 4)
    structures: tuple = ("VVV",)
    families: tuple = ("MGHD",)

    def __post_init__(self):
        gs = tuple(int(g) for g in self.G_values)
        if not gs or min(gs) < 1:
            raise UsageError("G_values must be a nonempty list of positive counts")
        st = tuple(CovarianceStructure.parse(s) for s in self.structures)
        fam = tuple(str(f).upper() for f in self.families)
        if not st or not fam:
            raise UsageError("structures and families must be nonempty")
        for f in fam:
            if f not in ("MGHD", "MST"):
                raise UsageError(f"unknown family {f!r}")
        object.__setattr__(self, "G_values", gs)
        object.__setattr__(self, "structures", st)
        object.__setattr__(self, "families", fam)

    def cells(self):
        return [(f, s, g) for f in self.families for s in self.structures for g in self.G_values]


@dataclass
class SelectionRow:
    family: str
    structure: str
    G: int
    loglik: float
    rho: int
    bic: float
    icl: float
    converged: bool
    error: str = ""
    report: object = field(default=None, repr=False)


@dataclass
class SelectionReport:
    rows: list
    best_by_bic: SelectionRow = None
    best_by_icl: SelectionRow = None
    from_unconverged: bool = False  # no cell converged; best rows chosen among completed fits

    def table(self):
        return [
            (r.family, r.structure, r.G, r.loglik, r.rho, r.bic, r.icl, r.converged)
            for r in self.rows
        ]


def default_workers():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _pick(rows, key, converged_only=True):
    ok = [r for r in rows if (r.converged or not converged_only) and np.isfinite(getattr(r, key))]
    # first row wins ties so the choice is order-deterministic
    return max(ok, key=lambda r: getattr(r, key), default=None)


def search(ds, grid, cfg=None, workers=None, keep_reports=False):
    """
    Fit every (family, structure, G) cell and rank by BIC and ICL.

    Non-converged fits stay in the table but are not eligible as best while
    any cell converged.  When none did (slowly mixing index/concentration
    parameters can keep every fit under a tight threshold short of the
    Aitken rule), the best rows are chosen among all completed fits and
    ``from_unconverged`` is set.
    """
    from .em import FitConfig, fit

    cfg = cfg or FitConfig()
    cells = grid.cells()

    def run(cell):
        fam, st, g = cell
        try:
            rep = fit(ds, g, fam, st, cfg)
        except HyperclustError as exc:
            return SelectionRow(fam, st.value, g, np.nan, 0, np.nan, np.nan, False,
                                f"{type(exc).__name__}: {exc}")
        return SelectionRow(
            fam, st.value, g, rep.loglik, rep.n_params, rep.bic, rep.icl, rep.converged,
            "; ".join(rep.diagnostics), rep if keep_reports else None,
        )

    workers = workers or default_workers()
    if workers > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, cells))
    else:
        rows = [run(c) for c in cells]
    if all(not np.isfinite(r.loglik) for r in rows):
        raise SearchError("every grid cell failed", [f"{r.family}/{r.structure}/G={r.G}: {r.error}" for r in rows])
    if any(r.converged for r in rows):
        return SelectionReport(rows, _pick(rows, "bic"), _pick(rows, "icl"))
    return SelectionReport(rows, _pick(rows, "bic", False), _pick(rows, "icl", False), True)
