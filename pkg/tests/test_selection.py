import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperclust.em import FitConfig
from hyperclust.errors import SearchError, UsageError
from hyperclust.gpcm import free_parameter_count
from hyperclust.missing_data import inject_missingness
from hyperclust.selection import (
    ModelGrid,
    SelectionReport,
    _pick,
    adjusted_rand_index,
    aitken_converged,
    bic,
    icl,
    search,
)
from hyperclust.simulation import builtin_design, generate


def brute_ari(a, b):
    """Adjusted Rand index from explicit pair enumeration."""
    n = len(a)
    pairs = list(itertools.combinations(range(n), 2))
    same_a = np.array([a[i] == a[j] for i, j in pairs])
    same_b = np.array([b[i] == b[j] for i, j in pairs])
    index = np.sum(same_a & same_b)
    expected = same_a.sum() * same_b.sum() / len(pairs)
    top = 0.5 * (same_a.sum() + same_b.sum())
    return (index - expected) / (top - expected)


class TestCriteria:
    def test_bic_examples(self):
        assert bic(-100, 10, 100) == pytest.approx(-246.0517018598809, rel=1e-14)
        assert bic(0, 0, 1) == 0.0
        assert bic(-50.0, free_parameter_count("VVV", 2, 2, "MGHD"), 400) == pytest.approx(-100 - 19 * np.log(400))

    def test_bic_bad_n(self):
        with pytest.raises(UsageError):
            bic(0.0, 1, 0)

    def test_icl_examples(self):
        hard = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        assert icl(-10.0, hard) == -10.0
        assert icl(-10.0, [[0.5, 0.5]]) == pytest.approx(-10.0 + 2 * np.log(0.5))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_icl_below_bic(self, seed):
        rng = np.random.default_rng(seed)
        resp = rng.dirichlet(np.ones(3), size=int(rng.integers(1, 30)))
        assert icl(1.5, resp) <= 1.5


class TestAitken:
    def test_examples(self):
        assert aitken_converged(0.0, 1.0, 1.5, 0.1) is False
        assert aitken_converged(0.0, 1.0, 1.0, 1e-12) is True

    def test_degenerate(self):
        assert aitken_converged(1.0, 1.0, 1.0, 0.1) is False  # zero denominator
        assert aitken_converged(0.0, 1.0, 3.0, 0.1) is False  # accelerating

    @settings(max_examples=200, deadline=None)
    @given(st.integers(3, 40), st.floats(1e-9, 1e-3), st.floats(1.0, 100.0), st.integers(0, 2**32 - 1))
    def test_flat_then_jump_never_falsely_converges(self, flat_len, tiny, jump, seed):
        """A plateau of tiny steps followed by a large jump is never declared converged."""
        rng = np.random.default_rng(seed)
        steps = tiny * rng.uniform(0.5, 1.5, size=flat_len)
        seq = np.concatenate([[0.0], np.cumsum(steps)])
        seq = np.append(seq, seq[-1] + jump)
        assert aitken_converged(seq[-3], seq[-2], seq[-1], 1e-6) is False

    def test_geometric_sequence(self):
        # l_k = 1 - r^k has l_inf = 1 exactly
        r = 0.5
        l = [1 - r**k for k in range(30)]
        stops = [k for k in range(2, 30) if aitken_converged(l[k - 2], l[k - 1], l[k], 1e-6)]
        first = stops[0]
        assert 1 - l[first - 1] < 1e-6 <= 1 - l[first - 2]


class TestARI:
    def test_identical(self):
        assert adjusted_rand_index([1, 1, 2, 2, 3], [1, 1, 2, 2, 3]) == 1.0

    def test_constant(self):
        assert adjusted_rand_index([1, 1, 2, 2], [1, 1, 1, 1]) == 0.0

    def test_pair_enumeration_example(self):
        got = adjusted_rand_index([1, 1, 2, 2], [1, 2, 2, 2])
        assert got == pytest.approx(brute_ari([1, 1, 2, 2], [1, 2, 2, 2]), rel=1e-14)
        assert got == pytest.approx(0.0)

    @settings(max_examples=150, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4)), min_size=3, max_size=25))
    def test_matches_brute_force(self, pairs):
        a, b = zip(*pairs)
        with np.errstate(invalid="ignore", divide="ignore"):
            expected = brute_ari(a, b)
        got = adjusted_rand_index(a, b)
        if np.isfinite(expected):
            assert got == pytest.approx(expected, abs=1e-12)
        assert got <= 1.0 + 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=2, max_size=30), st.integers(0, 2**32 - 1))
    def test_relabel_invariant(self, a, seed):
        rng = np.random.default_rng(seed)
        a = np.array(a)
        b = rng.integers(0, 3, size=a.size)
        perm = rng.permutation(4)
        assert adjusted_rand_index(perm[a], b) == pytest.approx(adjusted_rand_index(a, b), abs=1e-14)
        assert adjusted_rand_index(a, perm[b]) == pytest.approx(adjusted_rand_index(a, b), abs=1e-14)

    def test_small_n_edges(self):
        assert adjusted_rand_index([1], [1]) == 1.0
        assert adjusted_rand_index([], []) == 1.0
        with pytest.raises(UsageError):
            adjusted_rand_index([1, 2], [1])


class TestGrid:
    def test_validation(self):
        with pytest.raises(UsageError):
            ModelGrid(G_values=())
        with pytest.raises(UsageError):
            ModelGrid(G_values=(0,))
        with pytest.raises(UsageError):
            ModelGrid(families=("GMM",))
        with pytest.raises(UsageError):
            ModelGrid(structures=("XYZ",))

    def test_cells(self):
        assert len(ModelGrid((1, 2), ("VVV", "EII"), ("MGHD", "MST")).cells()) == 8


@pytest.fixture(scope="module")
def small():
    data, labels = generate(builtin_design("Sim1", n_per_component=60), seed=11)
    return inject_missingness(data, "MCAR", 0.05, 11), labels


class TestSearch:
    cfg = FitConfig(max_iter=60, n_starts=1, epsilon=1e-3)

    def test_single_cell(self, small):
        rep = search(small[0], ModelGrid((2,), ("VVV",), ("MGHD",)), self.cfg)
        assert len(rep.rows) == 1
        row = rep.rows[0]
        if row.converged:
            assert rep.best_by_bic is row and rep.best_by_icl is row
        else:
            assert rep.from_unconverged and rep.best_by_bic is row

    def test_best_is_brute_force_max(self, small):
        rep = search(small[0], ModelGrid((1, 2, 3), ("VVV", "EEI")), self.cfg)
        eligible = [r for r in rep.rows if r.converged] if not rep.from_unconverged else rep.rows
        assert rep.best_by_bic.bic == max(r.bic for r in eligible)
        assert rep.best_by_icl.icl == max(r.icl for r in eligible)

    def test_threads_match_serial(self, small):
        grid = ModelGrid((1, 2), ("VVV",))
        a = search(small[0], grid, self.cfg, workers=1)
        b = search(small[0], grid, self.cfg, workers=2)
        assert a.table() == b.table()

    def test_no_converged_cell_falls_back(self, small):
        cfg = FitConfig(max_iter=2, n_starts=1, epsilon=1e-14)
        rep = search(small[0], ModelGrid((1, 2)), cfg)
        assert not any(r.converged for r in rep.rows)
        assert rep.from_unconverged
        assert rep.best_by_bic.bic == max(r.bic for r in rep.rows)

    def test_every_cell_failed(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
        with pytest.raises(SearchError):
            search(x, ModelGrid((3,)), FitConfig(n_starts=1, max_iter=3))


def row(bic_value, converged=True, icl_value=None):
    from hyperclust.selection import SelectionRow

    return SelectionRow("MGHD", "VVV", 2, 0.0, 1, bic_value, bic_value if icl_value is None else icl_value, converged)


class TestPick:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=10), st.floats(1.0, 100.0))
    def test_worse_cell_never_changes_best(self, values, gap):
        rows = [row(v) for v in values]
        best = _pick(rows, "bic")
        rows.append(row(min(values) - gap))
        assert _pick(rows, "bic") is best

    def test_unconverged_excluded(self):
        rows = [row(-10.0), row(5.0, converged=False)]
        assert _pick(rows, "bic").bic == -10.0
        assert _pick(rows, "bic", converged_only=False).bic == 5.0

    def test_first_row_wins_ties(self):
        rows = [row(1.0), row(1.0)]
        assert _pick(rows, "bic") is rows[0]
