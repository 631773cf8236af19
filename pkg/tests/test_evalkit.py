import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steernet import conceptlab as cl
from steernet import evalkit as ek
from steernet.errors import CapabilityError, ConfigError, DataError, FitError, RankError
from steernet.hypernet import Hypernet, HypernetConfig
from steernet.tinylm import LmConfig, TinyLM

A, B, D = 87.7035, 1521.1495, -0.0034


@pytest.fixture(scope="module")
def lm():
    return TinyLM.init(LmConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq_len=48), seed=0).freeze()


@pytest.fixture(scope="module")
def tasks():
    return cl.gen_dataset(["mark:01", "wrap:02"], n_train=0, n_eval=4, seed=0).eval


class TestHarmonicMean:
    @pytest.mark.parametrize("triple,expected", [((2, 2, 2), 2.0), ((0, 2, 2), 0.0), ((1, 2, 2), 1.5),
                                                 ((2, 0, 1), 0.0), ((1, 1, 1), 1.0)])
    def test_table(self, triple, expected):
        assert ek.harmonic_mean(ek.ScoreTriple(*triple)) == expected

    @given(st.tuples(*[st.integers(0, 2)] * 3))
    def test_bounded_by_min(self, t):
        h = ek.harmonic_mean(t)
        if min(t) == 0:
            assert h == 0
        else:
            assert min(t) - 1e-12 <= h <= max(t) + 1e-12

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ek.ScoreTriple(3, 0, 0)


class TestJudge:
    def test_gold_label_scores(self, lm, tasks):
        judge = ek.Judge(lm, tau1=1e6, tau2=2e6)
        for t in tasks:
            tr = judge.judge(t.y_label, t)
            assert (tr.concept, tr.instruct) == (2, 2) and tr.fluency >= 1

    def test_empty_generation(self, lm, tasks):
        assert ek.Judge(lm).judge([], tasks[0]) == ek.ScoreTriple(0, 0, 0)

    def test_repetition_override(self, lm, tasks):
        judge = ek.Judge(lm, tau1=1e6, tau2=2e6)
        assert judge.judge([40, 40, 40, 41], tasks[0]).fluency == 0

    def test_plain_answer_misses_concept(self, lm, tasks):
        t = tasks[0]
        tr = ek.Judge(lm, tau1=1e6, tau2=2e6).judge(t.task.solve(t.x), t)
        assert tr.concept == 0 and tr.instruct == 2

    def test_fluency_thresholds(self, lm):
        j = ek.Judge(lm, 2.0, 5.0)
        assert [j.fluency_from_ppl(p) for p in (1.0, 2.0, 3.0, 5.0, 9.0)] == [2, 2, 1, 1, 0]

    def test_bad_thresholds(self, lm):
        with pytest.raises(ConfigError):
            ek.Judge(lm, 3.0, 2.0)

    def test_calibration_floors(self, lm, tasks):
        j = ek.Judge.calibrated(lm, [t.x for t in tasks], max_new=4)
        assert j.tau1 >= 1.5 and j.tau2 >= 4.0 and j.tau1 < j.tau2

    def test_unknown_concept(self, lm, tasks):
        bad = tasks[0].__class__(tasks[0].x, tasks[0].s, tasks[0].y_label, "mark:99", "echo", "eval-held-in")
        with pytest.raises(KeyError):
            ek.Judge(lm).judge([40], bad)


class _Fixed(ek.SteeringMethod):
    name = "fixed"

    def __init__(self, d, scale=1.0):
        self.d, self.scale = d, scale

    def vectors(self, tasks):
        return np.full((len(tasks), self.d), self.scale, dtype=np.float32)


class TestEvaluate:
    def test_best_factor_dominates_zero(self, lm, tasks):
        rep = ek.evaluate(_Fixed(32), tasks, lm, ek.Judge(lm), factors=(0, 1, 2), decode=None)
        assert rep.best_factor in (0.0, 1.0, 2.0)
        assert rep.aggregate >= rep.factor_scores[0.0]
        assert rep.aggregate == max(rep.factor_scores.values())

    def test_aggregate_is_mean_of_concept_means(self, lm, tasks):
        rep = ek.evaluate(_Fixed(32), tasks, lm, ek.Judge(lm), factors=(0, 1))
        assert rep.aggregate == pytest.approx(np.mean(list(rep.per_concept.values())))

    def test_duplicate_factors_idempotent(self, lm, tasks):
        a = ek.evaluate(_Fixed(32), tasks, lm, ek.Judge(lm), factors=(0, 1))
        b = ek.evaluate(_Fixed(32), tasks, lm, ek.Judge(lm), factors=(1, 0, 1, 0))
        assert a.factor_scores == b.factor_scores and a.rows == b.rows

    def test_grid_must_contain_zero(self, lm, tasks):
        with pytest.raises(ConfigError):
            ek.evaluate(_Fixed(32), tasks, lm, ek.Judge(lm), factors=(1, 2))

    def test_mixed_splits_rejected(self, lm, tasks):
        other = cl.gen_dataset(["tag:00"], n_train=0, n_eval=1, eval_split="eval-held-out").eval
        with pytest.raises(ConfigError):
            ek.evaluate(_Fixed(32), tasks + other, lm, ek.Judge(lm))

    def test_missing_vector_is_config_error(self, lm, tasks):
        m = ek.ConceptVectorMethod({"mark:01": np.zeros(32)})
        with pytest.raises(ConfigError):
            ek.evaluate(m, tasks, lm, ek.Judge(lm))

    def test_prompt_method_has_no_factor(self, lm, tasks):
        rep = ek.evaluate(ek.PromptMethod(), tasks, lm, ek.Judge(lm))
        assert list(rep.factor_scores) == [None] and rep.best_factor is None

    def test_report_files_deterministic(self, lm, tasks, tmp_path):
        rep = ek.evaluate(_Fixed(32), tasks, lm, ek.Judge(lm), factors=(0, 1))
        p1 = ek.write_report(rep, tmp_path / "a")
        p2 = ek.write_report(ek.evaluate(_Fixed(32), tasks, lm, ek.Judge(lm), factors=(0, 1)), tmp_path / "b")
        for k in p1:
            assert p1[k].read_bytes() == p2[k].read_bytes()
        header = p1["csv"].read_text().splitlines()[0].split(",")
        assert tuple(header) == ek.REPORT_COLUMNS
        first = json.loads(p1["jsonl"].read_text().splitlines()[0])
        assert first["method"] == "fixed"


class TestFlops:
    def test_formula(self):
        assert ek.tflops_per_concept(0.5, 100, 10) == pytest.approx(5.0)

    def test_inverse_in_c(self):
        led = ek.FlopsLedger([2e12, 4e12])
        assert ek.tflops_per_concept(led, 10, 4) == pytest.approx(2 * ek.tflops_per_concept(led, 10, 8))

    def test_ledger(self):
        led = ek.FlopsLedger()
        led.extend([1, 2, 3])
        assert led.cumulative == 6 and led.mean_per_step == 2.0

    def test_zero_concepts(self):
        with pytest.raises(ZeroDivisionError):
            ek.tflops_per_concept(1.0, 10, 0)

    def test_reference_constant(self):
        assert ek.F_REFT_TFLOPS == (666.27, 20.74)


class TestCurveFit:
    def test_recovers_reference_constants(self):
        c = np.array([1, 5, 10, 25, 50, 100, 200, 300, 400, 500], dtype=float)
        f = A + B * np.exp(D * c)
        fit = ek.fit_flops_curve(np.stack([c, f], 1))
        for got, want in ((fit.a, A), (fit.b, B), (fit.d, D)):
            assert abs(got - want) <= 1e-3 * abs(want)
        assert fit.r_squared >= 1 - 1e-9

    def test_value_at_ten(self):
        fit = ek.FitParams(A, B, D, 1.0)
        assert float(fit(10)) == pytest.approx(1558.0, abs=0.1)
        assert fit.asymptote == A

    def test_constant_data(self):
        fit = ek.fit_flops_curve([(1, 3.0), (2, 3.0), (4, 3.0), (8, 3.0)])
        assert fit.a == 3.0 and fit.r_squared == 1.0

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            ek.fit_flops_curve([(1, 1), (2, 2), (3, 3)])

    def test_duplicate_c(self):
        with pytest.raises(ValueError):
            ek.fit_flops_curve([(1, 1), (1, 2), (3, 3), (4, 5)])

    def test_budget_exhaustion_reports_best(self):
        c = np.array([1, 5, 10, 25, 50, 100], dtype=float)
        y = A + B * np.exp(D * c) + np.array([3, -2, 5, -4, 1, -3.0])
        with pytest.raises(FitError) as err:
            ek.fit_flops_curve(np.stack([c, y], 1), max_iter=0)
        assert isinstance(err.value.best, ek.FitParams)

    def test_noisy_fit_r2_below_one(self):
        rng = np.random.default_rng(0)
        c = np.linspace(1, 300, 20)
        y = A + B * np.exp(D * c) + rng.normal(0, 5, 20)
        fit = ek.fit_flops_curve(np.stack([c, y], 1))
        assert 0.99 < fit.r_squared < 1.0


def _brute_cosine(V, ids):
    order = sorted(set(ids))
    M = np.zeros((len(order), len(order)))
    for a, ca in enumerate(order):
        for b, cb in enumerate(order):
            vals = []
            for i, u in enumerate(V):
                for j, v in enumerate(V):
                    if ids[i] == ca and ids[j] == cb and (a != b or i != j):
                        vals.append(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
            M[a, b] = np.mean(vals) if vals else 1.0
    return M


class TestCosine:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        V = rng.normal(size=(11, 6))
        ids = ["a", "b", "c", "a", "b", "a", "c", "c", "b", "a", "d"]
        order, M = ek.cosine_similarity_matrix(V, ids)
        assert order == ["a", "b", "c", "d"]
        np.testing.assert_allclose(M, _brute_cosine(V, ids), atol=1e-6)
        np.testing.assert_array_equal(M, M.T)

    def test_identical_vectors_all_ones(self):
        _, M = ek.cosine_similarity_matrix(np.ones((4, 3)), ["x", "x", "y", "y"])
        np.testing.assert_allclose(M, 1.0)

    def test_orthogonal_sets(self):
        V = np.array([[1, 0, 0], [2, 0, 0], [0, 1, 0], [0, 0, 3.0]])
        _, M = ek.cosine_similarity_matrix(V, ["p", "p", "q", "q"])
        assert M[0, 1] == 0 and M[1, 0] == 0

    def test_zero_vector(self):
        with pytest.raises(DataError):
            ek.cosine_similarity_matrix(np.array([[1.0, 0], [0, 0]]), ["a", "b"])


class TestPca:
    def test_line(self):
        t = np.linspace(-2, 3, 9)[:, None]
        direction = np.array([1.0, -2.0, 0.5]) / np.linalg.norm([1.0, -2.0, 0.5])
        res = ek.pca(t * direction + 4.0, 2)
        assert abs(abs(res.components[0] @ direction) - 1) < 1e-6

    def test_matches_eigendecomposition(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(30, 3)) @ np.diag([3.0, 1.0, 0.2])
        res = ek.pca(X, 2)
        w, V = np.linalg.eigh(np.cov(X.T))
        np.testing.assert_allclose(res.variances, w[::-1][:2], atol=1e-6)
        for k in range(2):
            assert abs(abs(res.components[k] @ V[:, 2 - k]) - 1) < 1e-6
        assert res.variances[0] >= res.variances[1]

    def test_order_invariant_up_to_sign(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(12, 4))
        a = ek.pca(X, 2).projections
        perm = rng.permutation(12)
        b = ek.pca(X[perm], 2).projections
        np.testing.assert_allclose(np.abs(a[perm]), np.abs(b), atol=1e-9)

    def test_degenerate(self):
        with pytest.raises(RankError):
            ek.pca(np.ones((5, 3)), 2)

    def test_too_few(self):
        with pytest.raises(DataError):
            ek.pca(np.eye(2), 2)


class TestAttentionDump:
    def _hyper(self, lm, variant):
        cfg = HypernetConfig(variant=variant, n_blocks=2, d_model=32, n_heads=4, n_cross_heads=2, d_ff=64,
                             max_seq_len=16, init="random")
        return Hypernet.build(cfg, lm, 0)

    def test_rows_and_shapes(self, lm, tasks):
        t = tasks[0]
        dump = ek.dump_attention(self._hyper(lm, "CrossAttention"), t.s, t.x, lm)
        assert len(dump["blocks"]) == 2
        for b in dump["blocks"]:
            cross = np.array(b["cross"])
            assert cross.shape == (2, len(t.s), len(t.x))
            np.testing.assert_allclose(cross.sum(-1), 1.0, atol=1e-6)
            np.testing.assert_allclose(np.array(b["self"]).sum(-1), 1.0, atol=1e-6)
            np.testing.assert_allclose(b["cross_max_column_mass"], cross.mean(1).max(1))
        json.dumps(dump)

    def test_needs_cross_attention(self, lm, tasks):
        with pytest.raises(CapabilityError):
            ek.dump_attention(self._hyper(lm, "NoContext"), tasks[0].s, tasks[0].x, lm)

    def test_column_concentration(self):
        w = np.array([[[0.5, 0.5], [1.0, 0.0]]])
        assert ek.column_concentration(w).tolist() == [0.75]
        assert math.isclose(float(ek.column_concentration(w[0])[0]), 0.75)
