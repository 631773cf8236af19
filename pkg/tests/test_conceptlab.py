import numpy as np
import pytest

from steernet import conceptlab as cl
from steernet.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def corpus():
    return cl.gen_corpus(3, 400)


class TestCorpus:
    def test_deterministic(self, corpus):
        again = cl.gen_corpus(3, 400)
        assert again.lines == corpus.lines
        assert again.answer_start == corpus.answer_start

    def test_seed_changes_lines(self, corpus):
        assert cl.gen_corpus(4, 400).lines != corpus.lines

    def test_answers_match_solver(self, corpus):
        instr = 0
        for line, a in zip(corpus.lines, corpus.answer_start):
            assert line[-1] == cl.EOS
            if line[0] == cl.INSTR:
                instr += 1
                concept = next(c for c in cl.ALL_CONCEPTS.values() if c.instruction == tuple(line[:3]))
                x = line[3:a]
                assert line[a:-1] == concept.transform(cl.task_for_prompt(x).solve(x))
            else:
                x = line[:a]
                assert line[a:-1] == cl.task_for_prompt(x).solve(x)
        assert 0 < instr < len(corpus)

    def test_tokens_in_vocab(self, corpus):
        toks, _ = corpus.as_arrays()
        assert toks.min() >= 0 and toks.max() < cl.VOCAB_SIZE

    def test_covers_all_tasks(self, corpus):
        seen = {cl.task_for_prompt(line[3:] if line[0] == cl.INSTR else line).task_id for line in corpus.lines}
        assert seen == set(cl.TASKS)

    def test_mask_marks_answer_predictions(self):
        c = cl.gen_corpus(0, 5)
        toks, mask = c.as_arrays()
        for i, (line, a) in enumerate(zip(c.lines, c.answer_start)):
            idx = np.flatnonzero(mask[i])
            # position p predicts token p+1: answer tokens and EOS
            assert [toks[i, p + 1] for p in idx] == line[a:]

    def test_rejects_empty(self):
        with pytest.raises(ConfigError):
            cl.gen_corpus(0, 0)


class TestConcepts:
    def test_inventory(self):
        assert len(cl.ALL_CONCEPTS) == 80
        fams = {c.family for c in cl.ALL_CONCEPTS.values()}
        assert fams == set(cl.FAMILIES)

    def test_steering_prompts_distinct(self):
        prompts = {c.steering_prompt for c in cl.ALL_CONCEPTS.values()}
        assert len(prompts) == 80

    @pytest.mark.parametrize("cid", sorted(cl.ALL_CONCEPTS))
    def test_label_passes_own_checker(self, cid):
        c = cl.get_concept(cid)
        rng = np.random.default_rng(0)
        for task in cl.TASKS.values():
            for _ in range(5):
                x = task.sample_prompt(rng)
                ans = task.solve(x)
                y = c.transform(ans)
                assert c.check(y) == 2
                assert c.check(ans) == 0
                assert c.strip(y) == ans
                assert cl.task_check(y, task, x, c) == 2

    def test_marker_misplaced_is_partial(self):
        c = cl.get_concept("mark:02")
        m = cl.MARKERS[2]
        assert c.check([m, 40, 41]) == 1
        assert c.check([40, m, 41]) == 1
        assert c.check([40, 41, m]) == 2

    def test_partial_cases_other_families(self):
        w = cl.get_concept("wrap:00")
        assert w.check([cl.OPENS[0], 40, 41]) == 1
        s = cl.get_concept("sep:01")
        assert s.check([40, cl.SEPARATORS[1], 41, 42]) == 1
        g = cl.get_concept("tag:05")
        assert g.check([40, cl.TAGS[5]]) == 1
        k = cl.get_concept("case:03")
        assert k.check([40, cl.UPPER[4]]) == 1

    def test_empty_output_scores_zero(self):
        for c in cl.ALL_CONCEPTS.values():
            assert c.check([]) == 0

    def test_unknown_concept(self):
        with pytest.raises(KeyError):
            cl.concept_check([1, 2], "mark:99")

    def test_default_order_interleaves(self):
        order = cl.default_concept_order(0)
        assert sorted(order) == sorted(cl.ALL_CONCEPTS)
        first = [cl.get_concept(c).family for c in order[:10]]
        assert all(first.count(f) == 2 for f in cl.FAMILIES)


class TestTaskCheck:
    x = (cl.TASK_TOKENS["echo"], 32, 33, 34, 35, cl.SEP)

    def test_exact(self):
        assert cl.task_check([32, 33, 34, 35], "echo", self.x) == 2

    def test_empty(self):
        assert cl.task_check([], "echo", self.x) == 0

    def test_half_corrupted_is_partial(self):
        # two of four positions flipped: exactly on the 50% boundary
        assert cl.task_check([32, 50, 34, 51], "echo", self.x) == 1

    def test_mostly_corrupted(self):
        assert cl.task_check([50, 51, 52, 35], "echo", self.x) == 0

    def test_solver_rejects_foreign_prompt(self):
        with pytest.raises(DataError):
            cl.TASKS["sort"].solve(self.x)

    def test_solvers(self):
        assert cl.TASKS["reverse"].solve((9, 32, 33, 34, 2)) == [34, 33, 32]
        assert cl.TASKS["sort"].solve((10, 40, 33, 35, 2)) == [33, 35, 40]
        assert cl.TASKS["swap"].solve((11, 32, 33, 34, 35, 36, 2)) == [33, 32, 35, 34, 36]


class TestDataset:
    def test_ten_to_one_ratio(self):
        m = cl.gen_dataset(cl.default_concept_order(0), n_concepts=10)
        assert len(m.train) == 720
        assert len(m.eval) == 100
        counts = {}
        for st in m.train:
            counts[st.concept_id] = counts.get(st.concept_id, 0) + 1
        assert set(counts.values()) == {72}

    def test_train_eval_prompts_disjoint(self):
        m = cl.gen_dataset(cl.default_concept_order(0), n_concepts=10)
        for cid in {st.concept_id for st in m.train}:
            tr = {st.x for st in m.train if st.concept_id == cid}
            ev = {st.x for st in m.eval if st.concept_id == cid}
            assert tr.isdisjoint(ev)
            assert len(ev) == 10

    def test_labels_follow_transform(self):
        m = cl.gen_dataset(["wrap:03", "case:07"], n_train=5, n_eval=2, seed=1)
        for st in m.train + m.eval:
            assert list(st.y_label) == st.concept.transform(st.task.solve(st.x))
            assert st.s == st.concept.steering_prompt

    def test_deterministic(self):
        a = cl.gen_dataset(["tag:01", "sep:02"], seed=9)
        b = cl.gen_dataset(["tag:01", "sep:02"], seed=9)
        assert a.train == b.train and a.eval == b.eval

    def test_capacity_error(self):
        with pytest.raises(ConfigError):
            cl.gen_dataset(list(cl.ALL_CONCEPTS), n_concepts=81)

    def test_manifest_roundtrip(self, tmp_path):
        m = cl.gen_dataset(["mark:00"], n_train=3, n_eval=2)
        p = tmp_path / "train.jsonl"
        cl.write_manifest(p, m.train)
        assert cl.read_manifest(p) == m.train
        assert p.read_text(encoding="utf-8").count("\n") == 3


class TestHeldout:
    def test_forty_ten(self):
        ids = cl.default_concept_order(0)[:50]
        hin, hout = cl.split_heldout(ids, 0.2, seed=0)
        assert (len(hin), len(hout)) == (40, 10)

    def test_disjoint_and_family_covered(self):
        ids = list(cl.ALL_CONCEPTS)
        hin, hout = cl.split_heldout(ids, 0.25, seed=3)
        assert set(hin).isdisjoint(hout)
        assert set(hin) | set(hout) == set(ids)
        fam_in = {cl.get_concept(c).family for c in hin}
        assert all(cl.get_concept(c).family in fam_in for c in hout)

    def test_bad_fraction(self):
        for f in (0.0, 1.0, -0.1):
            with pytest.raises(ConfigError):
                cl.split_heldout(list(cl.ALL_CONCEPTS), f)

    def test_singleton_family(self):
        with pytest.raises(ConfigError):
            cl.split_heldout(["mark:00", "wrap:00", "wrap:01"], 0.3)
