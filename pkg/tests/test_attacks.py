import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsmi.analysis import reconcile_queries, summarize
from rsmi.attacks import (BUDGET, EXHAUSTED, SKIPPED, SUCCESS, AttackConfig, AttackRecord,
                          BudgetExhausted, VictimHandle, greedy_attack, importance_rank,
                          pwws_attack, pwws_order, read_records, run_campaign, write_records)
from rsmi.textdata import UNK, LabeledExample, SynonymTable

GOOD, TRAP, MILD, OTHER = 10, 20, 11, 30


def keyword_victim(weights, n_classes=2):
    """p(class 1) = sigmoid(sum of per-token weights); unknown tokens weigh 0."""
    def predict(seqs):
        z = np.array([sum(weights.get(t, 0.0) for t in s) for s in seqs])
        p1 = 1 / (1 + np.exp(-z))
        return np.stack([1 - p1, p1], axis=1)
    return predict


def constant_victim(probs):
    def predict(seqs):
        return np.tile(probs, (len(seqs), 1))
    return predict


class TestVictimHandle:
    def test_counts_each_sequence(self):
        v = VictimHandle(constant_victim([0.3, 0.7]), 1)
        v.query([[4], [5], [6]])
        v.query([[4]])
        assert v.queries == 4

    def test_budget(self):
        v = VictimHandle(constant_victim([0.3, 0.7]), 1, budget=2)
        v.query([[4]])
        with pytest.raises(BudgetExhausted):
            v.query([[4], [5]])
        assert v.queries == 1

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            VictimHandle(constant_victim([1.0]), 0, budget=0)
        with pytest.raises(ValueError):
            AttackConfig(budget=0)


class TestImportanceRank:
    def test_insensitive_victim(self):
        v = VictimHandle(constant_victim([0.2, 0.8]), 1)
        assert np.all(importance_rank(v, [4, 5, 6]) == 0)

    def test_positional_victim(self):
        def predict(seqs):
            return np.array([[0.9, 0.1] if s[2] == UNK else [0.2, 0.8] for s in seqs])
        v = VictimHandle(predict, 1)
        assert int(np.argmax(importance_rank(v, [4, 5, 6, 7]))) == 2

    def test_query_count(self):
        v = VictimHandle(constant_victim([0.5, 0.5]), 0)
        importance_rank(v, list(range(3, 10)))
        assert v.queries == 8

    def test_budget_error(self):
        v = VictimHandle(constant_victim([0.5, 0.5]), 0, budget=4)
        with pytest.raises(BudgetExhausted):
            importance_rank(v, list(range(3, 10)))


class TestGreedy:
    def test_no_synonyms(self):
        v = VictimHandle(keyword_victim({GOOD: 3.0}), 1)
        rec = greedy_attack(v, [4, GOOD, 5], AttackConfig())
        assert not rec.success and rec.outcome == EXHAUSTED
        assert rec.queries == 4 == v.queries

    def test_trap_flips_in_one_substitution(self):
        weights = {GOOD: 3.0, MILD: 2.0, TRAP: -3.0, 4: 0.5}
        tokens = [4, GOOD, 5]
        cfg = AttackConfig(synonyms=SynonymTable({GOOD: [MILD, TRAP]}))
        rec = greedy_attack(VictimHandle(keyword_victim(weights), 1), tokens, cfg)
        assert rec.success and rec.outcome == SUCCESS
        assert rec.substitutions == [(1, GOOD, TRAP)]
        # brute force: the best single substitution at the most important position
        f = keyword_victim(weights)
        best = min([MILD, TRAP], key=lambda c: f([[4, c, 5]])[0, 1])
        assert rec.perturbed == [4, best, 5]
        assert rec.queries == 1 + 3 + 2

    def test_skip_misclassified(self):
        v = VictimHandle(keyword_victim({GOOD: 3.0}), 0)
        rec = greedy_attack(v, [GOOD], AttackConfig())
        assert rec.skipped and rec.outcome == SKIPPED and rec.queries == 1

    def test_commits_partial_progress(self):
        weights = {GOOD: 2.0, 12: 2.0, MILD: 1.0, 13: 1.0, OTHER: -1.5}
        cfg = AttackConfig(synonyms=SynonymTable({GOOD: [MILD], 12: [13, OTHER]}))
        rec = greedy_attack(VictimHandle(keyword_victim(weights), 1), [GOOD, 12], cfg)
        assert rec.success
        assert [s[2] for s in rec.substitutions] == [MILD, OTHER]
        assert reconcile_queries(rec)

    def test_budget_stop(self):
        weights = {t: 1.0 for t in range(3, 40)}
        syn = SynonymTable({t: [t + 100] for t in range(3, 40)})
        cfg = AttackConfig(synonyms=syn, budget=15)
        rec = greedy_attack(VictimHandle(keyword_victim(weights), 1, budget=15), list(range(3, 13)), cfg)
        assert rec.outcome == BUDGET and rec.queries == 15
        assert reconcile_queries(rec)

    def test_max_candidates(self):
        syn = SynonymTable({GOOD: list(range(50, 70))})
        cfg = AttackConfig(synonyms=syn, max_candidates=8)
        rec = greedy_attack(VictimHandle(keyword_victim({GOOD: 5.0}), 1), [GOOD], cfg)
        assert rec.queries == 1 + 1 + 8


class TestPwws:
    def test_single_position(self):
        cfg = AttackConfig(strategy="pwws", synonyms=SynonymTable({GOOD: [MILD, TRAP]}))
        rec = pwws_attack(VictimHandle(keyword_victim({GOOD: 2.0, MILD: 1.0, TRAP: -2.0}), 1),
                          [GOOD], cfg)
        assert rec.success and rec.substitutions == [(0, GOOD, TRAP)]

    def test_uniform_saliency_orders_by_gain(self):
        order = pwws_order(np.zeros(4), np.array([0.1, 0.4, 0.0, 0.2]),
                           np.array([True, True, False, True]))
        assert order == [1, 3, 0]

    def test_order_matches_exhaustive_scores(self):
        sal = np.array([0.30, 0.05, 0.20, 0.10, 0.00])
        gain = np.array([0.10, 0.50, 0.20, 0.25, 0.05])
        soft = np.exp(sal) / np.exp(sal).sum()
        scores = {i: soft[i] * gain[i] for i in range(5)}
        expected = sorted(scores, key=lambda i: (-scores[i], i))
        assert pwws_order(sal, gain, np.ones(5, bool)) == expected
        # pairwise check of every adjacent pair
        for a, b in itertools.pairwise(expected):
            assert scores[a] >= scores[b]

    def test_query_accounting(self):
        weights = {GOOD: 2.0, 12: 1.5, MILD: 1.0, 13: 0.5}
        cfg = AttackConfig(strategy="pwws", synonyms=SynonymTable({GOOD: [MILD], 12: [13]}))
        rec = pwws_attack(VictimHandle(keyword_victim(weights), 1), [GOOD, 12, 4], cfg)
        assert not rec.success and rec.outcome == EXHAUSTED
        assert rec.phase_queries == {"ranking": 4, "search": 2, "verify": 2}
        assert reconcile_queries(rec)

    def test_skip(self):
        cfg = AttackConfig(strategy="pwws")
        rec = pwws_attack(VictimHandle(keyword_victim({GOOD: -1.0}), 1), [GOOD], cfg)
        assert rec.skipped and rec.queries == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(3, 12), min_size=1, max_size=10),
       st.dictionaries(st.integers(3, 20), st.floats(-3, 3), max_size=18),
       st.sampled_from(["greedy", "pwws"]), st.integers(1, 60))
def test_record_invariants(tokens, weights, strategy, budget):
    syn = SynonymTable({t: [t + 5, t + 8] for t in range(3, 13)})
    cfg = AttackConfig(strategy=strategy, synonyms=syn, budget=budget)
    f = keyword_victim(weights)
    label = int(f([tokens])[0].argmax())
    v = VictimHandle(f, label, budget)
    attack = greedy_attack if strategy == "greedy" else pwws_attack
    rec = attack(v, tokens, cfg)
    assert rec.queries == v.queries <= budget
    assert reconcile_queries(rec)
    assert len(rec.perturbed) == len(rec.original)
    changed = {i for i, (a, b) in enumerate(zip(rec.original, rec.perturbed)) if a != b}
    assert changed <= {s[0] for s in rec.substitutions}
    if rec.success:
        assert int(f([rec.perturbed])[0].argmax()) != label


class TestCampaign:
    @pytest.fixture
    def data(self):
        return [LabeledExample((GOOD, 4 + i % 3, 5), i % 2) for i in range(30)]

    def factory(self, stream):
        f = keyword_victim({GOOD: 0.5, TRAP: -5.0, 4: 1.0, 5: -2.0})
        return f

    def test_deterministic_and_sampled(self, data):
        cfg = AttackConfig(synonyms=SynonymTable({GOOD: [TRAP]}))
        a = run_campaign(self.factory, data, cfg, seed=3, n=12)
        b = run_campaign(self.factory, data, cfg, seed=3, n=12)
        assert a.indices == b.indices and len(a.indices) == 12
        assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]
        a.summary.check()

    def test_zero_successes(self, data):
        a = run_campaign(self.factory, data, AttackConfig(), seed=0, n=20)
        s = a.summary
        assert s.asr == 0 and s.racc == s.sacc

    def test_default_sample_and_jobs(self, data):
        cfg = AttackConfig(synonyms=SynonymTable({GOOD: [TRAP]}))
        one = run_campaign(self.factory, data, cfg, seed=1)
        four = run_campaign(self.factory, data, cfg, seed=1, jobs=4)
        assert len(one.records) == 30
        assert [r.to_json() for r in one.records] == [r.to_json() for r in four.records]

    def test_empty(self):
        with pytest.raises(ValueError):
            run_campaign(self.factory, [], AttackConfig())

    def test_jsonl_round_trip(self, data, tmp_path):
        cfg = AttackConfig(synonyms=SynonymTable({GOOD: [TRAP]}))
        recs = run_campaign(self.factory, data, cfg, seed=2, n=5).records
        write_records(tmp_path / "r.jsonl", recs)
        back = read_records(tmp_path / "r.jsonl")
        assert back == recs
        assert summarize(back) == summarize(recs)

    def test_record_carries_seed(self, data):
        cfg = AttackConfig(synonyms=SynonymTable({GOOD: [TRAP]}))
        r = run_campaign(self.factory, data, cfg, seed=9, n=3).records[0]
        assert r.seed == 9 and r.stream_id == r.example_index
        assert isinstance(AttackRecord.from_json(r.to_json()), AttackRecord)
