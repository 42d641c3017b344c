import random

import pytest

from relevance_rag.data import QAExample, ScoredDocument
from relevance_rag.evaluation import (
    AblationResult,
    MetricReport,
    corrupt_retrieval,
    em,
    f1,
    fingerprint,
    format_table,
    hit_at_1,
    jacc,
    retrieval_recall,
    run_ablations,
    run_sweep,
    score_records,
    truncate_retrieval,
)
from relevance_rag.inference import VerificationPolicy
from relevance_rag.model import build_model

from conftest import TINY


def brute_force_f1(pred, gold):
    """Token-overlap F1 by explicit matching: each gold token can be claimed once."""
    if not pred and not gold:
        return 1.0
    unused = list(gold)
    overlap = 0
    for tok in pred:
        for k, g in enumerate(unused):
            if g == tok:
                overlap += 1
                del unused[k]
                break
    if overlap == 0:
        return 0.0
    p, r = overlap / len(pred), overlap / len(gold)
    return 2 * p * r / (p + r)


def random_f1_cases(n=50, seed=0):
    rng = random.Random(seed)
    cases = []
    for _ in range(n):
        pred = [rng.randint(7, 14) for _ in range(rng.randint(0, 6))]
        golds = [[rng.randint(7, 14) for _ in range(rng.randint(1, 6))] for _ in range(rng.randint(1, 3))]
        cases.append((pred, golds))
    return cases


class TestExactMatch:
    def test_identity(self):
        assert em([7, 8], [[7, 8]]) == 1

    def test_strict_prefix(self):
        assert em([7], [[7, 8]]) == 0

    def test_any_gold(self):
        assert em([9], [[7, 8], [9]]) == 1

    def test_special_tokens_dropped(self):
        assert em([7, 2], [[7]], special_ids=[2]) == 1


class TestF1:
    def test_exact(self):
        assert f1([5, 6], [[5, 6]]) == 1.0

    def test_half(self):
        assert f1([5, 6], [[5, 7]]) == pytest.approx(0.5)

    def test_disjoint(self):
        assert f1([5], [[6]]) == 0.0

    def test_multiset_overlap(self):
        assert f1([5, 5, 6], [[5, 6, 6]]) == pytest.approx(2 / 3)

    def test_empty_prediction(self):
        assert f1([], [[5]]) == 0.0

    @pytest.mark.parametrize("pred,golds", random_f1_cases())
    def test_cross_checked(self, pred, golds):
        assert f1(pred, golds) == pytest.approx(max(brute_force_f1(pred, g) for g in golds), abs=1e-12)


class TestHitAt1:
    def test_planted_doc(self):
        assert hit_at_1([9, 10, 30, 31], [[30, 31]]) == 1
        assert hit_at_1(ScoredDocument([9, 10, 30, 31], 1), [[30, 31]]) == 1

    def test_distractor(self):
        assert hit_at_1([9, 10, 30, 32], [[30, 31]]) == 0


class TestJAcc:
    def test_perfect(self):
        assert jacc([0.99, 0.01, 0.01], [1, 0, 0]) == 1.0

    def test_half_is_irrelevant(self):
        assert jacc([0.5] * 4, [1, 0, 0, 0]) == 0.75

    def test_direct_count(self):
        assert jacc([0.9, 0.9], [1, 0]) == 0.5

    def test_validation(self):
        with pytest.raises(ValueError):
            jacc([0.1], [1, 0])
        with pytest.raises(ValueError):
            jacc([], [])


def _example(i, docs, answer=(30, 31), split="test"):
    return QAExample(f"q{i}", [10 + i, 40], [list(answer)], docs, split)


@pytest.fixture
def examples():
    out = []
    for i in range(6):
        docs = [ScoredDocument([10 + i, 41, 50, 51]), ScoredDocument([10 + i, 40, 30 + i, 31 + i], 1, 1.0, 1.0)]
        docs += [ScoredDocument([20, 21, 52, 53]), ScoredDocument([22, 40, 54, 55], 0, 0.5, 0.25)]
        out.append(_example(i, docs, answer=(30 + i, 31 + i)))
    return out


class TestScoreRecords:
    def test_no_relevant_document_gives_zero_hit(self, examples):
        ex = _example(0, [ScoredDocument([20, 21, 52, 53])])
        rec = {"query_id": "q0", "selected_answer_tokens": [1], "selected_doc_index": 0, "per_document": [{"s_rel": 0.1}]}
        report = score_records([ex], [rec])
        assert report.hit_at_1 == 0 and report.jacc == 1.0

    def test_aggregates(self, examples):
        recs = []
        for ex in examples:
            recs.append(
                {
                    "query_id": ex.id,
                    "selected_answer_tokens": ex.answers[0],
                    "selected_doc_index": 1,
                    "per_document": [{"s_rel": s} for s in (0.1, 0.9, 0.2, 0.6)],
                }
            )
        r = score_records(examples, recs, "abc")
        assert (r.em, r.f1, r.hit_at_1, r.jacc, r.n_examples) == (1.0, 1.0, 1.0, 0.75, 6)
        assert r.fingerprint == "abc"

    def test_misaligned(self, examples):
        with pytest.raises(ValueError):
            score_records(examples, [])


class TestRetrievalManipulation:
    def test_truncate(self, examples):
        assert all(len(e.documents) == 2 for e in truncate_retrieval(examples, 2))
        with pytest.raises(ValueError):
            truncate_retrieval(examples, 5)
        with pytest.raises(ValueError):
            truncate_retrieval(examples, 0)

    def test_corruption_extremes(self, examples):
        assert corrupt_retrieval(examples, 0.0, seed=0) == examples
        worst = corrupt_retrieval(examples, 1.0, seed=0)
        assert retrieval_recall(worst) == 0.0
        assert all(d.y == 0 for e in worst for d in e.documents)
        assert all(len(a.documents) == len(b.documents) for a, b in zip(examples, worst))

    def test_corruption_seeded(self, examples):
        assert corrupt_retrieval(examples, 0.5, seed=3) == corrupt_retrieval(examples, 0.5, seed=3)

    def test_bad_rate(self, examples):
        with pytest.raises(ValueError):
            corrupt_retrieval(examples, 1.5, seed=0)


class TestSweep:
    def test_single_level(self, examples):
        model = build_model(TINY, 0)
        reports = run_sweep(model, examples, "n_docs", [1], max_new_tokens=3)
        assert len(reports) == 1 and reports[0].axis == {"axis": "n_docs", "level": 1}

    def test_hit_bounded_by_recall(self, examples):
        model = build_model(TINY, 0)
        levels = [0.0, 0.5, 1.0]
        for level, r in zip(levels, run_sweep(model, examples, "retriever_quality", levels, seed=1, max_new_tokens=3)):
            assert r.hit_at_1 <= retrieval_recall(corrupt_retrieval(examples, level, 1))

    def test_unknown_axis(self, examples):
        with pytest.raises(ValueError):
            run_sweep(build_model(TINY, 0), examples, "temperature", [1])


class TestAblationHarness:
    def test_runs_every_variant_and_seed(self, examples):
        calls = []

        def train_fn(variant, seed):
            calls.append((variant, seed))
            return build_model(TINY, seed)

        table = run_ablations(train_fn, examples[:2], ["full", "no_fine_loss"], [0, 1, 2], VerificationPolicy(), 3)
        assert calls == [(v, s) for v in ("full", "no_fine_loss") for s in (0, 1, 2)]
        assert all(len(r.reports) == 3 for r in table.values())

    def test_median(self):
        reps = [MetricReport(em=v, f1=0, hit_at_1=0, jacc=0, n_examples=1) for v in (0.3, 0.9, 0.5)]
        assert AblationResult("x", reps).median("em") == 0.5

    def test_table_alignment(self):
        r = MetricReport(0.5, 0.6, 0.7, 0.8, 10)
        lines = format_table([("full", r), ("no_fine_loss", r)]).splitlines()
        assert len({len(line) for line in lines}) == 1


def test_fingerprint_stable():
    assert fingerprint({"a": 1, "b": [1, 2]}) == fingerprint({"b": [1, 2], "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})
