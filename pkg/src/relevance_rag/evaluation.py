"""QA metrics and experiment harnesses (document-count / retriever-quality sweeps, ablations)."""

from __future__ import annotations

import hashlib
import json
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import QAExample, ScoredDocument, contains_subsequence
from .inference import VerificationPolicy, run_query
from .model import TinyLM

RELEVANCE_THRESHOLD = 0.5


def normalize(tokens: Iterable[int], special_ids: Iterable[int] = ()) -> list[int]:
    drop = set(special_ids)
    return [int(t) for t in tokens if int(t) not in drop]


def em(prediction: Sequence[int], golds: Sequence[Sequence[int]], special_ids: Iterable[int] = ()) -> int:
    special_ids = tuple(special_ids)
    pred = normalize(prediction, special_ids)
    return int(any(pred == normalize(g, special_ids) for g in golds))


def _f1_single(pred: list[int], gold: list[int]) -> float:
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def f1(prediction: Sequence[int], golds: Sequence[Sequence[int]], special_ids: Iterable[int] = ()) -> float:
    """Best bag-of-tokens F1 against any gold answer."""
    special_ids = tuple(special_ids)
    pred = normalize(prediction, special_ids)
    return max(_f1_single(pred, normalize(g, special_ids)) for g in golds)


def hit_at_1(selected_doc: Sequence[int] | ScoredDocument, golds: Sequence[Sequence[int]]) -> int:
    tokens = selected_doc.tokens if isinstance(selected_doc, ScoredDocument) else selected_doc
    return int(any(contains_subsequence(tokens, g) for g in golds))


def jacc(judgments: Sequence[float], truth: Sequence[int]) -> float:
    """Share of documents whose thresholded score agrees with the binary label."""
    if len(judgments) != len(truth):
        raise ValueError(f"{len(judgments)} judgments but {len(truth)} labels")
    if not judgments:
        raise ValueError("jacc needs at least one judgment")
    agree = sum((s > RELEVANCE_THRESHOLD) == (y == 1) for s, y in zip(judgments, truth))
    return agree / len(judgments)


@dataclass
class MetricReport:
    em: float
    f1: float
    hit_at_1: float
    jacc: float
    n_examples: int
    fingerprint: str = ""
    axis: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def inference_record(example: QAExample, selected, candidates) -> dict:
    return {
        "query_id": example.id,
        "selected_answer_tokens": list(selected.answer),
        "selected_doc_index": selected.doc_index,
        "per_document": [c.to_dict() for c in candidates],
    }


def score_records(examples: Sequence[QAExample], records: Sequence[dict], config_fp: str = "") -> MetricReport:
    """Aggregate inference records (one per example, same order) into a report."""
    if len(examples) != len(records) or not examples:
        raise ValueError("need one inference record per example")
    ems, f1s, hits, judged, truth = [], [], [], [], []
    for ex, rec in zip(examples, records):
        if rec["query_id"] != ex.id:
            raise ValueError(f"record {rec['query_id']} does not match example {ex.id}")
        pred = rec["selected_answer_tokens"]
        ems.append(em(pred, ex.answers))
        f1s.append(f1(pred, ex.answers))
        hits.append(hit_at_1(ex.documents[rec["selected_doc_index"]], ex.answers))
        for doc, per in zip(ex.documents, rec["per_document"]):
            judged.append(per["s_rel"])
            truth.append(hit_at_1(doc, ex.answers))
    n = len(examples)
    return MetricReport(
        em=sum(ems) / n,
        f1=sum(f1s) / n,
        hit_at_1=sum(hits) / n,
        jacc=jacc(judged, truth),
        n_examples=n,
        fingerprint=config_fp,
    )


def run_inference(
    model: TinyLM, examples: Sequence[QAExample], policy: VerificationPolicy, max_new_tokens: int = 8
) -> list[dict]:
    records = []
    for ex in examples:
        selected, candidates = run_query(model, ex.query_tokens, ex.documents, policy, max_new_tokens)
        records.append(inference_record(ex, selected, candidates))
    return records


def evaluate(
    model: TinyLM,
    examples: Sequence[QAExample],
    policy: VerificationPolicy = VerificationPolicy(),
    max_new_tokens: int = 8,
    config_fp: str = "",
) -> tuple[MetricReport, list[dict]]:
    records = run_inference(model, examples, policy, max_new_tokens)
    return score_records(examples, records, config_fp), records


# --- retrieval manipulations --------------------------------------------------


def truncate_retrieval(examples: Sequence[QAExample], k: int) -> list[QAExample]:
    """Keep the top-``k`` retrieved documents of every example."""
    if k <= 0:
        raise ValueError("k must be positive")
    short = [ex for ex in examples if len(ex.documents) < k]
    if short:
        raise ValueError(f"{short[0].id} has only {len(short[0].documents)} documents, cannot keep {k}")
    return [replace(ex, documents=list(ex.documents[:k])) for ex in examples]


def corrupt_retrieval(examples: Sequence[QAExample], rate: float, seed: int) -> list[QAExample]:
    """Simulate a weaker retriever: with probability ``rate`` per query, each relevant
    document is swapped for a document retrieved for a different query."""
    if not 0 <= rate <= 1:
        raise ValueError("corruption rate must lie in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    out = []
    for qi, ex in enumerate(examples):
        docs = list(ex.documents)
        if rng.random() < rate:
            for di, doc in enumerate(docs):
                if doc.y == 1:
                    docs[di] = _foreign_document(examples, qi, ex, rng)
        out.append(replace(ex, documents=docs))
    return out


def _foreign_document(examples, qi, ex, rng) -> ScoredDocument:
    for _ in range(1000):
        other = int(rng.integers(len(examples)))
        if other == qi:
            continue
        pool = examples[other].documents
        cand = pool[int(rng.integers(len(pool)))]
        if not hit_at_1(cand, ex.answers):
            overlap = len(set(ex.query_tokens) & set(cand.tokens)) / len(set(ex.query_tokens))
            return ScoredDocument(list(cand.tokens), y=0, s_ce=overlap, s_rel_label=overlap / 2)
    raise RuntimeError(f"no replacement distractor found for {ex.id}")


def run_sweep(
    model: TinyLM,
    examples: Sequence[QAExample],
    axis: str,
    levels: Sequence,
    policy: VerificationPolicy = VerificationPolicy(),
    seed: int = 0,
    max_new_tokens: int = 8,
) -> list[MetricReport]:
    """One report per level: ``n_docs`` truncates the retrieved list, ``retriever_quality``
    sets the corruption rate (0 keeps every relevant document)."""
    if not levels:
        raise ValueError("sweep needs at least one level")
    reports = []
    for level in levels:
        if axis == "n_docs":
            data = truncate_retrieval(examples, int(level))
        elif axis == "retriever_quality":
            data = corrupt_retrieval(examples, float(level), seed)
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        report, _ = evaluate(model, data, policy, max_new_tokens)
        report.axis = {"axis": axis, "level": level}
        reports.append(report)
    return reports


def retrieval_recall(examples: Sequence[QAExample]) -> float:
    """Fraction of queries with at least one relevant document retrieved."""
    return sum(any(hit_at_1(d, ex.answers) for d in ex.documents) for ex in examples) / len(examples)


# --- ablations -----------------------------------------------------------------


@dataclass
class AblationResult:
    variant: str
    reports: list[MetricReport]

    def median(self, metric: str) -> float:
        return statistics.median(getattr(r, metric) for r in self.reports)


def run_ablations(
    train_fn: Callable[[str, int], TinyLM],
    eval_examples: Sequence[QAExample],
    variants: Sequence[str],
    seeds: Sequence[int],
    policy: VerificationPolicy = VerificationPolicy(),
    max_new_tokens: int = 8,
) -> dict[str, AblationResult]:
    """Train every variant under every seed via ``train_fn(variant, seed)`` and evaluate each."""
    table = {}
    for variant in variants:
        reports = []
        for seed in seeds:
            model = train_fn(variant, seed)
            report, _ = evaluate(model, eval_examples, policy, max_new_tokens)
            report.axis = {"variant": variant, "seed": seed}
            reports.append(report)
        table[variant] = AblationResult(variant, reports)
    return table


def format_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    head = f"{'':<24}{'EM':>8}{'F1':>8}{'Hit@1':>8}{'JAcc':>8}{'n':>6}"
    lines = [head]
    for name, r in rows:
        lines.append(f"{name:<24}{r.em:>8.4f}{r.f1:>8.4f}{r.hit_at_1:>8.4f}{r.jacc:>8.4f}{r.n_examples:>6d}")
    return "\n".join(lines)
