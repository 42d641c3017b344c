"""Synthetic planted-relevance QA corpus, relevance labels, and negative sampling.

A fact is written inside a document as the tokens ``entity relation
answer...``; a query is ``entity relation``. A fixed set of popular facts
keeps the same answer everywhere (knowledge a model can memorize); every
other fact occurrence draws a fresh answer, so only a document that states
it can supply it. A document is relevant exactly when it contains the gold
answer as a contiguous run, which by construction happens only when it
states the queried fact.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


class CorpusConfigError(ValueError):
    pass


@dataclass
class ScoredDocument:
    tokens: list[int]
    y: int = 0
    s_ce: float = 0.0
    s_rel_label: float = 0.0

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "y": self.y, "s_ce": self.s_ce, "s_rel_label": self.s_rel_label}


@dataclass
class QAExample:
    id: str
    query_tokens: list[int]
    answers: list[list[int]]
    documents: list[ScoredDocument]
    split: str

    def __post_init__(self):
        if not self.query_tokens:
            raise ValueError(f"example {self.id}: empty query")
        if not self.answers or any(len(a) == 0 for a in self.answers):
            raise ValueError(f"example {self.id}: needs at least one non-empty answer")
        if self.split not in SPLITS:
            raise ValueError(f"example {self.id}: unknown split {self.split!r}")

    @property
    def gold_documents(self) -> list[ScoredDocument]:
        return [d for d in self.documents if d.y == 1]

    @property
    def negative_documents(self) -> list[ScoredDocument]:
        return [d for d in self.documents if d.y == 0]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "query_tokens": list(self.query_tokens),
            "answers": [list(a) for a in self.answers],
            "documents": [d.to_dict() for d in self.documents],
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QAExample":
        return cls(
            id=str(data["id"]),
            query_tokens=[int(t) for t in data["query_tokens"]],
            answers=[[int(t) for t in a] for a in data["answers"]],
            documents=[
                ScoredDocument(
                    tokens=[int(t) for t in d["tokens"]],
                    y=int(d["y"]),
                    s_ce=float(d["s_ce"]),
                    s_rel_label=float(d["s_rel_label"]),
                )
                for d in data["documents"]
            ],
            split=data["split"],
        )


# --- relevance labels -------------------------------------------------------


def contains_subsequence(tokens: Sequence[int], pattern: Sequence[int]) -> bool:
    n = len(pattern)
    if n == 0:
        return False
    tokens = list(tokens)
    pattern = list(pattern)
    return any(tokens[i : i + n] == pattern for i in range(len(tokens) - n + 1))


def binary_label(doc: Sequence[int], answers: Iterable[Sequence[int]]) -> int:
    return int(any(contains_subsequence(doc, a) for a in answers))


def oracle_score(q: Sequence[int], d: Sequence[int]) -> float:
    """Fraction of the query's distinct tokens that also occur in the document."""
    uq = set(q)
    if not uq:
        raise ValueError("oracle_score needs a non-empty query")
    return len(uq & set(d)) / len(uq)


Scorer = Callable[[Sequence[int], Sequence[int]], float]


def label_machine(s_ce: float, y: int) -> float:
    """Teacher relevance label: the mean of the oracle score and the binary label."""
    if not (0.0 <= s_ce <= 1.0) or math.isnan(s_ce):
        raise ValueError(f"s_ce must lie in [0, 1], got {s_ce}")
    if y not in (0, 1):
        raise ValueError(f"y must be 0 or 1, got {y}")
    return (s_ce + y) / 2


def label_document(
    q: Sequence[int], tokens: Sequence[int], answers: Sequence[Sequence[int]], scorer: Scorer = oracle_score
) -> ScoredDocument:
    y = binary_label(tokens, answers)
    s_ce = float(scorer(q, tokens))
    return ScoredDocument(tokens=list(tokens), y=y, s_ce=s_ce, s_rel_label=label_machine(s_ce, y))


# --- negative sampling ------------------------------------------------------


@dataclass(frozen=True)
class SamplerParams:
    a: float = 10.0
    b: float = 0.1
    k: float = 4.0
    n_neg: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"sharpness a must be positive, got {self.a}")
        if not self.k >= 1:
            raise ValueError(f"decay scaler k must be >= 1, got {self.k}")
        if self.n_neg <= 0:
            raise ValueError(f"n_neg must be positive, got {self.n_neg}")


def sampling_weight(s_i: float, s_plus: float, params: SamplerParams) -> float:
    """Unnormalized hard-negative weight; the decay scaler applies at or above ``s_plus - b``."""
    dev = s_i - s_plus - params.b
    if s_i < s_plus - params.b:
        return math.exp(-params.a * dev**2)
    return math.exp(-params.a * params.k * dev**2)


def sampling_probabilities(scores: Sequence[float], s_plus: float, params: SamplerParams) -> np.ndarray:
    w = np.array([sampling_weight(s, s_plus, params) for s in scores], dtype=np.float64)
    return w / w.sum()


class NegativeSample(NamedTuple):
    documents: list[ScoredDocument]
    capped: bool


def _successive_draws(weights: np.ndarray, n: int, rng: np.random.Generator) -> list[int]:
    # draw one at a time, renormalizing over what is left
    w = weights.astype(np.float64).copy()
    picked: list[int] = []
    for _ in range(n):
        total = w.sum()
        if total <= 0:  # every remaining weight underflowed; fall back to uniform
            w = np.ones_like(w)
            w[picked] = 0.0
            total = w.sum()
        i = int(np.searchsorted(np.cumsum(w), rng.random() * total, side="right"))
        i = min(i, len(w) - 1)
        picked.append(i)
        w[i] = 0.0
    return picked


def sample_negatives(
    candidates: Sequence[tuple[ScoredDocument | Sequence[int], float]],
    s_plus: float,
    params: SamplerParams,
    rng: np.random.Generator | None = None,
) -> NegativeSample:
    """Draw ``params.n_neg`` negatives without replacement, proportionally to the hard-negative weight.

    Returned documents carry ``y = 0`` and the teacher label ``s_ce / 2``.
    """
    if not candidates:
        raise ValueError("sample_negatives needs a non-empty candidate pool")
    rng = np.random.default_rng(params.seed) if rng is None else rng
    n = params.n_neg
    capped = n > len(candidates)
    if capped:
        log.warning("requested %d negatives from a pool of %d; returning the whole pool", n, len(candidates))
        n = len(candidates)
    weights = np.array([sampling_weight(s, s_plus, params) for _, s in candidates])
    picked = _successive_draws(weights, n, rng)
    return NegativeSample([_as_negative(*candidates[i]) for i in picked], capped)


def uniform_negatives(
    candidates: Sequence[tuple[ScoredDocument | Sequence[int], float]],
    n_neg: int,
    rng: np.random.Generator,
) -> NegativeSample:
    """Random negatives, ignoring scores (the no-hard-sampling ablation)."""
    n = min(n_neg, len(candidates))
    picked = rng.choice(len(candidates), size=n, replace=False)
    return NegativeSample([_as_negative(*candidates[int(i)]) for i in picked], n_neg > len(candidates))


def _as_negative(doc, s_i: float) -> ScoredDocument:
    tokens = doc.tokens if isinstance(doc, ScoredDocument) else list(doc)
    return ScoredDocument(tokens=list(tokens), y=0, s_ce=float(s_i), s_rel_label=label_machine(float(s_i), 0))


# --- corpus generation ------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 40000
    n_dev: int = 200
    n_test: int = 300
    n_entities: int = 200
    n_relations: int = 16
    answer_len: int = 2
    facts_per_doc: int = 1
    # popular facts have one fixed answer everywhere and can be memorized;
    # every other fact occurrence carries a fresh answer that only a document can supply
    n_popular: int = 100
    train_popular_rate: float = 0.3
    # dev/test: share of queries about popular facts
    eval_seen_fraction: float = 0.5
    # retrieved list length for dev/test (exactly one relevant document)
    eval_docs: int = 4
    # candidate negatives stored per training query: "hard" ones share one query token, "easy" ones none
    pool_hard: int = 3
    pool_easy: int = 9
    # probability that a dev/test distractor is hard
    eval_hard: float = 0.8
    first_token_id: int = 7

    def __post_init__(self):
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) < 0:
                raise CorpusConfigError(f"{name} must be non-negative")
        if self.n_train + self.n_dev + self.n_test <= 0:
            raise CorpusConfigError("corpus must contain at least one example")
        for name in ("n_entities", "n_relations", "answer_len", "facts_per_doc", "eval_docs", "n_popular"):
            if getattr(self, name) <= 0:
                raise CorpusConfigError(f"{name} must be positive")
        if self.n_entities < 3 or self.n_relations < 3:
            raise CorpusConfigError("need at least 3 entities and 3 relations to build distractors")
        if self.n_popular >= self.n_entities * self.n_relations:
            raise CorpusConfigError("n_popular must leave some non-popular facts")
        if self.pool_hard < 0 or self.pool_easy < 0 or self.pool_hard + self.pool_easy == 0:
            raise CorpusConfigError("training negative pool is empty")
        for name in ("train_popular_rate", "eval_seen_fraction", "eval_hard"):
            if not 0 <= getattr(self, name) <= 1:
                raise CorpusConfigError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise CorpusConfigError(f"unknown corpus fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class FactWorld:
    entities: np.ndarray
    relations: np.ndarray
    answer_tokens: np.ndarray
    # (entity index, relation index) -> fixed answer, popular facts only
    popular: dict[tuple[int, int], tuple[int, ...]]
    answer_len: int

    def query_tokens(self, ei: int, ri: int) -> list[int]:
        return [int(self.entities[ei]), int(self.relations[ri])]

    def fresh_answer(self, rng: np.random.Generator) -> tuple[int, ...]:
        reserved = self._reserved
        while True:
            ans = tuple(int(t) for t in rng.choice(self.answer_tokens, size=self.answer_len))
            if ans not in reserved:
                return ans

    @property
    def _reserved(self) -> set:
        if not hasattr(self, "_reserved_cache"):
            self._reserved_cache = set(self.popular.values())
        return self._reserved_cache

    def fact_tokens(self, ei: int, ri: int, rng: np.random.Generator, answer=None) -> list[int]:
        if answer is None:
            answer = self.popular.get((ei, ri)) or self.fresh_answer(rng)
        return [int(self.entities[ei]), int(self.relations[ri]), *answer]


def build_world(spec: CorpusSpec, vocab_size: int, seed: int) -> FactWorld:
    start = spec.first_token_id
    ent = np.arange(start, start + spec.n_entities)
    rel = np.arange(ent[-1] + 1, ent[-1] + 1 + spec.n_relations)
    answer_tokens = np.arange(int(rel[-1]) + 1, vocab_size)
    n_ans = len(answer_tokens)
    # fresh answers need ample room outside the popular ones
    if n_ans < 2 or n_ans**spec.answer_len < 4 * spec.n_popular:
        raise CorpusConfigError(
            f"vocab_size={vocab_size} leaves {max(n_ans, 0)} answer tokens, too few for {spec.n_popular} popular facts"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    cells = rng.choice(spec.n_entities * spec.n_relations, size=spec.n_popular, replace=False)
    codes = rng.choice(n_ans**spec.answer_len, size=spec.n_popular, replace=False)
    popular = {}
    for cell, code in zip(cells, codes):
        digits = [int(code // n_ans**p) % n_ans for p in range(spec.answer_len)]
        popular[(int(cell) // spec.n_relations, int(cell) % spec.n_relations)] = tuple(
            int(answer_tokens[d]) for d in digits
        )
    return FactWorld(ent, rel, answer_tokens, popular, spec.answer_len)


class _DocBuilder:
    def __init__(self, world: FactWorld, spec: CorpusSpec, rng: np.random.Generator, ei: int, ri: int):
        self.w, self.spec, self.rng, self.ei, self.ri = world, spec, rng, ei, ri

    def _other(self, n: int, exclude: int) -> int:
        v = int(self.rng.integers(n - 1))
        return v + (v >= exclude)

    def _fact(self, ei: int, ri: int, answer=None) -> list[int]:
        return self.w.fact_tokens(ei, ri, self.rng, answer)

    def _filler(self) -> list[int]:
        # fact sharing neither the query entity nor its relation
        return self._fact(self._other(self.spec.n_entities, self.ei), self._other(self.spec.n_relations, self.ri))

    def _assemble(self, facts: list[list[int]]) -> list[int]:
        facts += [self._filler() for _ in range(self.spec.facts_per_doc - len(facts))]
        order = self.rng.permutation(len(facts))
        return [t for i in order for t in facts[i]]

    def relevant(self, answer) -> list[int]:
        return self._assemble([self._fact(self.ei, self.ri, answer)])

    def distractor(self, hard: bool, answer) -> list[int]:
        while True:
            if not hard:
                doc = self._assemble([])
            elif self.rng.random() < 0.5:
                doc = self._assemble([self._fact(self.ei, self._other(self.spec.n_relations, self.ri))])
            else:
                doc = self._assemble([self._fact(self._other(self.spec.n_entities, self.ei), self.ri)])
            if not contains_subsequence(doc, answer):
                return doc


def _make_example(
    world: FactWorld, spec: CorpusSpec, seed: int, split: str, index: int, scorer: Scorer
) -> QAExample:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1 + SPLITS.index(split), index]))
    popular_rate = spec.train_popular_rate if split == "train" else spec.eval_seen_fraction
    if rng.random() < popular_rate:
        keys = list(world.popular)
        ei, ri = keys[int(rng.integers(len(keys)))]
        answer = world.popular[(ei, ri)]
    else:
        while True:
            ei, ri = int(rng.integers(spec.n_entities)), int(rng.integers(spec.n_relations))
            if (ei, ri) not in world.popular:
                break
        answer = world.fresh_answer(rng)
    q = world.query_tokens(ei, ri)
    answers = [list(answer)]
    builder = _DocBuilder(world, spec, rng, ei, ri)
    if split == "train":
        kinds = [True] * spec.pool_hard + [False] * spec.pool_easy
        raw = [builder.relevant(answer)] + [builder.distractor(h, answer) for h in kinds]
    else:
        raw = [builder.distractor(bool(rng.random() < spec.eval_hard), answer) for _ in range(spec.eval_docs - 1)]
        raw.insert(int(rng.integers(spec.eval_docs)), builder.relevant(answer))
    docs = [label_document(q, t, answers, scorer) for t in raw]
    return QAExample(id=f"{split}-{index:06d}", query_tokens=q, answers=answers, documents=docs, split=split)


def generate_corpus(
    spec: CorpusSpec, seed: int, vocab_size: int = 512, scorer: Scorer = oracle_score
) -> list[QAExample]:
    """Deterministic planted corpus; example ``i`` of each split has its own RNG stream."""
    world = build_world(spec, vocab_size, seed)
    counts = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    examples = []
    for split in SPLITS:
        examples.extend(_make_example(world, spec, seed, split, i, scorer) for i in range(counts[split]))
    return examples


def corpus_statistics(examples: Sequence[QAExample]) -> dict:
    stats = {}
    for split in SPLITS:
        part = [ex for ex in examples if ex.split == split]
        if not part:
            continue
        n_docs = sum(len(ex.documents) for ex in part)
        stats[split] = {
            "queries": len(part),
            "docs_per_query": n_docs / len(part),
            "relevant_doc_rate": sum(d.y for ex in part for d in ex.documents) / max(n_docs, 1),
        }
    return stats


def split_examples(examples: Iterable[QAExample], split: str) -> list[QAExample]:
    return [ex for ex in examples if ex.split == split]


# --- dataset file -----------------------------------------------------------


def write_dataset(examples: Iterable[QAExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_dict(), separators=(",", ":")) + "\n")


def read_dataset(path: str | Path) -> list[QAExample]:
    examples = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                examples.append(QAExample.from_dict(json.loads(line)))
    return examples
