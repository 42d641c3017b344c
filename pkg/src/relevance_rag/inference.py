"""Assess, generate, verify: per-document answers and final answer selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .data import ScoredDocument
from .model import TinyLM, assessment_prefix, truncate_document

SOURCE_RELIABILITY = "source_reliability"
KNOWLEDGE_CONSISTENCY = "knowledge_consistency"


class CacheMismatchError(RuntimeError):
    """Cached generation diverged from recomputation."""


@dataclass(frozen=True)
class VerificationPolicy:
    strategy: str = KNOWLEDGE_CONSISTENCY
    lam: float = 0.5

    def __post_init__(self):
        if self.strategy not in (SOURCE_RELIABILITY, KNOWLEDGE_CONSISTENCY):
            raise ValueError(f"unknown verification strategy {self.strategy!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass
class AnswerCandidate:
    doc_index: int
    answer: list[int]
    s_rel: float
    c: float | None = None
    combined: float | None = None

    def to_dict(self) -> dict:
        return {"s_rel": self.s_rel, "c": self.c, "combined": self.combined, "answer_tokens": list(self.answer)}


@dataclass(frozen=True)
class CacheWitness:
    prefix_passes: int
    prefix_length: int
    cache_length: int
    matches_uncached: bool | None = None


def _tokens(doc) -> list[int]:
    return list(doc.tokens) if isinstance(doc, ScoredDocument) else list(doc)


def _fit(model: TinyLM, q, doc, max_new_tokens: int) -> list[int]:
    return truncate_document(model.config, q, _tokens(doc), reserve=max_new_tokens + 1)


@torch.no_grad()
def answer_with_cache_reuse(
    model: TinyLM, q: Sequence[int], d: Sequence[int], max_new_tokens: int = 8, verify: bool = False
) -> tuple[list[int], float, CacheWitness]:
    """Assessment prefix once; generation continues from its key/value cache.

    With ``verify=True`` the uncached path is also run and any divergence
    raises ``CacheMismatchError``.
    """
    cfg = model.config
    prefix = assessment_prefix(cfg, q, d)
    model._check_headroom(len(prefix) + 1, max_new_tokens)
    before = model.prefix_passes
    hidden, _, cache = model(prefix)
    s_rel = model.assess(hidden[-1]).score
    guide_pos = len(prefix)
    _, logits, cache = model([cfg.guide_id], {guide_pos: model.guidance_embed(s_rel)}, cache=cache)
    if cache[0][0].shape[2] != guide_pos + 1:
        raise CacheMismatchError(f"cache holds {cache[0][0].shape[2]} positions, expected {guide_pos + 1}")
    answer = model._decode(logits[-1], cache, max_new_tokens, None, None)
    passes = model.prefix_passes - before
    matches = None
    if verify:
        reference, ref_score = answer_without_cache(model, q, d, max_new_tokens)
        matches = reference == answer and abs(ref_score - s_rel) < 1e-5
        if not matches:
            raise CacheMismatchError(f"cached answer {answer} != recomputed {reference}")
    return answer, s_rel, CacheWitness(passes, len(prefix), guide_pos + 1, matches)


@torch.no_grad()
def answer_without_cache(model: TinyLM, q, d, max_new_tokens: int = 8) -> tuple[list[int], float]:
    """Two separate passes: assessment, then generation from scratch."""
    s_rel = model.assess(model.encode_relevance(q, d)).score
    return model.generate(q, d, s_rel, max_new_tokens), s_rel


def answer_all(
    model: TinyLM,
    q: Sequence[int],
    documents: Sequence,
    max_new_tokens: int = 8,
    max_docs: int | None = None,
    use_cache: bool = True,
) -> list[AnswerCandidate]:
    """One guided answer per document, in input order."""
    if not documents:
        raise ValueError("answer_all needs at least one document")
    if max_docs is not None and len(documents) > max_docs:
        raise ValueError(f"{len(documents)} documents exceed the configured maximum of {max_docs}")
    out = []
    for i, doc in enumerate(documents):
        d = _fit(model, q, doc, max_new_tokens)
        if use_cache:
            answer, s_rel, _ = answer_with_cache_reuse(model, q, d, max_new_tokens)
        else:
            answer, s_rel = answer_without_cache(model, q, d, max_new_tokens)
        out.append(AnswerCandidate(doc_index=i, answer=answer, s_rel=s_rel))
    return out


@torch.no_grad()
def consistency(model: TinyLM, candidate: AnswerCandidate, q: Sequence[int], d) -> float:
    """Inverse perplexity of the candidate's answer (plus EOS) with guidance forced to zero."""
    if not candidate.answer:
        raise ValueError("consistency is undefined for an empty answer")
    total, length = model.sequence_log_prob(candidate.answer, q, _tokens(d), 0.0)
    return math.exp(total / length)


@torch.no_grad()
def _consistency_or_eos(model: TinyLM, candidate: AnswerCandidate, q, d) -> float:
    # an empty answer is the bare EOS continuation; score that instead of failing mid-query
    if candidate.answer:
        return consistency(model, candidate, q, d)
    return math.exp(float(model._answer_log_prob([model.config.eos_id], q, _tokens(d), 0.0)))


def verify(
    model: TinyLM,
    candidates: Sequence[AnswerCandidate],
    q: Sequence[int],
    documents: Sequence,
    policy: VerificationPolicy,
    max_new_tokens: int = 8,
) -> None:
    """Fill ``c`` and ``combined`` on every candidate in place."""
    for cand in candidates:
        d = _fit(model, q, documents[cand.doc_index], max_new_tokens)
        cand.c = _consistency_or_eos(model, cand, q, d)
        cand.combined = policy.lam * cand.c + (1 - policy.lam) * cand.s_rel


def select(candidates: Sequence[AnswerCandidate], policy: VerificationPolicy) -> AnswerCandidate:
    """Highest score under the policy; ties go to the lowest document index."""
    if not candidates:
        raise ValueError("select needs at least one candidate")
    if policy.strategy == SOURCE_RELIABILITY:
        key = lambda c: c.s_rel  # noqa: E731
    else:
        if any(c.c is None for c in candidates):
            raise RuntimeError("knowledge_consistency selection needs consistency scores on every candidate")
        key = lambda c: policy.lam * c.c + (1 - policy.lam) * c.s_rel  # noqa: E731
    best = candidates[0]
    for cand in candidates[1:]:
        if key(cand) > key(best) or (key(cand) == key(best) and cand.doc_index < best.doc_index):
            best = cand
    return best


def run_query(
    model: TinyLM,
    q: Sequence[int],
    documents: Sequence,
    policy: VerificationPolicy,
    max_new_tokens: int = 8,
) -> tuple[AnswerCandidate, list[AnswerCandidate]]:
    candidates = answer_all(model, q, documents, max_new_tokens)
    verify(model, candidates, q, documents, policy, max_new_tokens)
    return select(candidates, policy), candidates
