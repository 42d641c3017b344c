"""Joint training of relevance assessment and relevance-guided generation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import QAExample, SamplerParams, ScoredDocument, sample_negatives, uniform_negatives
from .model import TinyLM, guided_layout, truncate_document
from .relevance import coarse_loss, pair_terms, qualifying_pairs

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, components: dict, batch: list["TrainingInstance"]):
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components
        self.batch = batch

    def dump(self, path: str | Path) -> None:
        record = {
            "step": self.step,
            "components": self.components,
            "batch": [inst.to_dict() for inst in self.batch],
        }
        Path(path).write_text(json.dumps(record, indent=2))


@dataclass(frozen=True)
class TrainSchedule:
    lr: float = 1e-3
    warmup_frac: float = 0.03
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    grad_clip: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup fraction must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")


@dataclass(frozen=True)
class ObjectiveFlags:
    """Switches for the ablation variants; defaults give the full objective."""

    fine_loss: bool = True
    # every document (gold and negatives) trains generation; False keeps only the gold document
    noise_pairing: bool = True
    # "refined" (score-aware hard negatives) or "random"
    negatives: str = "refined"
    # "teacher" feeds the fused label as guidance, "predicted" the model's own (detached) score
    guidance: str = "teacher"

    def __post_init__(self):
        if self.negatives not in ("refined", "random"):
            raise ValueError(f"unknown negative sampling {self.negatives!r}")
        if self.guidance not in ("teacher", "predicted"):
            raise ValueError(f"unknown guidance source {self.guidance!r}")


@dataclass
class TrainingInstance:
    query: list[int]
    answer: list[int]
    document: ScoredDocument
    guidance: float
    group: int = 0
    in_generation: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["document"] = self.document.to_dict()
        return d


def instances_for_example(
    example: QAExample,
    negatives: Sequence[ScoredDocument],
    group: int = 0,
    noise_pairing: bool = True,
) -> list[TrainingInstance]:
    """One instance per document; the target is always the gold answer."""
    answer = list(example.answers[0])
    docs = example.gold_documents[:1] + list(negatives)
    return [
        TrainingInstance(
            query=list(example.query_tokens),
            answer=answer,
            document=doc,
            guidance=doc.s_rel_label,
            group=group,
            in_generation=noise_pairing or doc.y == 1,
        )
        for doc in docs
    ]


@dataclass
class _Tensors:
    tokens: torch.Tensor
    assess_pos: torch.Tensor
    guide_pos: torch.Tensor
    targets: torch.Tensor


def _tensorize(model: TinyLM, instances: Sequence[TrainingInstance]) -> _Tensors:
    cfg = model.config
    rows, assess, guide, targets = [], [], [], []
    for inst in instances:
        d = truncate_document(cfg, inst.query, inst.document.tokens, reserve=len(inst.answer) + 1)
        seq = guided_layout(cfg, inst.query, d, inst.answer)
        g = len(seq) - len(inst.answer) - 2
        rows.append(seq)
        assess.append(g - 1)
        guide.append(g)
        tgt = [-100] * len(seq)
        for t in range(g, len(seq) - 1):
            tgt[t] = seq[t + 1]
        targets.append(tgt)
    width = max(len(r) for r in rows)
    tok = torch.full((len(rows), width), cfg.pad_id, dtype=torch.long)
    tgt = torch.full((len(rows), width), -100, dtype=torch.long)
    for i, (r, t) in enumerate(zip(rows, targets)):
        tok[i, : len(r)] = torch.tensor(r)
        tgt[i, : len(t)] = torch.tensor(t)
    dev = model.device
    return _Tensors(tok.to(dev), torch.tensor(assess, device=dev), torch.tensor(guide, device=dev), tgt.to(dev))


def _guidance_values(model: TinyLM, instances, batch: _Tensors, flags: ObjectiveFlags) -> torch.Tensor:
    if flags.guidance == "teacher":
        return torch.tensor([inst.guidance for inst in instances], dtype=model.dtype, device=model.device)
    with torch.no_grad():
        hidden, _, _ = model(batch.tokens)
        rows = torch.arange(len(instances), device=model.device)
        return torch.sigmoid(model.assess_head(hidden[rows, batch.assess_pos]))


def _forward_batch(model: TinyLM, instances, flags: ObjectiveFlags):
    """Relevance logits and per-instance mean answer NLL from one pass over the guided layouts."""
    batch = _tensorize(model, instances)
    s = _guidance_values(model, instances, batch, flags).detach()
    v_guide = model.guidance_embed(s)
    hidden, logits, _ = model(batch.tokens, (batch.guide_pos, v_guide))
    rows = torch.arange(len(instances), device=model.device)
    z = model.assess_head(hidden[rows, batch.assess_pos])
    nll = F.cross_entropy(logits.transpose(1, 2), batch.targets, ignore_index=-100, reduction="none")
    counts = (batch.targets != -100).sum(dim=1)
    per_instance = nll.sum(dim=1) / counts
    return z, per_instance


def noise_resistant_loss(model: TinyLM, instances: Sequence[TrainingInstance], flags: ObjectiveFlags = ObjectiveFlags()):
    """Mean over instances of the mean token NLL of the gold answer (EOS included)."""
    if not instances:
        raise ValueError("noise_resistant_loss needs a non-empty batch")
    _, per_instance = _forward_batch(model, instances, flags)
    return per_instance.mean()


def _fine_term(z: torch.Tensor, instances) -> torch.Tensor:
    pairs = []
    by_group: dict[int, list[int]] = {}
    for i, inst in enumerate(instances):
        by_group.setdefault(inst.group, []).append(i)
    for members in by_group.values():
        labels = [instances[i].document.s_rel_label for i in members]
        pairs.extend((members[a], members[b]) for a, b in qualifying_pairs(labels))
    terms = pair_terms(z, pairs)
    return terms.mean() if terms.numel() else z.sum() * 0.0


def total_loss(model: TinyLM, instances: Sequence[TrainingInstance], flags: ObjectiveFlags = ObjectiveFlags()):
    """Coarse + fine relevance loss plus the noise-resistant generation loss.

    The fine term pools every qualifying pair inside each query group.
    Returns ``(loss, {"coarse", "fine", "gen", "total"})``.
    """
    if not instances:
        raise ValueError("total_loss needs a non-empty batch")
    z, per_instance = _forward_batch(model, instances, flags)
    coarse = coarse_loss(z, [inst.document.y for inst in instances])
    fine = _fine_term(z, instances) if flags.fine_loss else z.sum() * 0.0
    gen_mask = torch.tensor([inst.in_generation for inst in instances], device=model.device)
    gen = per_instance[gen_mask].mean() if gen_mask.any() else per_instance.sum() * 0.0
    total = coarse + fine + gen
    parts = {"coarse": float(coarse.detach()), "fine": float(fine.detach()), "gen": float(gen.detach()), "total": float(total.detach())}
    return total, parts


def lr_multiplier(step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup, then cosine decay to zero at ``total_steps``."""
    if warmup_steps and step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    model: TinyLM
    metrics: list[dict] = field(default_factory=list)


def epoch_instances(
    examples: Sequence[QAExample],
    epoch: int,
    sampler: SamplerParams,
    flags: ObjectiveFlags,
) -> list[list[TrainingInstance]]:
    """Per-query instance groups for one epoch, with freshly drawn negatives."""
    groups = []
    for idx, ex in enumerate(examples):
        gold = ex.gold_documents
        if not gold:
            raise ValueError(f"training example {ex.id} has no relevant document")
        pool = [(d, d.s_ce) for d in ex.negative_documents]
        rng = np.random.default_rng(np.random.SeedSequence([sampler.seed, epoch, idx]))
        if not pool:
            negs = []
        elif flags.negatives == "refined":
            negs = sample_negatives(pool, gold[0].s_ce, sampler, rng).documents
        else:
            negs = uniform_negatives(pool, sampler.n_neg, rng).documents
        groups.append(instances_for_example(ex, negs, group=idx, noise_pairing=flags.noise_pairing))
    return groups


def train(
    model: TinyLM,
    examples: Sequence[QAExample],
    schedule: TrainSchedule,
    sampler: SamplerParams = SamplerParams(),
    flags: ObjectiveFlags = ObjectiveFlags(),
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train in place on the train split of ``examples``.

    Batches hold ``batch_size`` queries, each with its gold document and
    sampled negatives. Order and negatives depend only on the seeds.
    """
    train_set = [ex for ex in examples if ex.split == "train"]
    if not train_set:
        raise ValueError("dataset has no train split")
    steps_per_epoch = math.ceil(len(train_set) / schedule.batch_size)
    total_steps = steps_per_epoch * schedule.epochs
    warmup = math.ceil(schedule.warmup_frac * total_steps)
    result = TrainResult(model)
    if total_steps == 0:
        return result

    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_multiplier(s, total_steps, warmup))
    model.train()
    step = 0
    for epoch in range(schedule.epochs):
        groups = epoch_instances(train_set, epoch, sampler, flags)
        order = np.random.default_rng(np.random.SeedSequence([schedule.seed, epoch])).permutation(len(groups))
        for start in range(0, len(order), schedule.batch_size):
            batch = [inst for g in order[start : start + schedule.batch_size] for inst in groups[g]]
            lr = opt.param_groups[0]["lr"]
            loss, parts = total_loss(model, batch, flags)
            if not all(math.isfinite(v) for v in parts.values()):
                raise NonFiniteLossError(step, parts, batch)
            opt.zero_grad()
            loss.backward()
            if schedule.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
            opt.step()
            sched.step()
            record = {
                "step": step,
                "lr": lr,
                "loss_total": parts["total"],
                "loss_coarse": parts["coarse"],
                "loss_fine": parts["fine"],
                "loss_gen": parts["gen"],
            }
            result.metrics.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
        log.info("epoch %d done, last loss %.4f", epoch, result.metrics[-1]["loss_total"])
    model.eval()
    return result


def write_metrics(metrics: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in metrics:
            f.write(json.dumps(rec) + "\n")
