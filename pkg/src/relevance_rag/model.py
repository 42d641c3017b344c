"""Tiny decoder-only language model with relevance assessment and guidance injection.

Every model call uses the token layout

    [BOS, SEP_DOC, d..., SEP_QUERY, q..., ASSESS, GUIDE, a..., EOS]

The assessment prefix ends at ASSESS; its hidden state is the relevance
embedding. The GUIDE slot carries no token embedding of its own: the
guidance vector built from a relevance score is written into it instead.
Because attention is causal, the prefix is untouched by whatever follows,
so its key/value state can be reused for generation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .relevance import AssessmentHead, RelevanceJudgment


class SequenceLengthError(ValueError):
    """A token layout does not fit in ``max_seq_len``."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 256
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    sep_doc_id: int = 3
    sep_query_id: int = 4
    assess_id: int = 5
    guide_id: int = 6

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        ids = self.special_ids
        if len(set(ids)) != len(ids):
            raise ValueError(f"special token ids must be distinct: {ids}")
        if any(i < 0 or i >= self.vocab_size for i in ids):
            raise ValueError(f"special token ids must lie in [0, {self.vocab_size})")

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (
            self.pad_id,
            self.bos_id,
            self.eos_id,
            self.sep_doc_id,
            self.sep_query_id,
            self.assess_id,
            self.guide_id,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)


def assessment_prefix(config: ModelConfig, q: Sequence[int], d: Sequence[int]) -> list[int]:
    """Layout up to and including the ASSESS token."""
    return [config.bos_id, config.sep_doc_id, *d, config.sep_query_id, *q, config.assess_id]


def guided_layout(
    config: ModelConfig, q: Sequence[int], d: Sequence[int], answer: Sequence[int] = ()
) -> list[int]:
    """Full layout; with a non-empty answer the EOS terminator is appended."""
    tokens = assessment_prefix(config, q, d) + [config.guide_id]
    if answer:
        tokens += [*answer, config.eos_id]
    return tokens


def truncate_document(
    config: ModelConfig, q: Sequence[int], d: Sequence[int], reserve: int
) -> list[int]:
    """Drop document tokens from the right until the layout leaves ``reserve`` free slots.

    ``reserve`` counts positions after GUIDE (answer tokens plus EOS).
    """
    fixed = len(q) + 5  # BOS, SEP_DOC, SEP_QUERY, ASSESS, GUIDE
    room = config.max_seq_len - fixed - reserve
    if room < 0:
        raise SequenceLengthError(
            f"query of length {len(q)} with reserve {reserve} cannot fit max_seq_len={config.max_seq_len}"
        )
    return list(d[:room])


KVCache = list[tuple[torch.Tensor, torch.Tensor]]


def rotary_tables(head_dim: int, max_len: int, base: float = 10000.0) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = 1.0 / base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = torch.outer(torch.arange(max_len, dtype=torch.float64), inv_freq)
    return angles.cos(), angles.sin()


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, T, head_dim); cos/sin: (T, head_dim / 2)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = cos.to(x.dtype), sin.to(x.dtype)
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.d_model // config.n_heads
        if self.head_dim % 2:
            raise ValueError("rotary embeddings need an even head dimension")
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model)
        self.proj = nn.Linear(config.d_model, config.d_model)
        cos, sin = rotary_tables(self.head_dim, config.max_seq_len)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)

    def forward(self, x, past: tuple[torch.Tensor, torch.Tensor] | None = None):
        B, T, C = x.shape
        offset = 0 if past is None else past[0].shape[2]
        q, k, v = self.qkv(x).split(C, dim=-1)
        q = q.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        cos, sin = self.rope_cos[offset : offset + T], self.rope_sin[offset : offset + T]
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        S = k.shape[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        # query i sits at absolute position S - T + i and may see keys 0..S-T+i
        mask = torch.ones(T, S, dtype=torch.bool, device=x.device).tril(diagonal=S - T)
        att = att.masked_fill(~mask, float("-inf"))
        y = F.softmax(att, dim=-1) @ v
        y = y.transpose(1, 2).reshape(B, T, C)
        return self.proj(y), (k, v)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, 4 * config.d_model),
            nn.GELU(),
            nn.Linear(4 * config.d_model, config.d_model),
        )

    def forward(self, x, past=None):
        a, present = self.attn(self.ln1(x), past)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, present


class TinyLM(nn.Module):
    """Causal transformer plus an assessment head and a 2-row guidance table.

    ``prefix_passes`` counts forward calls that start from position 0, i.e.
    every time an assessment prefix is (re)computed rather than reused.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size)
        self.assess_head = AssessmentHead(config.d_model)
        # row 0 encodes "irrelevant" (score 0), row 1 "relevant" (score 1)
        self.guidance_table = nn.Parameter(torch.empty(2, config.d_model))
        self._init_weights()
        self.prefix_passes = 0

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, std=0.02)
        nn.init.normal_(self.guidance_table, std=0.02)

    @property
    def device(self):
        return self.tok_emb.weight.device

    @property
    def dtype(self):
        return self.tok_emb.weight.dtype

    def _as_batch(self, tokens) -> torch.Tensor:
        t = torch.as_tensor(tokens, dtype=torch.long, device=self.device)
        return t.unsqueeze(0) if t.dim() == 1 else t

    def forward(
        self,
        tokens,
        injected_embeddings: Mapping[int, torch.Tensor] | tuple[torch.Tensor, torch.Tensor] | None = None,
        cache: KVCache | None = None,
    ):
        """Run the decoder.

        ``tokens`` is a 1-D sequence or a (batch, seq) tensor. Injections are
        either ``{position: vector}`` (applied to every row) or a pair
        ``(positions[B], vectors[B, d_model])`` with one injection per row;
        an injected vector replaces the token embedding at that position
        (positions are encoded by rotary attention, not added to inputs).
        With ``cache`` the tokens continue an earlier call and positions are
        offset accordingly.

        Returns ``(hidden_states, logits, new_cache)``; 1-D input gives
        unbatched outputs.
        """
        unbatched = torch.as_tensor(tokens).dim() == 1
        idx = self._as_batch(tokens)
        B, T = idx.shape
        offset = 0 if cache is None else cache[0][0].shape[2]
        if T == 0:
            raise SequenceLengthError("empty token sequence")
        if offset + T > self.config.max_seq_len:
            raise SequenceLengthError(
                f"sequence length {offset + T} exceeds max_seq_len={self.config.max_seq_len}"
            )
        if offset == 0:
            self.prefix_passes += 1

        x = self.tok_emb(idx)
        if injected_embeddings is not None:
            x = self._inject(x, injected_embeddings, offset)

        new_cache: KVCache = []
        for i, block in enumerate(self.blocks):
            x, present = block(x, None if cache is None else cache[i])
            new_cache.append(present)
        hidden = self.ln_f(x)
        logits = self.lm_head(hidden)
        if unbatched:
            return hidden[0], logits[0], new_cache
        return hidden, logits, new_cache

    def _inject(self, x, injected, offset):
        B, T, _ = x.shape
        if isinstance(injected, tuple):
            positions, vectors = injected
            positions = torch.as_tensor(positions, device=self.device) - offset
            if positions.shape != (B,) or ((positions < 0) | (positions >= T)).any():
                raise IndexError(f"injection positions {positions.tolist()} out of range for length {T}")
            mask = F.one_hot(positions, T).bool().unsqueeze(-1)
            return torch.where(mask, vectors.to(x.dtype).unsqueeze(1), x)
        x = x.clone()
        for pos, vec in injected.items():
            local = pos - offset
            if not 0 <= local < T:
                raise IndexError(f"injection position {pos} out of range for length {offset + T}")
            x[:, local] = vec.to(x.dtype)
        return x

    def encode_relevance(self, q: Sequence[int], d: Sequence[int]) -> torch.Tensor:
        """Hidden state at the ASSESS position (the relevance embedding)."""
        hidden, _, _ = self(assessment_prefix(self.config, q, d))
        return hidden[-1]

    def assess(self, v_rel: torch.Tensor) -> RelevanceJudgment:
        return self.assess_head.judge(v_rel)

    def guidance_embed(self, s_rel) -> torch.Tensor:
        """Linear interpolation between the two rows of the guidance table.

        Accepts a float or a tensor of scores (any shape); a trailing d_model
        axis is appended.
        """
        s = torch.as_tensor(s_rel, dtype=self.dtype, device=self.device)
        if torch.isnan(s).any() or (s < 0).any() or (s > 1).any():
            raise ValueError(f"relevance score must lie in [0, 1], got {s_rel}")
        s = s.unsqueeze(-1)
        e0, e1 = self.guidance_table[0], self.guidance_table[1]
        return (1 - s) * e0 + s * e1

    def _allowed_mask(self) -> torch.Tensor:
        # decoding never emits layout tokens; EOS stays available as the stop signal
        allowed = torch.ones(self.config.vocab_size, dtype=torch.bool, device=self.device)
        for tok in self.config.special_ids:
            if tok != self.config.eos_id:
                allowed[tok] = False
        return allowed

    def _greedy_pick(self, logits: torch.Tensor, allowed: torch.Tensor) -> int:
        return int(logits.masked_fill(~allowed, float("-inf")).argmax())

    @torch.no_grad()
    def generate(
        self,
        q: Sequence[int],
        d: Sequence[int],
        s_rel: float,
        max_new_tokens: int,
        incremental: bool = True,
    ) -> list[int]:
        """Greedy answer given the guidance score ``s_rel``.

        With ``incremental=False`` every step re-runs the whole sequence; the
        default decodes with a key/value cache after one pass over the layout.
        """
        layout = guided_layout(self.config, q, d)
        self._check_headroom(len(layout), max_new_tokens)
        inject = {len(layout) - 1: self.guidance_embed(float(s_rel))}
        _, logits, cache = self(layout, inject)
        return self._decode(logits[-1], cache, max_new_tokens, layout, inject, incremental)

    def _check_headroom(self, layout_len: int, max_new_tokens: int):
        if max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be positive")
        if layout_len + max_new_tokens > self.config.max_seq_len:
            raise SequenceLengthError(
                f"layout of length {layout_len} leaves {self.config.max_seq_len - layout_len} "
                f"positions, need {max_new_tokens}"
            )

    def _decode(self, last_logits, cache, max_new_tokens, layout, inject, incremental=True):
        allowed = self._allowed_mask()
        answer: list[int] = []
        logits = last_logits
        for _ in range(max_new_tokens):
            tok = self._greedy_pick(logits, allowed)
            if tok == self.config.eos_id:
                break
            answer.append(tok)
            if len(answer) == max_new_tokens:
                break
            if incremental:
                _, step_logits, cache = self([tok], cache=cache)
                logits = step_logits[-1]
            else:
                _, full_logits, _ = self(layout + answer, inject)
                logits = full_logits[-1]
        return answer

    def sequence_log_prob(
        self, a: Sequence[int], q: Sequence[int], d: Sequence[int], s_rel: float
    ) -> tuple[float, int]:
        """Log-probability of ``a`` followed by EOS under the guided layout."""
        if len(a) == 0:
            raise ValueError("answer must be non-empty")
        with torch.no_grad():
            total = self._answer_log_prob(list(a) + [self.config.eos_id], q, d, s_rel)
        return float(total), len(a) + 1

    def _answer_log_prob(self, target: list[int], q, d, s_rel) -> torch.Tensor:
        layout = guided_layout(self.config, q, d) + target[:-1]
        guide_pos = len(layout) - len(target)
        _, logits, _ = self(layout, {guide_pos: self.guidance_embed(float(s_rel))})
        logp = F.log_softmax(logits[guide_pos:], dim=-1)
        return logp.gather(1, torch.as_tensor(target, device=self.device).unsqueeze(1)).sum()


def build_model(config: ModelConfig, seed: int = 0) -> TinyLM:
    """Seeded construction that leaves the global torch RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TinyLM(config)
