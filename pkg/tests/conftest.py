import time

import pytest
import torch
import torch.nn.functional as F

from relevance_rag.data import CorpusSpec, SamplerParams, generate_corpus
from relevance_rag.model import ModelConfig, TinyLM, build_model
from relevance_rag.trainer import TrainSchedule, train

TINY = ModelConfig(vocab_size=64, d_model=32, n_layers=2, n_heads=2, max_seq_len=64)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    model = build_model(TINY, seed=0)
    model.eval()
    return model


@pytest.fixture(scope="session")
def small_corpus():
    spec = CorpusSpec(n_train=40, n_dev=8, n_test=12, n_entities=20, n_relations=8, n_popular=20)
    return generate_corpus(spec, seed=3, vocab_size=TINY.vocab_size)


class ScriptedLM(TinyLM):
    """Real backbone for hidden states, but next-token logits follow a fixed successor map.

    Every position's logits put ``margin`` on ``successor[token]`` (EOS when
    unmapped), so the model is probability-one on any chain the map encodes.
    """

    def __init__(self, config: ModelConfig, successor: dict[int, int], margin: float = 80.0):
        super().__init__(config)
        self.successor = successor
        self.margin = margin

    def forward(self, tokens, injected_embeddings=None, cache=None):
        unbatched = torch.as_tensor(tokens).dim() == 1
        hidden, _, new_cache = super().forward(tokens, injected_embeddings, cache)
        idx = self._as_batch(tokens)
        nxt = idx.clone().apply_(lambda t: self.successor.get(t, self.config.eos_id))
        logits = self.margin * F.one_hot(nxt, self.config.vocab_size).to(self.dtype)
        return hidden, (logits[0] if unbatched else logits), new_cache


def scripted_chain(config: ModelConfig, answer: list[int]) -> ScriptedLM:
    """Model that answers ``answer`` then EOS right after GUIDE."""
    successor = {config.guide_id: answer[0]}
    for a, b in zip(answer, answer[1:]):
        successor[a] = b
    successor[answer[-1]] = config.eos_id
    model = ScriptedLM(config, successor)
    model.eval()
    return model


def uniform_head(model: TinyLM) -> TinyLM:
    with torch.no_grad():
        model.lm_head.weight.zero_()
        model.lm_head.bias.zero_()
    return model


@pytest.fixture(scope="session")
def trained_smoke():
    """Default config on the default planted corpus; wall time includes corpus generation."""
    t0 = time.time()
    examples = generate_corpus(CorpusSpec(), seed=0)
    untrained = build_model(ModelConfig(), seed=0)
    model = build_model(ModelConfig(), seed=0)
    result = train(model, examples, TrainSchedule(), SamplerParams())
    model.eval()
    untrained.eval()
    return {
        "examples": examples,
        "model": model,
        "untrained": untrained,
        "metrics": result.metrics,
        "seconds": time.time() - t0,
    }


_ACCEPTANCE: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
