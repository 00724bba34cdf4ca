from pathlib import Path

import pytest
import torch

from pldr_llm.config import ModelConfig
from pldr_llm.model import PLDRModel

D = torch.float64


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=8, n_heads=2, n_layers=2, vocab_size=13, context_length=16, pad_id=0, end_id=1)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, **kw) -> PLDRModel:
    torch.manual_seed(seed)
    return PLDRModel(tiny_config(**kw)).to(D)


DATA = Path(__file__).parent / "data"
TOY_CORPUS = DATA / "toy_corpus.txt"


@pytest.fixture
def corpus_file(tmp_path):
    p = tmp_path / "corpus.txt"
    p.write_bytes(TOY_CORPUS.read_bytes())
    return p


ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
