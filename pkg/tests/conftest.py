from pathlib import Path

import pytest
import torch

from krsvqg.fixtures import make_fixture
from krsvqg.model import KRSVQG, ModelConfig
from krsvqg.tokenizer import build_vocab

DATA = Path(__file__).parent / "data"

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def fixture_set():
    return make_fixture(8, 16, n_objects=4)


@pytest.fixture(scope="session")
def vocab(fixture_set):
    records, _ = fixture_set
    return build_vocab([r[k] for r in records for k in ("caption", "knowledge_sentence", "question")])


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(vocab_size=len(vocab), image_size=16, patch_size=8, width=16, heads=2,
                       image_blocks=1, caption_blocks=1, text_blocks=1, question_blocks=1,
                       caption_max_len=12, knowledge_max_len=12, question_max_len=12)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return KRSVQG(tiny_config).eval()
