import numpy as np
import pytest

from tinymm.assembly import ModelConfig, TinyMM
from tinymm.connector import ConnectorConfig
from tinymm.conversation import build_vocab, corpus_texts
from tinymm.data import gen_record
from tinymm.vision import VisionConfig


def tiny_config(kind: str = "mlp", dtype: str = "float64", **lm) -> ModelConfig:
    return ModelConfig(
        vision=VisionConfig(resolution=8, patch_size=4, depth=2, width=8, heads=2),
        connector=ConnectorConfig(kind, queries=3, heads=2),
        lm_width=lm.get("width", 12), lm_depth=lm.get("depth", 2), lm_heads=2,
        lm_max_len=lm.get("max_len", 320), lm_mlp_ratio=2, dtype=dtype,
    )


@pytest.fixture(scope="session")
def tiny_records():
    return [gen_record([7, i], resolution=8, polarity=[(3 * i + j) % 2 == 0 for j in range(3)])[1] for i in range(20)]


@pytest.fixture(scope="session")
def tiny_scenes():
    return [gen_record([7, i], resolution=8, polarity=[(3 * i + j) % 2 == 0 for j in range(3)])[0] for i in range(20)]


@pytest.fixture(scope="session")
def tiny_vocab(tiny_records):
    # the full character set, so any generated record tokenizes
    from tinymm.data import COLOR_NAMES, SHAPES, CELL_NAMES, COUNT_WORDS
    extra = " ".join(COLOR_NAMES + SHAPES + CELL_NAMES + COUNT_WORDS) + "?.,\nyesnohwatiscrb"
    return build_vocab(list(corpus_texts(tiny_records)) + [extra])


@pytest.fixture
def tiny_model(tiny_vocab):
    return TinyMM(tiny_config(), tiny_vocab, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
