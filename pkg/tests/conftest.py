import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from disp import tensor as T  # noqa: E402
from disp.model import DenseModel, ModelSpec  # noqa: E402

TEXT = (
    "The quick brown fox jumps over the lazy dog. "
    "Pack my box with five dozen liquor jugs. "
    "How vexingly quick daft zebras jump! "
)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DISP_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set DISP_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def double_precision():
    T.set_precision("f64")
    yield
    T.set_precision("f64")


@pytest.fixture
def tiny_spec():
    return ModelSpec(d=16, n_layers=2, n_heads=2, d_mid=32, max_seq_len=16)


@pytest.fixture
def tiny_model(tiny_spec):
    return DenseModel.init(tiny_spec, seed=0)


@pytest.fixture
def text_bytes():
    return (TEXT * 30).encode("utf-8")


@pytest.fixture
def corpus_file(tmp_path, text_bytes):
    path = tmp_path / "corpus.txt"
    path.write_bytes(text_bytes)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(0)
