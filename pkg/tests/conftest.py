"""
测试公共夹具：极小的模型配置、临时语料与日志捕获
"""
import numpy as np
import pytest
from loguru import logger

from maria.data.corpus import shards_from_windows
from maria.evaluation.probe import tagging_text
from maria.fusion import MariaModel, init_head
from maria.schemas import AttentionMode, InitKind, ModelConfig
from maria.transformer import TransformerModel


def tiny_config(mode: AttentionMode = AttentionMode.causal, **overrides) -> ModelConfig:
    values = dict(d_model=16, n_layers=1, n_heads=2, max_seq_len=32, ffn_mult=2, attention_mode=mode)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    """不写日志文件；模型与报告目录指向临时目录"""
    monkeypatch.setenv("LOG_TO_FILE", "false")
    monkeypatch.setenv("MARIA_MODEL_DIR", str(tmp_path / "models"))
    monkeypatch.setenv("MARIA_REPORT_DIR", str(tmp_path / "reports"))
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("DEBUG", "false")


@pytest.fixture
def log_messages():
    """收集 loguru 消息"""
    messages = []
    handler_id = logger.add(lambda m: messages.append(m.record["message"]), level="DEBUG")
    yield messages
    try:
        logger.remove(handler_id)
    except ValueError:
        pass


@pytest.fixture
def ar_model() -> TransformerModel:
    return TransformerModel.init(tiny_config(AttentionMode.causal), seed=1)


@pytest.fixture
def mlm_model() -> TransformerModel:
    return TransformerModel.init(tiny_config(AttentionMode.bidirectional, d_model=12, n_heads=3), seed=2)


@pytest.fixture
def maria_model(ar_model, mlm_model) -> MariaModel:
    head = init_head(ar_model, mlm_model, InitKind.product)
    return MariaModel(ar=ar_model, mlm=mlm_model, head=head)


@pytest.fixture
def sample_text() -> str:
    return tagging_text(200, seed=0)


@pytest.fixture
def corpus_file(tmp_path, sample_text):
    path = tmp_path / "corpus.txt"
    path.write_text(sample_text, encoding="utf-8")
    return path


@pytest.fixture
def byte_windows() -> np.ndarray:
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, size=(12, 16))


@pytest.fixture
def tiny_corpus(byte_windows):
    return shards_from_windows(byte_windows[:8], holdout=byte_windows[8:])
