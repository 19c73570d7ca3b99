"""
表示探针
在冻结的隐藏状态上训练线性分类器（逐 token 的词性类标注）
特征来源：仅 MLM，或 AR 与 MLM 拼接
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from maria import numerics as nx
from maria.data.tokenizer import ByteTokenizer
from maria.exceptions import ContractError
from maria.numerics import AdamState, Tensor
from maria.schemas import ProbeResult
from maria.transformer import TransformerModel

# ============== 合成标注语法 ==============

TAGS = ("DET", "ADJ", "NOUN", "VERB", "ADV", "PUNCT", "SPACE")
TAG_ID = {t: i for i, t in enumerate(TAGS)}

# 部分词在多个类别中出现（light / fish / fast / run ...），类别只能由上下文决定
LEXICON = {
    "DET": ["the", "a", "this", "every", "some"],
    "ADJ": ["red", "quick", "old", "light", "fast", "green", "small"],
    "NOUN": ["dog", "cat", "light", "run", "plan", "bird", "fish", "house", "walk"],
    "VERB": ["runs", "sees", "plans", "walks", "likes", "fish", "light", "jumps"],
    "ADV": ["fast", "slowly", "well", "today", "often"],
    "PUNCT": [".", "!"],
}


@dataclass
class TaggedSequence:
    tokens: np.ndarray   # [n] 字节 id
    labels: np.ndarray   # [n] 类别 id


def _sentence(rng: np.random.Generator) -> List[Tuple[str, str]]:
    """DET [ADJ] NOUN VERB [DET [ADJ] NOUN] [ADV] PUNCT"""
    def pick(tag: str) -> Tuple[str, str]:
        words = LEXICON[tag]
        return words[int(rng.integers(len(words)))], tag

    words = [pick("DET")]
    if rng.random() < 0.5:
        words.append(pick("ADJ"))
    words += [pick("NOUN"), pick("VERB")]
    if rng.random() < 0.6:
        words.append(pick("DET"))
        if rng.random() < 0.4:
            words.append(pick("ADJ"))
        words.append(pick("NOUN"))
    if rng.random() < 0.5:
        words.append(pick("ADV"))
    words.append(pick("PUNCT"))
    return words


def _render(sentences: List[List[Tuple[str, str]]]) -> Tuple[str, List[str]]:
    """拼成文本，并给出每个字节的标签（标点紧贴前一个词）"""
    text: List[str] = []
    labels: List[str] = []
    for s_idx, sentence in enumerate(sentences):
        for w_idx, (word, tag) in enumerate(sentence):
            if (s_idx or w_idx) and tag != "PUNCT":
                text.append(" ")
                labels.append("SPACE")
            text.append(word)
            labels.extend([tag] * len(word.encode("utf-8")))
    return "".join(text), labels


def tagging_text(n_sentences: int, seed: int = 0) -> str:
    """用同一语法生成的纯文本（用于训练基础模型）"""
    rng = np.random.default_rng(seed)
    text, _ = _render([_sentence(rng) for _ in range(n_sentences)])
    return text


def generate_tagging_data(n_sequences: int, seq_len: int, seed: int = 0) -> List[TaggedSequence]:
    """每条序列恰好 seq_len 个字节，由若干句子拼接后截断"""
    rng = np.random.default_rng(seed)
    tokenizer = ByteTokenizer()
    out: List[TaggedSequence] = []
    for _ in range(n_sequences):
        sentences: List[List[Tuple[str, str]]] = []
        text, labels = "", []
        while len(labels) < seq_len:
            sentences.append(_sentence(rng))
            text, labels = _render(sentences)
        tokens = np.asarray(tokenizer.encode(text)[:seq_len], dtype=np.int64)
        out.append(TaggedSequence(tokens=tokens, labels=np.asarray([TAG_ID[t] for t in labels[:seq_len]])))
    return out


# ============== 线性探针 ==============

def probe_features(mlm: TransformerModel, tokens, source: str, ar: Optional[TransformerModel] = None) -> np.ndarray:
    """
    mlm: MLM 在干净输入上的隐藏状态
    concat: [AR 隐藏状态 ; MLM 隐藏状态]，AR 第 i 行看到 x_≤i
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    mlm_hidden = mlm.forward_hidden(tokens).data
    if source == "mlm":
        return mlm_hidden
    if source == "concat":
        if ar is None:
            raise ContractError("concat 特征需要提供 AR 模型")
        return np.concatenate([ar.forward_hidden(tokens).data, mlm_hidden], axis=-1)
    raise ContractError(f"未知的特征来源 {source!r}（mlm | concat）")


def binomial_stderr(accuracy: float, n: int) -> float:
    return float(np.sqrt(accuracy * (1.0 - accuracy) / n)) if n else 0.0


def train_linear_probe(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_test: np.ndarray,
    y_test: np.ndarray,
    num_classes: Optional[int] = None,
    epochs: int = 10,
    lr: float = 1e-4,
    batch_size: int = 32,
    seed: int = 0,
) -> Tuple[float, float]:
    """
    softmax 线性分类器（零初始化 + Adam）

    Returns:
        (测试集准确率, 二项标准误)
    """
    y_train = np.asarray(y_train, dtype=np.int64)
    y_test = np.asarray(y_test, dtype=np.int64)
    if len(np.unique(y_train)) < 2:
        raise ContractError("探针训练数据至少需要 2 个类别")
    num_classes = num_classes or int(max(y_train.max(), y_test.max())) + 1
    d = x_train.shape[1]
    W = Tensor(np.zeros((d, num_classes)), requires_grad=True, name="probe.W")
    b = Tensor(np.zeros(num_classes), requires_grad=True, name="probe.b")
    params = [W, b]
    state = AdamState.for_params(params)
    rng = np.random.default_rng(seed)

    for epoch in range(epochs):
        order = rng.permutation(len(x_train))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            nx.zero_grad(params)
            with nx.Tape() as tape:
                loss = nx.cross_entropy(nx.linear(Tensor(x_train[idx]), W, b), y_train[idx])
            nx.backward(tape, loss, params)
            nx.adam_step(params, state, lr)
            total += loss.item() * len(idx)
        logger.debug(f"[探针] epoch {epoch + 1}/{epochs} loss={total / len(order):.4f}")

    predictions = np.argmax(x_test @ W.data + b.data, axis=1)
    accuracy = float((predictions == y_test).mean())
    return accuracy, binomial_stderr(accuracy, len(y_test))


def probe_tagging(
    mlm: TransformerModel,
    train: Sequence[TaggedSequence],
    test: Sequence[TaggedSequence],
    source: str = "concat",
    epochs: int = 10,
    lr: float = 1e-4,
    seed: int = 0,
    ar: Optional[TransformerModel] = None,
) -> ProbeResult:
    """在冻结模型的隐藏状态上训练并评估标注探针"""
    x_train = np.concatenate([probe_features(mlm, s.tokens, source, ar) for s in train])
    y_train = np.concatenate([s.labels for s in train])
    x_test = np.concatenate([probe_features(mlm, s.tokens, source, ar) for s in test])
    y_test = np.concatenate([s.labels for s in test])
    accuracy, stderr = train_linear_probe(
        x_train, y_train, x_test, y_test, num_classes=len(TAGS), epochs=epochs, lr=lr, seed=seed
    )
    logger.info(f"[评估] 探针 source={source} 准确率={accuracy:.4f} ± {stderr:.4f} (n={len(y_test)})")
    return ProbeResult(source=source, accuracy=accuracy, stderr=stderr, n_test=len(y_test), num_classes=len(TAGS))
