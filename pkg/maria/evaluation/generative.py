"""生成困惑度：用打分模型（任意因果模型）评估样本的流畅度"""
from typing import Iterable, Optional

import numpy as np
from loguru import logger

from maria.exceptions import ModeError
from maria.fusion import bos_shift
from maria.numerics import log_softmax_np
from maria.transformer import TransformerModel


def sample_nll(scorer: TransformerModel, tokens) -> float:
    """单个样本的平均 NLL（nats / token），以 BOS 开头的教师强制"""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    logp = log_softmax_np(scorer.forward_logits(bos_shift(tokens)).data)
    return float(-logp[np.arange(len(tokens)), tokens].mean())


def generative_ppl(scorer: TransformerModel, samples: Iterable) -> Optional[float]:
    """mean_s exp(样本 s 的平均 NLL)；空样本跳过"""
    if not scorer.is_causal:
        raise ModeError("打分模型必须是因果模型")
    ppls = [np.exp(sample_nll(scorer, s)) for s in samples if len(s)]
    if not ppls:
        logger.warning("[评估] 没有非空样本，生成困惑度为空")
        return None
    return float(np.mean(ppls))
