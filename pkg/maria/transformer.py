"""
Transformer 语言模型
同一实现支持因果（AR）与双向（MLM）注意力；因果模式支持 KV 缓存增量前向
"""
import hashlib
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from maria import numerics as nx
from maria.exceptions import DimensionError, LengthError, ModeError
from maria.numerics import Tensor
from maria.schemas import ModelConfig

# 隐藏状态就是 [n, d]（或 [b, n, d]）的张量
HiddenStates = Tensor

INIT_STD = 0.02


@dataclass
class KVCache:
    """每层只追加的 key / value 历史，形状 [cached_len, n_heads, head_dim]"""
    keys: List[np.ndarray]
    values: List[np.ndarray]
    max_seq_len: int

    @classmethod
    def empty(cls, config: ModelConfig) -> "KVCache":
        shape = (0, config.n_heads, config.head_dim)
        return cls(
            keys=[np.zeros(shape, dtype=nx.DTYPE) for _ in range(config.n_layers)],
            values=[np.zeros(shape, dtype=nx.DTYPE) for _ in range(config.n_layers)],
            max_seq_len=config.max_seq_len,
        )

    @property
    def cached_len(self) -> int:
        return int(self.keys[0].shape[0]) if self.keys else 0

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """拼接新的 k / v 并返回该层完整历史"""
        self.keys[layer] = np.concatenate([self.keys[layer], k], axis=0)
        self.values[layer] = np.concatenate([self.values[layer], v], axis=0)
        return self.keys[layer], self.values[layer]


class TransformerModel:
    """
    Pre-norm Transformer：学习的绝对位置编码、GELU 前馈、独立（不共享）的输出头

    参数以扁平字典保存，名字即检查点中的张量名
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params
        self.frozen = False
        self._check_params()

    # ---------- 构造 ----------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "TransformerModel":
        """按种子随机初始化"""
        rng = np.random.default_rng(seed)
        d, v = config.d_model, config.vocab_size
        hidden = d * config.ffn_mult

        def normal(*shape, std=INIT_STD):
            return rng.normal(0.0, std, size=shape)

        shapes: Dict[str, np.ndarray] = {
            "tok_emb": normal(v, d),
            "pos_emb": normal(config.max_seq_len, d),
        }
        # 残差投影按层数缩放
        proj_std = INIT_STD / math.sqrt(2 * config.n_layers)
        for i in range(config.n_layers):
            p = f"layers.{i}."
            shapes.update({
                p + "ln1.gain": np.ones(d), p + "ln1.bias": np.zeros(d),
                p + "attn.wq": normal(d, d), p + "attn.bq": np.zeros(d),
                p + "attn.wk": normal(d, d), p + "attn.bk": np.zeros(d),
                p + "attn.wv": normal(d, d), p + "attn.bv": np.zeros(d),
                p + "attn.wo": normal(d, d, std=proj_std), p + "attn.bo": np.zeros(d),
                p + "ln2.gain": np.ones(d), p + "ln2.bias": np.zeros(d),
                p + "ffn.w1": normal(d, hidden), p + "ffn.b1": np.zeros(hidden),
                p + "ffn.w2": normal(hidden, d, std=proj_std), p + "ffn.b2": np.zeros(d),
            })
        shapes.update({"ln_f.gain": np.ones(d), "ln_f.bias": np.zeros(d), "head": normal(d, v)})
        params = {name: Tensor(arr, requires_grad=True, name=name) for name, arr in shapes.items()}
        return cls(config, params)

    def _check_params(self) -> None:
        head = self.params.get("head")
        if head is None:
            raise DimensionError("模型缺少输出头 head")
        if head.shape != (self.config.d_model, self.config.vocab_size):
            raise DimensionError(
                f"输出头形状 {head.shape} 与配置 (d_model={self.config.d_model}, vocab={self.config.vocab_size}) 不符"
            )

    # ---------- 参数管理 ----------

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "TransformerModel":
        """冻结后任何字段都不会累积梯度"""
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "TransformerModel":
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True
        return self

    @property
    def head(self) -> Tensor:
        """输出头 W（AR 中为 W1，MLM 中为 W2），形状 [d, v]"""
        return self.params["head"]

    @property
    def is_causal(self) -> bool:
        return self.config.is_causal

    def checksum(self) -> str:
        """参数内容摘要，用于确认冻结模型未被修改"""
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(self.params[name].data.tobytes())
        return digest.hexdigest()

    # ---------- 前向 ----------

    def _validate_tokens(self, tokens: np.ndarray, offset: int = 0) -> None:
        n = tokens.shape[-1]
        if offset + n > self.config.max_seq_len:
            raise LengthError(
                f"输入长度 {offset + n} 超过 max_seq_len={self.config.max_seq_len}",
                detail={"length": offset + n, "max_seq_len": self.config.max_seq_len},
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise DimensionError(f"token id 越界: 词表大小 {self.config.vocab_size}")

    def _attention(
        self,
        x: Tensor,
        layer: int,
        offset: int,
        cache: Optional[KVCache],
    ) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"layers.{layer}.attn."
        b, n, d = x.shape
        H, hd = cfg.n_heads, cfg.head_dim

        def heads(t: Tensor) -> Tensor:
            # [b, n, d] -> [b, H, n, hd]
            return nx.transpose(nx.reshape(t, (b, n, H, hd)), (0, 2, 1, 3))

        q = heads(nx.linear(x, p[pre + "wq"], p[pre + "bq"]))
        k_new = nx.linear(x, p[pre + "wk"], p[pre + "bk"])
        v_new = nx.linear(x, p[pre + "wv"], p[pre + "bv"])

        if cache is not None:
            # 缓存只在推理路径使用（b == 1，无梯度）
            k_all, v_all = cache.append(
                layer,
                k_new.data.reshape(n, H, hd),
                v_new.data.reshape(n, H, hd),
            )
            total = k_all.shape[0]
            k = Tensor(np.transpose(k_all, (1, 0, 2))[None], check=False)
            v = Tensor(np.transpose(v_all, (1, 0, 2))[None], check=False)
        else:
            total = n
            k, v = heads(k_new), heads(v_new)

        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        if cfg.is_causal:
            rows = offset + np.arange(n)[:, None]
            cols = np.arange(total)[None, :]
            scores = nx.apply_attention_mask(scores, cols <= rows)
        att = nx.softmax(scores)
        ctx = nx.matmul(att, v)  # [b, H, n, hd]
        ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return nx.linear(ctx, p[pre + "wo"], p[pre + "bo"])

    def _forward(self, tokens: np.ndarray, offset: int = 0, cache: Optional[KVCache] = None) -> Tensor:
        p = self.params
        positions = offset + np.arange(tokens.shape[1])
        x = nx.add(
            nx.embedding_lookup(p["tok_emb"], tokens),
            nx.embedding_lookup(p["pos_emb"], np.broadcast_to(positions, tokens.shape)),
        )
        for i in range(self.config.n_layers):
            pre = f"layers.{i}."
            h = nx.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            x = nx.add(x, self._attention(h, i, offset, cache))
            h = nx.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            h = nx.gelu(nx.linear(h, p[pre + "ffn.w1"], p[pre + "ffn.b1"]))
            x = nx.add(x, nx.linear(h, p[pre + "ffn.w2"], p[pre + "ffn.b2"]))
        return nx.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])

    def forward_hidden(self, tokens) -> HiddenStates:
        """
        最终层（归一化后）的隐藏状态

        Args:
            tokens: [n] 或 [b, n] 的 token id

        Returns:
            [n, d] 或 [b, n, d]
        """
        arr = np.asarray(tokens, dtype=np.int64)
        single = arr.ndim == 1
        batch = arr[None] if single else arr
        self._validate_tokens(batch)
        if batch.shape[1] == 0:
            empty = np.zeros((batch.shape[0], 0, self.config.d_model))
            return Tensor(empty[0] if single else empty)
        h = self._forward(batch)
        return nx.reshape(h, h.shape[1:]) if single else h

    def logits_from_hidden(self, hidden: Tensor) -> Tensor:
        return nx.linear(hidden, self.head)

    def forward_logits(self, tokens) -> Tensor:
        """logits = W · h(x)；softmax 后每行是合法分布"""
        return self.logits_from_hidden(self.forward_hidden(tokens))

    def forward_cached(self, new_tokens, cache: KVCache) -> Tuple[HiddenStates, KVCache]:
        """
        增量前向：只计算新 token，复用缓存中的 key / value

        返回新 token 的隐藏状态 [k, d]，缓存原地扩展 k 个位置
        """
        if not self.is_causal:
            raise ModeError("双向（MLM）模型无法使用 KV 缓存")
        arr = np.asarray(new_tokens, dtype=np.int64).reshape(-1)
        offset = cache.cached_len
        self._validate_tokens(arr, offset=offset)
        if arr.size == 0:
            return Tensor(np.zeros((0, self.config.d_model))), cache
        h = self._forward(arr[None], offset=offset, cache=cache)
        return Tensor(h.data[0], check=False), cache

    def new_cache(self) -> KVCache:
        if not self.is_causal:
            raise ModeError("双向（MLM）模型无法使用 KV 缓存")
        return KVCache.empty(self.config)
