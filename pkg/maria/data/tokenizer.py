"""
字节级分词器
256 个字节 id + 4 个特殊符号；AR 与 MLM 共用同一词表
"""
from typing import Dict, Iterable, List, Sequence

from maria.exceptions import ContractError

MASK_ID = 256
BOS_ID = 257
PAD_ID = 258
EOS_ID = 259
VOCAB_SIZE = 260

SPECIAL_TOKENS: Dict[int, str] = {
    MASK_ID: "[MASK]",
    BOS_ID: "[BOS]",
    PAD_ID: "[PAD]",
    EOS_ID: "[EOS]",
}


class ByteTokenizer:
    """encode 只产生 0–255；特殊符号只能由调用方插入"""

    vocab_size = VOCAB_SIZE
    mask_id = MASK_ID
    bos_id = BOS_ID
    pad_id = PAD_ID
    eos_id = EOS_ID

    def encode(self, text: str) -> List[int]:
        # surrogateescape 保证 decode 产生的转义字符能还原为原始字节
        return list(text.encode("utf-8", errors="surrogateescape"))

    def encode_bytes(self, data: bytes) -> List[int]:
        return list(data)

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        ids = list(ids)
        bad = [i for i in ids if not 0 <= i < 256]
        if bad:
            raise ContractError(f"decode_bytes 遇到非字节 id: {bad[:5]}")
        return bytes(ids)

    def decode(self, ids: Sequence[int], lossy: bool = False) -> str:
        """
        还原文本

        Args:
            lossy: True 时特殊符号渲染为 "[MASK]" 等字符串，否则遇到特殊符号报错
        """
        out: List[str] = []
        buf: List[int] = []
        for i in ids:
            i = int(i)
            if 0 <= i < 256:
                buf.append(i)
                continue
            if i in SPECIAL_TOKENS and lossy:
                if buf:
                    out.append(bytes(buf).decode("utf-8", errors="surrogateescape"))
                    buf = []
                out.append(SPECIAL_TOKENS[i])
                continue
            raise ContractError(f"decode 输入含特殊符号或越界 id {i}（可设置 lossy=True）")
        if buf:
            out.append(bytes(buf).decode("utf-8", errors="surrogateescape"))
        return "".join(out)

    def render(self, ids: Sequence[int]) -> str:
        """面向人阅读的渲染：特殊符号可见，非法 UTF-8 以替换符显示"""
        return self.decode(ids, lossy=True).encode("utf-8", errors="replace").decode("utf-8")
