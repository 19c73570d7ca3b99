"""
Pydantic 数据模式定义
用于配置校验、报告序列化和 CLI 的 JSON 输入输出
"""
import math
from datetime import datetime
from enum import Enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# 报告 / 日志的格式版本
REPORT_VERSION = 1


class AttentionMode(str, Enum):
    """注意力模式"""
    causal = "causal"
    bidirectional = "bidirectional"


class MaskKind(str, Enum):
    """掩码率分布类型"""
    beta = "beta"
    fixed = "fixed"


class MaskMode(str, Enum):
    """掩码采样方式：精确计数 / 独立伯努利"""
    exact = "exact"
    bernoulli = "bernoulli"


class InitKind(str, Enum):
    """融合头初始化方式"""
    product = "product"
    random = "random"


class SamplerKind(str, Enum):
    """解码策略"""
    greedy = "greedy"
    temperature = "temperature"
    nucleus = "nucleus"


# ============== 模型配置 ==============

class ModelConfig(BaseModel):
    """单个语言模型的结构配置"""
    vocab_size: int = Field(260, ge=4, description="词表大小（含特殊符号）")
    d_model: int = Field(128, ge=1, description="隐藏维度")
    n_layers: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    max_seq_len: int = Field(256, ge=2)
    attention_mode: AttentionMode = AttentionMode.causal
    ffn_mult: int = Field(4, ge=1, description="前馈层宽度倍数")

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} 不能被 n_heads={self.n_heads} 整除")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def is_causal(self) -> bool:
        return self.attention_mode == AttentionMode.causal

    @classmethod
    def desk_ar(cls) -> "ModelConfig":
        """桌面规模 AR 默认配置"""
        return cls(attention_mode=AttentionMode.causal)

    @classmethod
    def desk_mlm(cls) -> "ModelConfig":
        """桌面规模 MLM 默认配置"""
        return cls(attention_mode=AttentionMode.bidirectional)


class MaskRateSpec(BaseModel):
    """掩码率分布"""
    kind: MaskKind = MaskKind.beta
    alpha: float = Field(2.5, gt=0)
    beta: float = Field(2.5, gt=0)
    fixed_rate: float = Field(0.5, ge=0.0, le=1.0)

    @classmethod
    def fixed(cls, rate: float) -> "MaskRateSpec":
        return cls(kind=MaskKind.fixed, fixed_rate=rate)


# ============== 训练相关模式 ==============

class TrainConfig(BaseModel):
    """训练配置（AR / MLM / 融合头共用）"""
    steps: int = Field(2000, ge=1)
    batch_size: int = Field(32, ge=1, description="有效批大小（梯度累积）")
    micro_batch: int = Field(8, ge=1)
    lr: float = Field(5e-5, gt=0)
    schedule: Literal["cosine"] = "cosine"
    seed: int = 0
    mask_rate_spec: MaskRateSpec = Field(default_factory=MaskRateSpec)
    mask_mode: MaskMode = MaskMode.bernoulli
    eval_every: int = Field(100, ge=1)
    holdout_size: int = Field(100, ge=1, description="留出集序列数上限")
    eval_mask_rate: float = Field(0.5, gt=0.0, le=1.0)
    prefetch: int = Field(0, ge=0, description="后台预取队列长度，0 表示同步加载")
    model: Optional[ModelConfig] = None

    @model_validator(mode="after")
    def check_accumulation(self) -> "TrainConfig":
        if self.batch_size % self.micro_batch != 0:
            raise ValueError(
                f"batch_size={self.batch_size} 必须是 micro_batch={self.micro_batch} 的整数倍"
            )
        return self

    @property
    def accumulation_steps(self) -> int:
        return self.batch_size // self.micro_batch


class TrainLogEntry(BaseModel):
    """训练日志中的一步"""
    step: int
    loss: float
    lr: float
    holdout: Optional[float] = None
    wall_ms: float = 0.0


class TrainLog(BaseModel):
    """训练曲线"""
    kind: Literal["ar", "mlm", "fusion"]
    init: Optional[InitKind] = None
    entries: List[TrainLogEntry] = []

    def holdout_curve(self) -> List[TrainLogEntry]:
        return [e for e in self.entries if e.holdout is not None]


# ============== 推理相关模式 ==============

class SamplerSpec(BaseModel):
    """采样策略；greedy 忽略 temperature / nucleus_p"""
    kind: SamplerKind = SamplerKind.greedy
    temperature: float = Field(1.0, gt=0.0)
    nucleus_p: float = Field(1.0, gt=0.0, le=1.0)
    seed: int = 0

    @classmethod
    def greedy(cls, seed: int = 0) -> "SamplerSpec":
        return cls(kind=SamplerKind.greedy, seed=seed)

    @classmethod
    def at_temperature(cls, t: float, seed: int = 0) -> "SamplerSpec":
        """t == 0 视为贪心"""
        if t <= 0:
            return cls.greedy(seed)
        return cls(kind=SamplerKind.temperature, temperature=t, seed=seed)


class AnnealSchedule(BaseModel):
    """模拟退火日程：温度从 1 线性降到 0"""
    iterations: int = Field(10, ge=0)
    remask_fraction: float = Field(0.3, ge=0.0, le=1.0)
    nucleus_p: float = Field(1.0, gt=0.0, le=1.0)
    seed: int = 0

    def temperatures(self) -> List[float]:
        """t_1..t_N，t_1 = 1，t_N = 0；N = 1 时只有最后一步（贪心）"""
        n = self.iterations
        if n == 0:
            return []
        if n == 1:
            return [0.0]
        return [1.0 - i / (n - 1) for i in range(n)]


class InfillRequest(BaseModel):
    """填空请求"""
    tokens: List[int]
    mask: List[int]
    sampler: SamplerSpec = Field(default_factory=SamplerSpec)


class InfillResponse(BaseModel):
    """填空响应"""
    tokens: List[int]
    ar_forwards: int
    mlm_forwards: int
    wall_ms: float


class AnnealTraceEntry(BaseModel):
    """退火轨迹中的一次迭代（iteration 0 为初始 AR 样本）"""
    iteration: int
    temperature: float
    tokens: List[int]
    gen_ppl: Optional[float] = None


# ============== 评估相关模式 ==============

class PerplexityEntry(BaseModel):
    """一个 (方法, 数据集, 掩码率) 的困惑度"""
    method: str
    dataset: str = ""
    model_id: str = ""
    rate: Optional[float] = None
    window: Optional[int] = None
    nll_sum: float
    tokens: int
    ppl: Optional[float] = Field(None, description="没有被掩码的 token 时为空")
    forwards: int = 0
    insufficient: bool = Field(False, description="掩码 token 少于下限")

    model_config = ConfigDict(protected_namespaces=())

    @classmethod
    def from_totals(cls, nll_sum: float, tokens: int, **kwargs) -> "PerplexityEntry":
        ppl = math.exp(nll_sum / tokens) if tokens > 0 else None
        return cls(nll_sum=nll_sum, tokens=tokens, ppl=ppl, **kwargs)


class PerplexityReport(BaseModel):
    version: int = REPORT_VERSION
    entries: List[PerplexityEntry] = []


class ComparisonRecord(BaseModel):
    """一次成对比较（JSONL 中的一行）"""
    item: str = ""
    a: str
    b: str
    outcome: Literal["a", "b", "tie"]

    @model_validator(mode="after")
    def check_distinct(self) -> "ComparisonRecord":
        if self.a == self.b:
            raise ValueError(f"比较双方不能相同: {self.a}")
        return self


class EloDiagnostics(BaseModel):
    iterations: int
    converged: bool
    log_likelihood: float
    connected: bool
    components: List[List[str]]
    n_records: int


class EloTable(BaseModel):
    """Bradley–Terry ELO 表"""
    version: int = REPORT_VERSION
    scale: float = 400.0
    base: float = 10.0
    init: float = 1000.0
    l2: float = 0.0
    ratings: Dict[str, float]
    diagnostics: EloDiagnostics

    def win_probability(self, a: str, b: str) -> float:
        """P(a 胜 b) = 1 / (1 + base^((r_b - r_a)/scale))"""
        diff = (self.ratings[b] - self.ratings[a]) / self.scale
        return 1.0 / (1.0 + self.base ** diff)


class ThroughputPoint(BaseModel):
    method: str
    length: int
    masked_tokens: int
    wall_times_s: List[float]
    mean_s: float
    std_s: float
    tokens_per_sec: float
    unstable: bool = False


class MethodFit(BaseModel):
    """log(时间) 对 log(长度) 的最小二乘拟合"""
    method: str
    slope: float
    intercept: float
    r2: float


class ThroughputReport(BaseModel):
    version: int = REPORT_VERSION
    mask_rate: float
    runs: int
    warmups: int
    lengths: List[int]
    points: List[ThroughputPoint] = []
    fits: List[MethodFit] = []

    @field_validator("lengths")
    @classmethod
    def check_increasing(cls, v: List[int]) -> List[int]:
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"长度必须严格递增: {v}")
        return v


class ProbeResult(BaseModel):
    source: Literal["mlm", "concat"]
    accuracy: float
    stderr: float
    n_test: int
    num_classes: int


class ProbeReport(BaseModel):
    version: int = REPORT_VERSION
    results: List[ProbeResult] = []


# ============== 运行清单 ==============

class RunManifest(BaseModel):
    """每次 CLI 运行输出一份清单"""
    run_id: str
    subcommand: str
    version: str
    config: dict = {}
    seeds: Dict[str, int] = {}
    inputs: Dict[str, Optional[str]] = Field(default_factory=dict, description="路径 -> sha256")
    outputs: Dict[str, Optional[str]] = Field(default_factory=dict, description="路径 -> sha256")
    started_at: datetime
    finished_at: Optional[datetime] = None
    exit_code: Optional[int] = None
    error: Optional[dict] = Field(None, description="失败时的错误摘要 {code, error, message, detail}")
