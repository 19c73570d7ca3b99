"""
训练循环
AR（下一 token 交叉熵）、MLM（掩码位置交叉熵）与融合头（L_MARIA）
共用同一套：确定性批加载、梯度累积、余弦学习率、Adam、留出集评估
"""
import math
import queue
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from maria import numerics as nx
from maria.data.corpus import CorpusShards
from maria.data.tokenizer import MASK_ID
from maria.exceptions import ContractError, DataError
from maria.fusion import FusionHead, MariaModel, align_hidden, bos_shift, init_head, maria_loss
from maria.masking import apply_mask, sample_mask, sample_mask_rate
from maria.numerics import AdamState, Tensor
from maria.schemas import (
    AttentionMode,
    InitKind,
    MaskMode,
    MaskRateSpec,
    ModelConfig,
    TrainConfig,
    TrainLog,
    TrainLogEntry,
)
from maria.transformer import TransformerModel
from maria.utils.timing import Stopwatch

# 留出集评估时每次前向的窗口数
EVAL_CHUNK = 16


def cosine_lr(base_lr: float, step: int, steps: int) -> float:
    """lr(t) = lr·(1 + cos(π·t/steps)) / 2，无 warmup"""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))


# ============== 批加载 ==============

@dataclass(frozen=True)
class Batch:
    """一个有效批（梯度累积前），生成后不再修改"""
    step: int
    clean: np.ndarray                 # [B, L]
    masked: Optional[np.ndarray]      # [B, L]，AR 训练时为 None
    rates: Optional[np.ndarray]       # [B] 每条序列的掩码率

    @property
    def n_masked(self) -> int:
        return 0 if self.masked is None else int((self.masked == MASK_ID).sum())


_END = object()


class BatchLoader:
    """
    按种子确定顺序的批生成器

    每个 epoch 对训练窗口做一次随机排列；需要掩码时每条序列单独采样掩码率。
    prefetch > 0 时由后台线程生成，经有界队列交给训练线程，顺序与同步模式一致。
    """

    def __init__(
        self,
        windows: np.ndarray,
        batch_size: int,
        steps: int,
        seed: int = 0,
        mask_spec: Optional[MaskRateSpec] = None,
        mask_mode: MaskMode = MaskMode.bernoulli,
        prefetch: int = 0,
    ):
        if len(windows) == 0:
            raise DataError("没有可用于训练的窗口")
        self.windows = np.asarray(windows, dtype=np.int64)
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.mask_spec = mask_spec
        self.mask_mode = mask_mode
        self.prefetch = prefetch

    def _generate(self) -> Iterator[Batch]:
        rng = np.random.default_rng(self.seed)
        n = len(self.windows)
        order = rng.permutation(n)
        cursor = 0
        for step in range(self.steps):
            picks = []
            while len(picks) < self.batch_size:
                if cursor == n:
                    order = rng.permutation(n)
                    cursor = 0
                take = min(self.batch_size - len(picks), n - cursor)
                picks.extend(order[cursor:cursor + take])
                cursor += take
            clean = self.windows[np.asarray(picks)]
            masked = rates = None
            if self.mask_spec is not None:
                rates = np.zeros(len(clean))
                masked = np.empty_like(clean)
                for row, seq in enumerate(clean):
                    rates[row] = sample_mask_rate(self.mask_spec, rng)
                    mask = sample_mask(len(seq), rates[row], rng, mode=self.mask_mode)
                    masked[row] = apply_mask(seq, mask).tokens
            yield Batch(step=step, clean=clean, masked=masked, rates=rates)

    def __iter__(self) -> Iterator[Batch]:
        if self.prefetch <= 0:
            yield from self._generate()
            return

        q: queue.Queue = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()

        def put(item) -> bool:
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def worker() -> None:
            try:
                for batch in self._generate():
                    if not put(batch):
                        return
                put(_END)
            except BaseException as e:  # 转交给训练线程
                put(e)

        thread = threading.Thread(target=worker, name="maria-batch-loader", daemon=True)
        thread.start()
        try:
            while True:
                item = q.get()
                if item is _END:
                    break
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop.set()
            thread.join(timeout=1.0)


# ============== 留出集评估 ==============

def _holdout_windows(corpus: CorpusShards, config: TrainConfig) -> np.ndarray:
    holdout = corpus.holdout[: config.holdout_size]
    if len(holdout) == 0:
        logger.warning("[训练] 留出集为空，将跳过留出集评估")
    return holdout


def _eval_masks(holdout: np.ndarray, mask_rate: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([
        apply_mask(seq, sample_mask(len(seq), mask_rate, rng, mode=MaskMode.exact)).tokens
        for seq in holdout
    ])


def eval_holdout(
    model: Union[TransformerModel, MariaModel, FusionHead],
    holdout: np.ndarray,
    mask_rate: float = 0.5,
    seed: int = 0,
    bases: Optional[Tuple[TransformerModel, TransformerModel]] = None,
) -> float:
    """
    留出集平均损失（nats / token），不记录计算图

    - 因果模型：全部位置的下一 token 交叉熵
    - 双向模型：按 mask_rate 精确计数掩码后，掩码位置的交叉熵
    - 融合头（MariaModel，或 FusionHead + bases=(ar, mlm)）：L_MARIA
    相同 seed 下结果确定
    """
    holdout = np.asarray(holdout, dtype=np.int64)
    if len(holdout) == 0:
        logger.warning("[评估] 留出集为空，返回 NaN")
        return float("nan")

    if isinstance(model, FusionHead):
        if bases is None:
            raise ContractError("评估融合头需要提供 bases=(ar, mlm)")
        model = MariaModel(ar=bases[0], mlm=bases[1], head=model)

    if isinstance(model, TransformerModel) and model.is_causal:
        masked = None
    else:
        masked = _eval_masks(holdout, mask_rate, seed)

    nll_sum, count = 0.0, 0
    for start in range(0, len(holdout), EVAL_CHUNK):
        clean = holdout[start:start + EVAL_CHUNK]
        if isinstance(model, MariaModel):
            aligned = align_hidden(clean, masked[start:start + EVAL_CHUNK], model.ar, model.mlm)
            loss = maria_loss(model.head, aligned, reduction="sum")
            count += aligned.n_masked
        elif model.is_causal:
            logits = model.forward_logits(bos_shift(clean))
            loss = nx.cross_entropy(nx.reshape(logits, (-1, logits.shape[-1])), clean.reshape(-1), reduction="sum")
            count += clean.size
        else:
            chunk = masked[start:start + EVAL_CHUNK]
            logits = model.forward_logits(chunk)
            loss = nx.cross_entropy(
                nx.reshape(logits, (-1, logits.shape[-1])),
                clean.reshape(-1),
                weights=(chunk == MASK_ID).reshape(-1),
                reduction="sum",
            )
            count += int((chunk == MASK_ID).sum())
        nll_sum += loss.item()
    if count == 0:
        logger.warning("[评估] 留出集没有被掩码的位置，返回 0")
        return 0.0
    return nll_sum / count


# ============== 通用训练循环 ==============

MicroLoss = Callable[[Batch, slice], Tensor]


def _fit(
    kind: str,
    params: Sequence[Tensor],
    loader: BatchLoader,
    config: TrainConfig,
    micro_loss: MicroLoss,
    batch_weight: Callable[[Batch], int],
    evaluate: Callable[[], Optional[float]],
    init: Optional[InitKind] = None,
) -> TrainLog:
    """
    梯度累积：每个 micro-batch 的损失按求和计算，再除以整批的权重数，
    因此 micro_batch 的大小不影响参数更新

    第 t 步的 holdout 在该步更新之前测量；最后一步在更新之后测量
    """
    params = list(params)
    state = AdamState.for_params(params)
    log = TrainLog(kind=kind, init=init)
    steps = config.steps
    # 最后一次更新落在余弦终点 0 上
    span = max(steps - 1, 1)

    for batch in loader:
        t = batch.step
        with Stopwatch() as sw:
            lr = cosine_lr(config.lr, t, span)
            holdout = evaluate() if t % config.eval_every == 0 and t < steps - 1 else None
            total = batch_weight(batch)
            loss_sum = 0.0
            if total == 0:
                logger.warning(f"[训练] {kind} step {t}: 批内没有需要预测的位置（掩码率为 0），跳过更新")
            else:
                nx.zero_grad(params)
                for start in range(0, len(batch.clean), config.micro_batch):
                    with nx.Tape() as tape:
                        loss = micro_loss(batch, slice(start, start + config.micro_batch))
                        scaled = nx.scale(loss, 1.0 / total)
                    nx.backward(tape, scaled, params)
                    loss_sum += loss.item()
                nx.adam_step(params, state, lr)
            if t == steps - 1:
                holdout = evaluate()
        entry = TrainLogEntry(
            step=t,
            loss=loss_sum / total if total else 0.0,
            lr=lr,
            holdout=holdout,
            wall_ms=sw.elapsed_ms,
        )
        log.entries.append(entry)
        if holdout is not None:
            logger.info(
                f"[训练] {kind} step {t}/{steps} loss={entry.loss:.4f} "
                f"holdout={holdout:.4f} lr={lr:.3e}"
            )
        else:
            logger.debug(f"[训练] {kind} step {t}/{steps} loss={entry.loss:.4f} lr={lr:.3e}")
    return log


def _check_corpus(corpus: CorpusShards, config: TrainConfig, max_seq_len: int) -> None:
    n_train = len(corpus.train)
    if n_train < config.batch_size:
        raise DataError(
            f"训练窗口数 {n_train} 少于 batch_size={config.batch_size}"
            f"（至少需要 {config.batch_size * corpus.max_seq_len} 个 token）",
            detail={"train_windows": n_train, "batch_size": config.batch_size},
        )
    if corpus.max_seq_len > max_seq_len:
        raise ContractError(
            f"语料窗口长度 {corpus.max_seq_len} 超过模型 max_seq_len={max_seq_len}"
        )


def _check_trainable(model: TransformerModel, caller: str) -> None:
    if model.frozen:
        raise ContractError(
            f"{caller} 收到已冻结的模型（例如已组装进 MariaModel），请先调用 unfreeze()",
            detail={"checksum": model.checksum()},
        )


def _model_config(config: TrainConfig, mode: AttentionMode, max_seq_len: int) -> ModelConfig:
    base = config.model or ModelConfig(max_seq_len=max(max_seq_len, 2))
    return base.model_copy(update={"attention_mode": mode})


def train_ar(
    corpus: CorpusShards,
    config: TrainConfig,
    model: Optional[TransformerModel] = None,
) -> Tuple[TransformerModel, TrainLog]:
    """因果语言模型：输入 [BOS] + x[:-1]，在全部位置预测 x"""
    model = model or TransformerModel.init(_model_config(config, AttentionMode.causal, corpus.max_seq_len), config.seed)
    if not model.is_causal:
        raise ContractError("train_ar 需要因果注意力模型")
    _check_trainable(model, "train_ar")
    _check_corpus(corpus, config, model.config.max_seq_len)
    holdout = _holdout_windows(corpus, config)
    loader = BatchLoader(corpus.train, config.batch_size, config.steps, config.seed, prefetch=config.prefetch)

    def micro_loss(batch: Batch, sl: slice) -> Tensor:
        x = batch.clean[sl]
        logits = model.forward_logits(bos_shift(x))
        return nx.cross_entropy(nx.reshape(logits, (-1, logits.shape[-1])), x.reshape(-1), reduction="sum")

    logger.info(f"[训练] AR 开始: {config.steps} 步, batch={config.batch_size}, micro={config.micro_batch}")
    log = _fit(
        "ar",
        model.parameters(),
        loader,
        config,
        micro_loss,
        batch_weight=lambda b: b.clean.size,
        evaluate=lambda: eval_holdout(model, holdout) if len(holdout) else None,
    )
    return model, log


def train_mlm(
    corpus: CorpusShards,
    config: TrainConfig,
    model: Optional[TransformerModel] = None,
) -> Tuple[TransformerModel, TrainLog]:
    """双向掩码语言模型：每条序列按 mask_rate_spec 采样掩码率，只在掩码位置计算损失"""
    model = model or TransformerModel.init(
        _model_config(config, AttentionMode.bidirectional, corpus.max_seq_len), config.seed
    )
    if model.is_causal:
        raise ContractError("train_mlm 需要双向注意力模型")
    _check_trainable(model, "train_mlm")
    _check_corpus(corpus, config, model.config.max_seq_len)
    holdout = _holdout_windows(corpus, config)
    loader = BatchLoader(
        corpus.train,
        config.batch_size,
        config.steps,
        config.seed,
        mask_spec=config.mask_rate_spec,
        mask_mode=config.mask_mode,
        prefetch=config.prefetch,
    )

    def micro_loss(batch: Batch, sl: slice) -> Tensor:
        x, xm = batch.clean[sl], batch.masked[sl]
        logits = model.forward_logits(xm)
        return nx.cross_entropy(
            nx.reshape(logits, (-1, logits.shape[-1])),
            x.reshape(-1),
            weights=(xm == MASK_ID).reshape(-1),
            reduction="sum",
        )

    logger.info(
        f"[训练] MLM 开始: {config.steps} 步, 掩码率分布 {config.mask_rate_spec.kind.value}, "
        f"掩码方式 {config.mask_mode.value}"
    )
    log = _fit(
        "mlm",
        model.parameters(),
        loader,
        config,
        micro_loss,
        batch_weight=lambda b: b.n_masked,
        evaluate=lambda: eval_holdout(model, holdout, config.eval_mask_rate, config.seed) if len(holdout) else None,
    )
    return model, log


def train_fusion(
    ar_model: TransformerModel,
    mlm_model: TransformerModel,
    corpus: CorpusShards,
    config: TrainConfig,
    init: InitKind = InitKind.product,
    bias: bool = False,
) -> Tuple[FusionHead, TrainLog]:
    """
    训练融合头 W3；两个基础模型冻结，校验和在训练前后保持不变
    """
    head = init_head(ar_model, mlm_model, init, seed=config.seed, bias=bias)
    bundle = MariaModel(ar=ar_model, mlm=mlm_model, head=head)
    _check_corpus(corpus, config, bundle.max_seq_len)
    checksums = (ar_model.checksum(), mlm_model.checksum())
    holdout = _holdout_windows(corpus, config)
    loader = BatchLoader(
        corpus.train,
        config.batch_size,
        config.steps,
        config.seed,
        mask_spec=config.mask_rate_spec,
        mask_mode=config.mask_mode,
        prefetch=config.prefetch,
    )

    def micro_loss(batch: Batch, sl: slice) -> Tensor:
        aligned = align_hidden(batch.clean[sl], batch.masked[sl], ar_model, mlm_model)
        return maria_loss(head, aligned, reduction="sum")

    logger.info(f"[训练] 融合头开始: init={init.value}, {config.steps} 步")
    log = _fit(
        "fusion",
        head.parameters(),
        loader,
        config,
        micro_loss,
        batch_weight=lambda b: b.n_masked,
        evaluate=lambda: eval_holdout(bundle, holdout, config.eval_mask_rate, config.seed) if len(holdout) else None,
        init=init,
    )
    head.train_steps += config.steps
    if (ar_model.checksum(), mlm_model.checksum()) != checksums:
        raise ContractError("基础模型参数在融合头训练中被修改")
    return head, log


def holdout_losses(log: TrainLog) -> List[float]:
    return [e.holdout for e in log.holdout_curve()]
