"""
MARIA 命令行入口
每个子命令只是训练 / 推理 / 评估模块的薄封装，输出带版本号的 JSON 报告与一份运行清单
"""
import argparse
import json
import sys
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import ValidationError

from maria import __version__
from maria.config import Settings, get_settings
from maria.data.checkpoint import load_checkpoint, load_maria, save_checkpoint
from maria.data.corpus import load_corpus
from maria.data.reports import (
    atomic_write_text,
    read_train_log,
    train_log_rows,
    write_csv,
    write_jsonl,
    write_report,
    write_train_log,
)
from maria.data.tokenizer import ByteTokenizer
from maria.evaluation.elo import bradley_terry, load_records
from maria.evaluation.generative import generative_ppl
from maria.evaluation.perplexity import PPL_METHODS, evaluate_rates, rolling_ppl, subsample
from maria.evaluation.probe import generate_tagging_data, probe_tagging
from maria.evaluation.throughput import throughput_bench
from maria.exceptions import ConfigError, ContractError, DataError, MariaError, UsageError
from maria.inference import INFILL_METHODS, infill_cached, infill_uncached, simulated_anneal
from maria.log import setup_logging
from maria.masking import MaskSet, apply_mask, mask_words, sample_mask
from maria.schemas import (
    AnnealSchedule,
    InfillRequest,
    InitKind,
    MaskKind,
    MaskMode,
    PerplexityReport,
    ProbeReport,
    RunManifest,
    SamplerKind,
    SamplerSpec,
    TrainConfig,
)
from maria.training import train_ar, train_fusion, train_mlm
from maria.utils.timing import now_utc, sha256_file

EXIT_OK = 0
EXIT_UNEXPECTED = 1


# ============== 运行上下文 ==============

@dataclass
class RunContext:
    """一次 CLI 运行：run_id、配置与清单"""
    run_id: str
    settings: Settings
    manifest: RunManifest
    stdout: Any = field(default=sys.stdout)

    def input(self, path) -> Path:
        path = Path(path)
        self.manifest.inputs[str(path)] = sha256_file(path) if path.is_file() else None
        return path

    def output(self, path) -> Path:
        path = Path(path)
        self.manifest.outputs[str(path)] = sha256_file(path) if path.is_file() else None
        return path

    def report_path(self, explicit: Optional[str], name: str) -> Path:
        return Path(explicit) if explicit else self.settings.report_dir / name

    def emit(self, payload: Any) -> None:
        """结果打印到 stdout（日志走 stderr）"""
        text = payload if isinstance(payload, str) else json.dumps(payload, ensure_ascii=False)
        print(text, file=self.stdout)


def _csv_floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的数字: {text}") from e


def _csv_ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数: {text}") from e


def _csv_names(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _load_json(path: str) -> Dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"配置文件不存在: {p}", detail={"path": str(p)})
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件不是合法 JSON: {p} ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件顶层必须是对象: {p}")
    return data


def _validation_to_config_error(exc: ValidationError) -> ConfigError:
    fields = [
        {"field": ".".join(str(x) for x in err["loc"]), "message": err["msg"]}
        for err in exc.errors(include_url=False)
    ]
    summary = "; ".join(f"{f['field']}: {f['message']}" for f in fields)
    return ConfigError(f"配置校验失败: {summary}", detail={"errors": fields})


# ============== 配置解析（命令行 > 配置文件 > 默认值） ==============

def resolve_train_config(args: argparse.Namespace, ctx: RunContext) -> TrainConfig:
    data: Dict[str, Any] = {"seed": ctx.settings.DEFAULT_SEED}
    if args.config:
        data.update(_load_json(str(ctx.input(args.config))))
    flags = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "micro_batch": args.micro_batch,
        "lr": args.lr,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "holdout_size": args.holdout_size,
        "prefetch": args.prefetch,
    }
    data.update({k: v for k, v in flags.items() if v is not None})
    if getattr(args, "mask_rate", None) is not None:
        data["mask_rate_spec"] = {"kind": MaskKind.fixed.value, "fixed_rate": args.mask_rate}
    if getattr(args, "mask_mode", None):
        data["mask_mode"] = args.mask_mode
    model_flags = {
        "d_model": args.d_model,
        "n_layers": args.n_layers,
        "n_heads": args.n_heads,
        "max_seq_len": args.max_seq_len,
    }
    model_flags = {k: v for k, v in model_flags.items() if v is not None}
    if model_flags:
        data["model"] = {**(data.get("model") or {}), **model_flags}
    return TrainConfig.model_validate(data)


def _sampler_from_args(args: argparse.Namespace) -> SamplerSpec:
    return SamplerSpec(
        kind=SamplerKind(args.sampler),
        temperature=args.temperature,
        nucleus_p=args.top_p,
        seed=args.seed,
    )


def _maria_paths(args: argparse.Namespace, ctx: RunContext) -> tuple:
    s = ctx.settings
    ar = ctx.input(args.ar or s.default_checkpoint("ar"))
    mlm = ctx.input(args.mlm or s.default_checkpoint("mlm"))
    head = ctx.input(args.head or s.default_checkpoint("fusion"))
    return ar, mlm, head


# ============== 训练子命令 ==============

def _train_common(args: argparse.Namespace, ctx: RunContext, kind: str):
    config = resolve_train_config(args, ctx)
    ctx.manifest.config = config.model_dump(mode="json")
    ctx.manifest.seeds = {"train": config.seed}
    window = (config.model.max_seq_len if config.model else None) or 256
    corpus = load_corpus(
        [ctx.input(p) for p in args.corpus],
        max_seq_len=window,
        holdout_frac=args.holdout_frac,
        seed=config.seed,
        holdout_min=args.holdout_min,
    )
    out = Path(args.out) if args.out else ctx.settings.default_checkpoint(kind)
    log_path = Path(args.log) if args.log else out.with_suffix(".trainlog.jsonl")
    return config, corpus, out, log_path


def _finish_training(ctx: RunContext, obj, log, out: Path, log_path: Path) -> None:
    save_checkpoint(out, obj)
    write_train_log(log_path, log)
    ctx.output(out)
    ctx.output(log_path)
    last = log.entries[-1] if log.entries else None
    ctx.emit({
        "checkpoint": str(out),
        "train_log": str(log_path),
        "steps": len(log.entries),
        "final_loss": last.loss if last else None,
        "final_holdout": last.holdout if last else None,
    })


def cmd_train_ar(args: argparse.Namespace, ctx: RunContext) -> None:
    config, corpus, out, log_path = _train_common(args, ctx, "ar")
    model, log = train_ar(corpus, config)
    _finish_training(ctx, model, log, out, log_path)


def cmd_train_mlm(args: argparse.Namespace, ctx: RunContext) -> None:
    config, corpus, out, log_path = _train_common(args, ctx, "mlm")
    model, log = train_mlm(corpus, config)
    _finish_training(ctx, model, log, out, log_path)


def cmd_train_fusion(args: argparse.Namespace, ctx: RunContext) -> None:
    s = ctx.settings
    ar = load_checkpoint(ctx.input(args.ar or s.default_checkpoint("ar")), expected_kind="ar")
    mlm = load_checkpoint(ctx.input(args.mlm or s.default_checkpoint("mlm")), expected_kind="mlm")
    if args.max_seq_len is None:
        args.max_seq_len = min(ar.config.max_seq_len, mlm.config.max_seq_len)
    config, corpus, out, log_path = _train_common(args, ctx, "fusion")
    init = InitKind(args.init)
    ctx.manifest.config["init"] = init.value
    ctx.manifest.config["bias"] = args.bias
    head, log = train_fusion(ar, mlm, corpus, config, init=init, bias=args.bias)
    _finish_training(ctx, head, log, out, log_path)


# ============== 推理子命令 ==============

def _parse_tokens(text: str) -> List[int]:
    text = text.strip()
    try:
        values = json.loads(text) if text.startswith("[") else [int(x) for x in text.split(",") if x.strip()]
    except (ValueError, json.JSONDecodeError) as e:
        raise UsageError(f"--tokens 需要 JSON 数组或逗号分隔的整数: {text}") from e
    return [int(v) for v in values]


def _read_infill_request(path: Path) -> InfillRequest:
    try:
        return InfillRequest.model_validate_json(path.read_bytes())
    except (OSError, ValidationError) as e:
        raise DataError(f"填空请求无法解析: {path} ({e})", detail={"path": str(path)}) from e


def cmd_infill(args: argparse.Namespace, ctx: RunContext) -> None:
    model = load_maria(*_maria_paths(args, ctx))
    tokenizer = ByteTokenizer()
    sampler = _sampler_from_args(args)
    rng = np.random.default_rng(args.seed)

    if args.request is not None:
        if args.mask_words is not None or args.mask_rate is not None or args.mask is not None:
            raise UsageError("--request 已包含掩码，不能再指定 --mask / --mask-rate / --mask-words")
        request = _read_infill_request(ctx.input(args.request))
        sampler = request.sampler
        tokens = np.asarray(request.tokens, dtype=np.int64)
    elif args.text is not None:
        tokens = np.asarray(tokenizer.encode(args.text), dtype=np.int64)
    else:
        tokens = np.asarray(_parse_tokens(args.tokens), dtype=np.int64)
    ctx.manifest.seeds = {"sampler": sampler.seed}

    if args.request is not None:
        mask = MaskSet.of(request.mask, len(tokens))
        masked = apply_mask(tokens, mask).tokens
    elif args.mask_words is not None:
        if args.text is None:
            raise UsageError("--mask-words 只能与 --text 一起使用")
        masked, mask = mask_words(args.text, args.mask_words, rng, tokenizer)
    elif args.mask is not None:
        mask = MaskSet.of(_csv_ints(args.mask), len(tokens))
        masked = apply_mask(tokens, mask).tokens
    else:
        rate = args.mask_rate if args.mask_rate is not None else 0.5
        mask = sample_mask(len(tokens), rate, rng, mode=MaskMode.exact) if len(tokens) else MaskSet(seq_len=0)
        masked = apply_mask(tokens, mask).tokens
    ctx.manifest.config = {
        "sampler": sampler.model_dump(mode="json"),
        "mask": mask.model_dump(),
        "refresh_every": args.refresh_every,
    }

    result = infill_cached(model, masked, mask, sampler, np.random.default_rng(sampler.seed), refresh_every=args.refresh_every)
    response = result.to_response().model_dump()
    response["masked_text"] = tokenizer.render(masked)
    response["text"] = tokenizer.render(result.tokens)

    if args.compare_uncached:
        oracle = infill_uncached(model, masked, mask, sampler, np.random.default_rng(sampler.seed))
        equal = bool(np.array_equal(oracle.tokens, result.tokens))
        response["uncached_wall_ms"] = oracle.wall_ms
        response["speedup"] = oracle.wall_ms / result.wall_ms if result.wall_ms > 0 else None
        response["equal"] = equal
        if not equal:
            diff = np.flatnonzero(oracle.tokens != result.tokens)
            raise ContractError(
                f"缓存与非缓存填空结果不一致，位置 {diff[:10].tolist()}",
                detail={"positions": diff.tolist()},
            )
        logger.info(f"[推理] 缓存 / 非缓存结果一致，加速 {response['speedup'] or 0:.2f}x")

    if args.out:
        atomic_write_text(args.out, json.dumps(response, ensure_ascii=False, indent=2) + "\n")
        ctx.output(args.out)
    ctx.emit(response["text"])
    ctx.emit(response)


def cmd_sample_anneal(args: argparse.Namespace, ctx: RunContext) -> None:
    if args.runs < 1:
        raise UsageError(f"--runs 必须 ≥ 1, 得到 {args.runs}")
    model = load_maria(*_maria_paths(args, ctx))
    scorer_model = load_checkpoint(ctx.input(args.scorer), expected_kind="ar") if args.scorer else None
    scorer = (lambda toks: generative_ppl(scorer_model, [toks])) if scorer_model is not None else None
    tokenizer = ByteTokenizer()

    traces = []
    final_tokens = None
    for run in range(args.runs):
        schedule = AnnealSchedule(
            iterations=args.iterations,
            remask_fraction=args.remask,
            nucleus_p=args.top_p,
            seed=args.seed + run,
        )
        tokens, trace = simulated_anneal(model, args.length, schedule, scorer)
        traces.append(trace)
        if final_tokens is None:
            final_tokens = tokens
    ctx.manifest.config = {
        "length": args.length,
        "iterations": args.iterations,
        "remask_fraction": args.remask,
        "nucleus_p": args.top_p,
        "runs": args.runs,
    }
    ctx.manifest.seeds = {f"run{r}": args.seed + r for r in range(args.runs)}

    trace_path = ctx.report_path(args.trace, "anneal_trace.jsonl")
    write_jsonl(trace_path, traces[0])
    ctx.output(trace_path)

    rows = []
    for i in range(args.iterations + 1):
        scores = [t[i].gen_ppl for t in traces if t[i].gen_ppl is not None]
        rows.append({
            "iteration": i,
            "temperature": traces[0][i].temperature,
            "mean_gen_ppl": float(np.mean(scores)) if scores else None,
            "runs": len(scores),
        })
    if scorer is not None:
        csv_path = Path(args.csv) if args.csv else trace_path.with_suffix(".csv")
        write_csv(csv_path, rows)
        ctx.output(csv_path)
    ctx.emit(tokenizer.render(final_tokens))
    ctx.emit({"trace_entries": len(traces[0]), "runs": args.runs, "per_iteration": rows})


# ============== 评估子命令 ==============

def cmd_eval_ppl(args: argparse.Namespace, ctx: RunContext) -> None:
    unknown = [m for m in args.methods if m not in PPL_METHODS]
    if unknown:
        raise UsageError(f"未知的困惑度方法 {unknown}，可选: {', '.join(PPL_METHODS)}")
    model = load_maria(*_maria_paths(args, ctx))
    window = args.window or model.max_seq_len
    corpus = load_corpus([ctx.input(p) for p in args.corpus], max_seq_len=window, holdout_frac=0.0, seed=args.seed)
    examples = args.examples or ctx.settings.EVAL_EXAMPLES
    windows = subsample(corpus.windows, examples, args.seed)
    meta = {"dataset": args.dataset or Path(args.corpus[0]).stem, "model_id": model.head.checksum()[:12]}
    ctx.manifest.config = {
        "rates": args.rates,
        "methods": args.methods,
        "examples": len(windows),
        "window": window,
        "rolling_window": args.rolling_window,
    }
    ctx.manifest.seeds = {"masks": args.seed}

    report = PerplexityReport()
    for method in args.methods:
        report.entries.extend(evaluate_rates(method, model, windows, args.rates, args.seed, **meta))
    if args.rolling_window:
        stream = corpus.windows.reshape(-1)
        report.entries.append(rolling_ppl(model.ar, stream, args.rolling_window, **meta))
        report.entries.append(rolling_ppl(model, stream, args.rolling_window, **meta))

    out = ctx.report_path(args.out, "perplexity.json")
    write_report(out, report)
    ctx.output(out)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    write_csv(csv_path, [e.model_dump() for e in report.entries])
    ctx.output(csv_path)
    ctx.emit(report.model_dump(mode="json"))


def cmd_bench(args: argparse.Namespace, ctx: RunContext) -> None:
    unknown = [m for m in args.methods if m not in INFILL_METHODS]
    if unknown:
        raise UsageError(f"未知的基准方法 {unknown}，可选: {', '.join(INFILL_METHODS)}")
    if ctx.settings.BENCH_THREADS != 1:
        logger.warning(f"[评估] BENCH_THREADS={ctx.settings.BENCH_THREADS}，计时可能不稳定")
    model = load_maria(*_maria_paths(args, ctx))
    ctx.manifest.config = {
        "methods": args.methods,
        "lengths": args.lengths,
        "mask_rate": args.mask_rate,
        "runs": args.runs,
        "warmups": args.warmups,
    }
    ctx.manifest.seeds = {"inputs": args.seed}
    report = throughput_bench(model, args.methods, args.lengths, args.mask_rate, args.runs, args.warmups, args.seed)
    out = ctx.report_path(args.out, "throughput.json")
    write_report(out, report)
    ctx.output(out)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    write_csv(
        csv_path,
        [p.model_dump(exclude={"wall_times_s"}) for p in report.points],
    )
    ctx.output(csv_path)
    ctx.emit({"fits": [f.model_dump() for f in report.fits], "points": len(report.points)})


def cmd_elo(args: argparse.Namespace, ctx: RunContext) -> None:
    records = load_records(ctx.input(args.records))
    table = bradley_terry(records, scale=args.scale, base=args.base, init=args.init, l2=args.l2)
    ctx.manifest.config = {"scale": args.scale, "base": args.base, "init": args.init, "l2": args.l2}
    out = ctx.report_path(args.out, "elo.json")
    write_report(out, table)
    ctx.output(out)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    write_csv(csv_path, [{"model": m, "rating": r} for m, r in sorted(table.ratings.items(), key=lambda kv: -kv[1])])
    ctx.output(csv_path)
    ctx.emit(table.model_dump(mode="json"))


def cmd_probe(args: argparse.Namespace, ctx: RunContext) -> None:
    s = ctx.settings
    mlm = load_checkpoint(ctx.input(args.mlm or s.default_checkpoint("mlm")), expected_kind="mlm")
    ar = None
    if "concat" in args.sources:
        ar = load_checkpoint(ctx.input(args.ar or s.default_checkpoint("ar")), expected_kind="ar")
    seq_len = args.seq_len or min(mlm.config.max_seq_len, 128)
    train = generate_tagging_data(args.train_seqs, seq_len, seed=args.seed)
    test = generate_tagging_data(args.test_seqs, seq_len, seed=args.seed + 1)
    ctx.manifest.config = {
        "sources": args.sources,
        "epochs": args.epochs,
        "lr": args.lr,
        "seq_len": seq_len,
        "train_seqs": args.train_seqs,
        "test_seqs": args.test_seqs,
    }
    ctx.manifest.seeds = {"train_data": args.seed, "test_data": args.seed + 1, "probe": args.seed}
    report = ProbeReport()
    for source in args.sources:
        if source not in ("mlm", "concat"):
            raise UsageError(f"未知的特征来源 {source!r}（mlm | concat）")
        report.results.append(probe_tagging(mlm, train, test, source, args.epochs, args.lr, args.seed, ar=ar))
    out = ctx.report_path(args.out, "probe.json")
    write_report(out, report)
    ctx.output(out)
    ctx.emit(report.model_dump(mode="json"))


def cmd_export_log(args: argparse.Namespace, ctx: RunContext) -> None:
    log = read_train_log(ctx.input(args.log), kind=args.kind)
    rows = train_log_rows(log)
    csv_path = Path(args.csv) if args.csv else Path(args.log).with_suffix(".csv")
    write_csv(csv_path, rows, columns=["step", "loss", "lr", "holdout", "wall_ms"])
    ctx.output(csv_path)
    if args.json:
        atomic_write_text(args.json, log.model_dump_json(indent=2) + "\n")
        ctx.output(args.json)
    ctx.emit({"entries": len(rows), "csv": str(csv_path), "holdout_points": len(log.holdout_curve())})


# ============== 参数定义 ==============

def _add_train_args(p: argparse.ArgumentParser, with_mask: bool) -> None:
    p.add_argument("--corpus", nargs="+", required=True, help="UTF-8 文本文件")
    p.add_argument("--config", help="TrainConfig JSON（命令行参数优先）")
    p.add_argument("--out", help="检查点路径（默认 $MARIA_MODEL_DIR/<kind>.ckpt）")
    p.add_argument("--log", help="TrainLog JSONL 路径（默认与检查点同名）")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--micro-batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--holdout-size", type=int)
    p.add_argument("--holdout-frac", type=float, default=0.01)
    p.add_argument("--holdout-min", type=int, default=100)
    p.add_argument("--prefetch", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--max-seq-len", type=int)
    if with_mask:
        p.add_argument("--mask-rate", type=float, help="固定训练掩码率（默认 Beta(2.5, 2.5)）")
        p.add_argument("--mask-mode", choices=[m.value for m in MaskMode])


def _add_maria_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ar", help="AR 检查点（默认 $MARIA_MODEL_DIR/ar.ckpt）")
    p.add_argument("--mlm", help="MLM 检查点（默认 $MARIA_MODEL_DIR/mlm.ckpt）")
    p.add_argument("--head", help="融合头检查点（默认 $MARIA_MODEL_DIR/fusion.ckpt）")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maria",
        description="MARIA：AR + MLM 隐藏状态融合的掩码填空",
        epilog="退出码: 0 成功, 1 未预期错误, 2 用法, 3 配置, 4 数据, 5 检查点完整性, 6 契约, 7 数值",
    )
    parser.add_argument("--version", action="version", version=f"maria {__version__}")
    parser.add_argument("--manifest", help="运行清单路径（默认 $MARIA_REPORT_DIR/manifests/<run_id>.json）")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ar", help="训练因果语言模型")
    _add_train_args(p, with_mask=False)
    p.set_defaults(handler=cmd_train_ar)

    p = sub.add_parser("train-mlm", help="训练掩码语言模型")
    _add_train_args(p, with_mask=True)
    p.set_defaults(handler=cmd_train_mlm)

    p = sub.add_parser("train-fusion", help="训练融合头（基础模型冻结）")
    _add_train_args(p, with_mask=True)
    p.add_argument("--ar")
    p.add_argument("--mlm")
    p.add_argument("--init", choices=[k.value for k in InitKind], default=InitKind.product.value)
    p.add_argument("--bias", action="store_true", help="附加零初始化的偏置")
    p.set_defaults(handler=cmd_train_fusion)

    p = sub.add_parser("infill", help="KV 缓存填空")
    _add_maria_args(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text")
    src.add_argument("--tokens", help="JSON 数组或逗号分隔的 token id")
    src.add_argument("--request", help="填空请求 JSON 文件 {tokens, mask, sampler}")
    how = p.add_mutually_exclusive_group()
    how.add_argument("--mask-rate", type=float)
    how.add_argument("--mask-words", type=float, help="按词掩码的比例")
    how.add_argument("--mask", help="逗号分隔的掩码位置")
    p.add_argument("--sampler", choices=[k.value for k in SamplerKind], default=SamplerKind.greedy.value)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--refresh-every", type=int, help="每 k 个位置重算一次 MLM 隐藏状态")
    p.add_argument("--compare-uncached", action="store_true", help="与非缓存实现逐 token 比对并报告加速比")
    p.add_argument("--out", help="响应 JSON 路径")
    p.set_defaults(handler=cmd_infill)

    p = sub.add_parser("sample-anneal", help="模拟退火无条件生成")
    _add_maria_args(p)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--remask", type=float, default=0.3)
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--scorer", help="打分用 AR 检查点（计算生成困惑度）")
    p.add_argument("--trace", help="轨迹 JSONL 路径")
    p.add_argument("--csv", help="逐轮平均生成困惑度 CSV")
    p.set_defaults(handler=cmd_sample_anneal)

    p = sub.add_parser("eval-ppl", help="掩码困惑度 / 滚动困惑度")
    _add_maria_args(p)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--rates", type=_csv_floats, default=[0.1, 0.3, 0.5, 0.7, 0.9])
    p.add_argument("--methods", type=_csv_names, default=list(PPL_METHODS))
    p.add_argument("--examples", type=int, help="抽样序列数（默认 EVAL_EXAMPLES）")
    p.add_argument("--window", type=int, help="序列长度（默认模型 max_seq_len）")
    p.add_argument("--rolling-window", type=int)
    p.add_argument("--dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(handler=cmd_eval_ppl)

    p = sub.add_parser("bench", help="吞吐基准")
    _add_maria_args(p)
    p.add_argument("--methods", type=_csv_names, default=list(INFILL_METHODS))
    p.add_argument("--lengths", type=_csv_ints, default=[64, 128, 256])
    p.add_argument("--mask-rate", type=float, default=0.5)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmups", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("elo", help="Bradley–Terry ELO")
    p.add_argument("records", help="比较记录 JSONL")
    p.add_argument("--scale", type=float, default=400.0)
    p.add_argument("--base", type=float, default=10.0)
    p.add_argument("--init", type=float, default=1000.0)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(handler=cmd_elo)

    p = sub.add_parser("probe", help="线性探针")
    p.add_argument("--ar")
    p.add_argument("--mlm")
    p.add_argument("--sources", type=_csv_names, default=["mlm", "concat"])
    p.add_argument("--train-seqs", type=int, default=200)
    p.add_argument("--test-seqs", type=int, default=50)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_probe)

    p = sub.add_parser("export-log", help="TrainLog JSONL 转 CSV / JSON")
    p.add_argument("log")
    p.add_argument("--kind", choices=["ar", "mlm", "fusion"], default="ar")
    p.add_argument("--csv")
    p.add_argument("--json")
    p.set_defaults(handler=cmd_export_log)
    return parser


# ============== 全局异常处理 ==============

def _write_manifest(ctx: RunContext, explicit: Optional[str]) -> None:
    path = Path(explicit) if explicit else ctx.settings.report_dir / "manifests" / f"{ctx.run_id}.json"
    try:
        atomic_write_text(path, ctx.manifest.model_dump_json(indent=2) + "\n")
    except OSError as e:
        logger.error(f"[{ctx.run_id}] 运行清单写入失败: {e}")


def main(argv: Optional[Sequence[str]] = None, stdout=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse：--help 为 0，参数错误为 2
        return int(e.code) if isinstance(e.code, int) else UsageError.exit_code

    try:
        settings = get_settings()
    except ValidationError as e:
        err = _validation_to_config_error(e)
        print(f"[配置] {err.message}", file=sys.stderr)
        return err.exit_code
    setup_logging(settings)

    run_id = str(uuid.uuid4())[:8]
    logger.configure(patcher=lambda record: record.update(message=f"[{run_id}] {record['message']}"))
    ctx = RunContext(
        run_id=run_id,
        settings=settings,
        manifest=RunManifest(
            run_id=run_id,
            subcommand=args.command,
            version=__version__,
            started_at=now_utc(),
        ),
        stdout=stdout or sys.stdout,
    )
    logger.info(f"maria {__version__} {args.command} 开始")

    try:
        args.handler(args, ctx)
        code = EXIT_OK
    except ValidationError as e:
        err = _validation_to_config_error(e)
        logger.error(f"{err.message}")
        ctx.manifest.error = err.to_dict()
        code = err.exit_code
    except MariaError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        if settings.DEBUG and e.detail:
            logger.error(f"detail: {e.detail}")
        code = e.exit_code
        ctx.manifest.error = e.to_dict()
    except Exception as e:
        logger.exception(f"未处理的异常: {e}")
        code = EXIT_UNEXPECTED
    finally:
        ctx.manifest.finished_at = now_utc()

    ctx.manifest.exit_code = code
    _write_manifest(ctx, args.manifest)
    logger.info(f"maria {args.command} 结束，退出码 {code}")
    logger.configure(patcher=lambda record: None)
    return code


if __name__ == "__main__":
    sys.exit(main())
