"""
初始化测试数据脚本
生成开发用的小语料（合成英文句子）与一份成对比较记录
运行: python scripts/init_test_data.py [输出目录] [--size-kb 1024]
"""
import argparse

# 添加父目录到路径
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np

from maria.data.reports import atomic_write_text, write_jsonl
from maria.evaluation.probe import tagging_text
from maria.schemas import ComparisonRecord

# 虚构的模型强弱：用于生成比较记录
SAMPLE_MODELS = {
    "maria": 0.9,
    "ar_rerank": 0.6,
    "mlm_ardecode": 0.3,
    "ar_only": 0.1,
}


def sample_comparisons(n_items: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    names = sorted(SAMPLE_MODELS)
    records = []
    for item in range(n_items):
        a, b = (str(x) for x in rng.choice(names, size=2, replace=False))
        pa = SAMPLE_MODELS[a] / (SAMPLE_MODELS[a] + SAMPLE_MODELS[b])
        u = rng.random()
        outcome = "tie" if abs(u - pa) < 0.05 else ("a" if u < pa else "b")
        records.append(ComparisonRecord(item=f"item{item:04d}", a=a, b=b, outcome=outcome))
    return records


def main():
    parser = argparse.ArgumentParser(description="生成开发用数据")
    parser.add_argument("out_dir", nargs="?", default="./data")
    parser.add_argument("--size-kb", type=int, default=1024)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out_dir)
    target = args.size_kb * 1024
    text = ""
    n = 1000
    while len(text.encode("utf-8")) < target:
        text = tagging_text(n, seed=args.seed)
        n *= 2
    text = text.encode("utf-8")[:target].decode("utf-8", errors="ignore")

    atomic_write_text(out / "train.txt", text)
    atomic_write_text(out / "eval.txt", tagging_text(2000, seed=args.seed + 1))
    write_jsonl(out / "comparisons.jsonl", sample_comparisons(400, args.seed))
    print(f"✓ 语料 {len(text)} 字节 -> {out / 'train.txt'}")
    print(f"✓ 评估语料 -> {out / 'eval.txt'}")
    print(f"✓ 比较记录 -> {out / 'comparisons.jsonl'}")


if __name__ == "__main__":
    print("初始化测试数据...")
    main()
    print("完成!")
