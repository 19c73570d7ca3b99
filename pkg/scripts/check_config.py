#!/usr/bin/env python
"""
检查配置是否正确加载
运行: python scripts/check_config.py
"""
import os
import sys
from pathlib import Path

# 添加项目根目录到路径
sys.path.insert(0, str(Path(__file__).parent.parent))

from maria.config import get_settings


def main():
    settings = get_settings()

    print("=" * 50)
    print("[Config Check]")
    print("=" * 50)

    print("\n[Paths]:")
    print(f"  - MARIA_MODEL_DIR: {settings.MARIA_MODEL_DIR}")
    for kind in ("ar", "mlm", "fusion"):
        ckpt = settings.default_checkpoint(kind)
        status = "[OK]" if ckpt.is_file() else "[MISSING]"
        print(f"      {kind}: {ckpt} {status}")
    print(f"  - MARIA_REPORT_DIR: {settings.MARIA_REPORT_DIR}")

    print("\n[Logging]:")
    print(f"  - LOG_DIR: {settings.LOG_DIR}")
    print(f"  - LOG_LEVEL: {settings.LOG_LEVEL}")
    print(f"  - LOG_TO_FILE: {settings.LOG_TO_FILE}")

    print("\n[Evaluation]:")
    print(f"  - DEFAULT_SEED: {settings.DEFAULT_SEED}")
    print(f"  - EVAL_EXAMPLES: {settings.EVAL_EXAMPLES}")
    print(f"  - BENCH_THREADS: {settings.BENCH_THREADS}")
    omp = os.environ.get("OMP_NUM_THREADS")
    if omp is None:
        print("  - OMP_NUM_THREADS: [NOT SET] (benchmark timings may be noisy)")
    else:
        print(f"  - OMP_NUM_THREADS: {omp}")

    print(f"\n[Mode]: DEBUG={settings.DEBUG}")
    print("\n" + "=" * 50)
    print("[Done]")
    print("=" * 50)


if __name__ == "__main__":
    main()
