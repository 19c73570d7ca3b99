"""
命令行启动脚本
用法: python run.py <子命令> [参数]，等价于 python -m maria
"""
import sys

from maria.cli import main

if __name__ == "__main__":
    sys.exit(main())
