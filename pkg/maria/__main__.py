"""python -m maria"""
import sys

from maria.cli import main

sys.exit(main())
