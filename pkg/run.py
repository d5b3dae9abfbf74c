"""
运行脚本
用于启动城市土地利用规划流水线
"""

import sys

from src.land_use_planner.cli import main

if __name__ == "__main__":
    sys.exit(main())
