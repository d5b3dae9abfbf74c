"""
land-use-planner
按人类指令（绿化等级）与周边地理环境，先生成功能区级规划，再细化为网格级土地利用配置
"""

__version__ = "0.1.0"
