"""异常定义

规划器各阶段共用的异常类型。命令行入口按类型映射退出码。
"""


class PlannerError(Exception):
    """规划器异常基类"""


class NonFiniteError(PlannerError, ArithmeticError):
    """张量运算产生了 NaN 或 Inf"""


class NonFiniteLossError(PlannerError, RuntimeError):
    """训练过程中损失变为非有限值

    Attributes:
        stage: 出错的训练阶段
        epoch: 轮次
        step: 步数
        terms: 出错时的各损失项
    """

    def __init__(self, stage: str, epoch: int, step: int, terms: dict[str, float]):
        self.stage = stage
        self.epoch = epoch
        self.step = step
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v}" for k, v in self.terms.items())
        super().__init__(f"{stage} 阶段在 epoch={epoch} step={step} 出现非有限损失: {detail}")


class StageMissingError(PlannerError, RuntimeError):
    """缺少训练好的阶段或检查点"""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        message = f"缺少已训练的阶段: {stage}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class CheckpointFormatError(PlannerError, ValueError):
    """检查点文件格式错误"""


class UsageError(PlannerError):
    """命令行用法错误"""
