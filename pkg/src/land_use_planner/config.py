"""配置文件

运行配置与日志设置。配置来源优先级从低到高：
字段默认值 → key=value 配置文件 → 命令行 --set。
环境变量（可写在 .env 中）只有两个：LUP_CONFIG 指定配置文件，LUP_LOG_LEVEL 指定控制台日志级别；
配置字段本身不从环境变量读取。
"""

import logging
import logging.handlers
import os
import queue
from pathlib import Path
from typing import Any, Iterable

import coloredlogs
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .citysynth import NUM_CATEGORIES

logger = logging.getLogger(__name__)

ENV_CONFIG = "LUP_CONFIG"
ENV_LOG_LEVEL = "LUP_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class RunConfig(BaseModel):
    """一次运行的全部参数，未知键会被拒绝"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # 数据
    grid_size: int = Field(10, description="网格边长 N")
    num_zones: int = Field(4, description="功能区数 M")
    num_categories: int = Field(NUM_CATEGORIES, description="POI 类别数 C（固定为 20）")
    num_samples: int = Field(500, description="样本数 K")
    seed: int = Field(0, description="全局随机种子")
    intensity: float = Field(20.0, description="每格 POI 期望数")
    trajectory_count: int = Field(20, description="每个样本的轨迹数")
    trajectory_length: int = Field(10, description="轨迹长度")
    bin_edges: tuple[float, ...] = Field((), description="绿化等级边界；为空时取五分位数")
    test_fraction: float = Field(0.1, description="测试集比例")
    workers: int = Field(4, description="数据生成并行度")

    # 功能区发现
    lda_iterations: int = Field(200, description="吉布斯采样轮数")
    lda_alpha: float = Field(0.0, description="文档-主题先验；0 表示 50/M")
    lda_beta: float = Field(0.01, description="主题-词先验")

    # 模型结构
    embed_dim: int = Field(16, description="图嵌入宽度 d_g")
    encoder_hidden: int = Field(32, description="图编码器隐层宽度")
    heads: int = Field(4, description="注意力头数 h")
    kl_weight: float = Field(1.0, description="生成器损失中 KL 项权重 λ")
    noise_dim: int = Field(16, description="生成器噪声 η 的长度")
    gan_hidden: int = Field(128, description="生成器与判别器隐层宽度")
    ca_hidden: int = Field(0, description="条件增强隐层宽度；0 表示单层线性头")

    # 训练
    lr_encoder: float = Field(1e-2, description="图编码器学习率")
    lr_gan: float = Field(1e-3, description="功能区 GAN 学习率")
    lr_grid: float = Field(1e-2, description="网格级阶段学习率")
    epochs_encoder: int = Field(50, description="图编码器训练轮数")
    epochs_gan: int = Field(50, description="功能区 GAN 训练轮数")
    epochs_grid: int = Field(100, description="网格级阶段训练轮数")
    batch_encoder: int = Field(64, description="图编码器批大小")
    batch_gan: int = Field(32, description="功能区 GAN 批大小")
    batch_grid: int = Field(16, description="网格级阶段批大小")

    # 评估
    eval_draws: int = Field(4, description="评估时每个测试样本的生成抽样次数")

    # 消融与变体
    no_condaug: bool = Field(False, description="去掉条件增强（c := z）")
    no_attention: bool = Field(False, description="去掉多头注意力（T′ := T）")
    no_instruction: bool = Field(False, description="去掉人类指令输入")
    no_context: bool = Field(False, description="去掉周边区域上下文输入")
    non_saturating: bool = Field(False, description="生成器使用非饱和损失")
    attention_full_width: bool = Field(False, description="每个注意力头宽度为 O（W_T 为 hO×O）")
    train_wa: bool = Field(True, description="在网格级阶段训练 W_a")

    # 鲁棒性实验
    sweep_sizes: tuple[int, ...] = Field((5, 10, 25, 50, 100), description="鲁棒性实验的网格边长列表")
    sweep_samples: int = Field(40, description="鲁棒性实验每个 N 的样本数")
    sweep_epochs: int = Field(3, description="鲁棒性实验每个阶段的训练轮数")

    # 路径
    data_dir: str = Field("data", description="数据集与功能区规划目录")
    run_dir: str = Field("runs/default", description="检查点、日志、报告与生成结果目录")

    @field_validator("bin_edges", "sweep_sizes", mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return value

    @field_validator("grid_size")
    @classmethod
    def _check_grid(cls, value: int) -> int:
        if value < 2:
            raise ValueError(f"grid_size 必须 >= 2: {value}")
        return value

    @field_validator("num_categories")
    @classmethod
    def _check_categories(cls, value: int) -> int:
        if value != NUM_CATEGORIES:
            raise ValueError(f"num_categories 固定为 {NUM_CATEGORIES}: {value}")
        return value

    @field_validator("heads", "num_samples", "trajectory_count", "trajectory_length", "workers",
                     "lda_iterations", "embed_dim", "encoder_hidden", "noise_dim", "gan_hidden",
                     "batch_encoder", "batch_gan", "batch_grid", "eval_draws")
    @classmethod
    def _check_positive_int(cls, value: int, info) -> int:
        if value < 1:
            raise ValueError(f"{info.field_name} 必须 >= 1: {value}")
        return value

    @field_validator("epochs_encoder", "epochs_gan", "epochs_grid", "ca_hidden", "sweep_epochs")
    @classmethod
    def _check_nonnegative(cls, value: int, info) -> int:
        if value < 0:
            raise ValueError(f"{info.field_name} 必须 >= 0: {value}")
        return value

    @field_validator("lr_encoder", "lr_gan", "lr_grid", "intensity", "lda_beta")
    @classmethod
    def _check_positive_float(cls, value: float, info) -> float:
        if value <= 0:
            raise ValueError(f"{info.field_name} 必须为正: {value}")
        return value

    @field_validator("bin_edges")
    @classmethod
    def _check_edges(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if value and (len(value) != 4 or any(not 0 < e < 1 for e in value)
                      or any(a >= b for a, b in zip(value, value[1:]))):
            raise ValueError(f"bin_edges 必须是 (0, 1) 内严格递增的 4 个数: {value}")
        return value

    @field_validator("test_fraction")
    @classmethod
    def _check_fraction(cls, value: float) -> float:
        if not 0 < value < 1:
            raise ValueError(f"test_fraction 必须在 (0, 1) 内: {value}")
        return value

    @field_validator("sweep_sizes")
    @classmethod
    def _check_sizes(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(n < 2 for n in value):
            raise ValueError(f"sweep_sizes 中的 N 必须 >= 2: {value}")
        return value

    @model_validator(mode="after")
    def _check_zones(self) -> "RunConfig":
        if not 1 <= self.num_zones <= self.grid_size * self.grid_size:
            raise ValueError(f"num_zones 必须在 [1, N²] 内: {self.num_zones}")
        return self

    # ------------------------------------------------------------------
    # 派生路径
    # ------------------------------------------------------------------
    @property
    def dataset_path(self) -> Path:
        return Path(self.data_dir) / "dataset.jsonl"

    @property
    def zones_dir(self) -> Path:
        return Path(self.data_dir) / "zones"

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.run_dir) / "checkpoints"

    @property
    def report_dir(self) -> Path:
        return Path(self.run_dir) / "reports"

    @property
    def plan_dir(self) -> Path:
        return Path(self.run_dir) / "plans"


def parse_assignments(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    """解析 key=value 行；# 开头为注释，空行忽略"""
    values: dict[str, str] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{number}: 缺少 '=': {line}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """按优先级合并各来源并校验

    Args:
        path: 配置文件路径；为空时读取环境变量 LUP_CONFIG
        overrides: 命令行 --set 的 key=value 列表
    """
    load_dotenv(os.path.join(os.getcwd(), ".env"))
    path = path or os.getenv(ENV_CONFIG)
    values: dict[str, str] = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            values.update(parse_assignments(f, str(path)))
        logger.debug(f"读取配置文件: {path}")
    values.update(parse_assignments(overrides, "--set"))
    return RunConfig.model_validate(values)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: RunConfig) -> str:
    """规范形式：每行一个 key=value，键按字母序"""
    data = config.model_dump()
    return "".join(f"{key}={_format_value(data[key])}\n" for key in sorted(data))


def save_config(path: str | Path, config: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")


def setup_logging(level: str | None = None, log_file: str | Path | None = None) -> logging.handlers.QueueListener:
    """控制台彩色输出；文件日志经队列异步写出

    Returns:
        已启动的队列监听器，调用方结束时负责 stop()
    """
    level = (level or os.getenv(ENV_LOG_LEVEL) or "INFO").upper()
    root = logging.getLogger()
    for handler in [h for h in root.handlers if isinstance(h, logging.handlers.QueueHandler)]:
        root.removeHandler(handler)

    handlers: list[logging.Handler] = []
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.append(file_handler)
    log_queue: queue.Queue = queue.Queue()
    listener = logging.handlers.QueueListener(log_queue, *handlers)
    root.addHandler(logging.handlers.QueueHandler(log_queue))
    coloredlogs.install(level=level, fmt=LOG_FORMAT)
    listener.start()

    # 减少第三方库的噪音
    logging.getLogger("numba").setLevel(logging.WARNING)
    logging.getLogger("asyncio").setLevel(logging.WARNING)
    return listener
