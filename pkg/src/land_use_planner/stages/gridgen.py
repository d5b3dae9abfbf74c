"""网格级生成阶段

多头注意力捕捉功能区之间的依赖，前馈网络增强功能投影，
规划层 W_u·T̂·W_d + b 输出 N×N×C 的土地利用配置。用平方重建误差训练。
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..citysynth import SpatialAttributedGraph
from ..errors import NonFiniteError, NonFiniteLossError, StageMissingError
from ..numgrad import OptimizerState, ParamSet, Tensor, adam_step, glorot_uniform
from .ctxembed import GraphEncoder, encode_graph, fuse_condition, pad_condition
from .functionalizer import Functionalizer, fuse_plans
from .zonegan import ZoneGan, harden

logger = logging.getLogger(__name__)


class GridGenerator:
    """注意力、前馈与规划层参数

    Args:
        grid_size: N
        num_zones: M
        width: 条件宽度 O
        num_categories: C
        heads: 注意力头数 h
        full_width: True 时每个头宽度为 O（W_T 为 hO×O），否则为 O/h
    """

    def __init__(self, grid_size: int, num_zones: int, width: int, num_categories: int,
                 heads: int = 4, full_width: bool = False, seed: int = 0):
        if heads < 1:
            raise ValueError(f"注意力头数必须 >= 1: {heads}")
        if not full_width and width % heads != 0:
            raise ValueError(f"条件宽度 O={width} 不能被头数 h={heads} 整除")
        self.grid_size = grid_size
        self.num_zones = num_zones
        self.width = width
        self.num_categories = num_categories
        self.heads = heads
        self.full_width = full_width
        self.head_dim = width if full_width else width // heads
        inner = heads * self.head_dim

        rng = np.random.default_rng([seed, 3])
        self.params = ParamSet("grid")
        self.w_q = self.params.add("w_q", glorot_uniform(rng, width, inner))
        self.w_k = self.params.add("w_k", glorot_uniform(rng, width, inner))
        self.w_v = self.params.add("w_v", glorot_uniform(rng, width, inner))
        # 两个残差分支的输出投影从零开始，初始时注意力与前馈都是恒等映射
        self.w_t = self.params.add("w_t", np.zeros((inner, width)))
        self.w_1 = self.params.add("w_1", glorot_uniform(rng, width, width))
        self.w_2 = self.params.add("w_2", np.zeros((width, width)))
        self.w_u = self.params.add("w_u", glorot_uniform(rng, grid_size, num_zones))
        self.w_d = self.params.add("w_d", glorot_uniform(rng, width, grid_size * num_categories))
        self.b = self.params.add("b", np.zeros((grid_size, grid_size * num_categories)))

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, zones, _ = x.shape
        return x.reshape(batch, zones, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def attention(self, t: Tensor) -> tuple[Tensor, np.ndarray]:
        """t: (B, M, O) → (T′, 注意力权重 (B, h, M, M))"""
        q = self._split_heads(t @ self.w_q)
        k = self._split_heads(t @ self.w_k)
        v = self._split_heads(t @ self.w_v)
        weights = ((q @ k.swap_last()) / float(np.sqrt(self.head_dim))).softmax(axis=-1)
        heads = weights @ v
        batch, _, zones, _ = heads.shape
        merged = heads.transpose(0, 2, 1, 3).reshape(batch, zones, self.heads * self.head_dim)
        return t + merged @ self.w_t, weights.numpy()

    def ffn(self, t: Tensor) -> Tensor:
        return t + (t @ self.w_1).relu() @ self.w_2

    def planning(self, t: Tensor) -> Tensor:
        """(B, M, O) → (B, N, N, C)，尾轴按 列·C + 类别 排列"""
        out = self.w_u @ t @ self.w_d + self.b
        return out.reshape(out.shape[0], self.grid_size, self.grid_size, self.num_categories)


@dataclass
class GridStage:
    """功能化器与网格生成器；use_attention=False 时 T′ := T"""

    functionalizer: Functionalizer
    generator: GridGenerator
    use_attention: bool = True
    train_wa: bool = True

    def trainable(self) -> list:
        params = self.generator.params.parameters()
        if self.train_wa:
            params += self.functionalizer.params.parameters()
        return params

    def predict(self, fused: np.ndarray, z: np.ndarray) -> Tensor:
        """fused: (B, M, N)；z: (B, O) → X̃ (B, N, N, C)"""
        _, t = self.functionalizer.forward(fused, z)
        if self.use_attention:
            t, _ = self.generator.attention(t)
        return self.generator.planning(self.generator.ffn(t))

    def state(self) -> dict[str, np.ndarray]:
        return {**self.functionalizer.params.state(), **self.generator.params.state()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.functionalizer.params.load_state(state)
        self.generator.params.load_state(state)


def build_grid_stage(grid_size: int, num_zones: int, width: int, num_categories: int, *,
                     heads: int = 4, full_width: bool = False, use_attention: bool = True,
                     train_wa: bool = True, seed: int = 0) -> GridStage:
    return GridStage(
        functionalizer=Functionalizer(grid_size),
        generator=GridGenerator(grid_size, num_zones, width, num_categories, heads, full_width, seed),
        use_attention=use_attention,
        train_wa=train_wa,
    )


def multi_head_attention(t: np.ndarray, generator: GridGenerator) -> np.ndarray:
    """单个样本 (M, O) 的注意力增强"""
    out, _ = generator.attention(Tensor(np.asarray(t, dtype=np.float64)[None]))
    return out.numpy()[0]


def ffn(t: np.ndarray, generator: GridGenerator) -> np.ndarray:
    return generator.ffn(Tensor(np.asarray(t, dtype=np.float64)[None])).numpy()[0]


def planning_layers(t: np.ndarray, generator: GridGenerator) -> np.ndarray:
    return generator.planning(Tensor(np.asarray(t, dtype=np.float64)[None])).numpy()[0]


def reconstruction_loss(real: np.ndarray | Tensor, generated: np.ndarray | Tensor) -> Tensor:
    """Σ ‖X̂ − X̃‖²，对批次与全部 N·N·C 元素求和"""
    generated = generated if isinstance(generated, Tensor) else Tensor(generated)
    real_data = real.data if isinstance(real, Tensor) else np.asarray(real, dtype=np.float64)
    if real_data.shape != generated.shape:
        raise ValueError(f"重建损失形状不匹配: {real_data.shape} != {generated.shape}")
    return (generated - real_data).square().sum()


@dataclass
class GridHistory:
    """每轮训练集上的平均单样本 L_S；第 0 项为训练前"""

    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def write_loss_log(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "reconstruction_loss"])
            writer.writerows([epoch, repr(loss)] for epoch, loss in zip(self.epochs, self.losses))


def _mean_loss(stage: GridStage, fused: np.ndarray, conditions: np.ndarray, configs: np.ndarray,
               batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(configs), batch_size):
        sl = slice(start, start + batch_size)
        total += reconstruction_loss(configs[sl], stage.predict(fused[sl], conditions[sl])).item()
    return total / len(configs)


def train_grid_stage(conditions: np.ndarray, plans: np.ndarray, configs: np.ndarray, num_zones: int, *,
                     epochs: int, seed: int, lr: float = 1e-2, batch_size: int = 16, heads: int = 4,
                     full_width: bool = False, use_attention: bool = True,
                     train_wa: bool = True) -> tuple[GridStage, GridHistory]:
    """用真实功能区规划训练网格级阶段，不使用生成器的输出

    Args:
        conditions: (K, O) 条件嵌入 z
        plans: (K, N, N) 真实功能区规划
        configs: (K, N, N, C) 真实土地利用配置
        num_zones: M
        epochs: 训练轮数
        seed: 随机种子

    Returns:
        (训练好的网格阶段, 训练历史)
    """
    conditions = np.asarray(conditions, dtype=np.float64)
    configs = np.asarray(configs, dtype=np.float64)
    if len(configs) == 0 or not len(conditions) == len(plans) == len(configs):
        raise ValueError(f"条件 {len(conditions)}、规划 {len(plans)}、配置 {len(configs)} 数量不符或为空")
    _, grid_size, _, num_categories = configs.shape
    stage = build_grid_stage(grid_size, num_zones, conditions.shape[1], num_categories, heads=heads,
                             full_width=full_width, use_attention=use_attention, train_wa=train_wa,
                             seed=seed)
    fused = fuse_plans(plans, num_zones)
    rng = np.random.default_rng([seed, 41])
    state = OptimizerState(lr=lr)
    params = stage.trainable()
    history = GridHistory(epochs=[0], losses=[_mean_loss(stage, fused, conditions, configs, batch_size)])

    logger.info(f"开始训练网格级阶段: {len(configs)} 个样本, {epochs} 轮, h={heads}, "
                f"attention={'on' if use_attention else 'off'}")
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(configs))
        for step, start in enumerate(range(0, len(configs), batch_size)):
            idx = order[start:start + batch_size]
            for param in params:
                param.zero_grad()
            try:
                loss = reconstruction_loss(configs[idx], stage.predict(fused[idx], conditions[idx]))
            except NonFiniteError as e:
                raise NonFiniteLossError("grid", epoch, step, {"error": str(e)}) from e
            loss.backward()
            adam_step(state, params)
        history.epochs.append(epoch)
        history.losses.append(_mean_loss(stage, fused, conditions, configs, batch_size))
        logger.debug(f"网格阶段 epoch {epoch}: L_S={history.losses[-1]:.4f}")
    logger.info(f"网格级阶段训练完成: L_S {history.losses[0]:.4f} -> {history.losses[-1]:.4f}")
    return stage, history


@dataclass
class PlannerModel:
    """三个已训练阶段及生成时需要的条件设置"""

    encoder: GraphEncoder | None
    zone_gan: ZoneGan | None
    grid: GridStage | None
    width: int
    use_context: bool = True
    use_instruction: bool = True

    def require(self) -> None:
        for stage, value in (("encoder", self.encoder), ("zonegan", self.zone_gan), ("grid", self.grid)):
            if value is None:
                raise StageMissingError(stage, "生成之前需要先训练全部阶段")

    def condition(self, graph: SpatialAttributedGraph, instruction: int) -> np.ndarray:
        self.require()
        pooled = encode_graph(graph, self.encoder).pooled
        z = fuse_condition(pooled, instruction, use_context=self.use_context,
                           use_instruction=self.use_instruction)
        return pad_condition(z, self.width)


@dataclass
class GeneratedPlan:
    zone_plan: np.ndarray
    raw: np.ndarray
    configuration: np.ndarray


def generate_plan(instruction: int, graph: SpatialAttributedGraph, model: PlannerModel,
                  seed: int | Sequence[int]) -> GeneratedPlan:
    """端到端生成：z → c → 功能区规划 → 功能投影 → 土地利用配置

    Returns:
        硬功能区规划 (N, N)、原始输出 X̃ (N, N, C) 以及截断到非负的配置
    """
    z = model.condition(graph, instruction)
    rng = np.random.default_rng(seed)
    gan = model.zone_gan
    eta = rng.standard_normal((1, gan.generator.noise_dim))
    epsilon = rng.standard_normal((1, model.width))
    soft = gan.generator.forward(eta, gan.condition(z[None], epsilon)).numpy()
    zone_plan = harden(soft)[0]
    fused = fuse_plans(zone_plan[None], gan.generator.num_zones)
    raw = model.grid.predict(fused, z[None]).numpy()[0]
    return GeneratedPlan(zone_plan=zone_plan, raw=raw, configuration=np.clip(raw, 0.0, None))
