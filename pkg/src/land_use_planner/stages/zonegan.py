"""功能区级生成阶段

条件生成对抗网络：生成器 G(η, c) 输出每个网格在 M 个功能区标签上的概率单纯形，
判别器 D(plan, z) 判断 (规划, 条件) 是否来自真实数据。两者交替优化。
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import rel_entr

from ..errors import NonFiniteError, NonFiniteLossError
from ..numgrad import OptimizerState, ParamSet, Tensor, adam_step, concat, glorot_uniform
from .condaug import ConditioningAugmentor

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-7
LABEL_SMOOTHING = 1e-6


class _MLP:
    """两层 ReLU 隐层加线性输出"""

    def __init__(self, params: ParamSet, rng: np.random.Generator, sizes: list[int]):
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = params.add(f"w{i}", glorot_uniform(rng, fan_in, fan_out))
            b = params.add(f"b{i}", np.zeros(fan_out))
            self.layers.append((w, b))

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class ZoneGenerator:
    def __init__(self, grid_size: int, num_zones: int, cond_width: int, noise_dim: int = 16,
                 hidden_dim: int = 128, seed: int = 0):
        self.grid_size = grid_size
        self.num_zones = num_zones
        self.cond_width = cond_width
        self.noise_dim = noise_dim
        self.params = ParamSet("generator")
        rng = np.random.default_rng([seed, 1])
        self.net = _MLP(self.params, rng, [noise_dim + cond_width, hidden_dim, hidden_dim,
                                           grid_size * grid_size * num_zones])

    def forward(self, eta: np.ndarray, c: Tensor | np.ndarray) -> Tensor:
        """返回 (B, N, N, M) 软规划"""
        c = c if isinstance(c, Tensor) else Tensor(np.atleast_2d(c))
        x = concat([Tensor(np.atleast_2d(eta)), c], axis=-1)
        logits = self.net(x)
        n = self.grid_size
        return logits.reshape(logits.shape[0], n, n, self.num_zones).softmax(axis=-1)


class ZoneDiscriminator:
    def __init__(self, grid_size: int, num_zones: int, cond_width: int, hidden_dim: int = 128,
                 seed: int = 0):
        self.grid_size = grid_size
        self.num_zones = num_zones
        self.params = ParamSet("discriminator")
        rng = np.random.default_rng([seed, 2])
        self.net = _MLP(self.params, rng, [grid_size * grid_size * num_zones + cond_width,
                                           hidden_dim, hidden_dim, 1])

    def forward(self, plan: Tensor | np.ndarray, z: np.ndarray) -> Tensor:
        """返回 (B,) 的 (0, 1) 得分"""
        plan = plan if isinstance(plan, Tensor) else Tensor(plan)
        if plan.ndim == 3:
            plan = plan.reshape(1, *plan.shape)
        flat = plan.reshape(plan.shape[0], -1)
        x = concat([flat, Tensor(np.atleast_2d(z))], axis=-1)
        return self.net(x).reshape(plan.shape[0]).sigmoid()


@dataclass
class ZoneGan:
    """功能区 GAN 的全部参数；use_condaug=False 时 c := z"""

    generator: ZoneGenerator
    discriminator: ZoneDiscriminator
    augmentor: ConditioningAugmentor
    use_condaug: bool = True

    def generator_params(self) -> list:
        params = self.generator.params.parameters()
        if self.use_condaug:
            params += self.augmentor.params.parameters()
        return params

    def condition(self, z: np.ndarray, epsilon: np.ndarray) -> Tensor:
        if not self.use_condaug:
            return Tensor(np.atleast_2d(z))
        return self.augmentor.augment_tensor(z, epsilon)

    def state(self) -> dict[str, np.ndarray]:
        return {**self.generator.params.state(), **self.discriminator.params.state(),
                **self.augmentor.params.state()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.generator.params.load_state(state)
        self.discriminator.params.load_state(state)
        self.augmentor.params.load_state(state)


def build_zone_gan(grid_size: int, num_zones: int, cond_width: int, *, noise_dim: int = 16,
                   hidden_dim: int = 128, ca_hidden: int = 0, use_condaug: bool = True,
                   seed: int = 0) -> ZoneGan:
    return ZoneGan(
        generator=ZoneGenerator(grid_size, num_zones, cond_width, noise_dim, hidden_dim, seed),
        discriminator=ZoneDiscriminator(grid_size, num_zones, cond_width, hidden_dim, seed),
        augmentor=ConditioningAugmentor(cond_width, ca_hidden, seed),
        use_condaug=use_condaug,
    )


def generate_zones(eta: np.ndarray, c: np.ndarray, generator: ZoneGenerator) -> np.ndarray:
    """软功能区规划；单个输入返回 (N, N, M)，批量返回 (B, N, N, M)"""
    soft = generator.forward(eta, c).numpy()
    return soft[0] if np.ndim(c) == 1 else soft


def harden(soft: np.ndarray) -> np.ndarray:
    """逐网格取 argmax（平局取最小标签）"""
    return np.argmax(soft, axis=-1).astype(np.int64)


def discriminate(plan: np.ndarray, z: np.ndarray, discriminator: ZoneDiscriminator) -> float | np.ndarray:
    scores = discriminator.forward(plan, z).numpy()
    return float(scores[0]) if np.ndim(plan) == 3 else scores


def one_hot_plans(plans: np.ndarray, num_zones: int) -> np.ndarray:
    """(B, N, N) 整数标签 → (B, N, N, M) one-hot"""
    plans = np.asarray(plans, dtype=np.int64)
    if plans.size and (plans.min() < 0 or plans.max() >= num_zones):
        raise ValueError(f"功能区标签超出 [0, {num_zones})")
    return np.eye(num_zones)[plans]


def _clamped(score: Tensor) -> Tensor:
    return score.clip(LOG_CLAMP, 1.0 - LOG_CLAMP)


def generator_loss(gan: ZoneGan, z: np.ndarray, eta: np.ndarray, epsilon: np.ndarray,
                   kl_weight: float = 1.0, non_saturating: bool = False) -> tuple[Tensor, Tensor]:
    """生成器目标（最小化）

    Σ_k log(1 − D(G(η, c), z)) + λ·KL；non_saturating 时对抗项换为 −Σ_k log D(G(η, c), z)。

    Returns:
        (总损失, KL 项)
    """
    z = np.atleast_2d(z)
    c = gan.condition(z, epsilon)
    fake = gan.generator.forward(eta, c)
    score = _clamped(gan.discriminator.forward(fake, z))
    if non_saturating:
        adversarial = -(score.log().sum())
    else:
        adversarial = (1.0 - score).log().sum()
    if not gan.use_condaug:
        return adversarial, Tensor(0.0)
    kl = gan.augmentor.kl_tensor(z)
    return adversarial + kl * kl_weight, kl


def discriminator_loss(gan: ZoneGan, z: np.ndarray, eta: np.ndarray, epsilon: np.ndarray,
                       real_plans: np.ndarray) -> Tensor:
    """判别器目标（最大化），生成器输出视为常量

    Σ_k [log(1 − D(G(η, c), z)) + log D(U, z)]

    Args:
        real_plans: (B, N, N, M) one-hot 真实规划
    """
    z = np.atleast_2d(z)
    fake = gan.generator.forward(eta, gan.condition(z, epsilon)).detach()
    fake_score = _clamped(gan.discriminator.forward(fake, z))
    real_score = _clamped(gan.discriminator.forward(real_plans, z))
    return (1.0 - fake_score).log().sum() + real_score.log().sum()


def label_distribution_kl(real_plans: np.ndarray, soft_plans: np.ndarray) -> float:
    """逐网格标签分布 KL(真实 ‖ 生成) 的网格平均

    Args:
        real_plans: (B, N, N, M) one-hot
        soft_plans: (B', N, N, M) 生成的软规划
    """
    p = real_plans.mean(axis=0) + LABEL_SMOOTHING
    q = soft_plans.mean(axis=0) + LABEL_SMOOTHING
    p /= p.sum(axis=-1, keepdims=True)
    q /= q.sum(axis=-1, keepdims=True)
    return float(rel_entr(p, q).sum(axis=-1).mean())


@dataclass
class ZoneGanHistory:
    """逐步损失与逐轮诊断；诊断第 0 项是训练前的状态"""

    steps: list[dict[str, float]] = field(default_factory=list)
    diagnostics: list[dict[str, float]] = field(default_factory=list)

    def write_loss_log(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "generator_loss", "discriminator_loss", "kl"])
            writer.writeheader()
            for row in self.steps:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _diagnose(gan: ZoneGan, epoch: int, z: np.ndarray, real: np.ndarray, eta: np.ndarray,
              epsilon: np.ndarray) -> dict[str, float]:
    soft = gan.generator.forward(eta, gan.condition(z, epsilon)).numpy()
    return {
        "epoch": epoch,
        "d_real": float(gan.discriminator.forward(real, z).data.mean()),
        "d_fake": float(gan.discriminator.forward(soft, z).data.mean()),
        "label_kl": label_distribution_kl(real, soft),
    }


def train_zone_gan(conditions: np.ndarray, plans: np.ndarray, num_zones: int, *, epochs: int,
                   seed: int, lr: float = 1e-3, batch_size: int = 32, kl_weight: float = 1.0,
                   noise_dim: int = 16, hidden_dim: int = 128, ca_hidden: int = 0,
                   use_condaug: bool = True, non_saturating: bool = False) -> tuple[ZoneGan, ZoneGanHistory]:
    """交替训练判别器与生成器

    每步先做一次判别器上升，再做一次生成器下降；生成器一步同时更新条件增强参数。

    Args:
        conditions: (K, O) 条件嵌入 z
        plans: (K, N, N) 真实功能区规划
        num_zones: 功能区数 M
        epochs: 训练轮数
        seed: 随机种子

    Returns:
        (训练好的 GAN, 训练历史)
    """
    conditions = np.asarray(conditions, dtype=np.float64)
    if conditions.shape[0] == 0 or conditions.shape[0] != len(plans):
        raise ValueError(f"条件数 {conditions.shape[0]} 与规划数 {len(plans)} 不符或为空")
    real_all = one_hot_plans(plans, num_zones)
    grid_size = real_all.shape[1]
    width = conditions.shape[1]
    gan = build_zone_gan(grid_size, num_zones, width, noise_dim=noise_dim, hidden_dim=hidden_dim,
                         ca_hidden=ca_hidden, use_condaug=use_condaug, seed=seed)
    rng = np.random.default_rng([seed, 31])
    diag_rng = np.random.default_rng([seed, 37])
    diag_eta = diag_rng.standard_normal((len(plans), noise_dim))
    diag_eps = diag_rng.standard_normal((len(plans), width))

    d_state = OptimizerState(lr=lr, beta1=0.5)
    g_state = OptimizerState(lr=lr, beta1=0.5)
    d_params = gan.discriminator.params.parameters()
    g_params = gan.generator_params()
    history = ZoneGanHistory()
    history.diagnostics.append(_diagnose(gan, 0, conditions, real_all, diag_eta, diag_eps))

    logger.info(f"开始训练功能区 GAN: {len(plans)} 个样本, {epochs} 轮, M={num_zones}, "
                f"condaug={'on' if use_condaug else 'off'}")
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(plans))
        for start in range(0, len(plans), batch_size):
            idx = order[start:start + batch_size]
            z = conditions[idx]
            eta = rng.standard_normal((idx.size, noise_dim))
            eps = rng.standard_normal((idx.size, width))
            try:
                gan.discriminator.params.zero_grad()
                d_objective = discriminator_loss(gan, z, eta, eps, real_all[idx])
                (-d_objective).backward()
                adam_step(d_state, d_params)

                for param in g_params:
                    param.zero_grad()
                g_loss, kl = generator_loss(gan, z, eta, eps, kl_weight, non_saturating)
                g_loss.backward()
                adam_step(g_state, g_params)
            except NonFiniteError as e:
                raise NonFiniteLossError("zonegan", epoch, step, {"error": str(e)}) from e
            history.steps.append({"step": step, "generator_loss": g_loss.item(),
                                  "discriminator_loss": d_objective.item(), "kl": kl.item()})
            step += 1
        history.diagnostics.append(_diagnose(gan, epoch, conditions, real_all, diag_eta, diag_eps))
        last = history.diagnostics[-1]
        logger.debug(f"GAN epoch {epoch}: D(real)={last['d_real']:.3f} D(fake)={last['d_fake']:.3f} "
                     f"label_kl={last['label_kl']:.4f}")
    logger.info(f"功能区 GAN 训练完成: 共 {step} 步")
    return gan, history
