"""条件增强阶段

估计条件嵌入 z 上的对角高斯分布，并用重参数化采样增强嵌入 c = μ(z) + δ(z) ⊙ ε。
"""

import logging

import numpy as np

from ..numgrad import ParamSet, Tensor, diag_gaussian_kl, glorot_uniform

logger = logging.getLogger(__name__)


class ConditioningAugmentor:
    """均值与对数方差两个线性头；hidden_dim > 0 时先经过共享的 ReLU 隐层"""

    def __init__(self, width: int, hidden_dim: int = 0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.width = width
        self.hidden_dim = hidden_dim
        self.params = ParamSet("condaug")
        head_in = width
        if hidden_dim > 0:
            self.w_hidden = self.params.add("w_hidden", glorot_uniform(rng, width, hidden_dim))
            self.b_hidden = self.params.add("b_hidden", np.zeros(hidden_dim))
            head_in = hidden_dim
        # 无隐层时均值头从恒等映射开始
        w_mu = np.eye(width) if hidden_dim <= 0 else glorot_uniform(rng, head_in, width)
        self.w_mu = self.params.add("w_mu", w_mu)
        self.b_mu = self.params.add("b_mu", np.zeros(width))
        self.w_logvar = self.params.add("w_logvar", 0.1 * glorot_uniform(rng, head_in, width))
        self.b_logvar = self.params.add("b_logvar", np.full(width, -2.0))

    def distribution(self, z: np.ndarray | Tensor) -> tuple[Tensor, Tensor]:
        """返回 (μ(z), logvar(z))，z 可为 (O,) 或 (B, O)"""
        x = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
        if self.hidden_dim > 0:
            x = (x @ self.w_hidden + self.b_hidden).relu()
        return x @ self.w_mu + self.b_mu, x @ self.w_logvar + self.b_logvar

    def sigma(self, z: np.ndarray | Tensor) -> Tensor:
        _, logvar = self.distribution(z)
        return (logvar * 0.5).exp()

    def augment_tensor(self, z: np.ndarray | Tensor, epsilon: np.ndarray) -> Tensor:
        mu, logvar = self.distribution(z)
        return mu + (logvar * 0.5).exp() * np.atleast_2d(epsilon)

    def kl_tensor(self, z: np.ndarray | Tensor) -> Tensor:
        mu, logvar = self.distribution(z)
        return diag_gaussian_kl(mu, (logvar * 0.5).exp())


def augment(z: np.ndarray, epsilon: np.ndarray, augmentor: ConditioningAugmentor) -> np.ndarray:
    """c = μ(z) + δ(z) ⊙ ε，输入输出形状一致"""
    z = np.asarray(z, dtype=np.float64)
    out = augmentor.augment_tensor(z, np.asarray(epsilon, dtype=np.float64)).numpy()
    return out.reshape(z.shape)


def kl_penalty(z: np.ndarray, augmentor: ConditioningAugmentor) -> float:
    """KL[N(μ(z), δ(z)) || N(0, 1)]，批量输入时对样本求和"""
    return augmentor.kl_tensor(np.asarray(z, dtype=np.float64)).item()
