"""功能化阶段

把功能区规划切分为 M 个成员掩码，按区域比例把条件嵌入投影成每个功能区的功能向量：
T = Softmax(AVG_Fusion(F)·W_a)·z
"""

from dataclasses import dataclass

import numpy as np

from ..numgrad import ParamSet, Tensor


@dataclass
class FunctionalityProjections:
    proportions: np.ndarray
    projections: np.ndarray


class Functionalizer:
    """唯一的可训练参数是 W_a (N×1)，在网格级阶段一起训练"""

    def __init__(self, grid_size: int):
        self.grid_size = grid_size
        self.params = ParamSet("functionalizer")
        self.w_a = self.params.add("w_a", np.zeros((grid_size, 1)))

    def forward(self, fused: np.ndarray, z: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
        """fused: (B, M, N)；z: (B, O) → (p: (B, M), T: (B, M, O))"""
        scores = Tensor(fused) @ self.w_a
        p = scores.reshape(scores.shape[0], scores.shape[1]).softmax(axis=-1)
        z = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
        t = p.reshape(p.shape[0], p.shape[1], 1) * z.reshape(z.shape[0], 1, z.shape[1])
        return p, t


def partition_zones(plan: np.ndarray, num_zones: int) -> np.ndarray:
    """N×N 标签 → M×N×N 0/1 掩码；规划中缺失的功能区得到全零掩码"""
    plan = np.asarray(plan, dtype=np.int64)
    if plan.size and (plan.min() < 0 or plan.max() >= num_zones):
        raise ValueError(f"功能区标签超出 [0, {num_zones}): min={plan.min()}, max={plan.max()}")
    return (plan[None, ...] == np.arange(num_zones)[:, None, None]).astype(np.float64)


def avg_fusion(masks: np.ndarray) -> np.ndarray:
    """沿第一个空间轴（行）取平均：(…, M, N, N) → (…, M, N)"""
    return np.asarray(masks, dtype=np.float64).mean(axis=-2)


def project(masks: np.ndarray, z: np.ndarray, w_a: np.ndarray) -> FunctionalityProjections:
    """单个样本的功能投影"""
    fused = avg_fusion(masks)
    scores = fused @ np.asarray(w_a, dtype=np.float64).reshape(-1)
    p = Tensor(scores).softmax().numpy()
    return FunctionalityProjections(proportions=p, projections=np.outer(p, np.asarray(z, dtype=np.float64)))


def fuse_plans(plans: np.ndarray, num_zones: int) -> np.ndarray:
    """(B, N, N) 规划 → (B, M, N) 融合特征"""
    return np.stack([avg_fusion(partition_zones(plan, num_zones)) for plan in plans])
