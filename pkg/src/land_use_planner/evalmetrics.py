"""评估指标模块

按绿化等级分组，比较原始配置与生成配置的类别分布，并按组样本数加权平均：
KL 散度、JS 散度、Hellinger 距离、余弦距离。
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cosine
from scipy.special import rel_entr

from .citysynth import LEVEL_NAMES, NUM_LEVELS, green_share

logger = logging.getLogger(__name__)

METRICS = ("KL", "JS", "HD", "Cos")
SMOOTHING = 1e-9
SIMPLEX_TOLERANCE = 1e-6


def category_distribution(configs: Sequence[np.ndarray]) -> np.ndarray:
    """所有网格、所有样本上的类别质量分布（负值先截断为 0，每类加 1e-9 平滑）"""
    if len(configs) == 0:
        raise ValueError("category_distribution 需要至少一个配置")
    totals = sum(np.clip(np.asarray(c, dtype=np.float64), 0.0, None).reshape(-1, np.shape(c)[-1]).sum(axis=0)
                 for c in configs)
    if totals.sum() <= 0:
        raise ValueError("配置总量为 0，无法构造类别分布")
    smoothed = totals + SMOOTHING
    return smoothed / smoothed.sum()


def _check_simplex(name: str, dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1 or np.any(dist < 0) or abs(dist.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise ValueError(f"{name} 不在概率单纯形上: sum={dist.sum() if dist.size else 0}")
    return dist


def divergence(kind: str, p: np.ndarray, q: np.ndarray) -> float:
    """两个类别分布之间的距离

    Args:
        kind: KL / JS / HD / Cos
        p: 原始分布
        q: 生成分布

    Returns:
        KL = Σ p ln(p/q)（q 加平滑）；JS 为到中点分布的平均 KL；
        HD = ‖√p − √q‖₂ / √2；Cos = 1 − 余弦相似度
    """
    p = _check_simplex("P", p)
    q = _check_simplex("Q", q)
    if p.shape != q.shape:
        raise ValueError(f"分布长度不一致: {p.shape} != {q.shape}")
    match kind:
        case "KL":
            q_smooth = (q + SMOOTHING) / (q + SMOOTHING).sum()
            return float(rel_entr(p, q_smooth).sum())
        case "JS":
            mid = 0.5 * (p + q)
            return float(0.5 * rel_entr(p, mid).sum() + 0.5 * rel_entr(q, mid).sum())
        case "HD":
            return float(np.linalg.norm(np.sqrt(p) - np.sqrt(q)) / np.sqrt(2.0))
        case "Cos":
            return float(np.clip(cosine(p, q), 0.0, 1.0))
        case _:
            raise ValueError(f"未知的距离类型: {kind}，可选 {METRICS}")


def avg_metric(kind: str, groups: Sequence[tuple[float, np.ndarray, np.ndarray]]) -> float:
    """Σ w_j·d(P_j, P̂_j) / Σ w_j；w_j 为 0 的组跳过"""
    weighted = 0.0
    total = 0.0
    for weight, p, q in groups:
        if weight <= 0:
            continue
        weighted += weight * divergence(kind, p, q)
        total += weight
    if total <= 0:
        raise ValueError("所有组的权重都为 0")
    return weighted / total


@dataclass
class GroupReport:
    """逐等级的距离与加权平均"""

    levels: list[dict] = field(default_factory=list)
    averages: dict[str, float] = field(default_factory=dict)
    green_share: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    def to_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["level", "w", *METRICS])
            for row in self.levels:
                writer.writerow([row["level"], row["w"], *(repr(row[m]) for m in METRICS)])
            writer.writerow(["average", sum(r["w"] for r in self.levels),
                             *(repr(self.averages[m]) for m in METRICS)])


def _group(configs: Sequence[np.ndarray], levels: Sequence[int]) -> dict[int, list[np.ndarray]]:
    grouped: dict[int, list[np.ndarray]] = {level: [] for level in range(NUM_LEVELS)}
    for config, level in zip(configs, levels):
        grouped[int(level)].append(config)
    return grouped


def group_report(originals: Sequence[np.ndarray], generated: Sequence[np.ndarray],
                 levels: Sequence[int], generated_levels: Sequence[int] | None = None) -> GroupReport:
    """按绿化等级分组计算四种距离

    Args:
        originals: 原始配置
        generated: 生成配置
        levels: 每个原始配置的绿化等级；权重 w 按原始配置计数
        generated_levels: 每个生成配置的等级；为空时 generated 与 originals 一一对应
    """
    if generated_levels is None:
        generated_levels = levels
    if len(originals) != len(levels) or len(generated) != len(generated_levels):
        raise ValueError(f"原始 {len(originals)}/等级 {len(levels)}、生成 {len(generated)}/等级 "
                         f"{len(generated_levels)} 数量不一致")
    real_groups = _group(originals, levels)
    fake_groups = _group(generated, generated_levels)
    report = GroupReport()
    included = []
    for level in range(NUM_LEVELS):
        weight = len(real_groups[level])
        if weight == 0:
            continue
        p = category_distribution(real_groups[level])
        q = category_distribution(fake_groups[level])
        included.append((weight, p, q))
        report.levels.append({"level": LEVEL_NAMES[level], "w": weight,
                              **{m: divergence(m, p, q) for m in METRICS}})
        report.green_share[LEVEL_NAMES[level]] = {"original": green_share(real_groups[level]),
                                                  "generated": green_share(fake_groups[level])}
    report.averages = {m: avg_metric(m, included) for m in METRICS}
    logger.info("评估完成: " + ", ".join(f"AVG_{m}={v:.5f}" for m, v in report.averages.items()))
    return report


def cross_group_matrix(kind: str, originals: Mapping[int, Sequence[np.ndarray]],
                       generated: Mapping[int, Sequence[np.ndarray]]) -> np.ndarray:
    """5×5 矩阵，(i, j) = d(P_i, P̂_j)；缺失的组为 NaN"""
    matrix = np.full((NUM_LEVELS, NUM_LEVELS), np.nan)
    for i in range(NUM_LEVELS):
        if not originals.get(i):
            continue
        p = category_distribution(originals[i])
        for j in range(NUM_LEVELS):
            if generated.get(j):
                matrix[i, j] = divergence(kind, p, category_distribution(generated[j]))
    return matrix
