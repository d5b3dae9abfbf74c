"""上下文嵌入阶段

两层图卷积（变分图自编码器）把周边区域的空间属性图编码为定长向量，
再与绿化等级的 one-hot 向量拼接得到条件嵌入 z。
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..citysynth import NUM_LEVELS, SpatialAttributedGraph
from ..errors import NonFiniteError, NonFiniteLossError
from ..numgrad import OptimizerState, ParamSet, Tensor, adam_step, diag_gaussian_kl, glorot_uniform

logger = logging.getLogger(__name__)


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """D^{-1/2} A D^{-1/2}（A 已含自环）"""
    degree = adjacency.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(degree)
    return adjacency * inv_sqrt[:, None] * inv_sqrt[None, :]


@dataclass
class GraphEncoding:
    node_mu: np.ndarray
    node_logvar: np.ndarray
    pooled: np.ndarray


class GraphEncoder:
    """两层 GCN 编码器，第二层输出均值与对数方差两个头"""

    def __init__(self, feature_dim: int, hidden_dim: int = 32, embed_dim: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.params = ParamSet("encoder")
        self.w_hidden = self.params.add("w_hidden", glorot_uniform(rng, feature_dim, hidden_dim))
        self.w_mu = self.params.add("w_mu", glorot_uniform(rng, hidden_dim, embed_dim))
        self.w_logvar = self.params.add("w_logvar", glorot_uniform(rng, hidden_dim, embed_dim))

    def forward(self, features: np.ndarray | Tensor, norm_adj: np.ndarray) -> tuple[Tensor, Tensor]:
        """features: (B, n, d) 或 (n, d)；norm_adj: (n, n) 或 (B, n, n)"""
        x = features if isinstance(features, Tensor) else Tensor(features)
        s = Tensor(norm_adj)
        hidden = (s @ (x @ self.w_hidden)).relu()
        propagated = s @ hidden
        return propagated @ self.w_mu, propagated @ self.w_logvar


def encode_graph(graph: SpatialAttributedGraph, encoder: GraphEncoder) -> GraphEncoding:
    """编码单个图

    Returns:
        节点均值、节点对数方差以及节点均值的平均池化
    """
    graph.validate()
    mu, logvar = encoder.forward(graph.features, normalized_adjacency(graph.adjacency))
    return GraphEncoding(node_mu=mu.numpy(), node_logvar=logvar.numpy(), pooled=mu.data.mean(axis=0))


def encode_graphs(graphs: Sequence[SpatialAttributedGraph], encoder: GraphEncoder) -> np.ndarray:
    """批量编码，返回 (B, d_g) 池化嵌入"""
    if not graphs:
        return np.zeros((0, encoder.embed_dim))
    features, adjs = _stack(graphs)
    mu, _ = encoder.forward(features, adjs)
    return mu.data.mean(axis=1)


def _stack(graphs: Sequence[SpatialAttributedGraph]) -> tuple[np.ndarray, np.ndarray]:
    for graph in graphs:
        graph.validate()
    features = np.stack([g.features for g in graphs])
    adjs = np.stack([normalized_adjacency(g.adjacency) for g in graphs])
    return features, adjs


def graph_vae_loss(encoder: GraphEncoder, features: np.ndarray, adjacency: np.ndarray,
                   norm_adj: np.ndarray, noise: np.ndarray) -> tuple[Tensor, Tensor]:
    """变分图自编码器损失

    重建项为内积解码器的二元交叉熵（按元素平均），KL 项按 1/n² 缩放。

    Returns:
        (总损失, 重建损失)
    """
    mu, logvar = encoder.forward(features, norm_adj)
    sigma = (logvar * 0.5).exp()
    latent = mu + sigma * noise
    logits = latent @ latent.swap_last()
    recon = (logits.softplus() - logits * adjacency).mean()
    nodes = adjacency.shape[-1]
    batch = features.shape[0] if features.ndim == 3 else 1
    kl = diag_gaussian_kl(mu, sigma) / float(nodes * nodes * batch)
    return recon + kl, recon


def reconstruction_loss(encoder: GraphEncoder, graphs: Sequence[SpatialAttributedGraph]) -> float:
    """用均值嵌入（无采样）计算的重建损失"""
    features, norm_adj = _stack(graphs)
    adjacency = np.stack([g.adjacency for g in graphs])
    noise = np.zeros((len(graphs), features.shape[1], encoder.embed_dim))
    _, recon = graph_vae_loss(encoder, features, adjacency, norm_adj, noise)
    return recon.item()


@dataclass
class EncoderHistory:
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    reconstructions: list[float] = field(default_factory=list)


def train_graph_encoder(graphs: Sequence[SpatialAttributedGraph], epochs: int, seed: int,
                        lr: float = 1e-2, batch_size: int = 64, hidden_dim: int = 32,
                        embed_dim: int = 16) -> tuple[GraphEncoder, EncoderHistory]:
    """无监督预训练图编码器

    Args:
        graphs: 训练图
        epochs: 训练轮数
        seed: 随机种子（决定初始化、批次顺序与重参数化噪声）
        lr: 学习率

    Returns:
        (训练好的编码器, 训练历史)
    """
    if not graphs:
        raise ValueError("至少需要一个图来训练编码器")
    encoder = GraphEncoder(graphs[0].features.shape[1], hidden_dim, embed_dim, seed=seed)
    features, norm_adj = _stack(graphs)
    adjacency = np.stack([g.adjacency for g in graphs])
    rng = np.random.default_rng([seed, 17])
    state = OptimizerState(lr=lr)
    history = EncoderHistory()
    params = encoder.params.parameters()

    logger.info(f"开始预训练图编码器: {len(graphs)} 个图, {epochs} 轮, d_g={embed_dim}")
    for epoch in range(epochs):
        order = rng.permutation(len(graphs))
        epoch_loss = 0.0
        epoch_recon = 0.0
        for step, start in enumerate(range(0, len(graphs), batch_size)):
            idx = order[start:start + batch_size]
            noise = rng.standard_normal((idx.size, features.shape[1], embed_dim))
            encoder.params.zero_grad()
            try:
                loss, recon = graph_vae_loss(encoder, features[idx], adjacency[idx], norm_adj[idx], noise)
            except NonFiniteError as e:
                raise NonFiniteLossError("encoder", epoch, step, {"error": str(e)}) from e
            loss.backward()
            adam_step(state, params)
            epoch_loss += loss.item() * idx.size
            epoch_recon += recon.item() * idx.size
        history.epochs.append(epoch)
        history.losses.append(epoch_loss / len(graphs))
        history.reconstructions.append(epoch_recon / len(graphs))
        logger.debug(f"编码器 epoch {epoch}: loss={history.losses[-1]:.5f}")
    if history.losses:
        logger.info(f"图编码器预训练完成: 最终 loss={history.losses[-1]:.5f}")
    return encoder, history


def condition_width(embed_dim: int, heads: int) -> int:
    """条件向量宽度 O：d_g + 5，向上补齐到注意力头数的倍数"""
    raw = embed_dim + NUM_LEVELS
    return int(np.ceil(raw / heads) * heads)


def fuse_condition(pooled: np.ndarray, level: int, *, use_context: bool = True,
                   use_instruction: bool = True) -> np.ndarray:
    """z = [pooled ‖ onehot5(level)]

    Args:
        pooled: 图嵌入 (d_g,)
        level: 绿化等级 0..4
        use_context: False 时图嵌入部分置零
        use_instruction: False 时 one-hot 部分置零

    Returns:
        长度 d_g + 5 的条件嵌入
    """
    if isinstance(level, bool) or int(level) != level or not 0 <= int(level) < NUM_LEVELS:
        raise ValueError(f"绿化等级必须是 0..{NUM_LEVELS - 1} 的整数: {level}")
    graph_part = np.asarray(pooled, dtype=np.float64).reshape(-1)
    if not use_context:
        graph_part = np.zeros_like(graph_part)
    onehot = np.zeros(NUM_LEVELS)
    if use_instruction:
        onehot[int(level)] = 1.0
    return np.concatenate([graph_part, onehot])


def pad_condition(z: np.ndarray, width: int) -> np.ndarray:
    """末尾补零到指定宽度"""
    z = np.asarray(z, dtype=np.float64)
    extra = width - z.shape[-1]
    if extra < 0:
        raise ValueError(f"条件向量宽度 {z.shape[-1]} 超过目标宽度 {width}")
    pad = [(0, 0)] * (z.ndim - 1) + [(0, extra)]
    return np.pad(z, pad)
