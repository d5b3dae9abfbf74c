"""功能区发现模块

把网格当作词、轨迹当作句子、每个区域的全部轨迹当作一篇文档，
用坍缩吉布斯采样的 LDA 主题模型为每个网格发现功能区标签。
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit
from scipy.optimize import linear_sum_assignment

from .citysynth import Dataset

logger = logging.getLogger(__name__)


@dataclass
class Corpus:
    """语料：每篇文档是一个区域的网格编号词袋"""

    documents: list[np.ndarray]
    vocab_size: int

    def __post_init__(self):
        for doc_id, tokens in enumerate(self.documents):
            if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
                raise ValueError(f"文档 {doc_id} 含有越界词: 词表大小 {self.vocab_size}")

    @property
    def num_tokens(self) -> int:
        return int(sum(doc.size for doc in self.documents))


@dataclass
class TopicModelState:
    """LDA 采样状态

    Attributes:
        words: 每个词元的网格编号
        docs: 每个词元所属文档
        assignments: 每个词元的主题
        doc_topic: 文档×主题计数
        topic_word: 主题×词计数
        topic_totals: 每个主题的词元数
    """

    words: np.ndarray
    docs: np.ndarray
    assignments: np.ndarray
    doc_topic: np.ndarray
    topic_word: np.ndarray
    topic_totals: np.ndarray
    alpha: float
    beta: float
    seed: int
    iterations: int = 0

    @property
    def num_topics(self) -> int:
        return int(self.topic_totals.shape[0])

    def recount(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        doc_topic = np.zeros_like(self.doc_topic)
        topic_word = np.zeros_like(self.topic_word)
        np.add.at(doc_topic, (self.docs, self.assignments), 1)
        np.add.at(topic_word, (self.assignments, self.words), 1)
        return doc_topic, topic_word, topic_word.sum(axis=1)

    def check_consistency(self) -> None:
        """重新计数并与维护的计数矩阵比对"""
        doc_topic, topic_word, totals = self.recount()
        if not (np.array_equal(doc_topic, self.doc_topic)
                and np.array_equal(topic_word, self.topic_word)
                and np.array_equal(totals, self.topic_totals)):
            raise RuntimeError(f"LDA 计数矩阵与主题分配不一致 (iteration={self.iterations})")


@njit(cache=False)
def _gibbs_sweep(words, docs, assignments, doc_topic, topic_word, topic_totals,
                 alpha, beta, vocab_size, uniforms):
    num_topics = topic_totals.shape[0]
    cumulative = np.empty(num_topics)
    for i in range(words.shape[0]):
        w = words[i]
        d = docs[i]
        k = assignments[i]
        doc_topic[d, k] -= 1
        topic_word[k, w] -= 1
        topic_totals[k] -= 1
        total = 0.0
        for t in range(num_topics):
            total += (doc_topic[d, t] + alpha) * (topic_word[t, w] + beta) / (topic_totals[t] + vocab_size * beta)
            cumulative[t] = total
        u = uniforms[i] * total
        k = 0
        while k < num_topics - 1 and cumulative[k] <= u:
            k += 1
        assignments[i] = k
        doc_topic[d, k] += 1
        topic_word[k, w] += 1
        topic_totals[k] += 1


def build_corpus(dataset: Dataset) -> Corpus:
    """每个区域的轨迹拼接成一篇文档"""
    vocab = dataset.grid_size * dataset.grid_size
    documents = [
        np.asarray([cell for trajectory in sample.trajectories for cell in trajectory], dtype=np.int64)
        for sample in dataset.samples
    ]
    return Corpus(documents=documents, vocab_size=vocab)


def fit_topics(corpus: Corpus, num_topics: int, alpha: float | None = None, beta: float = 0.01,
               iterations: int = 200, seed: int = 0) -> TopicModelState:
    """坍缩吉布斯采样拟合 LDA

    Args:
        corpus: 语料
        num_topics: 主题数 M
        alpha: 文档-主题先验，默认 50/M
        beta: 主题-词先验
        iterations: 采样轮数
        seed: 随机种子

    Returns:
        拟合后的采样状态；每轮之后都校验计数一致性
    """
    if num_topics < 1:
        raise ValueError(f"主题数必须 >= 1: {num_topics}")
    if iterations < 1:
        raise ValueError(f"迭代轮数必须 >= 1: {iterations}")
    if corpus.num_tokens == 0:
        raise ValueError("语料为空，无法拟合主题模型")
    alpha = 50.0 / num_topics if alpha is None else alpha

    words = np.concatenate(corpus.documents).astype(np.int64)
    docs = np.concatenate([np.full(doc.size, d, dtype=np.int64) for d, doc in enumerate(corpus.documents)])
    rng = np.random.default_rng(seed)
    assignments = rng.integers(0, num_topics, size=words.size).astype(np.int64)
    state = TopicModelState(
        words=words, docs=docs, assignments=assignments,
        doc_topic=np.zeros((len(corpus.documents), num_topics), dtype=np.int64),
        topic_word=np.zeros((num_topics, corpus.vocab_size), dtype=np.int64),
        topic_totals=np.zeros(num_topics, dtype=np.int64),
        alpha=float(alpha), beta=float(beta), seed=seed,
    )
    state.doc_topic, state.topic_word, state.topic_totals = state.recount()

    logger.info(f"开始拟合 LDA: {len(corpus.documents)} 篇文档, {words.size} 个词元, "
                f"M={num_topics}, alpha={alpha:.3f}, beta={beta}")
    for sweep in range(iterations):
        uniforms = rng.random(words.size)
        _gibbs_sweep(state.words, state.docs, state.assignments, state.doc_topic, state.topic_word,
                     state.topic_totals, state.alpha, state.beta, corpus.vocab_size, uniforms)
        state.iterations = sweep + 1
        state.check_consistency()
        if (sweep + 1) % 50 == 0:
            logger.debug(f"LDA 第 {sweep + 1}/{iterations} 轮完成")
    logger.info(f"LDA 拟合完成: {iterations} 轮")
    return state


def assign_zone_labels(state: TopicModelState, area_document: int, grid_size: int) -> np.ndarray:
    """为一个区域生成 N×N 功能区标签

    访问过的网格取该文档内其词元主题的众数（平局取最小主题）；
    未访问网格取曼哈顿距离最近的已访问网格标签（平局取最小网格编号）；
    整个区域都未访问时取全语料主题众数。
    """
    cells = grid_size * grid_size
    mask = state.docs == area_document
    votes = np.zeros((cells, state.num_topics), dtype=np.int64)
    np.add.at(votes, (state.words[mask], state.assignments[mask]), 1)
    visited = votes.sum(axis=1) > 0
    labels = np.full(cells, -1, dtype=np.int64)
    if not visited.any():
        labels[:] = int(np.argmax(state.topic_totals))
        return labels.reshape(grid_size, grid_size)
    labels[visited] = votes[visited].argmax(axis=1)

    visited_ids = np.flatnonzero(visited)
    vr, vc = np.divmod(visited_ids, grid_size)
    for cell in np.flatnonzero(~visited):
        r, c = divmod(int(cell), grid_size)
        distance = np.abs(vr - r) + np.abs(vc - c)
        nearest = visited_ids[int(np.argmin(distance))]
        labels[cell] = labels[nearest]
    return labels.reshape(grid_size, grid_size)


def discover_zones(dataset: Dataset, num_topics: int, alpha: float | None = None, beta: float = 0.01,
                   iterations: int = 200, seed: int = 0) -> tuple[list[np.ndarray], TopicModelState]:
    """对整个数据集拟合主题模型并返回每个样本的功能区规划"""
    corpus = build_corpus(dataset)
    state = fit_topics(corpus, num_topics, alpha=alpha, beta=beta, iterations=iterations, seed=seed)
    plans = [assign_zone_labels(state, doc, dataset.grid_size) for doc in range(len(dataset.samples))]
    return plans, state


def match_labels(predicted: np.ndarray, planted: np.ndarray, num_labels: int) -> float:
    """最佳标签置换下的一致率（匈牙利算法）"""
    predicted = np.asarray(predicted).reshape(-1)
    planted = np.asarray(planted).reshape(-1)
    if predicted.size == 0:
        return 1.0
    confusion = np.zeros((num_labels, num_labels), dtype=np.int64)
    np.add.at(confusion, (predicted, planted), 1)
    rows, cols = linear_sum_assignment(-confusion)
    return float(confusion[rows, cols].sum() / predicted.size)


def save_zone_plan(path: str | Path, plan: np.ndarray) -> None:
    """保存为 CSV：N 行，每行 N 个整数"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        csv.writer(f).writerows(np.asarray(plan, dtype=np.int64).tolist())


def load_zone_plan(path: str | Path, num_zones: int | None = None) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as f:
        rows = [[int(v) for v in row] for row in csv.reader(f) if row]
    plan = np.asarray(rows, dtype=np.int64)
    if plan.ndim != 2 or plan.shape[0] != plan.shape[1]:
        raise ValueError(f"功能区规划必须是 N×N 方阵: {path} 形状 {plan.shape}")
    if num_zones is not None and (plan.min() < 0 or plan.max() >= num_zones):
        raise ValueError(f"功能区标签超出 [0, {num_zones}): {path}")
    return plan


def save_zone_plans(directory: str | Path, plans: Sequence[np.ndarray]) -> list[Path]:
    directory = Path(directory)
    paths = []
    for index, plan in enumerate(plans):
        path = directory / f"zone_{index:05d}.csv"
        save_zone_plan(path, plan)
        paths.append(path)
    return paths


def load_zone_plans(directory: str | Path, count: int, num_zones: int) -> list[np.ndarray]:
    directory = Path(directory)
    return [load_zone_plan(directory / f"zone_{index:05d}.csv", num_zones) for index in range(count)]
