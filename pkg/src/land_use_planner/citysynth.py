"""合成城市数据模块

用带种子的随机过程生成城市样本（POI 网格、轨迹、周边区域特征、绿化率指令），
替代无法获取的真实城市数据。每个样本从 (seed, index) 派生独立随机流，
因此并行生成与顺序生成结果完全一致。
"""

import asyncio
import bisect
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

logger = logging.getLogger(__name__)

POI_CATEGORIES: tuple[str, ...] = (
    "road", "car service", "car repair", "motorbike service", "food service",
    "shopping", "daily life service", "recreation service", "medical service", "lodging",
    "tourist attraction", "real estate", "government place", "education", "transportation",
    "finance", "company", "road furniture", "specific address", "public service",
)
NUM_CATEGORIES = len(POI_CATEGORIES)
NUM_LEVELS = 5
LEVEL_NAMES: tuple[str, ...] = tuple(f"Green{level}" for level in range(NUM_LEVELS))

GREEN_CATEGORIES = (7, 10)
BUSINESS_CATEGORIES = (15, 16)
TRANSPORT_CATEGORIES = (0, 1, 14)
CONSUMER_CATEGORIES = (4, 5, 6, 7)
PRICE_CATEGORIES = (7, 10, 11)

CONTEXT_COUNT = 8
FEATURE_DIM = 4
FEATURE_NAMES = ("traffic_volume", "checkin_count", "price_index", "poi_density")
# 3×3 布局中 8 个周边区域相对目标区域的位置（行偏移, 列偏移），从左上角顺时针
RING_OFFSETS: tuple[tuple[int, int], ...] = (
    (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1),
)
DEFAULT_BIN_EDGES = (0.2, 0.4, 0.6, 0.8)

# 数据集级随机流编号，与样本编号错开
_ARCHETYPE_STREAM = 1_000_003
_SPLIT_STREAM = 1_000_033

GREEN_MIX = 0.5
BUSINESS_DAMPING = 0.8
SMOOTHING = 1.0
LAYOUT_JITTER = 0.08
# 片区构成 ~ Dirichlet(2)，功能原型的开发强度按 (M·w)^0.5 缩放
DISTRICT_CONCENTRATION = 2.0
DISTRICT_STRENGTH = 0.5
NEIGHBOR_CONCENTRATION = 20.0
CONTEXT_GREEN_COUPLING = 0.3


@dataclass
class CitySample:
    """单个城市样本

    Attributes:
        index: 样本编号
        configuration: N×N×C 的 POI 计数
        context_features: 8×4 的周边区域社会经济特征
        trajectories: 网格编号序列列表
        green_rate: 绿化率 [0, 1]
        instruction: 绿化等级 0..4
        archetypes: N×N 的潜在功能区原型（生成时植入的真值）
    """

    index: int
    configuration: np.ndarray
    context_features: np.ndarray
    trajectories: list[list[int]]
    green_rate: float
    instruction: int
    archetypes: np.ndarray

    @property
    def grid_size(self) -> int:
        return int(self.configuration.shape[0])

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "configuration": self.configuration.tolist(),
            "context_features": self.context_features.tolist(),
            "trajectories": self.trajectories,
            "green_rate": self.green_rate,
            "instruction": self.instruction,
            "archetypes": self.archetypes.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CitySample":
        return cls(
            index=int(data["index"]),
            configuration=np.asarray(data["configuration"], dtype=np.int64),
            context_features=np.asarray(data["context_features"], dtype=np.float64),
            trajectories=[list(map(int, t)) for t in data["trajectories"]],
            green_rate=float(data["green_rate"]),
            instruction=int(data["instruction"]),
            archetypes=np.asarray(data["archetypes"], dtype=np.int64),
        )


@dataclass
class Dataset:
    """样本集合与元数据；训练/测试划分在生成时确定并保存"""

    samples: list[CitySample]
    grid_size: int
    num_categories: int
    num_zones: int
    seed: int
    bin_edges: tuple[float, ...] = DEFAULT_BIN_EDGES
    train_indices: list[int] = field(default_factory=list)
    test_indices: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def train_samples(self) -> list[CitySample]:
        return [self.samples[i] for i in self.train_indices]

    def test_samples(self) -> list[CitySample]:
        return [self.samples[i] for i in self.test_indices]

    def metadata(self) -> dict[str, Any]:
        return {
            "num_samples": len(self.samples),
            "grid_size": self.grid_size,
            "num_categories": self.num_categories,
            "num_zones": self.num_zones,
            "seed": self.seed,
            "bin_edges": list(self.bin_edges),
            "train_indices": list(self.train_indices),
            "test_indices": list(self.test_indices),
        }


@dataclass
class SpatialAttributedGraph:
    """空间属性图：对称 0/1 邻接（含自环）与节点特征"""

    adjacency: np.ndarray
    features: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.adjacency.shape[0])

    def validate(self) -> None:
        adj = self.adjacency
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"邻接矩阵必须是方阵, 得到 {adj.shape}")
        if not np.array_equal(adj, adj.T):
            raise ValueError("邻接矩阵不对称")
        if not np.all(np.diag(adj) == 1):
            raise ValueError("邻接矩阵缺少自环")
        if self.features.ndim != 2 or self.features.shape[0] != adj.shape[0]:
            raise ValueError(f"特征矩阵形状 {self.features.shape} 与节点数 {adj.shape[0]} 不符")

    def permuted(self, order: Sequence[int]) -> "SpatialAttributedGraph":
        """按节点新顺序重排"""
        idx = np.asarray(order)
        return SpatialAttributedGraph(self.adjacency[np.ix_(idx, idx)], self.features[idx])


def derive_instruction(green_rate: float, bin_edges: Sequence[float] = DEFAULT_BIN_EDGES) -> int:
    """把绿化率映射到绿化等级

    Args:
        green_rate: 绿化率 [0, 1]
        bin_edges: 4 个严格递增的内部边界

    Returns:
        等级 0..4；区间左闭右开，最高一档右闭
    """
    edges = list(bin_edges)
    if len(edges) != NUM_LEVELS - 1 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"绿化等级边界必须是 {NUM_LEVELS - 1} 个严格递增的数: {edges}")
    if not 0.0 <= green_rate <= 1.0:
        raise ValueError(f"绿化率超出 [0, 1]: {green_rate}")
    return bisect.bisect_right(edges, green_rate)


def quintile_edges(green_rates: Sequence[float]) -> tuple[float, ...]:
    """以五分位数作为等级边界；样本太少或边界退化时回退到默认边界"""
    rates = np.asarray(green_rates, dtype=np.float64)
    if rates.size < NUM_LEVELS:
        return DEFAULT_BIN_EDGES
    edges = np.quantile(rates, [0.2, 0.4, 0.6, 0.8])
    if np.any(np.diff(edges) <= 0) or edges[0] <= 0.0 or edges[-1] >= 1.0:
        logger.warning("五分位边界退化，使用默认绿化等级边界")
        return DEFAULT_BIN_EDGES
    return tuple(float(e) for e in edges)


def build_configuration(poi_events: Sequence[tuple[int, int, int]], grid_size: int,
                        num_categories: int = NUM_CATEGORIES) -> np.ndarray:
    """把 (行, 列, 类别) POI 事件计数为 N×N×C 张量"""
    config = np.zeros((grid_size, grid_size, num_categories), dtype=np.int64)
    if len(poi_events) == 0:
        return config
    events = np.asarray(poi_events, dtype=np.int64).reshape(-1, 3)
    limits = np.array([grid_size, grid_size, num_categories])
    bad = np.any((events < 0) | (events >= limits), axis=1)
    if np.any(bad):
        raise ValueError(f"POI 事件越界: {events[bad][0].tolist()}")
    np.add.at(config, (events[:, 0], events[:, 1], events[:, 2]), 1)
    return config


def region_features(configuration: np.ndarray, cells: int | None = None) -> np.ndarray:
    """区域社会经济特征（4 维，对数尺度）

    接受 N×N×C 配置或长度 C 的类别总量；后者需给出格子数 cells（默认 1）。
    交通量、签到量与 POI 密度取单格平均量的 log1p，
    价格指数取绿化/地产类占比（已在 [0, 1] 内，不再取对数）。
    """
    config = np.asarray(configuration, dtype=np.float64)
    if config.ndim == 3:
        cells = config.shape[0] * config.shape[1]
        totals = config.sum(axis=(0, 1))
    else:
        cells = 1 if cells is None else cells
        totals = config
    if cells < 1:
        raise ValueError(f"格子数必须 >= 1: {cells}")
    mass = totals.sum()
    return np.array([
        np.log1p(totals[list(TRANSPORT_CATEGORIES)].sum() / cells),
        np.log1p(totals[list(CONSUMER_CATEGORIES)].sum() / cells),
        totals[list(PRICE_CATEGORIES)].sum() / mass if mass > 0 else 0.0,
        np.log1p(mass / cells),
    ])


def build_context_graph(sample: CitySample | None,
                        neighbor_samples: Sequence[CitySample | np.ndarray]) -> SpatialAttributedGraph:
    """构造目标区域与 8 个周边区域的空间属性图

    节点 0 为目标区域（空地，特征置零），节点 1..8 按 RING_OFFSETS 顺序环绕；
    边为 3×3 布局下的 8 邻接，邻接矩阵对称且含自环。
    """
    if len(neighbor_samples) != CONTEXT_COUNT:
        raise ValueError(f"需要 {CONTEXT_COUNT} 个周边区域, 得到 {len(neighbor_samples)}")
    rows = []
    for neighbor in neighbor_samples:
        if isinstance(neighbor, CitySample):
            rows.append(region_features(neighbor.configuration))
        else:
            rows.append(np.asarray(neighbor, dtype=np.float64).reshape(-1))
    dim = rows[0].shape[0]
    features = np.vstack([np.zeros(dim), *rows])

    positions = [(0, 0), *RING_OFFSETS]
    count = len(positions)
    adjacency = np.zeros((count, count))
    for i, (ri, ci) in enumerate(positions):
        for j, (rj, cj) in enumerate(positions):
            if max(abs(ri - rj), abs(ci - cj)) <= 1:
                adjacency[i, j] = 1.0
    graph = SpatialAttributedGraph(adjacency, features)
    graph.validate()
    return graph


def context_graph(sample: CitySample) -> SpatialAttributedGraph:
    """用样本保存的周边特征构造空间属性图"""
    return build_context_graph(sample, list(sample.context_features))


def simulate_trajectories(sample: CitySample | np.ndarray, count: int, length: int,
                          seed: int | Sequence[int]) -> list[list[int]]:
    """在 N×N 网格上模拟随机游走轨迹

    每步在上下左右与原地五个候选中选择，越界候选视为原地；
    选择概率正比于目标格 POI 总量加平滑项。
    """
    if count < 1 or length < 1:
        raise ValueError(f"轨迹数量与长度必须 >= 1: count={count}, length={length}")
    config = sample.configuration if isinstance(sample, CitySample) else np.asarray(sample)
    n = config.shape[0]
    mass = config.sum(axis=2).reshape(-1).astype(np.float64) + SMOOTHING
    rng = np.random.default_rng(seed)

    position = rng.choice(n * n, size=count, p=mass / mass.sum())
    walks = np.empty((count, length), dtype=np.int64)
    walks[:, 0] = position
    for step in range(1, length):
        row, col = np.divmod(position, n)
        candidates = np.stack([
            np.where(row > 0, position - n, position),
            np.where(row < n - 1, position + n, position),
            np.where(col > 0, position - 1, position),
            np.where(col < n - 1, position + 1, position),
            position,
        ], axis=1)
        cumulative = np.cumsum(mass[candidates], axis=1)
        draws = rng.random(count) * cumulative[:, -1]
        choice = (cumulative <= draws[:, None]).sum(axis=1)
        position = candidates[np.arange(count), np.minimum(choice, 4)]
        walks[:, step] = position
    return walks.tolist()


@dataclass
class _Archetypes:
    mixtures: np.ndarray  # M×C
    centers: np.ndarray  # M×2
    green_profile: np.ndarray  # C


def _dataset_archetypes(seed: int, grid_size: int, num_zones: int) -> _Archetypes:
    rng = np.random.default_rng([seed, _ARCHETYPE_STREAM])
    mixtures = np.empty((num_zones, NUM_CATEGORIES))
    for m in range(num_zones):
        block = np.array([c for c in range(NUM_CATEGORIES) if c % num_zones == m])
        emphasis = np.zeros(NUM_CATEGORIES)
        emphasis[block] = rng.dirichlet(np.full(block.size, 2.0))
        mixtures[m] = 0.85 * emphasis + 0.15 * rng.dirichlet(np.ones(NUM_CATEGORIES))
    centers = rng.uniform(0.0, grid_size, size=(num_zones, 2))
    green_profile = np.full(NUM_CATEGORIES, 0.1 / (NUM_CATEGORIES - 2))
    green_profile[list(GREEN_CATEGORIES)] = 0.45
    return _Archetypes(mixtures, centers, green_profile)


def _zone_layout(rng: np.random.Generator, archetypes: _Archetypes, grid_size: int) -> np.ndarray:
    centers = archetypes.centers + rng.normal(0.0, LAYOUT_JITTER * grid_size, size=archetypes.centers.shape)
    rows, cols = np.meshgrid(np.arange(grid_size) + 0.5, np.arange(grid_size) + 0.5, indexing="ij")
    cells = np.stack([rows, cols], axis=-1)
    distance = ((cells[:, :, None, :] - centers[None, None, :, :]) ** 2).sum(axis=-1)
    return distance.argmin(axis=-1).astype(np.int64)


def _green_mixture(mixture: np.ndarray, greenness: float, green_profile: np.ndarray) -> np.ndarray:
    mixed = (1.0 - GREEN_MIX * greenness) * mixture + GREEN_MIX * greenness * green_profile
    mixed[..., list(BUSINESS_CATEGORIES)] *= 1.0 - BUSINESS_DAMPING * greenness
    return mixed / mixed.sum(axis=-1, keepdims=True)


def _context_features(rng: np.random.Generator, archetypes: _Archetypes, grid_size: int, intensity: float,
                      district: np.ndarray, greenness: float) -> np.ndarray:
    """8 个周边区域的特征

    周边区域与目标区域同属一个片区：功能原型占比围绕片区构成 district 抽样，
    绿化程度只与目标区域弱相关。
    """
    cells = grid_size * grid_size
    district_green = float(rng.uniform())
    context = np.empty((CONTEXT_COUNT, FEATURE_DIM))
    for slot in range(CONTEXT_COUNT):
        anchor = CONTEXT_GREEN_COUPLING * greenness + (1.0 - CONTEXT_GREEN_COUPLING) * district_green
        neighbor_green = float(np.clip(anchor + rng.normal(0.0, 0.1), 0.0, 1.0))
        shares = rng.dirichlet(NEIGHBOR_CONCENTRATION * district + 0.1)
        mixture = _green_mixture(shares @ archetypes.mixtures, neighbor_green, archetypes.green_profile)
        totals = rng.poisson(cells * intensity * rng.gamma(8.0, 1.0 / 8.0) * mixture)
        context[slot] = region_features(totals, cells)
    return context


def _generate_raw_sample(seed: int, index: int, grid_size: int, archetypes: _Archetypes,
                         intensity: float, trajectory_count: int, trajectory_length: int) -> CitySample:
    rng = np.random.default_rng([seed, index])
    num_zones = archetypes.mixtures.shape[0]
    greenness = float(rng.uniform())
    # 片区构成决定各功能原型的开发强度，周边区域也由它决定
    district = rng.dirichlet(np.full(num_zones, DISTRICT_CONCENTRATION))
    layout = _zone_layout(rng, archetypes, grid_size)
    mixtures = _green_mixture(archetypes.mixtures[layout], greenness, archetypes.green_profile)
    zone_weight = (num_zones * district) ** DISTRICT_STRENGTH
    cell_intensity = rng.gamma(4.0, intensity / 4.0, size=(grid_size, grid_size)) * zone_weight[layout]
    configuration = rng.poisson(cell_intensity[..., None] * mixtures).astype(np.int64)

    total = configuration.sum()
    share = configuration[..., list(GREEN_CATEGORIES)].sum() / total if total > 0 else 0.0
    green_rate = float(np.clip(share + rng.normal(0.0, 0.01), 0.0, 1.0))

    context = _context_features(rng, archetypes, grid_size, intensity, district, greenness)

    walk_seed = [seed, index, int(rng.integers(2**31))]
    trajectories = simulate_trajectories(configuration, trajectory_count, trajectory_length, walk_seed)
    return CitySample(index=index, configuration=configuration, context_features=context,
                      trajectories=trajectories, green_rate=green_rate, instruction=0,
                      archetypes=layout)


def _validate_shape(num_samples: int, grid_size: int, num_zones: int) -> None:
    if num_samples < 0:
        raise ValueError(f"样本数必须 >= 0: {num_samples}")
    if grid_size < 2:
        raise ValueError(f"网格边长 N 必须 >= 2: {grid_size}")
    if not 1 <= num_zones <= grid_size * grid_size:
        raise ValueError(f"功能区数 M 必须在 [1, N²] 内: {num_zones}")


def _finalize(samples: list[CitySample], seed: int, grid_size: int, num_zones: int,
              bin_edges: Sequence[float] | None, test_fraction: float) -> Dataset:
    edges = tuple(bin_edges) if bin_edges is not None else quintile_edges([s.green_rate for s in samples])
    for sample in samples:
        sample.instruction = derive_instruction(sample.green_rate, edges)
    rng = np.random.default_rng([seed, _SPLIT_STREAM])
    order = rng.permutation(len(samples))
    n_test = int(np.floor(len(samples) * test_fraction))
    n_train = len(samples) - n_test
    dataset = Dataset(samples=samples, grid_size=grid_size, num_categories=NUM_CATEGORIES,
                      num_zones=num_zones, seed=seed, bin_edges=edges,
                      train_indices=sorted(int(i) for i in order[:n_train]),
                      test_indices=sorted(int(i) for i in order[n_train:]))
    logger.info(f"生成合成数据集: K={len(samples)}, N={grid_size}, M={num_zones}, "
                f"训练 {n_train} / 测试 {n_test}")
    return dataset


def generate_dataset(seed: int, num_samples: int, grid_size: int, num_zones: int, *,
                     intensity: float = 20.0, trajectory_count: int = 20, trajectory_length: int = 10,
                     bin_edges: Sequence[float] | None = None, test_fraction: float = 0.1) -> Dataset:
    """生成合成数据集

    Args:
        seed: 数据集种子
        num_samples: 样本数 K
        grid_size: 网格边长 N
        num_zones: 功能区原型数 M
        intensity: 每格 POI 期望数
        trajectory_count: 每个样本的轨迹数
        trajectory_length: 轨迹长度
        bin_edges: 绿化等级边界；为空时取五分位数
        test_fraction: 测试集比例

    Returns:
        确定性的数据集（相同参数生成逐字节相同的结果）
    """
    _validate_shape(num_samples, grid_size, num_zones)
    archetypes = _dataset_archetypes(seed, grid_size, num_zones)
    samples = [
        _generate_raw_sample(seed, index, grid_size, archetypes, intensity, trajectory_count, trajectory_length)
        for index in range(num_samples)
    ]
    return _finalize(samples, seed, grid_size, num_zones, bin_edges, test_fraction)


async def generate_dataset_async(seed: int, num_samples: int, grid_size: int, num_zones: int, *,
                                 workers: int = 4, intensity: float = 20.0, trajectory_count: int = 20,
                                 trajectory_length: int = 10, bin_edges: Sequence[float] | None = None,
                                 test_fraction: float = 0.1) -> Dataset:
    """并行生成合成数据集，结果与 generate_dataset 相同"""
    _validate_shape(num_samples, grid_size, num_zones)
    archetypes = _dataset_archetypes(seed, grid_size, num_zones)
    semaphore = asyncio.Semaphore(max(1, workers))

    async def one(index: int) -> CitySample:
        async with semaphore:
            return await asyncio.to_thread(_generate_raw_sample, seed, index, grid_size, archetypes,
                                           intensity, trajectory_count, trajectory_length)

    samples = list(await asyncio.gather(*(one(i) for i in range(num_samples))))
    return _finalize(samples, seed, grid_size, num_zones, bin_edges, test_fraction)


def green_share(configurations: Sequence[np.ndarray]) -> float:
    """类别 7 与 10（游憩、旅游景点）在总 POI 量中的占比；负值先截断为 0"""
    totals = np.zeros(NUM_CATEGORIES)
    for config in configurations:
        totals += np.clip(np.asarray(config, dtype=np.float64), 0.0, None).sum(axis=(0, 1))
    mass = totals.sum()
    return float(totals[list(GREEN_CATEGORIES)].sum() / mass) if mass > 0 else 0.0
