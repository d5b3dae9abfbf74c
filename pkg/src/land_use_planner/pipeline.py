"""规划流水线

把各阶段串起来：合成数据 → 功能区发现 → 训练（图编码器 → 功能区 GAN → 网格级阶段）
→ 生成 → 评估，以及消融实验和网格规模鲁棒性实验。
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .citysynth import (FEATURE_DIM, NUM_LEVELS, CitySample, Dataset, context_graph,
                        generate_dataset_async, green_share)
from .config import RunConfig
from .errors import CheckpointFormatError, StageMissingError
from .evalmetrics import METRICS, GroupReport, cross_group_matrix, group_report
from .numgrad import load_checkpoint, save_checkpoint
from .stages.ctxembed import (EncoderHistory, GraphEncoder, condition_width, encode_graphs,
                              fuse_condition, pad_condition, train_graph_encoder)
from .stages.gridgen import (GeneratedPlan, GridHistory, PlannerModel, build_grid_stage,
                             generate_plan, train_grid_stage)
from .stages.zonegan import ZoneGanHistory, build_zone_gan, train_zone_gan
from .zonedisc import TopicModelState, discover_zones, match_labels

logger = logging.getLogger(__name__)

STAGE_FILES = {"encoder": "encoder.ckpt", "zonegan": "zonegan.ckpt", "grid": "grid.ckpt"}
ABLATIONS = ("no_condaug", "no_attention", "no_instruction", "no_context")


async def synthesize(config: RunConfig) -> Dataset:
    return await generate_dataset_async(
        config.seed, config.num_samples, config.grid_size, config.num_zones,
        workers=config.workers, intensity=config.intensity,
        trajectory_count=config.trajectory_count, trajectory_length=config.trajectory_length,
        bin_edges=config.bin_edges or None, test_fraction=config.test_fraction,
    )


def discover(dataset: Dataset, config: RunConfig) -> tuple[list[np.ndarray], TopicModelState]:
    """拟合主题模型得到每个样本的功能区规划，并记录与合成原型的一致率"""
    plans, state = discover_zones(dataset, config.num_zones, alpha=config.lda_alpha or None,
                                  beta=config.lda_beta, iterations=config.lda_iterations, seed=config.seed)
    agreement = np.mean([match_labels(plan, sample.archetypes, config.num_zones)
                         for plan, sample in zip(plans, dataset.samples)]) if plans else 0.0
    logger.info(f"功能区发现完成: 与合成原型的平均一致率 {agreement:.3f}")
    return plans, state


@dataclass
class TrainResult:
    model: PlannerModel
    encoder_history: EncoderHistory
    gan_history: ZoneGanHistory
    grid_history: GridHistory


def build_conditions(samples: Sequence[CitySample], encoder: GraphEncoder, config: RunConfig,
                     levels: Sequence[int] | None = None) -> np.ndarray:
    """(k, O) 条件嵌入；levels 为空时使用样本自身的绿化等级"""
    width = condition_width(config.embed_dim, config.heads)
    pooled = encode_graphs([context_graph(s) for s in samples], encoder)
    levels = [s.instruction for s in samples] if levels is None else levels
    return np.stack([
        pad_condition(fuse_condition(p, level, use_context=not config.no_context,
                                     use_instruction=not config.no_instruction), width)
        for p, level in zip(pooled, levels)
    ]) if len(samples) else np.zeros((0, width))


def train_planner(dataset: Dataset, plans: Sequence[np.ndarray], config: RunConfig) -> TrainResult:
    """依次训练三个阶段；图编码器预训练后冻结"""
    train = dataset.train_samples()
    if not train:
        raise ValueError("训练集为空")
    train_plans = np.stack([plans[i] for i in dataset.train_indices])
    configs = np.stack([s.configuration for s in train]).astype(np.float64)

    encoder, encoder_history = train_graph_encoder(
        [context_graph(s) for s in train], config.epochs_encoder, config.seed, lr=config.lr_encoder,
        batch_size=config.batch_encoder, hidden_dim=config.encoder_hidden, embed_dim=config.embed_dim)
    conditions = build_conditions(train, encoder, config)

    zone_gan, gan_history = train_zone_gan(
        conditions, train_plans, config.num_zones, epochs=config.epochs_gan, seed=config.seed,
        lr=config.lr_gan, batch_size=config.batch_gan, kl_weight=config.kl_weight,
        noise_dim=config.noise_dim, hidden_dim=config.gan_hidden, ca_hidden=config.ca_hidden,
        use_condaug=not config.no_condaug, non_saturating=config.non_saturating)

    grid, grid_history = train_grid_stage(
        conditions, train_plans, configs, config.num_zones, epochs=config.epochs_grid, seed=config.seed,
        lr=config.lr_grid, batch_size=config.batch_grid, heads=config.heads,
        full_width=config.attention_full_width, use_attention=not config.no_attention,
        train_wa=config.train_wa)

    model = PlannerModel(encoder=encoder, zone_gan=zone_gan, grid=grid,
                         width=conditions.shape[1], use_context=not config.no_context,
                         use_instruction=not config.no_instruction)
    return TrainResult(model, encoder_history, gan_history, grid_history)


def _metadata(config: RunConfig, stage: str) -> dict:
    return {
        "stage": stage,
        "grid_size": config.grid_size,
        "num_zones": config.num_zones,
        "num_categories": config.num_categories,
        "embed_dim": config.embed_dim,
        "heads": config.heads,
        "seed": config.seed,
    }


def save_model(model: PlannerModel, config: RunConfig, directory: str | Path | None = None) -> list[Path]:
    model.require()
    directory = Path(directory or config.checkpoint_dir)
    states = {
        "encoder": model.encoder.params.state(),
        "zonegan": model.zone_gan.state(),
        "grid": model.grid.state(),
    }
    paths = []
    for stage, state in states.items():
        path = directory / STAGE_FILES[stage]
        save_checkpoint(path, state, _metadata(config, stage))
        paths.append(path)
    logger.info(f"模型检查点已保存到 {directory}")
    return paths


def _load_stage(directory: Path, stage: str, config: RunConfig) -> dict[str, np.ndarray]:
    path = directory / STAGE_FILES[stage]
    if not path.exists():
        raise StageMissingError(stage, f"找不到检查点 {path}")
    tensors, metadata = load_checkpoint(path)
    for key in ("grid_size", "num_zones", "embed_dim", "heads"):
        if metadata.get(key) != getattr(config, key):
            raise CheckpointFormatError(f"{path} 的 {key}={metadata.get(key)} 与当前配置 {getattr(config, key)} 不符")
    return tensors


def load_model(config: RunConfig, directory: str | Path | None = None) -> PlannerModel:
    """按当前配置重建各阶段结构并载入检查点"""
    directory = Path(directory or config.checkpoint_dir)
    width = condition_width(config.embed_dim, config.heads)
    encoder = GraphEncoder(FEATURE_DIM, config.encoder_hidden, config.embed_dim)
    encoder.params.load_state(_load_stage(directory, "encoder", config))
    zone_gan = build_zone_gan(config.grid_size, config.num_zones, width, noise_dim=config.noise_dim,
                              hidden_dim=config.gan_hidden, ca_hidden=config.ca_hidden,
                              use_condaug=not config.no_condaug)
    zone_gan.load_state(_load_stage(directory, "zonegan", config))
    grid = build_grid_stage(config.grid_size, config.num_zones, width, config.num_categories,
                            heads=config.heads, full_width=config.attention_full_width,
                            use_attention=not config.no_attention, train_wa=config.train_wa)
    grid.load_state(_load_stage(directory, "grid", config))
    return PlannerModel(encoder=encoder, zone_gan=zone_gan, grid=grid, width=width,
                        use_context=not config.no_context, use_instruction=not config.no_instruction)


def write_encoder_log(path: str | Path, history: EncoderHistory) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "reconstruction"])
        for row in zip(history.epochs, history.losses, history.reconstructions):
            writer.writerow([row[0], repr(row[1]), repr(row[2])])


def generate_for(model: PlannerModel, samples: Sequence[CitySample], seed: int,
                 level: int | None = None, draws: int = 1) -> list[GeneratedPlan]:
    """为每个样本的周边环境生成规划

    每个样本、每次抽样用 (seed, index, draw) 派生的随机流；结果按样本顺序排列，
    同一样本的 draws 次抽样相邻。
    """
    if draws < 1:
        raise ValueError(f"抽样次数必须 >= 1: {draws}")
    return [generate_plan(s.instruction if level is None else level, context_graph(s), model,
                          [seed, s.index, draw])
            for s in samples for draw in range(draws)]


@dataclass
class Evaluation:
    report: GroupReport
    generated: list[GeneratedPlan] = field(default_factory=list)
    cross: dict[str, np.ndarray] = field(default_factory=dict)


def evaluate(model: PlannerModel, dataset: Dataset, seed: int, *, draws: int = 1,
             with_cross: bool = True) -> Evaluation:
    """在测试集上比较原始配置与按原等级生成的配置；可选计算 5×5 跨等级矩阵

    每个测试样本生成 draws 份规划，生成侧的类别分布按全部抽样汇总。
    """
    test = dataset.test_samples()
    if not test:
        raise ValueError("测试集为空，无法评估")
    generated = generate_for(model, test, seed, draws=draws)
    levels = [s.instruction for s in test]
    report = group_report([s.configuration for s in test], [g.configuration for g in generated], levels,
                          generated_levels=[level for level in levels for _ in range(draws)])
    evaluation = Evaluation(report=report, generated=generated)
    if with_cross:
        by_level = {level: [s.configuration for s in test if s.instruction == level]
                    for level in range(NUM_LEVELS)}
        per_level = {level: [g.configuration for g in generate_for(model, test, seed, level, draws)]
                     for level in range(NUM_LEVELS)}
        evaluation.cross = {kind: cross_group_matrix(kind, by_level, per_level) for kind in METRICS}
    return evaluation


def write_cross_matrix(path: str | Path, matrix: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["original\\generated", *(f"Green{j}" for j in range(NUM_LEVELS))])
        for i, row in enumerate(matrix):
            writer.writerow([f"Green{i}", *("" if np.isnan(v) else repr(float(v)) for v in row)])


def ablation_configs(config: RunConfig) -> dict[str, RunConfig]:
    """完整模型、四个消融变体与未训练基线"""
    variants = {"full": config}
    for flag in ABLATIONS:
        variants[flag] = config.model_copy(update={flag: True})
    variants["untrained"] = config.model_copy(update={"epochs_encoder": 0, "epochs_gan": 0, "epochs_grid": 0})
    return variants


def run_ablation(dataset: Dataset, plans: Sequence[np.ndarray], config: RunConfig) -> list[dict]:
    """同一种子下训练各变体并在测试集上比较四种平均距离"""
    rows = []
    for name, variant in ablation_configs(config).items():
        logger.info(f"🔬 消融实验: {name}")
        result = train_planner(dataset, plans, variant)
        evaluation = evaluate(result.model, dataset, variant.seed, draws=variant.eval_draws, with_cross=False)
        rows.append({"variant": name, **{f"AVG_{m}": evaluation.report.averages[m] for m in METRICS},
                     "green_share": green_share([g.configuration for g in evaluation.generated])})
    return rows


def write_rows(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        if not rows:
            return
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


async def run_sweep(config: RunConfig) -> list[dict]:
    """对每个网格边长 N 跑一遍完整流水线并校验输出形状"""
    rows = []
    for size in config.sweep_sizes:
        variant = config.model_copy(update={
            "grid_size": size,
            "num_zones": min(config.num_zones, size * size),
            "num_samples": config.sweep_samples,
            "epochs_encoder": config.sweep_epochs,
            "epochs_gan": config.sweep_epochs,
            "epochs_grid": config.sweep_epochs,
            "lda_iterations": min(config.lda_iterations, 20),
        })
        logger.info(f"📐 鲁棒性实验: N={size}")
        dataset = await synthesize(variant)
        plans, _ = discover(dataset, variant)
        model = train_planner(dataset, plans, variant).model
        evaluation = evaluate(model, dataset, variant.seed, draws=variant.eval_draws, with_cross=False)
        shapes_ok = all(g.zone_plan.shape == (size, size)
                        and g.raw.shape == (size, size, variant.num_categories) for g in evaluation.generated)
        report = evaluation.report
        rows.append({"grid_size": size, "shapes_ok": shapes_ok,
                     **{f"AVG_{m}": report.averages[m] for m in METRICS}})
    return rows
