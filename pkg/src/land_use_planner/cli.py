"""
命令行入口
synth → zones → train → generate / eval / export，以及 ablate 与 sweep 实验
"""

import argparse
import asyncio
import logging
import traceback
from pathlib import Path
from typing import Sequence

from pydantic import ValidationError

from .citysynth import LEVEL_NAMES, NUM_LEVELS, context_graph
from .config import RunConfig, dump_config, load_config, save_config, setup_logging
from .errors import PlannerError, StageMissingError, UsageError
from .evalmetrics import METRICS, group_report
from .export import EXPORT_FORMATS, PlanRecord, export_plan, load_plan, save_plan
from .pipeline import (STAGE_FILES, discover, evaluate, load_model, run_ablation, run_sweep,
                       save_model, synthesize, train_planner, write_cross_matrix, write_encoder_log,
                       write_rows)
from .stages.gridgen import generate_plan
from .storage import read_dataset, write_dataset, write_json
from .zonedisc import load_zone_plans, save_zone_plans

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="land-use-planner", description="按人类指令与周边环境生成城市土地利用规划")
    parser.add_argument("--config", help="key=value 配置文件（默认读取 LUP_CONFIG）")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="覆盖单个配置项，可重复")
    parser.add_argument("--log-level", default=None, help="日志级别（默认读取 LUP_LOG_LEVEL 或 INFO）")
    parser.add_argument("--force", action="store_true", help="覆盖已有输出")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", help="生成合成数据集")
    sub.add_parser("zones", help="用主题模型发现功能区")
    sub.add_parser("train", help="训练图编码器、功能区 GAN 与网格级阶段")

    gen = sub.add_parser("generate", help="为给定指令与周边环境生成规划")
    gen.add_argument("--instruction", type=int, required=True, help="绿化等级 0..4")
    gen.add_argument("--context-id", type=int, required=True, help="提供周边环境的样本编号")
    gen.add_argument("--seed", type=int, default=0, help="生成随机种子")
    gen.add_argument("--output", help="输出 JSON 路径")

    ev = sub.add_parser("eval", help="在测试集上按等级计算分布距离")
    ev.add_argument("--generated", help="评估该目录下已有的规划 JSON，而不是重新生成")

    ex = sub.add_parser("export", help="导出规划文件")
    ex.add_argument("--plan", required=True, help="规划 JSON 路径")
    ex.add_argument("--format", required=True, choices=EXPORT_FORMATS)
    ex.add_argument("--output", required=True, help="输出目录")

    sub.add_parser("ablate", help="完整模型与四个消融变体的对比")
    sub.add_parser("sweep", help="不同网格边长 N 下的鲁棒性实验")
    return parser


def _guard(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise FileExistsError(f"输出已存在: {', '.join(existing)}（使用 --force 覆盖）")


async def _load_inputs(config: RunConfig):
    if not config.dataset_path.exists():
        raise StageMissingError("synth", f"找不到数据集 {config.dataset_path}")
    dataset = await read_dataset(config.dataset_path)
    if not (config.zones_dir / "zone_00000.csv").exists():
        raise StageMissingError("zones", f"找不到功能区规划 {config.zones_dir}")
    plans = load_zone_plans(config.zones_dir, len(dataset.samples), dataset.num_zones)
    return dataset, plans


async def cmd_synth(config: RunConfig, args: argparse.Namespace) -> None:
    _guard([config.dataset_path], args.force)
    dataset = await synthesize(config)
    await write_dataset(config.dataset_path, dataset, force=args.force)
    save_config(Path(config.data_dir) / "config.txt", config)
    logger.info(f"✅ 合成数据集完成: {config.dataset_path}")


async def cmd_zones(config: RunConfig, args: argparse.Namespace) -> None:
    dataset = await read_dataset(config.dataset_path)
    _guard([config.zones_dir / "zone_00000.csv"], args.force)
    plans, state = await asyncio.to_thread(discover, dataset, config)
    save_zone_plans(config.zones_dir, plans)
    await write_json(Path(config.data_dir) / "zones.json", {
        "num_zones": config.num_zones,
        "iterations": state.iterations,
        "topic_totals": state.topic_totals.tolist(),
    })
    logger.info(f"✅ 功能区规划已写入 {config.zones_dir}")


async def cmd_train(config: RunConfig, args: argparse.Namespace) -> None:
    dataset, plans = await _load_inputs(config)
    _guard([config.checkpoint_dir / name for name in STAGE_FILES.values()], args.force)
    result = await asyncio.to_thread(train_planner, dataset, plans, config)
    save_model(result.model, config)
    log_dir = Path(config.run_dir) / "logs"
    write_encoder_log(log_dir / "encoder_loss.csv", result.encoder_history)
    result.gan_history.write_loss_log(log_dir / "zonegan_loss.csv")
    result.grid_history.write_loss_log(log_dir / "grid_loss.csv")
    await write_json(log_dir / "zonegan_diagnostics.json", result.gan_history.diagnostics)
    save_config(Path(config.run_dir) / "config.txt", config)
    logger.info("✅ 训练完成")


async def cmd_generate(config: RunConfig, args: argparse.Namespace) -> None:
    dataset = await read_dataset(config.dataset_path)
    if not 0 <= args.context_id < len(dataset.samples):
        raise ValueError(f"context-id 超出范围 [0, {len(dataset.samples)}): {args.context_id}")
    model = load_model(config)
    sample = dataset.samples[args.context_id]
    plan = generate_plan(args.instruction, context_graph(sample), model, args.seed)
    output = Path(args.output) if args.output else (
        config.plan_dir / f"plan_{args.context_id:05d}_g{args.instruction}_s{args.seed}.json")
    _guard([output], args.force)
    save_plan(output, PlanRecord(zone_plan=plan.zone_plan, raw=plan.raw, instruction=args.instruction,
                                 seed=args.seed, context_id=args.context_id))
    logger.info(f"✅ 生成 {LEVEL_NAMES[args.instruction]} 规划: {output}")


async def cmd_eval(config: RunConfig, args: argparse.Namespace) -> None:
    dataset = await read_dataset(config.dataset_path)
    config.report_dir.mkdir(parents=True, exist_ok=True)
    if args.generated:
        records = [load_plan(p) for p in sorted(Path(args.generated).glob("*.json"))]
        if not records:
            raise ValueError(f"目录中没有规划文件: {args.generated}")
        for record in records:
            if not 0 <= record.context_id < len(dataset.samples):
                raise ValueError(f"规划的 context_id 超出范围 [0, {len(dataset.samples)}): {record.context_id}")
        report = group_report([dataset.samples[r.context_id].configuration for r in records],
                              [r.configuration for r in records], [r.instruction for r in records])
    else:
        evaluation = evaluate(load_model(config), dataset, config.seed, draws=config.eval_draws)
        report = evaluation.report
        for kind, matrix in evaluation.cross.items():
            write_cross_matrix(config.report_dir / f"cross_{kind}.csv", matrix)
    report.to_json(config.report_dir / "group_report.json")
    report.to_csv(config.report_dir / "group_report.csv")
    logger.info("📊 " + ", ".join(f"AVG_{m}={report.averages[m]:.5f}" for m in METRICS))


async def cmd_export(config: RunConfig, args: argparse.Namespace) -> None:
    paths = export_plan(args.plan, args.format, args.output)
    logger.info(f"✅ 导出 {len(paths)} 个文件到 {args.output}")


async def cmd_ablate(config: RunConfig, args: argparse.Namespace) -> None:
    dataset, plans = await _load_inputs(config)
    output = config.report_dir / "ablation.csv"
    _guard([output], args.force)
    rows = await asyncio.to_thread(run_ablation, dataset, plans, config)
    write_rows(output, rows)
    logger.info(f"📊 消融实验结果: {output}")


async def cmd_sweep(config: RunConfig, args: argparse.Namespace) -> None:
    output = config.report_dir / "sweep.csv"
    _guard([output], args.force)
    rows = await run_sweep(config)
    write_rows(output, rows)
    failed = [row["grid_size"] for row in rows if not row["shapes_ok"]]
    if failed:
        raise RuntimeError(f"以下 N 的输出形状校验失败: {failed}")
    logger.info(f"📊 鲁棒性实验结果: {output}")


COMMANDS = {
    "synth": cmd_synth,
    "zones": cmd_zones,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "export": cmd_export,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def _exit_code(error: BaseException) -> int:
    if isinstance(error, (UsageError, FileExistsError)):
        return EXIT_USAGE
    if isinstance(error, (ValidationError, ValueError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    """运行一个子命令并返回退出码"""
    listener = setup_logging()
    try:
        args = build_parser().parse_args(argv)
        config = load_config(args.config, args.overrides)
        listener.stop()
        listener = None
        listener = setup_logging(args.log_level, Path(config.run_dir) / "land_use_planner.log")
        logger.debug("生效配置:\n" + dump_config(config))
        if args.command == "generate" and not 0 <= args.instruction < NUM_LEVELS:
            raise ValueError(f"instruction 必须在 0..{NUM_LEVELS - 1}: {args.instruction}")
        asyncio.run(COMMANDS[args.command](config, args))
        return EXIT_OK
    except (PlannerError, ValidationError, ValueError, RuntimeError, OSError) as e:
        logger.error(f"❌ {e}")
        logger.debug(f"🔍 错误详情:\n{traceback.format_exc()}")
        return _exit_code(e)
    except Exception as e:
        logger.error(f"❌ 未预期的错误: {type(e).__name__}: {e}")
        logger.debug(f"🔍 错误详情:\n{traceback.format_exc()}")
        return EXIT_RUNTIME
    finally:
        if listener is not None:
            listener.stop()
