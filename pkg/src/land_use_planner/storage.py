"""数据集存取

JSON-lines 格式：第一行是带 schema 与版本号的头对象，之后每行一个样本。
读写都通过 aiofiles 异步完成。
"""

import json
import logging
from pathlib import Path
from typing import Any

import aiofiles

from .citysynth import CitySample, Dataset

logger = logging.getLogger(__name__)

DATASET_SCHEMA = "land-use-planner/dataset"
DATASET_VERSION = 1


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


async def write_dataset(path: str | Path, dataset: Dataset, force: bool = False) -> Path:
    """写出数据集；目标已存在且未指定 force 时抛出 FileExistsError"""
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"输出已存在: {path}（使用 --force 覆盖）")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema": DATASET_SCHEMA, "version": DATASET_VERSION, **dataset.metadata()}
    async with aiofiles.open(path, "w", encoding="utf-8", newline="\n") as f:
        await f.write(_dumps(header) + "\n")
        for sample in dataset.samples:
            await f.write(_dumps(sample.to_dict()) + "\n")
    logger.info(f"数据集已写入: {path} ({len(dataset.samples)} 个样本)")
    return path


async def read_dataset(path: str | Path) -> Dataset:
    """读取并校验数据集文件"""
    path = Path(path)
    async with aiofiles.open(path, "r", encoding="utf-8") as f:
        lines = [line async for line in f if line.strip()]
    if not lines:
        raise ValueError(f"数据集文件为空: {path}")
    header = json.loads(lines[0])
    if header.get("schema") != DATASET_SCHEMA or header.get("version") != DATASET_VERSION:
        raise ValueError(f"不支持的数据集格式: {header.get('schema')} v{header.get('version')}")
    samples = [CitySample.from_dict(json.loads(line)) for line in lines[1:]]
    if len(samples) != header["num_samples"]:
        raise ValueError(f"样本数与头信息不符: {len(samples)} != {header['num_samples']}")
    for sample in samples:
        if sample.configuration.shape != (header["grid_size"], header["grid_size"], header["num_categories"]):
            raise ValueError(f"样本 {sample.index} 的配置形状 {sample.configuration.shape} 与头信息不符")
    return Dataset(
        samples=samples,
        grid_size=header["grid_size"],
        num_categories=header["num_categories"],
        num_zones=header["num_zones"],
        seed=header["seed"],
        bin_edges=tuple(header["bin_edges"]),
        train_indices=list(header["train_indices"]),
        test_indices=list(header["test_indices"]),
    )


async def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, "w", encoding="utf-8") as f:
        await f.write(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False))

