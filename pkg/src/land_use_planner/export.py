"""生成结果导出

生成的规划保存为 JSON（原始浮点值），可再导出为逐类别 CSV 栅格或 PGM 灰度图。
"""

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

PLAN_SCHEMA = "land-use-planner/plan"
PLAN_VERSION = 1
EXPORT_FORMATS = ("csv", "pgm", "json")


@dataclass
class PlanRecord:
    """一次生成的结果"""

    zone_plan: np.ndarray
    raw: np.ndarray
    instruction: int
    seed: int
    context_id: int

    @property
    def configuration(self) -> np.ndarray:
        return np.clip(self.raw, 0.0, None)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": PLAN_SCHEMA,
            "version": PLAN_VERSION,
            "instruction": self.instruction,
            "seed": self.seed,
            "context_id": self.context_id,
            "zone_plan": self.zone_plan.tolist(),
            "raw": self.raw.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PlanRecord":
        if data.get("schema") != PLAN_SCHEMA or data.get("version") != PLAN_VERSION:
            raise ValueError(f"不支持的规划文件: {data.get('schema')} v{data.get('version')}")
        try:
            raw = np.asarray(data["raw"], dtype=np.float64)
            record = cls(zone_plan=np.asarray(data["zone_plan"], dtype=np.int64), raw=raw,
                         instruction=int(data["instruction"]), seed=int(data["seed"]),
                         context_id=int(data["context_id"]))
        except KeyError as e:
            raise ValueError(f"规划文件缺少字段: {e}") from e
        except (TypeError, ValueError) as e:
            raise ValueError(f"规划文件字段无效: {e}") from e
        if raw.ndim != 3 or raw.shape[0] != raw.shape[1]:
            raise ValueError(f"规划张量必须是 N×N×C, 得到 {raw.shape}")
        return record


def save_plan(path: str | Path, record: PlanRecord) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record.to_dict(), f, sort_keys=True)
    return path


def load_plan(path: str | Path) -> PlanRecord:
    with open(path, "r", encoding="utf-8") as f:
        return PlanRecord.from_dict(json.load(f))


def export_csv(config: np.ndarray, directory: str | Path, stem: str) -> list[Path]:
    """每个类别一个 N×N 的 CSV 栅格"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for category in range(config.shape[-1]):
        path = directory / f"{stem}_cat{category:02d}.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerows([repr(float(v)) for v in row] for row in config[..., category])
        paths.append(path)
    return paths


def to_graymap(raster: np.ndarray) -> np.ndarray:
    """按最大值归一化到 0..255；全零栅格为全黑"""
    raster = np.clip(np.asarray(raster, dtype=np.float64), 0.0, None)
    peak = raster.max() if raster.size else 0.0
    if peak <= 0:
        return np.zeros(raster.shape, dtype=np.uint8)
    return np.round(raster / peak * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, pixels: np.ndarray) -> Path:
    """二进制 P5 灰度图"""
    path = Path(path)
    rows, cols = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, size, maxval, payload = blob.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"不是 8 位 P5 灰度图: {path}")
    cols, rows = map(int, size.split())
    return np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols)


def export_pgm(config: np.ndarray, directory: str | Path, stem: str) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [write_pgm(directory / f"{stem}_cat{c:02d}.pgm", to_graymap(config[..., c]))
            for c in range(config.shape[-1])]


def export_plan(plan_path: str | Path, fmt: str, directory: str | Path) -> list[Path]:
    """按格式导出一个规划文件"""
    if fmt not in EXPORT_FORMATS:
        raise ValueError(f"未知的导出格式: {fmt}，可选 {EXPORT_FORMATS}")
    record = load_plan(plan_path)
    stem = Path(plan_path).stem
    match fmt:
        case "csv":
            paths = export_csv(record.configuration, directory, stem)
        case "pgm":
            paths = export_pgm(record.configuration, directory, stem)
        case _:
            paths = [save_plan(Path(directory) / f"{stem}.json", record)]
    logger.info(f"导出 {plan_path} 为 {fmt}: {len(paths)} 个文件")
    return paths
