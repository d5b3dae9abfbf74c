"""
规划器的各个可训练阶段
"""

from .condaug import ConditioningAugmentor, augment, kl_penalty
from .ctxembed import GraphEncoder, encode_graph, fuse_condition, train_graph_encoder
from .functionalizer import Functionalizer, avg_fusion, partition_zones, project
from .gridgen import GridStage, PlannerModel, generate_plan, train_grid_stage
from .zonegan import ZoneGan, generate_zones, train_zone_gan

__all__ = [
    "ConditioningAugmentor", "augment", "kl_penalty",
    "GraphEncoder", "encode_graph", "fuse_condition", "train_graph_encoder",
    "Functionalizer", "avg_fusion", "partition_zones", "project",
    "GridStage", "PlannerModel", "generate_plan", "train_grid_stage",
    "ZoneGan", "generate_zones", "train_zone_gan",
]
