"""Hierarchical joint-embedding predictive learning for trajectory similarity."""

from .config import PROFILES, RunConfig
from .data import SynthRegion, Trajectory, load_csv, synth_generate
from .estimator import HierJEPA
from .evaluation import SelfSimConfig, finetune_decoder, self_similarity
from .hexgrid import HexGridSpec, build_region_graph
from .measures import MeasureConfig, discrete_frechet, edr, hausdorff, lcss_dist, pairwise_matrix
from .region_embed import EmbeddingTable, Node2VecCellEmbedder

__all__ = [
    "PROFILES", "RunConfig", "SynthRegion", "Trajectory", "load_csv", "synth_generate", "HierJEPA",
    "SelfSimConfig", "finetune_decoder", "self_similarity", "HexGridSpec", "build_region_graph",
    "MeasureConfig", "discrete_frechet", "edr", "hausdorff", "lcss_dist", "pairwise_matrix",
    "EmbeddingTable", "Node2VecCellEmbedder",
]
__version__ = "0.1.0"
