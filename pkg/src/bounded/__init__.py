"""Multi-scale neighborhood statistics and a compact classifier for point cloud
sharp-edge and boundary detection."""

__version__ = "0.1.0"

from .baseline import CaConfig, ca_classify, surface_variation
from .features import (DEFAULT_SCALES, FULL_MASK, NAMED_MASKS, ScaleConfig, extract_features,
                       feature_matrix, read_features, write_features)
from .io import BOUNDARY, NON_EDGE, SHARP_EDGE, PointCloud, read_cloud, read_ply, write_ply
from .knn import KnnIndex, brute_force_knn, build_index, query_knn
from .metrics import ConfusionMatrix, confusion, evaluate_cloud, median_report, scores
from .net import (Model, TrainConfig, backward, classify, forward, init_model, load_model,
                  save_model, train)
from .synth import SceneSpec, compose, generate, generate_suite

__all__ = [
    "BOUNDARY", "CaConfig", "ConfusionMatrix", "DEFAULT_SCALES", "FULL_MASK", "KnnIndex", "Model",
    "NAMED_MASKS", "NON_EDGE", "PointCloud", "SHARP_EDGE", "ScaleConfig", "SceneSpec", "TrainConfig",
    "backward", "brute_force_knn", "build_index", "ca_classify", "classify", "compose", "confusion",
    "evaluate_cloud", "extract_features", "feature_matrix", "forward", "generate", "generate_suite",
    "init_model", "load_model", "median_report", "query_knn", "read_cloud", "read_features", "read_ply",
    "save_model", "scores", "surface_variation", "train", "write_features", "write_ply",
]
