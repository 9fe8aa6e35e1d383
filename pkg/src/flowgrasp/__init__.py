"""Flow-based generative grasp synthesis from partial point clouds."""

from .checkpoint import load_model, save_model
from .errors import (ContractError, DataError, FlowgraspError, NumericError,
                     SerializationError)
from .evaluator import (DEFAULT_EPSILON, EPSILON_GRID, GraspEvaluator, fuse,
                        rank_and_select)
from .flows import FlowStack
from .grasps import GRASP_DIM, GraspConfig, grasp_from_vector
from .models import (CnfGraspSampler, CvaeGraspSampler, GraspSample,
                     LvmGraspSampler, PRESETS, beta_schedule, elbo_loss)
from .pointcloud import (BpsBasis, PointCloud, ShapeSpec, bps_encode,
                         canonicalize, load_basis, load_cloud, make_basis,
                         partial_view, sample_shape, save_basis, save_cloud)
from .datasetgen import (DatasetConfig, GraspDataset, GraspLabel, build_dataset,
                         label_grasp, propose_grasps)

__version__ = "0.1.0"

__all__ = [
    "BpsBasis", "CnfGraspSampler", "ContractError", "CvaeGraspSampler",
    "DEFAULT_EPSILON", "DataError", "DatasetConfig", "EPSILON_GRID",
    "FlowStack", "FlowgraspError", "GRASP_DIM", "GraspConfig", "GraspDataset",
    "GraspEvaluator", "GraspLabel", "GraspSample", "LvmGraspSampler",
    "NumericError", "PRESETS", "PointCloud", "SerializationError", "ShapeSpec",
    "beta_schedule", "bps_encode", "build_dataset", "canonicalize", "elbo_loss",
    "fuse", "grasp_from_vector", "label_grasp", "load_basis", "load_cloud",
    "load_model", "make_basis", "partial_view", "propose_grasps",
    "rank_and_select", "sample_shape", "save_basis", "save_cloud", "save_model",
]
