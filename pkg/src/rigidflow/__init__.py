"""Scene flow and rigid-object segmentation by optimisation over hard and soft rigid clusters."""

from .cloud import RigidTransform, TimedPointCloud, load_cloud, load_flow, preprocess, save_cloud, save_flow
from .clustering import ClusterConfig, HardClustering
from .egomotion import IcpConfig, icp
from .losses import LossConfig
from .metrics import flow_metrics, threeway
from .optimize import RunConfig, RunResult, run_pair, run_sequence

__version__ = "0.1.0"

__all__ = [
    "ClusterConfig", "HardClustering", "IcpConfig", "LossConfig", "RigidTransform", "RunConfig",
    "RunResult", "TimedPointCloud", "flow_metrics", "icp", "load_cloud", "load_flow", "preprocess",
    "run_pair", "run_sequence", "save_cloud", "save_flow", "threeway",
]
