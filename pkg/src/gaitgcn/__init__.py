"""Gait recognition from skeleton keypoint sequences.

A small autodiff tensor engine drives graph-convolutional stream networks
over 15-joint walking sequences; retrieval uses cross-view rank-1
accuracy with identical-view exclusion, and a two-branch fusion rule
combines these embeddings with an externally supplied appearance vector.
"""

from .evaluate import EvalProtocol, evaluate_rank1, lambda_sweep
from .graph import (full_adjacency, hop_distances, k_adjacency,
                    multi_scale_adjacency, natural_adjacency,
                    normalize_aggregator)
from .kernels import active_backend, available_backends, use_backend
from .model import (EmbeddingRecord, ModelConfig, MultiStreamModel,
                    StreamSpec, fuse_two_branch, load_checkpoint,
                    load_embeddings, save_checkpoint, save_embeddings)
from .skeleton import (JOINT_NAMES, SkeletonSequence, StreamBundle,
                       default_topology, derive_streams, load_dataset,
                       normalize_coords, resample_to_length, select_joints,
                       write_dataset)
from .synthetic import generate_synthetic_dataset
from .tensor import Tensor, finite_difference_check
from .train import TrainConfig, extract_embeddings, train

__version__ = "0.1.0"

__all__ = [
    "EvalProtocol", "evaluate_rank1", "lambda_sweep",
    "full_adjacency", "hop_distances", "k_adjacency",
    "multi_scale_adjacency", "natural_adjacency", "normalize_aggregator",
    "active_backend", "available_backends", "use_backend",
    "EmbeddingRecord", "ModelConfig", "MultiStreamModel", "StreamSpec",
    "fuse_two_branch", "load_checkpoint", "load_embeddings",
    "save_checkpoint", "save_embeddings",
    "JOINT_NAMES", "SkeletonSequence", "StreamBundle", "default_topology",
    "derive_streams", "load_dataset", "normalize_coords",
    "resample_to_length", "select_joints", "write_dataset",
    "generate_synthetic_dataset",
    "Tensor", "finite_difference_check",
    "TrainConfig", "extract_embeddings", "train",
    "__version__",
]
