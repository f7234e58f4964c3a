"""Point-cloud instance segmentation with a shared 3D-text embedding space.

Submodules:

- geometry: clouds, exact kNN (kd-tree), voxel downsampling, PLY/CSV I/O
- nnkit: dense MLP forward/backward, softmax, Adam, gradient checking
- segnet: the stacked neighborhood-attention network and embedding head
- losses: pull-push contrastive loss and weak-label pair sampling
- clustering: DBSCAN, mean-shift, fixed-radius linkage, ARI
- multimodal: instance pooling, 3D/text projections, InfoNCE, zero-shot ops
- data: synthetic scene generation, splits, text-table construction
- trainer: the two training phases, checkpoints, gradient-check suite
- cli: the `segvec3d` command
"""

from .clustering import InstanceSegmentation, adjusted_rand_index, dbscan, mean_shift, radius_linkage
from .errors import SegVecError
from .geometry import (
    KdTree,
    NeighborGraph,
    PointCloud,
    build_feature_knn,
    build_knn_graph,
    read_csv,
    read_ply,
    voxel_downsample,
    write_csv,
    write_ply,
)
from .losses import PairSet, contrastive_loss, sample_pairs
from .multimodal import (
    InstanceDescriptor,
    JointSpaceModel,
    TextEmbeddingTable,
    encode_text,
    infonce_loss,
    pool_instance,
    project_3d,
    project_text,
    retrieve,
    zero_shot_label,
)
from .data import SceneSpec, build_text_table_for_categories, generate_scene, split_dataset
from .segnet import SegNetConfig, SegNetParams, forward_full
from .trainer import (
    Checkpoint,
    TrainConfig,
    gradient_check_suite,
    load_checkpoint,
    save_checkpoint,
    train_alignment,
    train_segnet,
)

__version__ = "0.1.0"
