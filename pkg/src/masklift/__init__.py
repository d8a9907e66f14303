"""masklift: fuse per-frame 2D instance masks into 3D scene-level instance masks.

Per-frame masks are lifted into labeled point clouds through depth
back-projection, fused pairwise up a reduction tree by overlap voting, and
optionally reconciled with a geometric over-segmentation of the scene.
"""

__version__ = "0.1.0"

from .camera import (
    CameraIntrinsics,
    CameraPose,
    DepthFrame,
    project_point,
    unproject_frame,
    unproject_pixel,
)
from .cloud import LabeledCloud, concat_clouds
from .errors import (
    AlignmentError,
    ConfigError,
    InvalidDepthError,
    InvalidPoseError,
    MalformedInputError,
    MaskliftError,
    PlyParseError,
    SceneLoadError,
    ValidationError,
)
from .eval import (
    Box,
    MatchReport,
    PerturbOptions,
    PlanePatch,
    SceneSpec,
    demo_scene_spec,
    ground_truth_cloud,
    hungarian_match_iou,
    look_at_pose,
    perturb_masks,
    render_depth,
    render_frame,
    write_synthetic_scene,
)
from .gridpool import PoolConfig, grid_pool
from .io import SceneDataset, load_scene, read_ply, write_ply
from .lift import IdAllocator, MaskImage, RawMaskSet, lift_frame, resolve_overlaps
from .merge import (
    CorrespondenceSet,
    MergeConfig,
    MergeTreeTrace,
    OverlapStats,
    UnionFind,
    bidirectional_merge,
    bottom_up_merge,
    find_correspondences,
    merge_decisions,
    overlap_stats,
)
from .overseg import (
    NormalCloud,
    Oversegmentation,
    OversegConfig,
    SegGraph,
    build_graph,
    ensemble,
    estimate_normals,
    felzenszwalb_segment,
)
from .cli import PipelineConfig, lift_scene, run_pipeline

__all__ = [name for name in dir() if not name.startswith("_")]
