"""Robustness benchmark for multi-agent LiDAR perception.

Core pieces: scene geometry (poses, clouds, boxes), six seeded corruption
simulators, dense painted teacher construction, BEV pillar encoding with
multi-scale attention fusion, distillation and reconstruction loss kernels
with analytic gradients, rotated-box detection metrics (AP, CE, mCE), a
binary cloud format plus YAML manifests, a synthetic scene generator, and
an end-to-end evaluation pipeline exposed through the ``lidarbench`` CLI.
"""

from .scene import (
    Agent,
    BBox3D,
    PointCloud,
    Pose,
    Scene,
    aggregate,
    gate_by_range,
    normalize_yaw,
    points_in_any_box,
    points_in_box,
    transform_box,
    transform_points,
)
from .rng import derive_rng, derive_seed, stream_key
from .corruption import (
    CORRUPTION_KINDS,
    BeamMissing,
    CorruptionConfig,
    CrossSensor,
    Crosstalk,
    Fog,
    FogParams,
    MotionBlur,
    Snow,
    SnowParams,
    assign_beams,
    beam_missing,
    cross_sensor,
    crosstalk,
    fog,
    motion_blur,
    snow,
)
from .teacher import build_multiview, make_teacher, paint, replace_object_regions
from .encode import (
    DetectionHead,
    FeatureMap,
    ForegroundMask,
    GridSpec,
    PillarEncoder,
    attention_weights,
    detect_head,
    downsample,
    foreground_mask,
    fuse_attention,
    fuse_single,
    pillarize,
    upsample,
)
from .distill import (
    LossValue,
    finite_diff_check,
    flatten_grads,
    loss_dae,
    loss_daf,
    loss_dap,
    loss_kd,
)
from .recon import (
    ReconTarget,
    VoxelGrid,
    build_recon_target,
    decode_points,
    loss_occupancy,
    loss_offsets,
    loss_recon,
    recon_head,
)
from .metrics import (
    DetectionSet,
    RobustnessReport,
    average_precision,
    corruption_error,
    iou_bev,
    mean_ce,
    nms,
    write_chart,
)
from .pcio import (
    FrameManifest,
    AgentEntry,
    read_cloud,
    read_manifest,
    read_predictions,
    read_suite,
    write_cloud,
    write_manifest,
    write_predictions,
    write_suite,
)
from .synth import SynthSpec, make_scene, write_frames
from .pipeline import (
    PipelineOptions,
    PipelineResult,
    default_suite,
    run_frame,
    run_pipeline,
)

__version__ = "0.1.0"
