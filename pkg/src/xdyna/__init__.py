"""Desk-scale controllable video diffusion.

A small epsilon-prediction UNet over pixel-space clips with a pluggable
reference-appearance mechanism (cross-frame adapter, concatenated
self-attention, or decoupled cross-attention), pose/face control branches,
temporal attention, mixed human/scene training on procedural data,
cross-driven inference, and an evaluation suite.
"""

from .attention import (
    AttentionLayer,
    DynamicsAdapterLayer,
    IPAdapterLayer,
    dynamics_adapter_attention,
    ip_adapter_attention,
    refnet_concat_attention,
    self_attention,
)
from .checkpoint import CheckpointInfo, load_checkpoint, save_checkpoint
from .config import ArchConfig, ScheduleConfig, TrainConfig
from .controlnet import ControlMap, ControlNet
from .errors import (
    ConfigurationError,
    MetricError,
    NumericalError,
    ParameterError,
    PipelineError,
    ShapeError,
)
from .inference import DrivingBundle, animate, live_photo
from .metrics import (
    EvalConfig,
    GaussianStats,
    MetricReport,
    evaluate_run,
    expression_error,
    face_cos,
    face_detect_rate,
    frame_difference_energy,
    frechet_distance,
    pixel_metrics,
    video_features_handcrafted,
)
from .model import AnimationModel, build_model
from .reference import (
    DynamicsAdapter,
    IPAdapterModule,
    ReferenceCache,
    encode_reference,
    init_dynamics_adapter,
    init_refnet,
)
from .render import (
    FaceRenderParams,
    SkeletonPose,
    compose_face_map,
    render_face_patch,
    render_pose_map,
    synthesize_cross_identity_face,
)
from .sampling import ddim_sample, ddim_timesteps
from .schedules import NoiseSchedule, add_noise, make_noise_schedule
from .synthetic import (
    ClipRecord,
    HumanClipSpec,
    SceneSpec,
    build_fused_dataset,
    gen_human_clip,
    gen_scene_clip,
    load_clip,
    save_clip,
)
from .temporal import TemporalAttention, TemporalModule, temporal_attention
from .training import (
    TrainResult,
    epsilon_mse,
    evaluate_epsilon_loss,
    grad_check,
    train_stage1,
    train_stage2,
)
from .unet import DenoisingUNet

__version__ = "0.1.0"
