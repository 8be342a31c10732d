"""Aerial-video building damage toolkit.

Synthetic video simulation, hierarchical anchor sampling, a trainable
frame similarity encoder, cross-frame score refinement, and COCO-style
average precision evaluation, all on plain numpy.
"""

__version__ = "0.1.0"

from .dataset import (
    DatasetError,
    DatasetFile,
    ImageInfo,
    Instance,
    SizeStats,
    Video,
    area_bucket,
    format_size_stats,
    instance_mask,
    load_dataset,
    load_detections,
    rasterize_polygon,
    save_dataset,
    save_detections,
    size_stats,
    validate_dataset,
)
from .evaluate import ApReport, ApSummary, compute_ap, evaluate_both, format_ap_report
from .geometry import (
    DAMAGE_SCALES,
    BBox,
    BitMask,
    Detection,
    bilinear_sample,
    inner_intersection,
    iou,
    mask_iou,
    nms,
    roi_align,
)
from .hrpn import (
    AnchorConfig,
    HrpnLossReport,
    SampledAnchor,
    filter_anchors,
    generate_anchors,
    generate_proposals,
    hrpn_loss,
    multitask_loss,
    sampling_score,
)
from .optim import Adam
from .pyramid import (
    STRIDES,
    FeaturePyramid,
    TensorFormatError,
    instance_signature,
    load_pyramid,
    load_tensor,
    save_pyramid,
    save_tensor,
    synth_pyramid,
)
from .refine import MatchReport, RefineConfig, refine_scores
from .sim import DetectorNoise, VideoSpec, generate_video, merge_datasets, synth_detector
from .srn import (
    EncoderParams,
    MclConfig,
    TrainConfig,
    Triplet,
    VideoFeatures,
    encode_map,
    gradient_check,
    init_encoder,
    load_encoder,
    mcl_gradient,
    mcl_loss,
    sample_triplets,
    save_encoder,
    similarity,
    train_srn,
    triplet_accuracy,
)

__all__ = [name for name in dir() if not name.startswith("_")]
