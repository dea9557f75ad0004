"""Self-regularised UNet segmentation toolkit."""

from .data import FoldSpec, SegSample, augment, generate_synthetic, load_directory_dataset, make_folds
from .diagnostics import AttentionMap, Half, SimilarityMatrix, channel_similarity, diagnose_model, grad_cam, redundancy_score
from .estimator import SelfRegUNetSegmenter, check_images, check_masks
from .losses import (
    IFDConfig,
    LossBreakdown,
    SCRConfig,
    dice_ce_loss,
    ifd_loss,
    random_channel_select,
    scr_loss,
    spatial_average_pool,
    total_loss,
)
from .training import (
    MetricSet,
    RunReport,
    TrainConfig,
    dice_coefficient,
    evaluate,
    iou,
    run_ablation,
    run_crossval,
    train,
)
from .unet import (
    FeatureTap,
    TapAddress,
    UNet,
    UNetConfig,
    build_unet,
    forward,
    load_checkpoint,
    save_checkpoint,
    tap_registry,
    tap_shapes,
)

__version__ = "0.1.0"
