"""Framework-independent toolkit for dual-source pseudo-label fusion,
patch-weighted and prototype-based feature alignment, and mean-teacher EMA."""

from .errors import SfodkitError, InvalidInputError, ValidationError, FormatError
from .geometry import Box, iou, cluster
from .fusion import (
    Detection,
    FusedLabel,
    FusionConfig,
    shannon_entropy,
    entropy_weights,
    fuse_cluster,
    depf,
    nms,
    wbf,
    remove_individual,
)
from .pgfa import PatchWeightConfig, l2_normalize_rows, similarity_matrix, patch_weights, pgfa_loss
from .pifa import (
    FeatureMap,
    PrototypeBank,
    InstanceFeature,
    roi_align,
    pool_instance,
    batch_class_means,
    update_prototypes,
    pifa_loss,
)
from .ema import EmaState, ema_step
from .selftrain import TrainerConfig, AdaptationReport, total_loss, run_adaptation

__version__ = "0.1.0"
