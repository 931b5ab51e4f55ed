"""Few-shot panoptic pseudo-label generation over cached backbone features."""

from .boundaries import BoundaryMap, binarize, gt_boundary
from .bottomup import (
    CenterHeatmap,
    OffsetField,
    encode_targets,
    extract_centers,
    group_pixels,
    majority_vote,
)
from .errors import (
    BadMagicError,
    DimensionOverflowError,
    FileFormatError,
    PackingError,
    PanolabelError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from .estimators import FewShotHead, PanopticLabelGenerator, generate_pseudo_label
from .fusion import (
    Component,
    FusionConfig,
    connected_components,
    fuse,
    label_components,
    relabel_panoptic,
)
from .grids import (
    VOID_ID,
    ClassCatalog,
    FeatureMap,
    InstanceMap,
    PanopticMap,
    ProbMap,
    SemanticMap,
    bilinear_resample,
    hflip,
    softmax_channels,
)
from .heads import MlpHead, adam_step, head_backward, head_forward, init_head, softmax_backward
from .io import (
    read_catalog,
    read_checkpoint,
    read_labels,
    read_manifest,
    read_tensor,
    write_catalog,
    write_checkpoint,
    write_labels,
    write_manifest,
    write_tensor,
)
from .losses import (
    LossConfig,
    LossWeights,
    PixelWeightMap,
    binary_ce,
    bootstrapped_ce,
    l1_offset,
    mse_center,
    total_loss,
    weighted_bootstrapped_ce,
)
from .metrics import ConfusionMatrix, PqAccumulator, PqReport, panoptic_quality
from .synth import SceneParams, default_catalog, gen_scene, write_dataset
from .training import BatchSpec, TrainConfig, TrainSample, build_mixed_batch, train_few_shot
from .tta import ScaleSet, predict_multiscale, predict_single, scale_fuse, tile_split

__version__ = "0.1.0"
