"""Scene-aware generalized category discovery at desk scale."""

from .data import (
    GcdSplit,
    Quadrant,
    Sample,
    SyntheticConfig,
    derive_base_scenes,
    gen_synthetic,
    load_dataset,
    load_scene_annotations,
    make_gcd_split,
    quadrant_of,
    save_dataset,
)
from .decouple import (
    MaskSource,
    SaliencyMask,
    extract_object,
    heuristic_mask,
    load_mask,
    mean_fill,
)
from .evaluate import (
    DeviationStats,
    EvalReport,
    assignment_solve,
    cluster_acc,
    export_embeddings,
    feature_deviation,
    quadrant_report,
)
from .losses import (
    BranchLossParts,
    Hyperparams,
    branch_loss,
    info_nce_loss,
    self_distill_loss,
    sup_cls_loss,
    sup_con_loss,
    total_loss,
)
from .model import (
    BackboneConfig,
    DualBranchModel,
    FeatureBundle,
    HeadOutput,
    ModelConfig,
    normalized_concat,
    predict,
    scene_features,
)
from .trainer import (
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    augment,
    cosine_lr,
    tau_t_schedule,
    train,
)

__version__ = "0.1.0"
