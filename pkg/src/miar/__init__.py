"""Cross-modality attention fusion with contrastive and norm alignment for
multimodal emotion-intensity regression, plus training/ablation tooling."""

from .alignment import (
    AlignedTokens,
    AlignmentProjector,
    LossBreakdown,
    align_project,
    alignment_loss,
    cosine_similarity_matrix,
    info_nce,
    norm_align_loss,
)
from .attention import MhaBlock, scaled_dot_attention, tfa
from .config import ModelConfig, TrainConfig
from .datamodel import (
    DatasetSplit,
    RawModalityBatch,
    SyntheticSpec,
    default_synthetic_specs,
    generate_synthetic,
    load_container,
    pad_or_truncate,
    write_container,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    IntegrityError,
    MiarError,
    SchemaError,
    ShapeError,
    TrainingDivergedError,
)
from .fusion import (
    ChannelMerge,
    CmfNetwork,
    CmtStack,
    FusionIntermediate,
    MiarModel,
    ModelOutput,
    TokenSet,
    build_model,
    extract_token,
    init_parameters,
)
from .objective_metrics import (
    MetricsReport,
    PredictionHead,
    acc2_f1,
    acc7,
    compute_metrics,
    predict_head,
    task_loss,
    total_loss,
)
from .trainer import (
    Checkpoint,
    TrainHistory,
    evaluate_model,
    grad_check,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    sweep_omega,
    train_model,
)

__version__ = "0.1.0"
