"""Locality-in-locality vision transformer with moment-exchange augmentation
and white-box robustness tooling, built on a small float64 autodiff core.

Layout:
    tensor          dense tensors, reverse-mode autodiff, binary serialization
    nn              linear / layernorm / attention / depth-wise conv / losses
    model           configs, tokenizer, nested blocks, checkpoints
    moex            positional moment normalization and exchange
    attacks         fgsm / pgd generators and robust accuracy
    data            cifar-10, gtsrb, synthetic glyphs, batching
    train           sgd loop, metrics, attention-map export
    gradcheck       finite-difference utilities
    cli             the `lnl` command
"""

from .attacks import AttackSpec, RobustnessReport, fgsm, pgd, robust_accuracy
from .data import (
    BatchPair,
    DatasetSplit,
    batches,
    load_cifar10,
    load_gtsrb,
    resize_bilinear,
    synth_shapes,
)
from .model import (
    CONFIGS,
    ForwardResult,
    LnlConfig,
    LnlModel,
    TokenState,
    build_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .moex import (
    MoexBatchPlan,
    MoexMoments,
    apply_moex,
    moex_loss,
    moment_exchange,
    pono_normalize,
)
from .tensor import DomainError, ShapeError, Tensor
from .train import (
    SGD,
    MetricsRecord,
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    export_attention,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "RobustnessReport", "fgsm", "pgd", "robust_accuracy",
    "BatchPair", "DatasetSplit", "batches", "load_cifar10", "load_gtsrb",
    "resize_bilinear", "synth_shapes",
    "CONFIGS", "ForwardResult", "LnlConfig", "LnlModel", "TokenState",
    "build_model", "load_checkpoint", "param_count", "save_checkpoint",
    "MoexBatchPlan", "MoexMoments", "apply_moex", "moex_loss",
    "moment_exchange", "pono_normalize",
    "DomainError", "ShapeError", "Tensor",
    "SGD", "MetricsRecord", "TrainConfig", "TrainingDivergedError",
    "evaluate", "export_attention", "train",
]
