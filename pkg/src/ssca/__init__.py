"""Counterfactual region attribution, background-refilling augmentation, and
the closed training loop that feeds mined hard samples back into training,
with a synthetic shortcut-learning testbed to measure the debiasing effect."""

__version__ = "0.1.0"

from .attribution import (
    AttributionResult,
    SearchConfig,
    StepRecord,
    UtilityWeights,
    deletion_curve,
    greedy_counterfactual,
    greedy_factual,
    select_counter_target,
)
from .augment import (
    AugmentedSample,
    DonorPool,
    LabeledSample,
    MiningConfig,
    build_donor_pool,
    counterfactual_augment,
    mine_hard_batch,
)
from .imaging import (
    Image,
    RegionGrid,
    RegionMask,
    area_fraction,
    composite,
    mask_delete,
    mask_insert,
    partition_grid,
    render_pixel_mask,
)
from .pipeline import evaluate, evaluate_corruptions, flip_rate, train_erm, train_ssca
from .scorer import ScoreVector, ScorerInfo, mock_area_scorer, mock_region_weight_scorer, score_batch
from .testbed import CorruptionSpec, ShortcutDatasetConfig, apply_corruption, generate
from .tinynet import Arch, TinyNetParams, TinyNetScorer, TrainConfig, default_arch

__all__ = [
    "__version__",
    "AttributionResult",
    "SearchConfig",
    "StepRecord",
    "UtilityWeights",
    "deletion_curve",
    "greedy_counterfactual",
    "greedy_factual",
    "select_counter_target",
    "AugmentedSample",
    "DonorPool",
    "LabeledSample",
    "MiningConfig",
    "build_donor_pool",
    "counterfactual_augment",
    "mine_hard_batch",
    "Image",
    "RegionGrid",
    "RegionMask",
    "area_fraction",
    "composite",
    "mask_delete",
    "mask_insert",
    "partition_grid",
    "render_pixel_mask",
    "evaluate",
    "evaluate_corruptions",
    "flip_rate",
    "train_erm",
    "train_ssca",
    "ScoreVector",
    "ScorerInfo",
    "mock_area_scorer",
    "mock_region_weight_scorer",
    "score_batch",
    "CorruptionSpec",
    "ShortcutDatasetConfig",
    "apply_corruption",
    "generate",
    "Arch",
    "TinyNetParams",
    "TinyNetScorer",
    "TrainConfig",
    "default_arch",
]
