from .curriculum import (
    CurriculumPlan,
    DifficultyBand,
    Problem,
    StageConfig,
    StubRefiner,
    advance_stage,
    build_plan,
    dual_end_filter,
    estimate_difficulty,
)
from .engine import MismatchConfig, RolloutWave, generate_wave, rollout_eval_logits
from .estimators import (
    EstimatorConfig,
    GradientEstimate,
    geo_mis_mask,
    geo_mismatch_weight,
    group_advantage,
    gspo_mis_gradient,
    gspo_objective,
    sequence_ratio,
)
from .exceptions import (
    RLVRException,
    ParseError,
    UnsupportedCommand,
    UnbalancedBraces,
    DegenerateBatchError,
    PlanInvalid,
    InvalidSpec,
    LadderInvalid,
    ChecksumMismatch,
    ConfigError,
    CheckpointFormatError,
    DatasetFormatError,
    InvalidProblem,
)
from .expr import canonicalize, expr_equivalent, parse_expression
from .policy import GroupBatch, PolicyParams, Trajectory, Vocabulary, sample, sequence_logprob
from .tasks import TaskSpec, generate_dataset, tier_ladder
from .verifier import extract_boxed, grade_trajectory

__all__ = [
    "CurriculumPlan",
    "DifficultyBand",
    "Problem",
    "StageConfig",
    "StubRefiner",
    "advance_stage",
    "build_plan",
    "dual_end_filter",
    "estimate_difficulty",
    "MismatchConfig",
    "RolloutWave",
    "generate_wave",
    "rollout_eval_logits",
    "EstimatorConfig",
    "GradientEstimate",
    "geo_mis_mask",
    "geo_mismatch_weight",
    "group_advantage",
    "gspo_mis_gradient",
    "gspo_objective",
    "sequence_ratio",
    "RLVRException",
    "ParseError",
    "UnsupportedCommand",
    "UnbalancedBraces",
    "DegenerateBatchError",
    "PlanInvalid",
    "InvalidSpec",
    "LadderInvalid",
    "ChecksumMismatch",
    "ConfigError",
    "CheckpointFormatError",
    "DatasetFormatError",
    "InvalidProblem",
    "canonicalize",
    "expr_equivalent",
    "parse_expression",
    "GroupBatch",
    "PolicyParams",
    "Trajectory",
    "Vocabulary",
    "sample",
    "sequence_logprob",
    "TaskSpec",
    "generate_dataset",
    "tier_ladder",
    "extract_boxed",
    "grade_trajectory",
]
