import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .policy import GroupBatch, PolicyParams, Trajectory, grad_sequence_logprob, token_logprobs

logger = logging.getLogger(__name__)

MASK_MODES = ("none", "geo", "seq", "truncate")


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings of the masked sequence-level clipped surrogate.

    ``mask_mode`` selects how the frozen rollout/trainer mismatch is handled:
    ``geo`` rejects on the per-token geometric mean, ``seq`` on the full
    sequence product, ``truncate`` keeps everything and caps the product at
    ``mis_threshold``, ``none`` ignores the mismatch entirely.
    """

    clip_eps: float = 0.2
    mis_threshold: float = 1.5
    std_floor: float = 1e-6
    mask_mode: str = "geo"
    mis_multiplier: bool = True

    def __post_init__(self) -> None:
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if not self.mis_threshold >= 1:
            raise ValueError("mis_threshold must be at least 1")
        if not self.std_floor > 0:
            raise ValueError("std_floor must be positive")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")


@dataclass(frozen=True)
class TrajectoryDiagnostics:
    prompt_id: str
    index: int
    ratio: float
    advantage: float
    geo_weight: float
    kept: bool
    clipped: bool


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    objective: float
    gradient: np.ndarray
    kept_count: int
    masked_count: int
    diagnostics: List[TrajectoryDiagnostics] = field(default_factory=list)
    degenerate: bool = False

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.gradient))

    @property
    def masked_fraction(self) -> float:
        total = self.kept_count + self.masked_count
        return self.masked_count / total if total else 0.0

    @property
    def clip_active_fraction(self) -> float:
        if not self.kept_count:
            return 0.0
        return sum(1 for d in self.diagnostics if d.kept and d.clipped) / self.kept_count

    @property
    def mean_geo_weight(self) -> float:
        if not self.diagnostics:
            return 1.0
        return float(np.mean([d.geo_weight for d in self.diagnostics]))

    @property
    def max_geo_weight(self) -> float:
        if not self.diagnostics:
            return 1.0
        return float(max(d.geo_weight for d in self.diagnostics))


def group_advantage(rewards: Sequence[float], std_floor: float = 1e-6) -> List[float]:
    """Standardize rewards within one group using the population std."""
    if len(rewards) < 2:
        raise ValueError(f"A group needs at least 2 rewards, got {len(rewards)}")
    values = np.asarray(rewards, dtype=np.float64)
    std = float(np.std(values))
    if std < std_floor:
        return [0.0] * len(values)
    return [float(a) for a in (values - np.mean(values)) / std]


def assign_advantages(groups: Sequence[GroupBatch], std_floor: float = 1e-6) -> List[GroupBatch]:

    return [replace(g, advantages=tuple(group_advantage(g.rewards, std_floor))) for g in groups]


def sequence_ratio(traj: Trajectory, params_new: PolicyParams, params_old: PolicyParams) -> float:

    new = token_logprobs(params_new, traj.prompt, traj.actions)
    old = token_logprobs(params_old, traj.prompt, traj.actions)
    return math.exp(float(np.mean(new - old)))


def log_mismatch(traj: Trajectory) -> float:
    """Summed per-token log ratio of trainer to rollout probabilities."""
    return float(np.sum(traj.trainer_logprobs - traj.rollout_logprobs))


def geo_mismatch_weight(traj: Trajectory) -> float:

    return math.exp(log_mismatch(traj) / traj.length)


def sequence_mismatch_weight(traj: Trajectory) -> float:

    return math.exp(log_mismatch(traj))


def geo_mis_mask(traj: Trajectory, threshold: float) -> bool:

    if threshold < 1:
        raise ValueError("threshold must be at least 1")
    return geo_mismatch_weight(traj) <= threshold


def _mismatch_correction(traj: Trajectory, cfg: EstimatorConfig) -> Tuple[bool, float]:
    """Keep flag and frozen importance multiplier for one trajectory."""
    if cfg.mask_mode == "none":
        return True, 1.0

    c = cfg.mis_threshold
    log_rho = log_mismatch(traj)
    if cfg.mask_mode == "truncate":
        return True, math.exp(min(log_rho, math.log(c)))

    if cfg.mask_mode == "geo":
        keep = geo_mis_mask(traj, c)
        log_cap = traj.length * math.log(c)
    else:
        keep = log_rho <= math.log(c)
        log_cap = math.log(c)
    if not keep:
        return False, 0.0
    if not cfg.mis_multiplier:
        return True, 1.0
    return True, math.exp(min(log_rho, log_cap))


def _surrogate(groups: Sequence[GroupBatch], params_new: PolicyParams, params_old: PolicyParams,
               cfg: EstimatorConfig, use_mismatch: bool) -> GradientEstimate:
    if not groups:
        raise ValueError("At least one group is required")

    gradient = np.zeros_like(params_new.theta)
    objective = 0.0
    kept_count = 0
    masked_count = 0
    diagnostics: List[TrajectoryDiagnostics] = []
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps

    degenerate = all(float(np.std(g.rewards)) < cfg.std_floor for g in groups)

    # Fixed group-major, index-minor reduction order
    for group in groups:
        if group.advantages is None:
            raise ValueError(f"Group {group.prompt_id} has no advantages; call assign_advantages first")
        scale = 1.0 / group.size
        group_objective = 0.0
        for traj, advantage in zip(group.trajectories, group.advantages):
            keep, weight = _mismatch_correction(traj, cfg) if use_mismatch else (True, 1.0)
            geo = geo_mismatch_weight(traj)
            if not keep:
                masked_count += 1
                diagnostics.append(TrajectoryDiagnostics(
                    group.prompt_id, traj.index, float("nan"), advantage, geo, False, False))
                continue
            kept_count += 1

            new = token_logprobs(params_new, traj.prompt, traj.actions)
            old = token_logprobs(params_old, traj.prompt, traj.actions)
            ratio = math.exp(float(np.mean(new - old)))
            unclipped = ratio * advantage
            clipped_value = min(max(ratio, lo), hi) * advantage
            clipped = clipped_value < unclipped
            group_objective += weight * min(unclipped, clipped_value)
            if not clipped and advantage != 0.0:
                coeff = scale * weight * advantage * ratio / traj.length
                gradient += coeff * grad_sequence_logprob(params_new, traj.prompt, traj.actions)
            diagnostics.append(TrajectoryDiagnostics(
                group.prompt_id, traj.index, ratio, advantage, geo, True, clipped))
        objective += scale * group_objective

    objective /= len(groups)
    gradient /= len(groups)
    if degenerate:
        logger.warning(f"All {len(groups)} groups have zero reward variance; gradient is zero")

    return GradientEstimate(
        objective=objective,
        gradient=gradient,
        kept_count=kept_count,
        masked_count=masked_count,
        diagnostics=diagnostics,
        degenerate=degenerate,
    )


def gspo_objective(groups: Sequence[GroupBatch], params_new: PolicyParams, params_old: PolicyParams,
                   cfg: Optional[EstimatorConfig] = None) -> GradientEstimate:
    """Clipped sequence-level surrogate and its gradient, ignoring engine mismatch."""
    return _surrogate(groups, params_new, params_old, cfg or EstimatorConfig(), use_mismatch=False)


def gspo_mis_gradient(groups: Sequence[GroupBatch], params_new: PolicyParams, params_old: PolicyParams,
                      cfg: Optional[EstimatorConfig] = None) -> GradientEstimate:
    """Clipped surrogate over trajectories that survive the mismatch mask.

    Advantages must already be computed on the full groups; masking only
    removes terms, it never changes the baseline statistics.
    """
    estimate = _surrogate(groups, params_new, params_old, cfg or EstimatorConfig(), use_mismatch=True)
    if estimate.masked_count:
        logger.debug(f"Masked {estimate.masked_count} of "
                     f"{estimate.masked_count + estimate.kept_count} trajectories")
    return estimate
