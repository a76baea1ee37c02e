import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import RunConfig, save_config
from .curriculum import (
    Problem,
    StageConfig,
    StubRefiner,
    advance_stage,
    load_dataset,
    prepare_stage,
    write_dataset,
)
from .engine import dump_wave, generate_wave, id_entropy, load_wave, rollout_trajectory
from .estimators import EstimatorConfig, GradientEstimate, assign_advantages, gspo_mis_gradient
from .exceptions import ChecksumMismatch, CheckpointFormatError, DegenerateBatchError
from .jsonl import read_jsonl, write_jsonl
from .policy import GroupBatch, PolicyParams, load_checkpoint, save_checkpoint
from .tasks import check_vocabulary, generate_suite
from .verifier import grade_trajectory, render_completion

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
FINAL_CHECKPOINT = "final.npz"


def derive_seed(*entropy: int) -> int:
    """Deterministic 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence(list(entropy)).generate_state(1, dtype=np.uint32)[0])


def checkpoint_name(stage: int) -> str:
    return f"ckpt_stage{stage}.npz"


@dataclass
class TrainingState:
    stage: int = 0
    stage_step: int = 0
    global_step: int = 0
    tokens: int = 0

    def to_dict(self) -> Dict[str, int]:

        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, int]) -> "TrainingState":

        return cls(**{key: int(data.get(key, 0)) for key in ("stage", "stage_step", "global_step", "tokens")})


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    stage: int
    window: int
    group_size: int
    mean_reward: float
    mean_length: float
    max_length: int
    tokens: int
    objective: float
    grad_norm: float
    kept_count: int
    masked_fraction: float
    clip_active_fraction: float
    mean_geo_weight: float
    max_geo_weight: float
    degenerate: bool
    checksum: str
    eval_pass_rate: Optional[float] = None
    eval_reward: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:

        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsRecord":

        values = {}
        for name in cls.__dataclass_fields__:
            value = data.get(name)
            if isinstance(value, float) and math.isnan(value):
                value = None
            values[name] = value
        return cls(**values)


class MetricsLog:
    """Append-only per-step metrics, rewritten to JSONL after every append."""

    def __init__(self, path: Union[str, Path], records: Sequence[MetricsRecord] = ()) -> None:

        self._path = Path(path)
        self._records: List[MetricsRecord] = list(records)
        self._logger = logging.getLogger(f"{__name__}.MetricsLog")

    @classmethod
    def resume(cls, path: Union[str, Path], before_step: int) -> "MetricsLog":
        """Reopen an existing log, keeping only records older than ``before_step``."""
        source = Path(path)
        if not source.exists() or source.stat().st_size == 0:
            return cls(source)
        df = read_jsonl(source)
        records = [MetricsRecord.from_dict(row.to_dict()) for _, row in df.iterrows()]
        return cls(source, [r for r in records if r.step < before_step])

    @property
    def records(self) -> List[MetricsRecord]:
        return list(self._records)

    def append(self, record: MetricsRecord) -> None:

        if self._records and record.step <= self._records[-1].step:
            raise ValueError(f"Metrics step {record.step} does not follow {self._records[-1].step}")
        self._records.append(record)
        self.save()

    def to_frame(self) -> pd.DataFrame:

        columns = list(MetricsRecord.__dataclass_fields__)
        return pd.DataFrame([r.to_dict() for r in self._records], columns=columns)

    def save(self) -> None:

        try:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            write_jsonl(self.to_frame(), self._path)
        except Exception as e:
            self._logger.error(f"Failed to save metrics to {self._path}: {e}")
            raise

    def __len__(self) -> int:

        return len(self._records)


@dataclass
class TrainResult:
    params: PolicyParams
    state: TrainingState
    records: List[MetricsRecord]
    checkpoints: List[Path] = field(default_factory=list)
    final_checkpoint: Optional[Path] = None
    stopped_by_budget: bool = False


def subsample_update_batch(groups: Sequence[GroupBatch], size: int) -> List[GroupBatch]:
    """Deterministic stride over the prompt-major trajectory order, advantages kept."""
    flat = [(g, i) for g, group in enumerate(groups) for i in range(group.size)]
    if size >= len(flat):
        return list(groups)
    chosen: Dict[int, List[int]] = {}
    for j in range(size):
        g, i = flat[(j * len(flat)) // size]
        chosen.setdefault(g, []).append(i)

    result = []
    for g, group in enumerate(groups):
        if g not in chosen:
            continue
        picks = chosen[g]
        advantages = tuple(group.advantages[i] for i in picks) if group.advantages is not None else None
        result.append(GroupBatch(group.prompt_id, tuple(group.trajectories[i] for i in picks), advantages))
    return result


def evaluate_policy(params: PolicyParams, problems: Sequence[Problem], rollouts: int, window: int,
                    temperature: float = 0.6, seed: int = 0, protocol: str = "raw") -> Tuple[float, float]:
    """Full-credit pass rate and mean reward over ``rollouts`` samples per problem."""
    if not problems:
        return 0.0, 0.0
    passes = 0
    reward = 0.0
    for problem in problems:
        key = id_entropy(problem.id)
        for k in range(rollouts):
            traj = rollout_trajectory(params, problem, window, np.random.SeedSequence([seed, key, k]),
                                      temperature, None, protocol, k)
            passes += int(traj.fully_correct)
            reward += traj.reward
    total = len(problems) * rollouts
    return passes / total, reward / total


class Trainer:

    def __init__(self, cfg: RunConfig, problems: Optional[Sequence[Problem]] = None,
                 eval_problems: Optional[Sequence[Problem]] = None) -> None:

        self._cfg = cfg
        self._logger = logging.getLogger(f"{__name__}.Trainer")
        self._vocab = cfg.policy.build_vocabulary()
        self._output = Path(cfg.output_dir)

        if problems is None:
            problems = load_dataset(cfg.dataset) if cfg.dataset else generate_suite(cfg.tasks)
        if eval_problems is None:
            if cfg.eval.dataset:
                eval_problems = load_dataset(cfg.eval.dataset)
            elif cfg.eval.specs:
                eval_problems = generate_suite(cfg.eval.specs)
            else:
                eval_problems = problems
        check_vocabulary(problems, self._vocab)
        check_vocabulary(eval_problems, self._vocab)
        self._problems = list(problems)
        self._eval_problems = list(eval_problems)
        self._refiner = StubRefiner() if cfg.refiner == "stub" else None

    @property
    def problems(self) -> List[Problem]:
        return list(self._problems)

    @property
    def eval_problems(self) -> List[Problem]:
        return list(self._eval_problems)

    def initial_params(self) -> PolicyParams:
        return PolicyParams.zeros(self._vocab, self._cfg.policy.context_size)

    def prepare(self, params: PolicyParams, stage: StageConfig) -> List[Problem]:
        """Active problem set of ``stage`` under the current parameters."""
        cfg = self._cfg
        if not cfg.difficulty.enabled:
            return list(self._problems)
        partitions = prepare_stage(
            self._problems, params, stage, cfg.difficulty, self._refiner,
            seed=derive_seed(cfg.seeds.difficulty, stage.index),
            protocol=cfg.protocol, workers=cfg.workers,
        )
        active = partitions.kept + partitions.recovered
        write_dataset(active, self._output / f"stage{stage.index}_active.jsonl")
        self._logger.info(
            f"Stage {stage.index} band {stage.effective_band}: {len(active)} active problems "
            f"({len(partitions.pruned_trivial)} pruned, {len(partitions.discarded)} discarded)"
        )
        return active

    def run(self, resume: Optional[Union[str, Path]] = None) -> TrainResult:

        cfg = self._cfg
        plan = cfg.plan
        self._output.mkdir(parents=True, exist_ok=True)
        save_config(cfg, self._output / "config.yaml")

        if resume is not None:
            params, raw_state = load_checkpoint(resume)
            if params.vocab != self._vocab or params.context_size != cfg.policy.context_size:
                raise CheckpointFormatError(str(resume), "vocabulary or context size differs from the run config")
            state = TrainingState.from_dict(raw_state)
            if state.stage_step != 0:
                raise CheckpointFormatError(str(resume), "only stage-boundary checkpoints can be resumed")
            self._logger.info(f"Resuming at stage {state.stage}, step {state.global_step} from {resume}")
        else:
            params, state = self.initial_params(), TrainingState()

        metrics = MetricsLog.resume(self._output / METRICS_FILE, state.global_step)
        result = TrainResult(params=params, state=state, records=[])

        for stage in plan.stages[state.stage:]:
            active = self.prepare(params, stage)
            if not active:
                self._logger.warning(f"Stage {stage.index} has no problems inside band {stage.effective_band}; skipping")
            order = np.random.default_rng(derive_seed(cfg.seeds.master, stage.index)).permutation(len(active))
            degenerate_streak = 0

            while active and advance_stage(state, plan) is stage:
                if cfg.token_budget is not None and state.tokens >= cfg.token_budget:
                    result.stopped_by_budget = True
                    break
                params, record = self._step(params, stage, active, order, state)
                metrics.append(record)
                result.records.append(record)

                degenerate_streak = degenerate_streak + 1 if record.degenerate else 0
                if degenerate_streak >= cfg.degenerate_patience:
                    raise DegenerateBatchError(degenerate_streak, stage.index)

            if result.stopped_by_budget:
                self._logger.info(f"Token budget {cfg.token_budget} reached at step {state.global_step}")
                break

            state.stage, state.stage_step = stage.index + 1, 0
            path = save_checkpoint(self._output / checkpoint_name(stage.index), params, state.to_dict())
            result.checkpoints.append(path)
            self._logger.info(f"Completed stage {stage.index} at step {state.global_step}")

        result.params = params
        result.state = state
        result.final_checkpoint = save_checkpoint(self._output / FINAL_CHECKPOINT, params, state.to_dict())
        return result

    def _step(self, params: PolicyParams, stage: StageConfig, active: Sequence[Problem],
              order: np.ndarray, state: TrainingState) -> Tuple[PolicyParams, MetricsRecord]:
        cfg = self._cfg
        n = len(active)
        count = max(1, min(stage.problems_per_wave, n))
        start = (state.stage_step * count) % n
        batch = [active[order[(start + j) % n]] for j in range(count)]

        wave_seed = derive_seed(cfg.seeds.master, state.global_step)
        wave = generate_wave(params, batch, stage.group_size, stage.window, stage.temperature,
                             cfg.mismatch, wave_seed, cfg.protocol, cfg.workers)
        groups = assign_advantages(wave.groups, stage.estimator.std_floor)
        update = subsample_update_batch(groups, stage.update_batch_size)
        estimate = gspo_mis_gradient(update, params, params, stage.estimator)
        degenerate = all(not any(g.advantages) for g in groups)

        if cfg.dump_waves:
            dump_wave(wave, self._output / "dumps" / f"wave_{state.global_step:06d}.jsonl",
                      stage.update_batch_size)

        new_params = params.with_theta(params.theta + stage.learning_rate * estimate.gradient)
        step = state.global_step
        state.global_step += 1
        state.stage_step += 1
        state.tokens += wave.total_tokens

        eval_pass_rate = eval_reward = None
        every = cfg.eval.every
        if (every and state.global_step % every == 0) or state.stage_step == stage.steps:
            eval_pass_rate, eval_reward = evaluate_policy(
                new_params, self._eval_problems, cfg.eval.rollouts, cfg.eval.window or stage.window,
                cfg.eval.temperature, cfg.seeds.eval, cfg.protocol,
            )

        if degenerate:
            self._logger.warning(f"Step {step}: every group in the wave has zero reward variance")

        record = MetricsRecord(
            step=step,
            stage=stage.index,
            window=stage.window,
            group_size=stage.group_size,
            mean_reward=wave.mean_reward,
            mean_length=wave.mean_length,
            max_length=wave.max_length,
            tokens=state.tokens,
            objective=estimate.objective,
            grad_norm=estimate.grad_norm,
            kept_count=estimate.kept_count,
            masked_fraction=estimate.masked_fraction,
            clip_active_fraction=estimate.clip_active_fraction,
            mean_geo_weight=estimate.mean_geo_weight,
            max_geo_weight=estimate.max_geo_weight,
            degenerate=degenerate,
            checksum=new_params.checksum(),
            eval_pass_rate=eval_pass_rate,
            eval_reward=eval_reward,
        )
        return new_params, record


def train(cfg: RunConfig, resume: Optional[Union[str, Path]] = None,
          problems: Optional[Sequence[Problem]] = None,
          eval_problems: Optional[Sequence[Problem]] = None) -> TrainResult:

    return Trainer(cfg, problems, eval_problems).run(resume)


def replay(dump_path: Union[str, Path], params: PolicyParams, cfg: Optional[EstimatorConfig] = None,
           protocol: str = "raw") -> GradientEstimate:
    """Regrade a dumped wave and recompute its gradient estimate at ``params``."""
    wave, update_batch_size = load_wave(dump_path)
    actual = params.checksum()
    if actual != wave.snapshot_id:
        raise ChecksumMismatch(wave.snapshot_id, actual)

    cfg = cfg or EstimatorConfig()
    regraded = []
    for group in wave.groups:
        trajectories = []
        for traj in group.trajectories:
            completion = render_completion(params.vocab.decode(traj.actions), protocol)
            report = grade_trajectory(completion, list(traj.golds))
            trajectories.append(replace(traj, reward=report.aggregate, fully_correct=report.fully_correct))
        regraded.append(GroupBatch(group.prompt_id, tuple(trajectories)))

    groups = assign_advantages(regraded, cfg.std_floor)
    if update_batch_size is not None:
        groups = subsample_update_batch(groups, update_batch_size)
    logger.info(f"Replaying {sum(g.size for g in groups)} trajectories from {dump_path}")
    return gspo_mis_gradient(groups, params, params, cfg)
