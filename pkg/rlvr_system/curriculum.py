import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .engine import id_entropy, rollout_trajectory
from .estimators import EstimatorConfig
from .exceptions import DatasetFormatError, InvalidProblem, PlanInvalid, RLVRException
from .expr import parse_expression
from .jsonl import read_jsonl, write_jsonl
from .policy import BOS, EOS, PolicyParams

logger = logging.getLogger(__name__)

PROVENANCES = ("synthetic-tier", "recovered", "original")

_BAND = re.compile(r"^\s*([(\[])\s*([0-9.eE+-]+)\s*,\s*([0-9.eE+-]+)\s*([)\]])\s*$")


@dataclass(frozen=True)
class Problem:
    id: str
    prompt: Tuple[str, ...]
    answers: Tuple[str, ...]
    tags: Tuple[str, ...] = ()
    difficulty: Optional[float] = None
    provenance: str = "original"

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt", tuple(str(s) for s in self.prompt))
        object.__setattr__(self, "answers", tuple(str(a) for a in self.answers))
        object.__setattr__(self, "tags", tuple(str(t) for t in self.tags))
        if not self.id:
            raise InvalidProblem(self.id, "id must be nonempty")
        if not self.prompt:
            raise InvalidProblem(self.id, "prompt must be nonempty")
        if not self.answers:
            raise InvalidProblem(self.id, "at least one gold answer is required")
        for answer in self.answers:
            try:
                parse_expression(answer)
            except RLVRException as e:
                raise InvalidProblem(self.id, f"gold answer {answer!r} does not parse: {e.message}") from e
        if self.difficulty is not None and not 0.0 <= self.difficulty <= 1.0:
            raise InvalidProblem(self.id, f"difficulty {self.difficulty} outside [0, 1]")
        if self.provenance not in PROVENANCES:
            raise InvalidProblem(self.id, f"unknown provenance {self.provenance!r}")

    @property
    def family(self) -> str:
        return self.tags[0] if self.tags else "unknown"

    def with_difficulty(self, difficulty: float) -> "Problem":
        return replace(self, difficulty=difficulty)

    def to_dict(self) -> Dict[str, Any]:

        return {
            "id": self.id,
            "prompt": list(self.prompt),
            "answers": list(self.answers),
            "tags": list(self.tags),
            "difficulty": self.difficulty,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Problem":

        difficulty = data.get("difficulty")
        if difficulty is not None and pd.isna(difficulty):
            difficulty = None
        tags = data.get("tags")
        provenance = data.get("provenance")
        return cls(
            id=str(data["id"]),
            prompt=tuple(data["prompt"]),
            answers=tuple(data["answers"]),
            tags=tuple(tags) if isinstance(tags, (list, tuple)) else (),
            difficulty=float(difficulty) if difficulty is not None else None,
            provenance=str(provenance) if isinstance(provenance, str) else "original",
        )


@dataclass(frozen=True)
class DifficultyBand:
    lower: float
    upper: float
    lower_closed: bool = False
    upper_closed: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.lower <= self.upper <= 1.0:
            raise ValueError(f"Band bounds must satisfy 0 <= lower <= upper <= 1, got {self}")

    @classmethod
    def parse(cls, text: str) -> "DifficultyBand":
        """Parse interval notation such as ``(0.0,0.7]`` or ``[0.0, 0.5]``."""
        match = _BAND.match(text)
        if not match:
            raise ValueError(f"Cannot parse difficulty band {text!r}")
        left, lower, upper, right = match.groups()
        return cls(float(lower), float(upper), left == "[", right == "]")

    def contains(self, difficulty: float) -> bool:
        above = difficulty >= self.lower if self.lower_closed else difficulty > self.lower
        below = difficulty <= self.upper if self.upper_closed else difficulty < self.upper
        return above and below

    def above(self, difficulty: float) -> bool:
        return difficulty > self.upper or (difficulty == self.upper and not self.upper_closed)

    def open_lower(self) -> "DifficultyBand":
        return replace(self, lower_closed=False)

    def __str__(self) -> str:

        return f"{'[' if self.lower_closed else '('}{self.lower},{self.upper}{']' if self.upper_closed else ')'}"


@dataclass(frozen=True)
class StageConfig:
    index: int
    band: DifficultyBand
    group_size: int
    window: int
    learning_rate: float
    rollout_batch_size: int
    update_batch_size: int
    steps: int
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    temperature: float = 1.0
    readmit_zero: bool = True

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise PlanInvalid("stage-config", f"stage {self.index}: group size {self.group_size} < 2")
        if self.window < 1:
            raise PlanInvalid("stage-config", f"stage {self.index}: window {self.window} < 1")
        if self.learning_rate < 0:
            raise PlanInvalid("stage-config", f"stage {self.index}: negative learning rate")
        if self.rollout_batch_size < self.group_size:
            raise PlanInvalid("stage-config",
                              f"stage {self.index}: rollout batch {self.rollout_batch_size} "
                              f"smaller than one group of {self.group_size}")
        if not 1 <= self.update_batch_size <= self.rollout_batch_size:
            raise PlanInvalid("stage-config",
                              f"stage {self.index}: update batch {self.update_batch_size} "
                              f"not in [1, {self.rollout_batch_size}]")
        if self.steps < 0:
            raise PlanInvalid("stage-config", f"stage {self.index}: negative step budget")
        if self.temperature <= 0:
            raise PlanInvalid("stage-config", f"stage {self.index}: temperature must be positive")

    @property
    def exploration(self) -> int:
        return self.group_size * self.window

    @property
    def problems_per_wave(self) -> int:
        return self.rollout_batch_size // self.group_size

    @property
    def effective_band(self) -> DifficultyBand:
        return self.band if self.readmit_zero else self.band.open_lower()


@dataclass(frozen=True)
class CurriculumPlan:
    stages: Tuple[StageConfig, ...]
    promotion: str = "step-budget"
    reestimation: str = "stage-boundary"

    @property
    def total_steps(self) -> int:
        return sum(stage.steps for stage in self.stages)

    def __len__(self) -> int:

        return len(self.stages)


class _Done:

    def __repr__(self) -> str:

        return "DONE"


DONE = _Done()


class StageProgress(Protocol):
    stage: int
    stage_step: int


def build_plan(raw: Sequence[StageConfig]) -> CurriculumPlan:

    stages = tuple(raw)
    if not stages:
        raise PlanInvalid("nonempty", "a plan needs at least one stage")
    for position, stage in enumerate(stages):
        if stage.index != position:
            raise PlanInvalid("stage-order", f"stage at position {position} has index {stage.index}")
    for prev, cur in zip(stages, stages[1:]):
        if cur.band.upper > prev.band.upper:
            raise PlanInvalid(
                "difficulty-tightening",
                f"stage {cur.index} upper bound {cur.band.upper} exceeds stage {prev.index}'s {prev.band.upper}",
            )
        if cur.exploration < prev.exploration:
            raise PlanInvalid(
                "exploration-expansion",
                f"stage {cur.index} G*W = {cur.exploration} is below stage {prev.index}'s {prev.exploration}",
            )
    logger.info(f"Built curriculum plan with {len(stages)} stages and {sum(s.steps for s in stages)} steps")
    return CurriculumPlan(stages)


def advance_stage(state: StageProgress, plan: CurriculumPlan) -> Union[StageConfig, _Done]:
    """Stage to run next: the current one until its budget is spent, then the following one."""
    if state.stage >= len(plan.stages):
        return DONE
    current = plan.stages[state.stage]
    if state.stage_step < current.steps:
        return current
    if state.stage + 1 < len(plan.stages):
        return plan.stages[state.stage + 1]
    return DONE


@dataclass(frozen=True)
class DifficultyConfig:
    enabled: bool = True
    rollouts: int = 16
    window: Optional[int] = None
    temperature: float = 1.0
    pass_threshold: Optional[float] = None

    def __post_init__(self) -> None:
        if self.rollouts < 1:
            raise ValueError("rollouts must be at least 1")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be at least 1")
        if self.pass_threshold is not None and not 0.0 < self.pass_threshold <= 1.0:
            raise ValueError("pass_threshold must lie in (0, 1]")


def estimate_difficulty(problem: Problem, params: PolicyParams, rollouts: int = 16, window: int = 16,
                        seed: int = 0, protocol: str = "raw", temperature: float = 1.0,
                        pass_threshold: Optional[float] = None) -> float:
    """Pass rate of ``problem`` over ``rollouts`` samples graded by the rule-based verifier."""
    if rollouts < 1:
        raise ValueError("rollouts must be at least 1")
    key = id_entropy(problem.id)
    passes = 0
    for k in range(rollouts):
        traj = rollout_trajectory(params, problem, window, np.random.SeedSequence([seed, key, k]),
                                  temperature, None, protocol, k)
        if pass_threshold is None:
            passes += int(traj.fully_correct)
        else:
            passes += int(traj.reward >= pass_threshold)
    return passes / rollouts


def estimate_dataset(problems: Sequence[Problem], params: PolicyParams, cfg: DifficultyConfig,
                     window: int, seed: int = 0, protocol: str = "raw", workers: int = 1) -> List[Problem]:

    def annotate(problem: Problem) -> Problem:
        d = estimate_difficulty(problem, params, cfg.rollouts, cfg.window or window, seed,
                                protocol, cfg.temperature, cfg.pass_threshold)
        return problem.with_difficulty(d)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            annotated = list(pool.map(annotate, problems))
    else:
        annotated = [annotate(p) for p in problems]
    logger.info(f"Estimated difficulty of {len(annotated)} problems with {cfg.rollouts} rollouts each")
    return annotated


class ProblemRefiner(Protocol):

    def refine(self, problem: Problem) -> Optional[Problem]:
        ...


class StubRefiner:
    """Rule-based repair for zero-pass synthetic problems.

    Cleans stray BOS/EOS symbols out of the prompt and makes sure it ends with
    the ``=`` answer cue. Each problem is repaired at most once.
    """

    def refine(self, problem: Problem) -> Optional[Problem]:

        if problem.provenance == "recovered":
            return None
        prompt = [s for s in problem.prompt if s not in (BOS, EOS)]
        if not prompt:
            return None
        if prompt[-1] != "=":
            prompt.append("=")
        return replace(
            problem,
            id=f"{problem.id}-r",
            prompt=tuple(prompt),
            tags=problem.tags + ("recovered",),
            difficulty=None,
            provenance="recovered",
        )


class FilterResult(NamedTuple):
    kept: List[Problem]
    pruned_trivial: List[Problem]
    recovered: List[Problem]
    discarded: List[Problem]


def dual_end_filter(problems: Sequence[Problem], band: DifficultyBand,
                    refiner: Optional[ProblemRefiner] = None,
                    reestimate: Optional[Callable[[Problem], float]] = None) -> FilterResult:
    """Split problems into kept / pruned-trivial / recovered / discarded.

    Zero-pass problems stay in ``kept`` only when the band's lower bound is
    closed at 0; otherwise they go through ``refiner`` and the repaired copy
    is re-scored with ``reestimate`` and classified again.
    """
    result = FilterResult([], [], [], [])
    for problem in problems:
        d = problem.difficulty
        if d is None:
            raise InvalidProblem(problem.id, "difficulty has not been estimated")

        if band.contains(d):
            result.kept.append(problem)
        elif band.above(d):
            result.pruned_trivial.append(problem)
        elif d == 0.0 and refiner is not None:
            repaired = refiner.refine(problem)
            if repaired is None:
                result.discarded.append(problem)
                continue
            if reestimate is not None:
                repaired = repaired.with_difficulty(reestimate(repaired))
            rd = repaired.difficulty
            if rd is not None and band.contains(rd):
                result.recovered.append(repaired)
            elif rd is not None and band.above(rd):
                result.pruned_trivial.append(repaired)
            else:
                result.discarded.append(problem)
        else:
            result.discarded.append(problem)

    logger.info(
        f"Filtered {len(problems)} problems with band {band}: kept={len(result.kept)}, "
        f"pruned={len(result.pruned_trivial)}, recovered={len(result.recovered)}, "
        f"discarded={len(result.discarded)}"
    )
    return result


def prepare_stage(problems: Sequence[Problem], params: PolicyParams, stage: StageConfig,
                  cfg: DifficultyConfig, refiner: Optional[ProblemRefiner] = None, seed: int = 0,
                  protocol: str = "raw", workers: int = 1) -> FilterResult:
    """Re-estimate difficulty under the current parameters and filter to the stage band."""
    window = cfg.window or stage.window
    annotated = estimate_dataset(problems, params, cfg, stage.window, seed, protocol, workers)

    def reestimate(problem: Problem) -> float:
        return estimate_difficulty(problem, params, cfg.rollouts, window, seed, protocol,
                                   cfg.temperature, cfg.pass_threshold)

    return dual_end_filter(annotated, stage.effective_band, refiner, reestimate)


def write_dataset(problems: Sequence[Problem], path: Union[str, Path]) -> Path:

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    columns = ["id", "prompt", "answers", "tags", "difficulty", "provenance"]
    try:
        df = pd.DataFrame([p.to_dict() for p in problems], columns=columns)
        write_jsonl(df, target)
    except Exception as e:
        logger.error(f"Failed to save dataset to {target}: {e}")
        raise
    logger.info(f"Saved {len(problems)} problems to {target}")
    return target


def load_dataset(path: Union[str, Path]) -> List[Problem]:

    source = Path(path)
    if not source.exists():
        raise DatasetFormatError(str(source), ["id", "prompt", "answers"])
    if source.stat().st_size == 0:
        logger.info(f"Dataset file {source} is empty")
        return []

    df = read_jsonl(source)
    required_columns = {"id", "prompt", "answers"}
    if not required_columns.issubset(df.columns):
        raise DatasetFormatError(str(source), list(required_columns - set(df.columns)))

    problems = []
    for _, row in df.iterrows():
        try:
            problems.append(Problem.from_dict(row.to_dict()))
        except (RLVRException, KeyError, TypeError, ValueError) as e:
            logger.warning(f"Failed to load problem from row {row.name}: {e}")
    logger.info(f"Loaded {len(problems)} problems from {source}")
    return problems


def dataset_summary(problems: Sequence[Problem]) -> Dict[str, Any]:

    if not problems:
        return {"total_problems": 0, "families": {}, "provenance": {}, "estimated": 0}

    df = pd.DataFrame([p.to_dict() for p in problems])
    df["family"] = [p.family for p in problems]
    difficulties = pd.to_numeric(df["difficulty"], errors="coerce").dropna()
    summary: Dict[str, Any] = {
        "total_problems": len(df),
        "families": {str(k): int(v) for k, v in df["family"].value_counts().sort_index().items()},
        "provenance": {str(k): int(v) for k, v in df["provenance"].value_counts().sort_index().items()},
        "estimated": int(len(difficulties)),
    }
    if len(difficulties):
        summary["difficulty_mean"] = float(difficulties.mean())
        summary["difficulty_quantiles"] = {
            str(q): float(v) for q, v in difficulties.quantile([0.1, 0.5, 0.9]).items()
        }
        summary["zero_pass"] = int((difficulties == 0.0).sum())
    return summary
