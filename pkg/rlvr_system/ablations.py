import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .config import RunConfig
from .curriculum import CurriculumPlan, Problem, build_plan
from .engine import MismatchConfig
from .jsonl import write_jsonl
from .tasks import generate_suite
from .trainer import MetricsRecord, Trainer, TrainResult, evaluate_policy

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def is_collapsed(series: Sequence[Optional[float]], drop: float = 0.5, tail: float = 0.2) -> bool:
    """True when every value in the final ``tail`` share sits below ``drop`` times the running max."""
    values = pd.Series([v for v in series if v is not None], dtype="float64").dropna()
    if len(values) < 2:
        return False
    running_max = values.cummax()
    tail_len = max(1, math.ceil(len(values) * tail))
    recent = values.iloc[-tail_len:]
    ceiling = running_max.iloc[-tail_len:]
    return bool((ceiling > 0).all() and (recent < drop * ceiling).all())


def _eval_series(records: Sequence[MetricsRecord]) -> List[float]:
    return [r.eval_reward for r in records if r.eval_reward is not None]


def _with_threshold(plan: CurriculumPlan, threshold: float) -> CurriculumPlan:
    return build_plan([replace(s, estimator=replace(s.estimator, mis_threshold=threshold)) for s in plan.stages])


def _write_report(df: pd.DataFrame, path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_jsonl(df, path)
    except Exception as e:
        logger.error(f"Failed to write ablation report {path}: {e}")
        raise
    logger.info(f"Saved {len(df)} ablation rows to {path}")


@dataclass
class AblationReport:
    runs: pd.DataFrame
    metrics: Dict[str, List[MetricsRecord]]


class MismatchAblationReport(AblationReport):

    def summary(self) -> pd.DataFrame:
        """Collapse counts and final eval reward per arm."""
        return (
            self.runs.groupby(["mismatch", "threshold"], sort=True)
            .agg(runs=("seed", "count"), collapsed=("collapsed", "sum"),
                 final_eval_reward=("final_eval_reward", "mean"),
                 masked_fraction=("mean_masked_fraction", "mean"))
            .reset_index()
        )

    def stabilized_seeds(self, threshold: float = 1.5) -> int:
        """Seeds whose mismatched run collapses without the mask and holds with it."""
        runs = self.runs[self.runs["mismatch"] != "none"]
        pivot = runs.pivot(index="seed", columns="threshold", values="collapsed")
        if math.inf not in pivot.columns or threshold not in pivot.columns:
            return 0
        return int((pivot[math.inf].astype(bool) & ~pivot[threshold].astype(bool)).sum())


class CurriculumAblationReport(AblationReport):

    def summary(self) -> pd.DataFrame:
        return (
            self.runs.groupby("arm", sort=True)
            .agg(runs=("seed", "count"), final_pass_rate=("final_pass_rate", "mean"),
                 tokens=("tokens", "mean"), budget_gap=("budget_gap", "max"))
            .reset_index()
        )

    def _paired(self, column: str) -> pd.DataFrame:
        return self.runs.pivot(index="seed", columns="arm", values=column)

    def paired_wins(self) -> int:
        """Seeds where the curriculum arm's final pass rate is strictly above the flat arm's."""
        pivot = self._paired("final_pass_rate")
        return int((pivot["curriculum"] > pivot["flat"]).sum())

    def paired_ties(self) -> int:

        pivot = self._paired("final_pass_rate")
        return int((pivot["curriculum"] == pivot["flat"]).sum())

    def length_trend_seeds(self, tolerance: float = 0.1) -> int:
        """Seeds where curriculum lengths grow at every stage boundary and flat lengths stay
        within ``tolerance`` of their first window."""
        pivot = self._paired("stage_lengths")
        count = 0
        for curriculum, flat in zip(pivot["curriculum"], pivot["flat"]):
            growing = len(curriculum) > 1 and all(b > a for a, b in zip(curriculum, curriculum[1:]))
            steady = len(flat) > 0 and flat[0] > 0 and all(abs(v - flat[0]) <= tolerance * flat[0] for v in flat)
            count += int(growing and steady)
        return count


def _problems(cfg: RunConfig) -> Optional[List[Problem]]:
    return None if cfg.dataset else generate_suite(cfg.tasks)


def run_mismatch_ablation(cfg: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS, sigma: float = 0.2,
                          threshold: Optional[float] = None,
                          sweep: Sequence[float] = ()) -> MismatchAblationReport:
    """Mismatch on/off crossed with mask on/off, plus an optional threshold sweep.

    Mask-off arms use an infinite threshold with every other estimator setting
    unchanged, so they differ from the mask-on arms only in rejection.
    """
    threshold = threshold if threshold is not None else cfg.plan.stages[0].estimator.mis_threshold
    mismatch_on = cfg.mismatch if cfg.mismatch.enabled else MismatchConfig("logit-noise", sigma=sigma)
    arms = [("none", MismatchConfig(), t) for t in (math.inf, threshold)]
    arms += [(mismatch_on.mode, mismatch_on, t) for t in (math.inf, threshold, *sweep)]

    problems = _problems(cfg)
    rows: List[Dict[str, Any]] = []
    metrics: Dict[str, List[MetricsRecord]] = {}
    for label, mismatch, c in arms:
        plan = _with_threshold(cfg.plan, c)
        for seed in seeds:
            name = f"{label}_C{c}_seed{seed}"
            run_cfg = replace(
                cfg,
                plan=plan,
                mismatch=mismatch,
                seeds=replace(cfg.seeds, master=seed),
                output_dir=Path(cfg.output_dir) / "mismatch" / name,
            )
            logger.info(f"Mismatch ablation run {name}")
            result = Trainer(run_cfg, problems).run()
            series = _eval_series(result.records)
            metrics[name] = result.records
            rows.append({
                "run": name,
                "mismatch": label,
                "threshold": c,
                "seed": seed,
                "collapsed": is_collapsed(series),
                "final_eval_reward": series[-1] if series else float("nan"),
                "max_eval_reward": max(series) if series else float("nan"),
                "mean_masked_fraction": float(np.mean([r.masked_fraction for r in result.records]))
                if result.records else 0.0,
                "steps": len(result.records),
            })

    runs = pd.DataFrame(rows)
    _write_report(runs, Path(cfg.output_dir) / "mismatch_ablation.jsonl")
    return MismatchAblationReport(runs, metrics)


def stage_lengths(records: Sequence[MetricsRecord], windows: int) -> List[float]:
    """Mean response length over ``windows`` equal, contiguous slices of the run."""
    if not records or windows < 1:
        return []
    lengths = np.array([r.mean_length for r in records], dtype=np.float64)
    return [float(chunk.mean()) if len(chunk) else float("nan") for chunk in np.array_split(lengths, windows)]


def lengths_by_stage(records: Sequence[MetricsRecord]) -> List[float]:

    if not records:
        return []
    df = pd.DataFrame([{"stage": r.stage, "mean_length": r.mean_length} for r in records])
    return [float(v) for v in df.groupby("stage", sort=True)["mean_length"].mean()]


def flat_plan(plan: CurriculumPlan, steps: int) -> CurriculumPlan:
    """Single-stage plan that keeps the first stage's settings for ``steps`` steps."""
    return build_plan([replace(plan.stages[0], index=0, steps=steps)])


def _final_pass_rate(result: TrainResult, eval_problems: Sequence[Problem],
                     cfg: RunConfig, window: int) -> float:
    pass_rate, _ = evaluate_policy(result.params, eval_problems, cfg.eval.rollouts, window,
                                   cfg.eval.temperature, cfg.seeds.eval, cfg.protocol)
    return pass_rate


def run_curriculum_ablation(cfg: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS) -> CurriculumAblationReport:
    """Staged plan against its first stage run flat under the same sampled-token budget."""
    problems = _problems(cfg)
    eval_problems = generate_suite(cfg.eval.specs) if cfg.eval.specs else None
    eval_window = cfg.eval.window or cfg.plan.stages[-1].window

    rows: List[Dict[str, Any]] = []
    metrics: Dict[str, List[MetricsRecord]] = {}
    for seed in seeds:
        base = replace(cfg, seeds=replace(cfg.seeds, master=seed), token_budget=None)

        curriculum_cfg = base.with_output_dir(Path(cfg.output_dir) / "curriculum" / f"curriculum_seed{seed}")
        trainer = Trainer(curriculum_cfg, problems, eval_problems)
        curriculum = trainer.run()
        budget = curriculum.state.tokens

        flat_cfg = replace(
            base,
            plan=flat_plan(cfg.plan, max(1, budget)),
            token_budget=max(1, budget),
            output_dir=Path(cfg.output_dir) / "curriculum" / f"flat_seed{seed}",
        )
        flat = Trainer(flat_cfg, problems, eval_problems).run()

        evaluation_set = trainer.eval_problems
        for arm, arm_cfg, result in (
            ("curriculum", curriculum_cfg, curriculum),
            ("flat", flat_cfg, flat),
        ):
            metrics[f"{arm}_seed{seed}"] = result.records
            rows.append({
                "arm": arm,
                "seed": seed,
                "tokens": result.state.tokens,
                "budget_gap": abs(result.state.tokens - budget) / budget if budget else 0.0,
                "steps": len(result.records),
                "final_pass_rate": _final_pass_rate(result, evaluation_set, arm_cfg, eval_window),
                "stage_lengths": (lengths_by_stage(result.records) if arm == "curriculum"
                                  else stage_lengths(result.records, len(cfg.plan))),
            })
        logger.info(f"Curriculum ablation seed {seed}: budget {budget} tokens, flat used {flat.state.tokens}")

    runs = pd.DataFrame(rows)
    _write_report(runs, Path(cfg.output_dir) / "curriculum_ablation.jsonl")
    return CurriculumAblationReport(runs, metrics)
