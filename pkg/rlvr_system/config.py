import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import yaml

from .curriculum import CurriculumPlan, DifficultyBand, DifficultyConfig, StageConfig, build_plan
from .engine import MismatchConfig
from .estimators import EstimatorConfig
from .exceptions import ConfigError, RLVRException
from .policy import Vocabulary
from .tasks import TaskSpec
from .verifier import PROTOCOLS

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "RLVR_OUTPUT_DIR"
REFINERS = ("stub", "none")
VOCABULARIES = ("raw", "text")
VERIFIERS = ("rule",)

# Reference learning rate of the large-model runs; the toy policy trains at DESK_LEARNING_RATE
REFERENCE_LEARNING_RATE = 1e-6
DESK_LEARNING_RATE = 1e-2

# Desk-scale staged schedules: bands, group sizes, windows scaled down to tokens,
# rollout batch in trajectories, update batch in trajectories
STAGED_PRESETS: Dict[str, Dict[str, Any]] = {
    "30B": {
        "bands": ["(0.0,0.7]", "(0.0,0.5]", "[0.0,0.5]"],
        "group_sizes": [8, 8, 16],
        "windows": [16, 24, 32],
        "rollout_batch_size": 128,
        "update_batch_size": 32,
    },
    "235B": {
        "bands": ["(0.0,0.7]", "(0.0,0.5]", "[0.0,0.5]"],
        "group_sizes": [8, 8, 16],
        "windows": [16, 18, 18],
        "rollout_batch_size": 64,
        "update_batch_size": 32,
    },
}


@dataclass(frozen=True)
class Seeds:
    master: int = 0
    eval: int = 1
    difficulty: int = 2


@dataclass(frozen=True)
class PolicyConfig:
    context_size: int = 3
    vocabulary: str = "raw"

    def build_vocabulary(self) -> Vocabulary:
        return Vocabulary.text_mode() if self.vocabulary == "text" else Vocabulary.default()


@dataclass(frozen=True)
class EvalConfig:
    every: int = 0
    rollouts: int = 4
    temperature: float = 0.6
    window: Optional[int] = None
    specs: Sequence[TaskSpec] = ()
    dataset: Optional[Path] = None


@dataclass(frozen=True)
class RunConfig:
    plan: CurriculumPlan
    tasks: Sequence[TaskSpec] = ()
    dataset: Optional[Path] = None
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: Path = Path("runs/default")
    workers: int = 1
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    protocol: str = "raw"
    verifier: str = "rule"
    eval: EvalConfig = field(default_factory=EvalConfig)
    mismatch: MismatchConfig = field(default_factory=MismatchConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    difficulty: DifficultyConfig = field(default_factory=DifficultyConfig)
    refiner: str = "stub"
    degenerate_patience: int = 50
    token_budget: Optional[int] = None
    dump_waves: bool = False

    def with_output_dir(self, output_dir: Union[str, Path]) -> "RunConfig":
        return replace(self, output_dir=Path(output_dir))

    def to_dict(self) -> Dict[str, Any]:
        """Plain-data form that ``config_from_dict`` accepts back."""
        return {
            "seeds": asdict(self.seeds),
            "output_dir": str(self.output_dir),
            "workers": self.workers,
            "policy": asdict(self.policy),
            "protocol": self.protocol,
            "verifier": self.verifier,
            "tasks": {
                "specs": [s.to_dict() for s in self.tasks],
                "dataset": str(self.dataset) if self.dataset else None,
            },
            "eval": {
                "every": self.eval.every,
                "rollouts": self.eval.rollouts,
                "temperature": self.eval.temperature,
                "window": self.eval.window,
                "specs": [s.to_dict() for s in self.eval.specs],
                "dataset": str(self.eval.dataset) if self.eval.dataset else None,
            },
            "mismatch": asdict(self.mismatch),
            "estimator": _estimator_dict(self.estimator),
            "difficulty": asdict(self.difficulty),
            "refiner": self.refiner,
            "curriculum": {"stages": [_stage_dict(s) for s in self.plan.stages]},
            "degenerate_patience": self.degenerate_patience,
            "token_budget": self.token_budget,
            "dump_waves": self.dump_waves,
        }


def _estimator_dict(cfg: EstimatorConfig) -> Dict[str, Any]:
    data = asdict(cfg)
    if math.isinf(cfg.mis_threshold):
        data["mis_threshold"] = "inf"
    return data


def _stage_dict(stage: StageConfig) -> Dict[str, Any]:
    return {
        "band": str(stage.band),
        "group_size": stage.group_size,
        "window": stage.window,
        "learning_rate": stage.learning_rate,
        "rollout_batch_size": stage.rollout_batch_size,
        "update_batch_size": stage.update_batch_size,
        "steps": stage.steps,
        "temperature": stage.temperature,
        "readmit_zero": stage.readmit_zero,
        "estimator": _estimator_dict(stage.estimator),
    }


def staged_plan(column: str = "30B", steps: int = 100, learning_rate: float = DESK_LEARNING_RATE,
                estimator: Optional[EstimatorConfig] = None, readmit_zero: bool = True) -> List[StageConfig]:
    """Three desk-scale stages following one column of the staged schedule."""
    if column not in STAGED_PRESETS:
        raise ConfigError("curriculum.preset", f"unknown preset {column!r}; choose from {sorted(STAGED_PRESETS)}")
    preset = STAGED_PRESETS[column]
    return [
        StageConfig(
            index=i,
            band=DifficultyBand.parse(band),
            group_size=preset["group_sizes"][i],
            window=preset["windows"][i],
            learning_rate=learning_rate,
            rollout_batch_size=preset["rollout_batch_size"],
            update_batch_size=preset["update_batch_size"],
            steps=steps,
            estimator=estimator or EstimatorConfig(),
            readmit_zero=readmit_zero,
        )
        for i, band in enumerate(preset["bands"])
    ]


def _section(data: Any, key: str, allowed: Sequence[str]) -> Dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError(key, f"expected a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(key, f"unknown keys {unknown}")
    return dict(data)


def _float(value: Any, key: str) -> float:
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a number, got {value!r}") from None


def _build(factory: Any, key: str, **kwargs: Any) -> Any:
    try:
        return factory(**kwargs)
    except ConfigError:
        raise
    except RLVRException as e:
        raise ConfigError(key, e.message) from e
    except (TypeError, ValueError) as e:
        raise ConfigError(key, str(e)) from e


def _estimator(data: Any, key: str, base: EstimatorConfig) -> EstimatorConfig:
    section = _section(data, key, ["clip_eps", "mis_threshold", "std_floor", "mask_mode", "mis_multiplier"])
    for name in ("clip_eps", "mis_threshold", "std_floor"):
        if name in section:
            section[name] = _float(section[name], f"{key}.{name}")
    if not section:
        return base
    return _build(lambda **changes: replace(base, **changes), key, **section)


def _task_specs(data: Any, key: str) -> List[TaskSpec]:
    if data is None:
        return []
    if not isinstance(data, list):
        raise ConfigError(key, "expected a list of task specs")
    specs = []
    for i, entry in enumerate(data):
        entry_key = f"{key}[{i}]"
        section = _section(entry, entry_key, ["family", "count", "seed", "tier", "digits", "modulus", "length"])
        specs.append(_build(TaskSpec, entry_key, **section))
    return specs


def _path(value: Any, key: str, base_dir: Path) -> Optional[Path]:
    if value is None:
        return None
    path = Path(value)
    if not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise ConfigError(key, f"file {path} does not exist")
    return path


def _stages(data: Any, base_estimator: EstimatorConfig) -> CurriculumPlan:
    section = _section(data, "curriculum", ["preset", "steps", "learning_rate", "readmit_zero", "stages"])
    if "preset" in section and "stages" in section:
        raise ConfigError("curriculum", "give either 'preset' or 'stages', not both")

    if "preset" in section:
        raw = staged_plan(
            str(section["preset"]),
            steps=int(section.get("steps", 100)),
            learning_rate=_float(section.get("learning_rate", DESK_LEARNING_RATE), "curriculum.learning_rate"),
            estimator=base_estimator,
            readmit_zero=bool(section.get("readmit_zero", True)),
        )
    else:
        entries = section.get("stages")
        if not isinstance(entries, list) or not entries:
            raise ConfigError("curriculum.stages", "expected a nonempty list of stages")
        raw = []
        allowed = ["band", "group_size", "window", "learning_rate", "rollout_batch_size",
                   "update_batch_size", "steps", "temperature", "readmit_zero", "estimator"]
        for i, entry in enumerate(entries):
            key = f"curriculum.stages[{i}]"
            stage = _section(entry, key, allowed)
            missing = sorted({"band", "group_size", "window", "steps"} - set(stage))
            if missing:
                raise ConfigError(key, f"missing keys {missing}")
            try:
                band = DifficultyBand.parse(str(stage["band"]))
            except ValueError as e:
                raise ConfigError(f"{key}.band", str(e)) from e
            group_size = int(stage["group_size"])
            rollout_batch_size = int(stage.get("rollout_batch_size", 8 * group_size))
            raw.append(_build(
                StageConfig, key,
                index=i,
                band=band,
                group_size=group_size,
                window=int(stage["window"]),
                learning_rate=_float(stage.get("learning_rate", DESK_LEARNING_RATE), f"{key}.learning_rate"),
                rollout_batch_size=rollout_batch_size,
                update_batch_size=int(stage.get("update_batch_size", rollout_batch_size)),
                steps=int(stage["steps"]),
                estimator=_estimator(stage.get("estimator"), f"{key}.estimator", base_estimator),
                temperature=_float(stage.get("temperature", 1.0), f"{key}.temperature"),
                readmit_zero=bool(stage.get("readmit_zero", True)),
            ))
    return build_plan(raw)


def config_from_dict(data: Mapping[str, Any], base_dir: Union[str, Path] = ".") -> RunConfig:

    base = Path(base_dir)
    top = _section(data, "<root>", [
        "seeds", "output_dir", "workers", "policy", "protocol", "verifier", "tasks", "eval",
        "mismatch", "estimator", "difficulty", "refiner", "curriculum", "degenerate_patience",
        "token_budget", "dump_waves",
    ])

    seeds = _build(Seeds, "seeds", **_section(top.get("seeds"), "seeds", ["master", "eval", "difficulty"]))
    for name, value in asdict(seeds).items():
        if not isinstance(value, int) or value < 0:
            raise ConfigError(f"seeds.{name}", f"expected a non-negative integer, got {value!r}")

    policy = _build(PolicyConfig, "policy", **_section(top.get("policy"), "policy", ["context_size", "vocabulary"]))
    if policy.vocabulary not in VOCABULARIES:
        raise ConfigError("policy.vocabulary", f"must be one of {VOCABULARIES}")
    if policy.context_size < 1:
        raise ConfigError("policy.context_size", "must be at least 1")

    protocol = str(top.get("protocol", "raw"))
    if protocol not in PROTOCOLS:
        raise ConfigError("protocol", f"must be one of {PROTOCOLS}")
    if protocol == "boxed" and policy.vocabulary != "text":
        raise ConfigError("protocol", "the boxed protocol needs the text vocabulary")
    verifier = str(top.get("verifier", "rule"))
    if verifier not in VERIFIERS:
        raise ConfigError("verifier", f"training rewards are rule-based only; got {verifier!r}")

    tasks = _section(top.get("tasks"), "tasks", ["specs", "dataset"])
    task_specs = _task_specs(tasks.get("specs"), "tasks.specs")
    dataset = _path(tasks.get("dataset"), "tasks.dataset", base)
    if not task_specs and dataset is None:
        raise ConfigError("tasks", "give task specs or a dataset file")

    ev = _section(top.get("eval"), "eval", ["every", "rollouts", "temperature", "window", "specs", "dataset"])
    eval_cfg = EvalConfig(
        every=int(ev.get("every", 0)),
        rollouts=int(ev.get("rollouts", 4)),
        temperature=_float(ev.get("temperature", 0.6), "eval.temperature"),
        window=int(ev["window"]) if ev.get("window") is not None else None,
        specs=tuple(_task_specs(ev.get("specs"), "eval.specs")),
        dataset=_path(ev.get("dataset"), "eval.dataset", base),
    )
    if eval_cfg.every < 0 or eval_cfg.rollouts < 1 or eval_cfg.temperature <= 0:
        raise ConfigError("eval", "every must be >= 0, rollouts >= 1 and temperature > 0")

    mm = _section(top.get("mismatch"), "mismatch", ["mode", "bits", "sigma", "noise_seed"])
    if "sigma" in mm:
        mm["sigma"] = _float(mm["sigma"], "mismatch.sigma")
    mismatch = _build(MismatchConfig, "mismatch", **mm)

    estimator = _estimator(top.get("estimator"), "estimator", EstimatorConfig())

    dc = _section(top.get("difficulty"), "difficulty", ["enabled", "rollouts", "window", "temperature", "pass_threshold"])
    difficulty = _build(DifficultyConfig, "difficulty", **dc)

    refiner = str(top.get("refiner", "stub"))
    if refiner not in REFINERS:
        raise ConfigError("refiner", f"must be one of {REFINERS}")

    plan = _stages(top.get("curriculum"), estimator)

    output_dir = Path(os.environ.get(OUTPUT_DIR_ENV) or top.get("output_dir", "runs/default"))
    token_budget = top.get("token_budget")
    if token_budget is not None and int(token_budget) < 1:
        raise ConfigError("token_budget", "must be positive when given")
    patience = int(top.get("degenerate_patience", 50))
    if patience < 1:
        raise ConfigError("degenerate_patience", "must be at least 1")
    workers = int(top.get("workers", 1))
    if workers < 1:
        raise ConfigError("workers", "must be at least 1")

    return RunConfig(
        plan=plan,
        tasks=tuple(task_specs),
        dataset=dataset,
        seeds=seeds,
        output_dir=output_dir,
        workers=workers,
        policy=policy,
        protocol=protocol,
        verifier=verifier,
        eval=eval_cfg,
        mismatch=mismatch,
        estimator=estimator,
        difficulty=difficulty,
        refiner=refiner,
        degenerate_patience=patience,
        token_budget=int(token_budget) if token_budget is not None else None,
        dump_waves=bool(top.get("dump_waves", False)),
    )


def load_config(path: Union[str, Path]) -> RunConfig:

    source = Path(path)
    if not source.exists():
        raise ConfigError(str(source), "config file does not exist")
    try:
        with open(source, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except yaml.YAMLError as e:
        raise ConfigError(str(source), f"invalid YAML: {e}") from e
    if data is None:
        raise ConfigError(str(source), "config file is empty")
    cfg = config_from_dict(data, source.parent)
    logger.info(f"Loaded run config {source} with {len(cfg.plan)} stages")
    return cfg


def save_config(cfg: RunConfig, path: Union[str, Path]) -> Path:

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as handle:
        yaml.safe_dump(cfg.to_dict(), handle, sort_keys=False)
    return target
