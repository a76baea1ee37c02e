import hashlib
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import DatasetFormatError
from .jsonl import read_jsonl, write_jsonl
from .policy import (
    Evaluator,
    GroupBatch,
    PolicyParams,
    Trajectory,
    context_window,
    logits,
    sample_with_logprobs,
    token_logprobs,
)
from .verifier import grade_trajectory, render_completion

if TYPE_CHECKING:
    from .curriculum import Problem

logger = logging.getLogger(__name__)

MISMATCH_MODES = ("none", "quantize", "logit-noise")

_DUMP_COLUMNS = [
    "wave_seed", "snapshot_id", "update_batch_size", "group_index", "traj_index", "problem_id",
    "prompt", "actions", "rollout_logprobs", "trainer_logprobs", "reward", "golds",
]


def id_entropy(text: str) -> int:
    """Stable 64-bit integer derived from an identifier (process independent)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


@dataclass(frozen=True)
class MismatchConfig:
    mode: str = "none"
    bits: int = 23
    sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MISMATCH_MODES:
            raise ValueError(f"mismatch mode must be one of {MISMATCH_MODES}, got {self.mode!r}")
        if self.mode == "quantize" and not 4 <= self.bits <= 23:
            raise ValueError(f"quantize bits must lie in [4, 23], got {self.bits}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.noise_seed < 0:
            raise ValueError("noise_seed must be non-negative")

    @property
    def enabled(self) -> bool:
        return self.mode != "none"


def quantize_mantissa(values: np.ndarray, bits: int) -> np.ndarray:
    mantissa, exponent = np.frexp(values)
    scale = float(2 ** bits)
    return np.ldexp(np.round(mantissa * scale) / scale, exponent)


def rollout_eval_logits(params: PolicyParams, context: Sequence[int],
                        mc: Optional[MismatchConfig] = None) -> np.ndarray:
    """Logits as seen by the rollout engine; the trainer always uses ``policy.logits``."""
    exact = logits(params, context)
    if mc is None or mc.mode == "none":
        return exact
    if mc.mode == "quantize":
        return quantize_mantissa(exact, mc.bits)
    # Same context always receives the same perturbation
    window = context_window(params, context)
    rng = np.random.default_rng(np.random.SeedSequence([mc.noise_seed, *window]))
    return exact + rng.normal(0.0, mc.sigma, size=exact.shape)


def rollout_evaluator(params: PolicyParams, mc: Optional[MismatchConfig] = None) -> Evaluator:

    if mc is None or mc.mode == "none":
        return lambda window: logits(params, window)

    cache: Dict[Tuple[int, ...], np.ndarray] = {}
    lock = threading.Lock()

    def evaluate(window: Tuple[int, ...]) -> np.ndarray:
        key = tuple(window)
        with lock:
            cached = cache.get(key)
        if cached is None:
            cached = rollout_eval_logits(params, key, mc)
            with lock:
                cached = cache.setdefault(key, cached)
        return cached

    return evaluate


def rollout_trajectory(params: PolicyParams, problem: "Problem", window: int, seed: np.random.SeedSequence,
                       temperature: float = 1.0, mc: Optional[MismatchConfig] = None,
                       protocol: str = "raw", index: int = 0,
                       evaluator: Optional[Evaluator] = None) -> Trajectory:
    """Sample one graded trajectory with rollout and trainer log-probs for the same tokens."""
    vocab = params.vocab
    prompt = vocab.encode(problem.prompt)
    actions, rollout_logprobs = sample_with_logprobs(
        params, prompt, window, seed, temperature, evaluator or rollout_evaluator(params, mc)
    )
    trainer_logprobs = token_logprobs(params, prompt, actions)
    completion = render_completion(vocab.decode(actions), protocol)
    report = grade_trajectory(completion, list(problem.answers))
    return Trajectory(
        prompt_id=problem.id,
        prompt=prompt,
        actions=actions,
        rollout_logprobs=rollout_logprobs,
        trainer_logprobs=trainer_logprobs,
        reward=report.aggregate,
        fully_correct=report.fully_correct,
        golds=tuple(problem.answers),
        index=index,
    )


@dataclass(frozen=True, eq=False)
class RolloutWave:
    groups: Tuple[GroupBatch, ...]
    wave_seed: int
    snapshot_id: str

    @property
    def trajectories(self) -> List[Trajectory]:
        return [t for g in self.groups for t in g.trajectories]

    @property
    def lengths(self) -> List[int]:
        return [t.length for t in self.trajectories]

    @property
    def total_tokens(self) -> int:
        return sum(self.lengths)

    @property
    def mean_length(self) -> float:
        return float(np.mean(self.lengths)) if self.groups else 0.0

    @property
    def max_length(self) -> int:
        return max(self.lengths) if self.groups else 0

    @property
    def mean_reward(self) -> float:
        return float(np.mean([t.reward for t in self.trajectories])) if self.groups else 0.0


def generate_wave(params: PolicyParams, problems: Sequence["Problem"], group_size: int, window: int,
                  temperature: float = 1.0, mc: Optional[MismatchConfig] = None, wave_seed: int = 0,
                  protocol: str = "raw", workers: int = 1) -> RolloutWave:
    """Sample ``group_size`` trajectories per problem in prompt-major, index-minor order.

    Each trajectory is seeded from (wave seed, problem id, index) so the wave
    does not depend on ``workers``.
    """
    if group_size < 2:
        raise ValueError(f"group_size must be at least 2, got {group_size}")
    if not problems:
        raise ValueError("At least one problem is required")

    evaluator = rollout_evaluator(params, mc)
    jobs = [(problem, i) for problem in problems for i in range(group_size)]

    def run(job: Tuple["Problem", int]) -> Trajectory:
        problem, i = job
        seed = np.random.SeedSequence([wave_seed, id_entropy(problem.id), i])
        return rollout_trajectory(params, problem, window, seed, temperature, mc, protocol, i, evaluator)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(run, jobs))
    else:
        trajectories = [run(job) for job in jobs]

    groups = tuple(
        GroupBatch(problem.id, tuple(trajectories[g * group_size:(g + 1) * group_size]))
        for g, problem in enumerate(problems)
    )
    return RolloutWave(groups=groups, wave_seed=wave_seed, snapshot_id=params.checksum())


def _hex(values: np.ndarray) -> List[str]:
    return [float(v).hex() for v in values]


def _unhex(values: Sequence[str]) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values], dtype=np.float64)


def dump_wave(wave: RolloutWave, path: Union[str, Path], update_batch_size: Optional[int] = None) -> Path:
    """Write one row per trajectory; floats are stored as hex strings so replay is exact."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for g, group in enumerate(wave.groups):
        for t in group.trajectories:
            rows.append({
                "wave_seed": wave.wave_seed,
                "snapshot_id": wave.snapshot_id,
                "update_batch_size": update_batch_size if update_batch_size is not None else -1,
                "group_index": g,
                "traj_index": t.index,
                "problem_id": t.prompt_id,
                "prompt": list(t.prompt),
                "actions": list(t.actions),
                "rollout_logprobs": _hex(t.rollout_logprobs),
                "trainer_logprobs": _hex(t.trainer_logprobs),
                "reward": float(t.reward).hex(),
                "golds": list(t.golds),
            })
    try:
        df = pd.DataFrame(rows, columns=_DUMP_COLUMNS)
        write_jsonl(df, target)
    except Exception as e:
        logger.error(f"Failed to write trajectory dump {target}: {e}")
        raise
    logger.info(f"Dumped {len(rows)} trajectories to {target}")
    return target


def load_wave(path: Union[str, Path]) -> Tuple[RolloutWave, Optional[int]]:
    """Read a dump back, restoring prompt-major order from the stored indices."""
    source = Path(path)
    df = read_jsonl(source)
    missing = set(_DUMP_COLUMNS) - set(df.columns)
    if missing:
        raise DatasetFormatError(str(source), list(missing))
    if df.empty:
        raise DatasetFormatError(str(source), list(_DUMP_COLUMNS))

    df = df.sort_values(["group_index", "traj_index"], kind="mergesort")
    groups = []
    for _, rows in df.groupby("group_index", sort=True):
        trajectories = tuple(
            Trajectory(
                prompt_id=str(row["problem_id"]),
                prompt=tuple(int(a) for a in row["prompt"]),
                actions=tuple(int(a) for a in row["actions"]),
                rollout_logprobs=_unhex(row["rollout_logprobs"]),
                trainer_logprobs=_unhex(row["trainer_logprobs"]),
                reward=float.fromhex(str(row["reward"])),
                fully_correct=float.fromhex(str(row["reward"])) == 1.0,
                golds=tuple(str(g) for g in row["golds"]),
                index=int(row["traj_index"]),
            )
            for _, row in rows.iterrows()
        )
        groups.append(GroupBatch(trajectories[0].prompt_id, trajectories))

    first = df.iloc[0]
    update_batch_size = int(first["update_batch_size"])
    wave = RolloutWave(groups=tuple(groups), wave_seed=int(first["wave_seed"]),
                       snapshot_id=str(first["snapshot_id"]))
    logger.info(f"Loaded {len(df)} trajectories from {source}")
    return wave, (update_batch_size if update_batch_size > 0 else None)
