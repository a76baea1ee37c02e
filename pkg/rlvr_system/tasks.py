import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .curriculum import Problem
from .exceptions import InvalidSpec, LadderInvalid
from .policy import SEPARATOR, Vocabulary

logger = logging.getLogger(__name__)

FAMILIES = ("modular-add", "digit-reverse", "two-part")

MAX_ANSWER_TOKENS = 32
MAX_PROMPT_TOKENS = 64


@dataclass(frozen=True)
class TaskSpec:
    """One difficulty tier of a synthetic task family.

    ``modular-add`` asks for (a + b) mod m with ``digits``-digit operands,
    ``digit-reverse`` for the reversal of a ``length``-digit string, and
    ``two-part`` for both answers at once, separated by ``|``.
    """

    family: str
    count: int
    seed: int = 0
    tier: int = 0
    digits: int = 1
    modulus: int = 10
    length: int = 2

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise InvalidSpec("family", f"must be one of {FAMILIES}, got {self.family!r}")
        if self.count < 1:
            raise InvalidSpec("count", f"must be at least 1, got {self.count}")
        if self.seed < 0:
            raise InvalidSpec("seed", "must be non-negative")
        if self.uses_modadd:
            if self.digits < 1:
                raise InvalidSpec("digits", f"must be at least 1, got {self.digits}")
            if self.modulus < 2:
                raise InvalidSpec("modulus", f"must be at least 2, got {self.modulus}")
        if self.uses_reverse and self.length < 1:
            raise InvalidSpec("length", f"must be at least 1, got {self.length}")
        if self.answer_tokens > MAX_ANSWER_TOKENS:
            raise InvalidSpec("answer_tokens", f"{self.answer_tokens} exceeds the limit of {MAX_ANSWER_TOKENS}")
        if self.prompt_tokens > MAX_PROMPT_TOKENS:
            raise InvalidSpec("prompt_tokens", f"{self.prompt_tokens} exceeds the limit of {MAX_PROMPT_TOKENS}")

    @property
    def uses_modadd(self) -> bool:
        return self.family in ("modular-add", "two-part")

    @property
    def uses_reverse(self) -> bool:
        return self.family in ("digit-reverse", "two-part")

    @property
    def answer_tokens(self) -> int:
        """Longest possible answer, in tokens."""
        total = 0
        if self.uses_modadd:
            total += len(str(self.modulus - 1))
        if self.uses_reverse:
            total += self.length
        if self.family == "two-part":
            total += 1
        return total

    @property
    def prompt_tokens(self) -> int:
        total = 1
        if self.uses_modadd:
            total += len(str(self.modulus)) + 2 + 2 * self.digits
        if self.uses_reverse:
            total += self.length
        if self.family == "two-part":
            total += 1
        return total

    def to_dict(self) -> Dict[str, Any]:

        return {
            "family": self.family,
            "count": self.count,
            "seed": self.seed,
            "tier": self.tier,
            "digits": self.digits,
            "modulus": self.modulus,
            "length": self.length,
        }


def uniform_pass_rate(spec: TaskSpec, vocab_size: int = 16) -> float:
    """Pass rate of the zero-parameter policy when the window equals ``spec.answer_tokens``.

    Exact for digit reversal; a lower bound for the modular families, where a
    shorter answer or an equivalent expression such as ``3+4`` also scores.
    """
    return float(vocab_size) ** -spec.answer_tokens


def _modadd(rng: np.random.Generator, spec: TaskSpec) -> Tuple[List[str], str]:
    a, b = (int(v) for v in rng.integers(0, 10 ** spec.digits, size=2))
    prompt = list(str(spec.modulus)) + ["%"] + list(str(a).zfill(spec.digits)) + ["+"] + list(str(b).zfill(spec.digits))
    return prompt, str((a + b) % spec.modulus)


def _reverse(rng: np.random.Generator, spec: TaskSpec) -> Tuple[List[str], str]:
    digits = [str(int(d)) for d in rng.integers(0, 10, size=spec.length)]
    # Nonzero last digit keeps the reversed answer free of a leading zero
    digits[-1] = str(int(rng.integers(1, 10)))
    return digits, "".join(reversed(digits))


def generate_dataset(spec: TaskSpec) -> List[Problem]:

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, spec.tier, FAMILIES.index(spec.family)]))
    problems = []
    for i in range(spec.count):
        if spec.family == "modular-add":
            prompt, answer = _modadd(rng, spec)
            answers: Tuple[str, ...] = (answer,)
        elif spec.family == "digit-reverse":
            prompt, answer = _reverse(rng, spec)
            answers = (answer,)
        else:
            left, first = _modadd(rng, spec)
            right, second = _reverse(rng, spec)
            prompt = left + [SEPARATOR] + right
            answers = (first, second)

        problems.append(Problem(
            id=f"{spec.family}-t{spec.tier}-s{spec.seed}-{i:05d}",
            prompt=tuple(prompt + ["="]),
            answers=answers,
            tags=(spec.family, f"tier-{spec.tier}"),
            provenance="synthetic-tier",
        ))

    logger.info(f"Generated {len(problems)} {spec.family} problems (tier {spec.tier}, seed {spec.seed})")
    return problems


def check_vocabulary(problems: Sequence[Problem], vocab: Vocabulary) -> None:

    for problem in problems:
        missing = [s for s in problem.prompt if s not in vocab]
        if missing:
            raise InvalidSpec("prompt", f"problem {problem.id} uses symbols outside the vocabulary: {missing}")


def tier_ladder(family: str, tiers: Sequence[Mapping[str, int]], count: int = 64, seed: int = 0,
                vocab_size: int = 16) -> List[TaskSpec]:
    """Specs for ``tiers`` (easiest first) whose uniform-policy pass rates strictly decrease."""
    if not tiers:
        raise InvalidSpec("tiers", "at least one tier is required")
    specs = [TaskSpec(family=family, count=count, seed=seed + i, tier=i, **dict(params))
             for i, params in enumerate(tiers)]
    rates = [uniform_pass_rate(s, vocab_size) for s in specs]
    if any(later >= earlier for earlier, later in zip(rates, rates[1:])):
        raise LadderInvalid(rates)
    return specs


def generate_suite(specs: Sequence[TaskSpec]) -> List[Problem]:

    problems: List[Problem] = []
    for spec in specs:
        problems.extend(generate_dataset(spec))
    ids = [p.id for p in problems]
    if len(set(ids)) != len(ids):
        raise InvalidSpec("seed", "two specs produced colliding problem ids")
    return problems
