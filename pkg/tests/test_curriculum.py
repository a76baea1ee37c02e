import logging
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rlvr_system.curriculum import (
    DONE,
    DifficultyBand,
    DifficultyConfig,
    Problem,
    StageConfig,
    StubRefiner,
    advance_stage,
    build_plan,
    dataset_summary,
    dual_end_filter,
    estimate_dataset,
    estimate_difficulty,
    load_dataset,
    prepare_stage,
    write_dataset,
)
from rlvr_system.exceptions import DatasetFormatError, InvalidProblem, PlanInvalid
from rlvr_system.policy import PolicyParams, Vocabulary
from rlvr_system.tasks import TaskSpec, generate_dataset

VOCAB = Vocabulary.default()


def make_problem(id="p1", difficulty=None, provenance="original", prompt=("1", "="), answers=("1",)):
    return Problem(id, prompt, answers, ("digit-reverse",), difficulty, provenance)


def make_stage(index=0, band="[0.0,1.0]", group_size=4, window=2, steps=10, **kwargs):
    return StageConfig(index=index, band=DifficultyBand.parse(band), group_size=group_size, window=window,
                       learning_rate=0.1, rollout_batch_size=kwargs.pop("rollout_batch_size", 16),
                       update_batch_size=kwargs.pop("update_batch_size", 8), steps=steps, **kwargs)


def echo_params():
    """Two-token-context policy that answers a one-digit reversal almost surely, then stops."""
    params = PolicyParams.zeros(VOCAB, context_size=2)
    theta = params.theta.copy()
    weights = theta[: VOCAB.size * params.n_features].reshape(VOCAB.size, params.n_features)
    for digit in range(10):
        token = VOCAB.encode([str(digit)])[0]
        weights[token, token] = 20.0
        weights[VOCAB.eos, VOCAB.size + token] = 20.0
    return params.with_theta(theta)


@dataclass
class Progress:
    stage: int
    stage_step: int


@pytest.fixture
def temp_dir():
    with tempfile.TemporaryDirectory() as d:
        yield Path(d)


class TestProblem:

    def test_normalizes_sequences(self):
        problem = Problem("p", ["1", "="], ["1"], ["digit-reverse", "tier-0"])

        assert problem.prompt == ("1", "=")
        assert problem.answers == ("1",)
        assert problem.family == "digit-reverse"
        assert problem.difficulty is None
        assert problem.provenance == "original"

    @pytest.mark.parametrize("kwargs", [
        {"id": ""},
        {"prompt": ()},
        {"answers": ()},
        {"answers": ("x=",)},
        {"difficulty": 1.5},
        {"difficulty": -0.1},
        {"provenance": "scraped"},
    ])
    def test_invalid_problems(self, kwargs):
        with pytest.raises(InvalidProblem):
            make_problem(**kwargs)

    def test_family_defaults_to_unknown(self):
        assert Problem("p", ("1",), ("1",)).family == "unknown"

    def test_with_difficulty(self):
        problem = make_problem()

        assert problem.with_difficulty(0.25).difficulty == 0.25
        assert problem.difficulty is None

    def test_dict_round_trip(self):
        problem = make_problem(difficulty=0.5, provenance="recovered")

        assert Problem.from_dict(problem.to_dict()) == problem

    def test_from_dict_treats_nan_as_unestimated(self):
        data = make_problem().to_dict()
        data["difficulty"] = float("nan")
        data["tags"] = float("nan")
        data["provenance"] = None

        problem = Problem.from_dict(data)

        assert problem.difficulty is None
        assert problem.tags == ()
        assert problem.provenance == "original"


class TestDifficultyBand:

    def test_parse_half_open(self):
        band = DifficultyBand.parse("(0.0,0.7]")

        assert (band.lower, band.upper) == (0.0, 0.7)
        assert not band.lower_closed
        assert band.upper_closed
        assert str(band) == "(0.0,0.7]"

    def test_parse_closed_with_spaces(self):
        band = DifficultyBand.parse(" [0, 0.5] ")

        assert band.lower_closed and band.upper_closed
        assert str(band) == "[0.0,0.5]"

    @pytest.mark.parametrize("text", ["0-1", "(0.8,0.2]", "[0,1.5]", "{0,1}"])
    def test_invalid_bands(self, text):
        with pytest.raises(ValueError):
            DifficultyBand.parse(text)

    def test_contains_respects_closure(self):
        open_band = DifficultyBand.parse("(0.0,0.7]")
        closed_band = DifficultyBand.parse("[0.0,0.7)")

        assert not open_band.contains(0.0)
        assert open_band.contains(0.7)
        assert closed_band.contains(0.0)
        assert not closed_band.contains(0.7)

    def test_above(self):
        assert DifficultyBand.parse("(0.0,0.7]").above(0.75)
        assert not DifficultyBand.parse("(0.0,0.7]").above(0.7)
        assert DifficultyBand.parse("(0.0,0.7)").above(0.7)
        assert not DifficultyBand.parse("(0.0,0.7]").above(0.0)

    def test_open_lower(self):
        band = DifficultyBand.parse("[0.0,0.5]").open_lower()

        assert str(band) == "(0.0,0.5]"


class TestStageConfig:

    def test_derived_quantities(self):
        stage = make_stage(group_size=4, window=6, rollout_batch_size=16)

        assert stage.exploration == 24
        assert stage.problems_per_wave == 4

    def test_effective_band_without_readmission(self):
        stage = make_stage(band="[0.0,0.5]", readmit_zero=False)

        assert not stage.effective_band.lower_closed
        assert make_stage(band="[0.0,0.5]").effective_band.lower_closed

    @pytest.mark.parametrize("kwargs", [
        {"group_size": 1},
        {"window": 0},
        {"steps": -1},
        {"rollout_batch_size": 2},
        {"update_batch_size": 0},
        {"update_batch_size": 17},
        {"temperature": 0.0},
    ])
    def test_invalid_stage(self, kwargs):
        with pytest.raises(PlanInvalid) as exc_info:
            make_stage(**kwargs)

        assert exc_info.value.invariant == "stage-config"


class TestBuildPlan:

    def test_valid_plan(self):
        plan = build_plan([
            make_stage(0, "[0.0,1.0]", group_size=4, window=2),
            make_stage(1, "(0.0,0.7]", group_size=4, window=3),
            make_stage(2, "(0.0,0.7]", group_size=8, window=3),
        ])

        assert len(plan) == 3
        assert plan.total_steps == 30
        assert plan.promotion == "step-budget"

    def test_empty_plan(self):
        with pytest.raises(PlanInvalid) as exc_info:
            build_plan([])

        assert exc_info.value.invariant == "nonempty"

    def test_stage_indices_must_follow_positions(self):
        with pytest.raises(PlanInvalid) as exc_info:
            build_plan([make_stage(0), make_stage(2)])

        assert exc_info.value.invariant == "stage-order"

    def test_loosening_the_band_raises(self):
        with pytest.raises(PlanInvalid) as exc_info:
            build_plan([make_stage(0, "(0.0,0.5]"), make_stage(1, "(0.0,0.7]")])

        assert exc_info.value.invariant == "difficulty-tightening"

    def test_shrinking_exploration_raises(self):
        with pytest.raises(PlanInvalid) as exc_info:
            build_plan([make_stage(0, window=4), make_stage(1, window=2)])

        assert exc_info.value.invariant == "exploration-expansion"


class TestAdvanceStage:

    @pytest.fixture
    def plan(self):
        return build_plan([make_stage(0, steps=2), make_stage(1, steps=3)])

    def test_stays_until_budget_spent(self, plan):
        assert advance_stage(Progress(0, 0), plan) is plan.stages[0]
        assert advance_stage(Progress(0, 1), plan) is plan.stages[0]

    def test_moves_to_next_stage(self, plan):
        assert advance_stage(Progress(0, 2), plan) is plan.stages[1]

    def test_done_after_last_stage(self, plan):
        assert advance_stage(Progress(1, 3), plan) is DONE
        assert advance_stage(Progress(2, 0), plan) is DONE

    def test_zero_step_stage_is_passed_over(self):
        plan = build_plan([make_stage(0, steps=0), make_stage(1, steps=1)])

        assert advance_stage(Progress(0, 0), plan) is plan.stages[1]


class TestEstimateDifficulty:

    def test_uniform_policy_pass_rate(self):
        problem = generate_dataset(TaskSpec("digit-reverse", count=1, length=1))[0]
        params = PolicyParams.zeros(VOCAB)
        n = 1000

        d = estimate_difficulty(problem, params, rollouts=n, window=1, seed=0)

        sigma = math.sqrt(n * (1 / 16) * (15 / 16))
        assert abs(d * n - n / 16) <= 4 * sigma

    @pytest.mark.slow
    @pytest.mark.parametrize("p", [0.25, 0.5])
    def test_estimates_concentrate_around_closed_form_rate(self, p):
        # One free token with bias b on the gold digit: p = e^b / (e^b + 15)
        params = PolicyParams.zeros(VOCAB, context_size=1)
        theta = params.theta.copy()
        gold = VOCAB.encode(["3"])[0]
        theta[VOCAB.size * params.n_features + gold] = math.log(15 * p / (1 - p))
        params = params.with_theta(theta)
        problem = make_problem(prompt=("3", "="), answers=("3",))
        n = 1000
        sigma = math.sqrt(p * (1 - p) / n)

        within = [abs(estimate_difficulty(problem, params, rollouts=n, window=1, seed=seed) - p) <= 3 * sigma
                  for seed in range(100)]

        assert sum(within) >= 95

    def test_confident_policy_always_passes(self):
        problem = generate_dataset(TaskSpec("digit-reverse", count=1, length=1))[0]

        assert estimate_difficulty(problem, echo_params(), rollouts=16, window=2) == 1.0

    def test_deterministic_per_seed(self):
        problem = generate_dataset(TaskSpec("digit-reverse", count=1, length=1))[0]
        params = PolicyParams.zeros(VOCAB)

        first = estimate_difficulty(problem, params, rollouts=64, window=1, seed=5)
        second = estimate_difficulty(problem, params, rollouts=64, window=1, seed=5)

        assert first == second

    def test_pass_threshold_gives_partial_credit(self):
        problem = Problem("two", ("1", "|", "2", "="), ("1", "2"))
        params = PolicyParams.zeros(VOCAB)

        strict = estimate_difficulty(problem, params, rollouts=400, window=1)
        lenient = estimate_difficulty(problem, params, rollouts=400, window=1, pass_threshold=0.5)

        assert strict == 0.0
        assert lenient > 0.0

    def test_rollouts_must_be_positive(self):
        with pytest.raises(ValueError):
            estimate_difficulty(make_problem(), PolicyParams.zeros(VOCAB), rollouts=0)

    def test_dataset_estimation_is_worker_independent(self):
        problems = generate_dataset(TaskSpec("digit-reverse", count=6, length=1))
        cfg = DifficultyConfig(rollouts=32)
        params = PolicyParams.zeros(VOCAB)

        serial = estimate_dataset(problems, params, cfg, window=1, seed=3)
        threaded = estimate_dataset(problems, params, cfg, window=1, seed=3, workers=3)

        assert [p.difficulty for p in serial] == [p.difficulty for p in threaded]
        assert all(p.difficulty is not None for p in serial)

    @pytest.mark.parametrize("kwargs", [{"rollouts": 0}, {"window": 0}, {"pass_threshold": 0.0}])
    def test_invalid_difficulty_config(self, kwargs):
        with pytest.raises(ValueError):
            DifficultyConfig(**kwargs)


class TestStubRefiner:

    def test_cleans_prompt_and_marks_recovered(self):
        problem = make_problem(prompt=("<bos>", "1", "<eos>"), difficulty=0.0)

        repaired = StubRefiner().refine(problem)

        assert repaired.id == "p1-r"
        assert repaired.prompt == ("1", "=")
        assert repaired.tags == ("digit-reverse", "recovered")
        assert repaired.provenance == "recovered"
        assert repaired.difficulty is None
        assert repaired.answers == problem.answers

    def test_recovered_problems_are_not_refined_again(self):
        assert StubRefiner().refine(make_problem(provenance="recovered")) is None

    def test_prompt_of_only_markers(self):
        assert StubRefiner().refine(make_problem(prompt=("<bos>", "<eos>"))) is None


class TestDualEndFilter:

    BAND = DifficultyBand.parse("(0.0,0.7]")

    def test_partition_without_refiner(self):
        problems = [make_problem(f"p{i}", d) for i, d in enumerate([0.5, 0.7, 0.9, 0.0, 1.0])]

        result = dual_end_filter(problems, self.BAND)

        assert [p.id for p in result.kept] == ["p0", "p1"]
        assert [p.id for p in result.pruned_trivial] == ["p2", "p4"]
        assert [p.id for p in result.discarded] == ["p3"]
        assert result.recovered == []

    def test_closed_lower_bound_keeps_zero_pass(self):
        result = dual_end_filter([make_problem(difficulty=0.0)], DifficultyBand.parse("[0.0,0.5]"))

        assert len(result.kept) == 1

    def test_repaired_problem_in_band_is_recovered(self):
        result = dual_end_filter([make_problem(difficulty=0.0)], self.BAND, StubRefiner(), lambda p: 0.25)

        assert result.kept == []
        assert [p.id for p in result.recovered] == ["p1-r"]
        assert result.recovered[0].difficulty == 0.25

    def test_repaired_problem_that_became_trivial_is_pruned(self):
        result = dual_end_filter([make_problem(difficulty=0.0)], self.BAND, StubRefiner(), lambda p: 1.0)

        assert [p.id for p in result.pruned_trivial] == ["p1-r"]

    def test_failed_repair_discards_the_original(self):
        result = dual_end_filter([make_problem(difficulty=0.0)], self.BAND, StubRefiner(), lambda p: 0.0)

        assert [p.id for p in result.discarded] == ["p1"]

    def test_repair_without_reestimate_is_discarded(self):
        result = dual_end_filter([make_problem(difficulty=0.0)], self.BAND, StubRefiner())

        assert [p.id for p in result.discarded] == ["p1"]

    def test_recovered_problem_is_not_repaired_twice(self):
        calls = []
        problem = make_problem("p1-r", difficulty=0.0, provenance="recovered")

        result = dual_end_filter([problem], self.BAND, StubRefiner(), lambda p: calls.append(p) or 0.5)

        assert result.discarded == [problem]
        assert calls == []

    def test_unestimated_problem_raises(self):
        with pytest.raises(InvalidProblem):
            dual_end_filter([make_problem()], self.BAND)

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), max_size=30), st.floats(min_value=0.0, max_value=1.0))
    def test_every_problem_lands_in_one_bucket(self, difficulties, repaired):
        problems = [make_problem(f"p{i}", d) for i, d in enumerate(difficulties)]

        result = dual_end_filter(problems, self.BAND, StubRefiner(), lambda p: repaired)

        assert sum(len(bucket) for bucket in result) == len(problems)
        assert all(self.BAND.contains(p.difficulty) for p in result.kept + result.recovered)

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), max_size=30),
           st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.0, max_value=1.0), st.booleans())
    def test_tightening_the_upper_bound_is_monotone(self, difficulties, first, second, lower_closed):
        tight = DifficultyBand(0.0, min(first, second), lower_closed=lower_closed)
        wide = DifficultyBand(0.0, max(first, second), lower_closed=lower_closed)
        problems = [make_problem(f"p{i}", d) for i, d in enumerate(difficulties)]

        narrow = dual_end_filter(problems, tight)
        broad = dual_end_filter(problems, wide)

        assert {p.id for p in narrow.kept} <= {p.id for p in broad.kept}
        assert {p.id for p in broad.pruned_trivial} <= {p.id for p in narrow.pruned_trivial}
        assert not {p.id for p in broad.pruned_trivial} & {p.id for p in narrow.kept}


class TestPrepareStage:

    def test_uniform_policy_with_closed_band_keeps_everything(self):
        problems = generate_dataset(TaskSpec("digit-reverse", count=5, length=1))
        stage = make_stage(band="[0.0,1.0]", window=1)

        result = prepare_stage(problems, PolicyParams.zeros(VOCAB), stage, DifficultyConfig(rollouts=8))

        assert len(result.kept) == 5
        assert all(p.difficulty is not None for p in result.kept)

    def test_mastered_problems_are_pruned(self):
        problems = generate_dataset(TaskSpec("digit-reverse", count=5, length=1))
        stage = make_stage(band="(0.0,0.7]", window=2)

        result = prepare_stage(problems, echo_params(), stage, DifficultyConfig(rollouts=8), StubRefiner())

        assert len(result.pruned_trivial) == 5
        assert result.kept == []


class TestDatasetIO:

    def test_round_trip(self, temp_dir):
        problems = generate_dataset(TaskSpec("two-part", count=4))
        problems = [problems[0].with_difficulty(0.0625)] + problems[1:]

        loaded = load_dataset(write_dataset(problems, temp_dir / "data" / "problems.jsonl"))

        assert loaded == problems

    def test_missing_file(self, temp_dir):
        with pytest.raises(DatasetFormatError):
            load_dataset(temp_dir / "absent.jsonl")

    def test_empty_file(self, temp_dir):
        path = temp_dir / "empty.jsonl"
        path.touch()

        assert load_dataset(path) == []

    def test_missing_columns(self, temp_dir):
        path = temp_dir / "bad.jsonl"
        pd.DataFrame([{"id": "p", "prompt": ["1"]}]).to_json(path, orient="records", lines=True)

        with pytest.raises(DatasetFormatError) as exc_info:
            load_dataset(path)

        assert exc_info.value.missing == ["answers"]

    def test_bad_rows_are_skipped(self, temp_dir, caplog):
        path = temp_dir / "mixed.jsonl"
        pd.DataFrame([
            {"id": "good", "prompt": ["1", "="], "answers": ["1"]},
            {"id": "bad", "prompt": ["1", "="], "answers": ["x="]},
        ]).to_json(path, orient="records", lines=True)

        with caplog.at_level(logging.WARNING):
            problems = load_dataset(path)

        assert [p.id for p in problems] == ["good"]
        assert "Failed to load problem" in caplog.text


class TestDatasetSummary:

    def test_empty(self):
        assert dataset_summary([]) == {"total_problems": 0, "families": {}, "provenance": {}, "estimated": 0}

    def test_counts_and_quantiles(self):
        problems = [
            make_problem("a", 0.0),
            make_problem("b", 0.5),
            make_problem("c", 1.0, provenance="recovered"),
            Problem("d", ("1", "="), ("1",), ("modular-add",)),
        ]

        summary = dataset_summary(problems)

        assert summary["total_problems"] == 4
        assert summary["families"] == {"digit-reverse": 3, "modular-add": 1}
        assert summary["provenance"] == {"original": 3, "recovered": 1}
        assert summary["estimated"] == 3
        assert summary["zero_pass"] == 1
        assert summary["difficulty_mean"] == pytest.approx(0.5)
        assert summary["difficulty_quantiles"]["0.5"] == pytest.approx(0.5)
        assert np.isfinite(summary["difficulty_quantiles"]["0.9"])
