import math
import tempfile
from pathlib import Path

import pytest

from rlvr_system.config import (
    OUTPUT_DIR_ENV,
    STAGED_PRESETS,
    config_from_dict,
    load_config,
    save_config,
    staged_plan,
)
from rlvr_system.curriculum import build_plan
from rlvr_system.exceptions import ConfigError, PlanInvalid

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def minimal(**overrides):
    data = {
        "tasks": {"specs": [{"family": "digit-reverse", "count": 4, "length": 1}]},
        "curriculum": {"stages": [{"band": "[0.0,1.0]", "group_size": 4, "window": 2, "steps": 3}]},
    }
    data.update(overrides)
    return data


@pytest.fixture(autouse=True)
def no_output_override(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


@pytest.fixture
def temp_dir():
    with tempfile.TemporaryDirectory() as d:
        yield Path(d)


class TestConfigFromDict:

    def test_defaults(self):
        cfg = config_from_dict(minimal())

        assert cfg.seeds.master == 0 and cfg.seeds.eval == 1 and cfg.seeds.difficulty == 2
        assert cfg.protocol == "raw"
        assert cfg.verifier == "rule"
        assert cfg.refiner == "stub"
        assert cfg.workers == 1
        assert cfg.eval.temperature == 0.6
        assert cfg.estimator.mis_threshold == 1.5
        assert cfg.estimator.mask_mode == "geo"
        assert cfg.mismatch.mode == "none"
        assert len(cfg.plan) == 1
        stage = cfg.plan.stages[0]
        assert stage.rollout_batch_size == 32
        assert stage.update_batch_size == 32
        assert stage.learning_rate == 1e-2

    def test_stage_estimator_inherits_top_level(self):
        data = minimal(estimator={"mis_threshold": 2.0})
        data["curriculum"]["stages"][0]["estimator"] = {"clip_eps": 0.1}

        stage = config_from_dict(data).plan.stages[0]

        assert stage.estimator.mis_threshold == 2.0
        assert stage.estimator.clip_eps == 0.1

    def test_infinite_threshold(self):
        cfg = config_from_dict(minimal(estimator={"mis_threshold": "inf"}))

        assert math.isinf(cfg.estimator.mis_threshold)
        assert cfg.to_dict()["estimator"]["mis_threshold"] == "inf"

    @pytest.mark.parametrize("data,key", [
        (minimal(learning_rate=1.0), "<root>"),
        (minimal(mismatch={"mode": "noise", "sigma": 0.1, "extra": 1}), "mismatch"),
        (minimal(seeds={"master": -1}), "seeds.master"),
        (minimal(policy={"vocabulary": "bytes"}), "policy.vocabulary"),
        (minimal(protocol="json"), "protocol"),
        (minimal(protocol="boxed"), "protocol"),
        (minimal(verifier="llm"), "verifier"),
        (minimal(tasks={}), "tasks"),
        (minimal(refiner="llm"), "refiner"),
        (minimal(mismatch={"mode": "logit-noise", "sigma": -1.0}), "mismatch"),
        (minimal(estimator={"clip_eps": "wide"}), "estimator.clip_eps"),
        (minimal(eval={"rollouts": 0}), "eval"),
        (minimal(degenerate_patience=0), "degenerate_patience"),
        (minimal(workers=0), "workers"),
        (minimal(token_budget=0), "token_budget"),
        (minimal(tasks={"specs": [{"family": "multiply", "count": 1}]}), "tasks.specs[0]"),
    ])
    def test_invalid_values(self, data, key):
        with pytest.raises(ConfigError) as exc_info:
            config_from_dict(data)

        assert exc_info.value.key == key

    def test_boxed_protocol_with_text_vocabulary(self):
        cfg = config_from_dict(minimal(protocol="boxed", policy={"vocabulary": "text"}))

        assert cfg.policy.build_vocabulary().size == 18

    def test_unknown_stage_key(self):
        data = minimal()
        data["curriculum"]["stages"][0]["lr"] = 0.1

        with pytest.raises(ConfigError) as exc_info:
            config_from_dict(data)

        assert exc_info.value.key == "curriculum.stages[0]"

    def test_missing_stage_keys(self):
        data = minimal(curriculum={"stages": [{"band": "[0.0,1.0]"}]})

        with pytest.raises(ConfigError) as exc_info:
            config_from_dict(data)

        assert "group_size" in exc_info.value.detail

    def test_bad_band(self):
        data = minimal()
        data["curriculum"]["stages"][0]["band"] = "0 to 1"

        with pytest.raises(ConfigError) as exc_info:
            config_from_dict(data)

        assert exc_info.value.key == "curriculum.stages[0].band"

    def test_invalid_stage_values_become_config_errors(self):
        data = minimal()
        data["curriculum"]["stages"][0]["group_size"] = 1

        with pytest.raises(ConfigError) as exc_info:
            config_from_dict(data)

        assert exc_info.value.key == "curriculum.stages[0]"

    def test_plan_invariants_are_enforced(self):
        data = minimal(curriculum={"stages": [
            {"band": "(0.0,0.5]", "group_size": 4, "window": 2, "steps": 1},
            {"band": "(0.0,0.7]", "group_size": 4, "window": 2, "steps": 1},
        ]})

        with pytest.raises(PlanInvalid) as exc_info:
            config_from_dict(data)

        assert exc_info.value.invariant == "difficulty-tightening"

    def test_preset_and_stages_conflict(self):
        data = minimal()
        data["curriculum"]["preset"] = "30B"

        with pytest.raises(ConfigError):
            config_from_dict(data)

    def test_output_dir_from_environment(self, monkeypatch, temp_dir):
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(temp_dir))

        cfg = config_from_dict(minimal(output_dir="runs/elsewhere"))

        assert cfg.output_dir == temp_dir

    def test_relative_dataset_resolves_against_base_dir(self, temp_dir):
        (temp_dir / "problems.jsonl").write_text("")

        cfg = config_from_dict(minimal(tasks={"dataset": "problems.jsonl"}), temp_dir)

        assert cfg.dataset == temp_dir / "problems.jsonl"

    def test_missing_dataset(self, temp_dir):
        with pytest.raises(ConfigError) as exc_info:
            config_from_dict(minimal(tasks={"dataset": "absent.jsonl"}), temp_dir)

        assert exc_info.value.key == "tasks.dataset"

    def test_with_output_dir(self, temp_dir):
        cfg = config_from_dict(minimal()).with_output_dir(temp_dir / "run")

        assert cfg.output_dir == temp_dir / "run"


class TestStagedPresets:

    @pytest.mark.parametrize("column", sorted(STAGED_PRESETS))
    def test_presets_satisfy_plan_invariants(self, column):
        plan = build_plan(staged_plan(column, steps=5))

        assert len(plan) == 3
        assert [str(s.band) for s in plan.stages] == ["(0.0,0.7]", "(0.0,0.5]", "[0.0,0.5]"]
        assert [s.group_size for s in plan.stages] == [8, 8, 16]
        assert plan.total_steps == 15

    def test_preset_windows(self):
        assert [s.window for s in staged_plan("30B")] == [16, 24, 32]
        assert [s.window for s in staged_plan("235B")] == [16, 18, 18]

    def test_preset_batch_sizes(self):
        assert staged_plan("30B")[0].rollout_batch_size == 128
        assert staged_plan("235B")[0].rollout_batch_size == 64
        assert all(s.update_batch_size == 32 for s in staged_plan("235B"))

    def test_unknown_preset(self):
        with pytest.raises(ConfigError) as exc_info:
            staged_plan("7B")

        assert exc_info.value.key == "curriculum.preset"

    def test_preset_from_config(self):
        cfg = config_from_dict(minimal(curriculum={"preset": "235B", "steps": 4, "learning_rate": 0.5}))

        assert len(cfg.plan) == 3
        assert all(s.learning_rate == 0.5 and s.steps == 4 for s in cfg.plan.stages)


class TestLoadSaveConfig:

    def test_round_trip(self, temp_dir):
        data = minimal(
            output_dir=str(temp_dir / "run"),
            estimator={"mis_threshold": "inf", "mask_mode": "truncate"},
            mismatch={"mode": "quantize", "bits": 8},
            eval={"every": 5, "window": 3, "specs": [{"family": "modular-add", "count": 2}]},
            difficulty={"rollouts": 4, "pass_threshold": 0.5},
            token_budget=1000,
            dump_waves=True,
        )
        cfg = config_from_dict(data)

        loaded = load_config(save_config(cfg, temp_dir / "saved" / "config.yaml"))

        assert loaded == cfg

    def test_missing_file(self, temp_dir):
        with pytest.raises(ConfigError):
            load_config(temp_dir / "absent.yaml")

    def test_empty_file(self, temp_dir):
        path = temp_dir / "empty.yaml"
        path.write_text("")

        with pytest.raises(ConfigError):
            load_config(path)

    def test_invalid_yaml(self, temp_dir):
        path = temp_dir / "broken.yaml"
        path.write_text("curriculum: [unclosed\n")

        with pytest.raises(ConfigError):
            load_config(path)

    @pytest.mark.parametrize("name", ["quickstart.yaml", "staged_30b.yaml", "mismatch_ablation.yaml",
                                      "curriculum_ablation.yaml"])
    def test_shipped_configs_load(self, name):
        cfg = load_config(CONFIG_DIR / name)

        assert len(cfg.plan) >= 1
        assert cfg.tasks
