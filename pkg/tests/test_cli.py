import tempfile
from pathlib import Path

import pandas as pd
import pytest

from rlvr_system.cli import RLVRCLI
from rlvr_system.curriculum import load_dataset


@pytest.fixture
def temp_dir():
    with tempfile.TemporaryDirectory() as d:
        yield Path(d)


@pytest.fixture
def cli():
    return RLVRCLI()


class TestRLVRCLI:

    def test_gen_estimate_filter_pipeline(self, cli, temp_dir, capsys):
        data = temp_dir / "tasks.jsonl"
        annotated = temp_dir / "annotated.jsonl"

        assert cli.run(["gen-tasks", "--family", "digit-reverse", "--count", "6", "--length", "1",
                        "--out", str(data)]) == 0
        assert cli.run(["estimate-difficulty", "--dataset", str(data), "--out", str(annotated),
                        "--rollouts", "4", "--window", "1"]) == 0
        assert cli.run(["filter", "--dataset", str(annotated), "--band", "[0.0,1.0]",
                        "--out-dir", str(temp_dir / "filtered"), "--rollouts", "4", "--window", "1"]) == 0

        assert len(load_dataset(data)) == 6
        assert all(p.difficulty is not None for p in load_dataset(annotated))
        assert len(load_dataset(temp_dir / "filtered" / "kept.jsonl")) == 6
        assert "Filter Partitions" in capsys.readouterr().out

    def test_verify(self, cli, temp_dir):
        source = temp_dir / "completions.jsonl"
        pd.DataFrame([{"completion": "\\boxed{2}", "golds": ["2"]}]).to_json(source, orient="records", lines=True)

        assert cli.run(["verify", "--input", str(source), "--output", str(temp_dir / "graded.jsonl")]) == 0
        assert pd.read_json(temp_dir / "graded.jsonl", lines=True)["aggregate"].tolist() == [1.0]

    def test_library_errors_exit_with_one(self, cli, temp_dir, capsys):
        code = cli.run(["estimate-difficulty", "--dataset", str(temp_dir / "absent.jsonl"),
                        "--out", str(temp_dir / "out.jsonl")])

        assert code == 1
        assert "DatasetFormatError" in capsys.readouterr().err

    def test_bad_config_exits_with_one(self, cli, temp_dir):
        config = temp_dir / "run.yaml"
        config.write_text("tasks: {}\n")

        assert cli.run(["train", "--config", str(config)]) == 1

    def test_unknown_family_is_rejected(self, cli):
        with pytest.raises(SystemExit):
            cli.run(["gen-tasks", "--family", "multiply", "--out", "x.jsonl"])
