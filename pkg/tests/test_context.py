"""
Tests for RunContext - atomic persistence of run.json

Tests verify:
- Fresh contexts and the first save
- State history and artifact bookkeeping
- Loading, migration and corrupt files
"""

import json
from pathlib import Path
from unittest.mock import patch

import pytest

from flowrft.context import RUN_CONTEXT_VERSION, RunContext


class TestRunContextBasic:
    """Test basic RunContext functionality."""

    def test_create_new_context(self, tmp_path):
        """Test a context for a file that does not exist yet."""
        ctx = RunContext(tmp_path / "run.json")
        assert ctx.get_state() == "created"
        assert ctx.get_history() == []
        assert ctx.run_id is None
        assert not (tmp_path / "run.json").exists()

    def test_for_run_assigns_id(self, tmp_path):
        ctx = RunContext.for_run(tmp_path / "out", "finetune")
        assert len(ctx.run_id) == 12
        assert ctx.to_dict()["command"] == "finetune"
        assert ctx.filepath == tmp_path / "out" / "run.json"

    def test_save_creates_directories(self, tmp_path):
        ctx = RunContext.for_run(tmp_path / "a" / "b", "verify")
        ctx.save()
        assert (tmp_path / "a" / "b" / "run.json").exists()

    def test_round_trip(self, tmp_path):
        """Test that everything written is read back."""
        ctx = RunContext.for_run(tmp_path, "pretrain")
        ctx.set_config({"seed": 3})
        ctx.add_artifact("checkpoint", tmp_path / "pretrained.ckpt")
        ctx.set_state("running")
        ctx.set_summary({"final_loss": 0.5})

        again = RunContext(tmp_path / "run.json")
        assert again.run_id == ctx.run_id
        assert again.get_config() == {"seed": 3}
        assert again.get_artifact("checkpoint") == str(tmp_path / "pretrained.ckpt")
        assert again.get_state() == "running"
        assert again.get_summary() == {"final_loss": 0.5}


class TestRunContextState:
    def test_history_records_reason(self, tmp_path):
        ctx = RunContext.for_run(tmp_path, "finetune")
        ctx.set_state("running")
        ctx.set_state("failed", reason="non-finite loss")
        history = ctx.get_history()
        assert [h["state"] for h in history] == ["running", "failed"]
        assert "reason" not in history[0]
        assert history[1]["reason"] == "non-finite loss"

    def test_unknown_artifact(self, tmp_path):
        assert RunContext(tmp_path / "run.json").get_artifact("missing") is None


class TestRunContextLoading:
    def test_migrates_old_file(self, tmp_path):
        """Test that missing keys are filled in on load."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"state": "completed"}))
        ctx = RunContext(path)
        assert ctx.get_state() == "completed"
        assert ctx.to_dict()["version"] == RUN_CONTEXT_VERSION
        assert ctx.to_dict()["artifacts"] == {}

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{broken")
        with pytest.raises(RuntimeError, match="Failed to load"):
            RunContext(path)

    def test_failed_save_leaves_no_temp_file(self, tmp_path):
        ctx = RunContext.for_run(tmp_path, "verify")
        with patch("flowrft.context.os.replace", side_effect=OSError("disk full")):
            with pytest.raises(RuntimeError, match="Failed to save"):
                ctx.save()
        assert list(Path(tmp_path).glob("run_*.tmp")) == []
        assert not (tmp_path / "run.json").exists()
