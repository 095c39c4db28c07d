"""Tests for NDJSON record streams and the record types written to them."""

import json
import math

import pytest

from flowrft.records import MetricsRecord, SelectionRecord, dumps
from flowrft.stream_log import NdjsonWriter, log_records, read_ndjson


def metrics(i: int, **changes) -> MetricsRecord:
    data = dict(iter=i, method="consistent_rft", granularity="fine", mean_reward=-1.0, reward_std=0.5,
                diversity=0.1, latent_consistency=0.01, eval_reward=-1.2, loss_base=0.0, loss_cpgo=0.0,
                cpgo_eligible=4, step_units=40)
    data.update(changes)
    return MetricsRecord(**data)


class TestRecords:
    def test_sorted_keys(self):
        assert dumps({"b": 1, "a": 2}) == '{"a": 2, "b": 1}'

    def test_non_finite_floats_become_null(self):
        assert json.loads(dumps({"x": math.nan, "y": [math.inf, 1.0]})) == {"x": None, "y": [None, 1.0]}

    def test_wall_time_only_on_request(self):
        record = metrics(0, wall_time=1.5)
        assert "wall_time" not in record.to_dict()
        assert record.to_dict(include_wall_time=True)["wall_time"] == 1.5

    def test_selection_record(self):
        record = SelectionRecord(iter=2, cond=1, granularity="coarse", g1_indices=[0, 3], g2_indices=[1, 2],
                                 inertia=0.25)
        assert json.loads(record.to_json())["g1_indices"] == [0, 3]


class TestNdjsonWriter:
    """Test the append-only writer."""

    def test_file_opened_lazily(self, tmp_path):
        writer = NdjsonWriter(tmp_path / "logs" / "metrics.ndjson")
        assert not writer.filepath.exists()
        writer.close()

    def test_records_round_trip(self, tmp_path):
        path = tmp_path / "metrics.ndjson"
        with NdjsonWriter(path) as writer:
            writer.write(metrics(0))
            writer.write({"iter": 1, "note": "dict records work too"})
        assert writer.count == 2
        rows = read_ndjson(path)
        assert rows[0]["method"] == "consistent_rft"
        assert rows[1]["note"] == "dict records work too"

    def test_truncate_and_append(self, tmp_path):
        path = tmp_path / "metrics.ndjson"
        for truncate in (True, True, False):
            with NdjsonWriter(path, truncate=truncate) as writer:
                writer.write({"iter": 0})
        assert len(read_ndjson(path)) == 2

    def test_identical_runs_give_identical_bytes(self, tmp_path):
        for name in ("a", "b"):
            with NdjsonWriter(tmp_path / name) as writer:
                for i in range(3):
                    writer.write(metrics(i, mean_reward=0.1 * i))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_log_records_passes_through(self, tmp_path):
        path = tmp_path / "s.ndjson"
        with NdjsonWriter(path) as writer:
            seen = [r["iter"] for r in log_records(({"iter": i} for i in range(3)), writer)]
        assert seen == [0, 1, 2]
        assert [r["iter"] for r in read_ndjson(path)] == [0, 1, 2]


class TestReadNdjson:
    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "x.ndjson"
        path.write_text('{"a": 1}\n\n{"a": 2}\n')
        assert read_ndjson(path) == [{"a": 1}, {"a": 2}]

    def test_bad_line_reported(self, tmp_path):
        path = tmp_path / "x.ndjson"
        path.write_text('{"a": 1}\n{oops\n')
        with pytest.raises(ValueError, match="Invalid JSON at line 2"):
            read_ndjson(path)
