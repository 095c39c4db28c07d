"""Tests for the rollout diagnostics."""

import numpy as np
import pytest

from flowrft.diagnose import (
    REPORT_FILE,
    CorrelationRow,
    DiagnosticsReport,
    DiversityRow,
    default_probe_knots,
    perception_at,
    run_diagnostics,
    sample_group,
)
from flowrft.groups import Granularity


class TestProbeKnots:
    @pytest.mark.parametrize("T, knots", [(8, [6, 4, 2]), (5, [3, 1]), (2, [1]), (1, [1])])
    def test_default_knots(self, T, knots):
        assert default_probe_knots(T) == knots


class TestReport:
    def _row(self, seed, fine_final, coarse_final):
        return DiversityRow(seed, 0.0, fine_final, 1.0, coarse_final, 0.1, 0.2)

    def test_coarse_wins(self):
        report = DiagnosticsReport(diversity=[self._row(0, 1.0, 2.0), self._row(1, 3.0, 2.0)])
        assert report.coarse_wins == 1
        assert report.fine_init_zero

    @pytest.mark.parametrize("values, ok", [
        ([0.2, 0.5, 0.9], True),
        ([0.2, 0.1, 0.9], True),
        ([0.9, 0.5, 0.2], False),
        ([0.5], False),
    ])
    def test_correlation_trend(self, values, ok):
        # knots listed noisiest first
        rows = [CorrelationRow(knot=10 - 2 * i, t=0.0, correlation=v) for i, v in enumerate(values)]
        assert DiagnosticsReport(correlation=rows).correlation_trend_ok is ok

    def test_text_sections(self):
        report = DiagnosticsReport(diversity=[self._row(0, 1.0, 2.0)],
                                   correlation=[CorrelationRow(4, 0.5, 0.7, 0.99)], few_step={1: -2.0})
        text = report.to_text()
        for header in ("# diversity", "# perception correlation", "# few-step sampling"):
            assert header in text
        assert "coarse_wins, 1/1" in text


class TestSampling:
    def test_fine_group_shares_initial_state(self, small_config, tiny_model):
        fine = sample_group(tiny_model, small_config, Granularity.FINE, 0, 1)
        coarse = sample_group(tiny_model, small_config, Granularity.COARSE, 0, 1)
        assert all(np.array_equal(t.x_init, fine[0].x_init) for t in fine)
        assert len({tuple(t.x_init) for t in coarse}) == len(coarse)

    def test_perception_uses_recorded_velocity(self, small_config, tiny_model):
        (traj, *_) = sample_group(tiny_model, small_config, Granularity.COARSE, 0, 0)
        k = 4
        expected = traj.states[k] - traj.grid.t(k) * tiny_model.velocity(traj.states[k], traj.grid.t(k), 0)
        assert perception_at(traj, k) == pytest.approx(expected)
        assert np.array_equal(perception_at(traj, 0), traj.endpoint)


@pytest.mark.slow
class TestRunDiagnostics:
    def test_report_written(self, pretrained_config):
        report = run_diagnostics(pretrained_config)
        assert len(report.diversity) == pretrained_config.diag_seeds
        assert report.fine_init_zero
        assert [r.knot for r in report.correlation] == [6, 4, 2]
        assert sorted(report.few_step) == [1, 2, 4, 8, 16]
        assert (pretrained_config.out_path / REPORT_FILE).read_text().startswith("# diversity")

    def test_explicit_knots(self, pretrained_config):
        report = run_diagnostics(pretrained_config.replace(diag_knots=[7, 1]))
        assert [r.knot for r in report.correlation] == [7, 1]
        assert report.correlation[-1].cosine_to_next is None

    def test_default_run_meets_diversity_and_trend(self, default_pretrained_config):
        config = default_pretrained_config
        report = run_diagnostics(config, out_dir=config.out_path / "diagnose")
        assert len(report.diversity) == 100
        assert report.coarse_wins >= 95, "\n".join(report.lines())
        assert report.fine_init_zero
        assert report.correlation_trend_ok, "\n".join(report.lines())
