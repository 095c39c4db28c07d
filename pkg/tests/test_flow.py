"""Tests for the flow-matching core: loss, sampling and pretraining."""

import numpy as np
import pytest
import torch

from flowrft.data import MixtureSpec, energy_distance, sample_mixture
from flowrft.flow import (
    EmptyBatchError,
    PretrainBatch,
    PretrainConfig,
    fm_loss,
    interpolate,
    lipschitz_probe,
    ode_sample,
    predict_clean,
    pretrain,
    single_step_predict,
    target_velocity,
    write_loss_history,
)
from flowrft.model import ModelArch, VelocityModel, flat_grad
from flowrft.seeding import Stream, keyed_rng
from flowrft.trajectory import TimeGrid


class ConstantField(VelocityModel):
    """v(x, t, c) = u for every input."""

    def __init__(self, u):
        super().__init__(ModelArch(hidden_widths=(4,), time_embed_dim=2, cond_dim=1, n_conditions=1))
        self.u = torch.as_tensor(np.asarray(u, dtype=np.float64))

    def forward(self, x, t, c):
        return self.u.expand_as(x) + 0.0 * x


class TestInterpolant:
    """Straight-line paths."""

    def test_endpoints(self):
        x0, x1 = np.array([1.0, -1.0]), np.array([3.0, 5.0])
        assert np.array_equal(interpolate(x0, x1, 0.0), x0)
        assert np.array_equal(interpolate(x0, x1, 1.0), x1)

    def test_target_velocity_is_difference(self):
        assert target_velocity(np.array([1.0, 1.0]), np.array([3.0, 0.0])).tolist() == [2.0, -1.0]


class TestFmLoss:
    """Flow-matching regression loss."""

    def test_exact_field_has_zero_loss(self):
        x0 = np.array([[0.0, 0.0], [0.0, 0.0]])
        x1 = np.array([[1.0, 2.0], [1.0, 2.0]])
        batch = PretrainBatch(x0=x0, x1=x1, t=[0.2, 0.7], c=[0, 0])
        assert float(fm_loss(ConstantField([1.0, 2.0]), batch)) == pytest.approx(0.0)

    def test_loss_value_of_wrong_field(self):
        batch = PretrainBatch(x0=[[0.0, 0.0]], x1=[[1.0, 0.0]], t=[0.5], c=[0])
        assert float(fm_loss(ConstantField([0.0, 0.0]), batch)) == pytest.approx(1.0)

    def test_empty_batch(self, tiny_model):
        batch = PretrainBatch(x0=np.empty((0, 2)), x1=np.empty((0, 2)), t=np.empty(0), c=np.empty(0))
        with pytest.raises(EmptyBatchError, match="empty batch"):
            fm_loss(tiny_model, batch)

    def test_mismatched_fields(self):
        with pytest.raises(ValueError, match="differ in length"):
            PretrainBatch(x0=[[0.0, 0.0]], x1=[[1.0, 0.0]], t=[0.5, 0.1], c=[0])

    def test_loss_has_gradient(self, tiny_model):
        data = sample_mixture(MixtureSpec(n_modes=4), 32, keyed_rng(0, Stream.DATA, 0))
        batch = PretrainBatch.draw(data, 16, keyed_rng(0, Stream.PRETRAIN, 0))
        grad = flat_grad(fm_loss(tiny_model, batch), tiny_model)
        assert grad.shape == (tiny_model.num_params,)
        assert np.linalg.norm(grad) > 0


class TestSampling:
    """Euler ODE sampling and single-step prediction."""

    def test_constant_field_moves_straight(self):
        model = ConstantField([1.0, -2.0])
        traj = ode_sample(model, np.array([0.5, 0.5]), TimeGrid.build(4, 3.0), 0)
        assert traj.is_complete
        assert traj.endpoint == pytest.approx(np.array([-0.5, 2.5]))

    def test_single_step_prediction_matches_exact_field(self):
        model = ConstantField([1.0, -2.0])
        x = np.array([0.5, 0.5])
        assert single_step_predict(model, x, 1.0, 0) == pytest.approx(np.array([-0.5, 2.5]))

    def test_prediction_at_zero_is_identity(self, tiny_model):
        x = np.array([0.3, -0.4])
        out = single_step_predict(tiny_model, x, 0.0, 0)
        assert np.array_equal(out, x) and out is not x

    def test_batched_prediction_matches(self, tiny_model):
        x = np.array([[0.3, -0.4], [1.0, 2.0]])
        t = np.array([0.3, 0.8])
        batched = predict_clean(tiny_model, torch.from_numpy(x), torch.from_numpy(t),
                                torch.tensor([0, 1])).detach().numpy()
        for i in range(2):
            assert batched[i] == pytest.approx(single_step_predict(tiny_model, x[i], t[i], i))

    def test_single_step_grid(self, tiny_model):
        x1 = np.array([0.3, -1.2])
        traj = ode_sample(tiny_model, x1, TimeGrid.build(1, 3.0), 2)
        assert traj.endpoint == pytest.approx(x1 - tiny_model.velocity(x1, 1.0, 2), abs=1e-14)

    @pytest.mark.slow
    def test_sixteen_steps_track_fine_reference(self, default_pretrained_config):
        from flowrft.engine import load_pretrained

        model = load_pretrained(default_pretrained_config)
        shift = default_pretrained_config.shift
        errors = {16: [], 32: []}
        for i in range(8):
            x1, c = keyed_rng(0, Stream.PROBE, i).standard_normal(2), i % 4
            reference = ode_sample(model, x1, TimeGrid.build(256, shift), c).endpoint
            for T in errors:
                errors[T].append(np.linalg.norm(ode_sample(model, x1, TimeGrid.build(T, shift), c).endpoint - reference))
        assert np.mean(errors[16]) < 0.25
        assert np.mean(errors[32]) < np.mean(errors[16])

    def test_ode_records_deterministic_steps(self, tiny_model):
        traj = ode_sample(tiny_model, np.zeros(2), TimeGrid.build(5, 3.0), 2)
        assert traj.stochastic_transitions() == []
        assert np.all(traj.noises[1:] == 0.0)


class TestPretrain:
    """Flow-matching pretraining."""

    def test_loss_decreases_and_is_deterministic(self, tmp_path):
        spec = MixtureSpec(n_modes=4)
        data = sample_mixture(spec, 512, keyed_rng(0, Stream.DATA, 0))
        arch = ModelArch(hidden_widths=(16, 16), time_embed_dim=4, cond_dim=4, n_conditions=4)
        cfg = PretrainConfig(steps=60, learning_rate=1e-2, batch_size=64, log_every=0)

        first = pretrain(VelocityModel.from_arch(arch, 0), data, cfg, seed=0)
        second = pretrain(VelocityModel.from_arch(arch, 0), data, cfg, seed=0)

        assert np.array_equal(first.model.flat_params(), second.model.flat_params())
        smoothed = first.smoothed(alpha=0.2)
        assert smoothed[-1] < smoothed[0]

        path = tmp_path / "loss.csv"
        write_loss_history(path, first.history)
        assert len(path.read_text().splitlines()) == 60

    def test_empty_dataset(self, tiny_model):
        from flowrft.data import ConditionalDataset

        empty = ConditionalDataset(x=np.empty((0, 2)), c=np.empty(0, dtype=np.int64))
        with pytest.raises(ValueError, match="non-empty"):
            pretrain(tiny_model, empty, PretrainConfig(steps=1), seed=0)


class TestDiagnostics:
    """Energy distance and the Lipschitz probe."""

    def test_energy_distance_of_identical_sets(self):
        a = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert energy_distance(a, a) == pytest.approx(0.0)

    def test_energy_distance_grows_with_separation(self):
        rng = keyed_rng(0, Stream.PROBE, 0)
        a = rng.standard_normal((64, 2))
        assert energy_distance(a, a + 3.0) > energy_distance(a, a + 0.5) > 0.0

    def test_lipschitz_of_constant_field_is_one(self):
        # π(x) = x − t·u, so the estimate is exactly 1
        model = ConstantField([0.5, 0.5])
        est = lipschitz_probe(model, TimeGrid.build(4, 1.0), 16, keyed_rng(0, Stream.PROBE, 4))
        assert est == pytest.approx(1.0)
