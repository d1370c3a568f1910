import numpy as np
from pytest import raises

from attn_style import OrderingError, StepSchedule, Tensor, ddim_invert, ddim_sample, q_sample, reconstruct
from attn_style.ddim import ddim_inverse_step, ddim_step
from tests import CallCounter, ConstantNoise, TestCase


class TestDDIMStep(TestCase):
    def test_same_timestep_is_identity(self):
        z = self.random_image()
        eps = self.random_image()
        assert ddim_step(z, eps, 7, 7, self.noise) is z
        assert ddim_inverse_step(z, eps, 7, 7, self.noise) is z

    def test_wrong_direction(self):
        z = self.random_image()
        with raises(OrderingError):
            ddim_step(z, z, 3, 5, self.noise)
        with raises(OrderingError):
            ddim_inverse_step(z, z, 5, 3, self.noise)

    def test_matches_float64_reference(self):
        z, eps = self.random_image(), self.random_image()
        alpha_bar, alpha_bar_prev = self.noise.alpha_bar(15), self.noise.alpha_bar(6)
        z64, eps64 = z.numpy().astype(np.float64), eps.numpy().astype(np.float64)
        predicted = (z64 - np.sqrt(1.0 - alpha_bar) * eps64) / np.sqrt(alpha_bar)
        expected = np.sqrt(alpha_bar_prev) * predicted + np.sqrt(1.0 - alpha_bar_prev) * eps64
        assert np.allclose(ddim_step(z, eps, 15, 6, self.noise).numpy(), expected, rtol=1e-6, atol=1e-6)

    def test_zero_noise_rescales_by_signal_ratio(self):
        z = self.random_image()
        ratio = np.sqrt(self.noise.alpha_bar(4) / self.noise.alpha_bar(12))
        out = ddim_step(z, Tensor(np.zeros(z.shape)), 12, 4, self.noise).numpy()
        assert np.allclose(out, ratio * z.numpy().astype(np.float64), rtol=1e-6, atol=1e-7)

    def test_exact_noise_recovers_clean_sample(self):
        z_0 = self.random_image()
        eps = self.random_image()
        z_t = q_sample(z_0, 13, eps, self.noise)
        assert np.allclose(ddim_step(z_t, eps, 13, 0, self.noise).numpy(), z_0.numpy(), atol=1e-5)

    def test_inverse_step_undoes_step(self):
        z = self.random_image()
        eps = self.random_image()
        lower = ddim_step(z, eps, 17, 9, self.noise)
        assert np.allclose(ddim_inverse_step(lower, eps, 9, 17, self.noise).numpy(), z.numpy(), atol=1e-5)


class TestSampler(TestCase):
    def test_constant_noise_round_trip(self):
        steps = StepSchedule.uniform(self.noise, self.steps)
        model = ConstantNoise(self.random_image())
        z_0 = self.random_image()
        z_T = ddim_invert(z_0, model, steps)
        assert np.allclose(ddim_sample(z_T, model, steps).numpy(), z_0.numpy(), atol=1e-5)

    def test_one_evaluation_per_step_with_hooks(self):
        steps = StepSchedule.uniform(self.noise, self.steps)
        model = ConstantNoise(self.random_image())
        hooks = {"decoder.1.attn": CallCounter()}
        z_T = ddim_invert(self.random_image(), model, steps, hooks)
        assert [t for t, _ in model.calls] == [1, 5, 9, 13, 17]
        ddim_sample(z_T, model, steps, hooks)
        assert [t for t, _ in model.calls[5:]] == [17, 13, 9, 5, 1]
        assert all(passed is hooks for _, passed in model.calls)

    def test_hooks_see_every_scheduled_timestep(self):
        steps = StepSchedule.uniform(self.noise, self.steps)
        counter = CallCounter()
        hooks = {layer_id: counter for layer_id in self.weights.layers}
        ddim_invert(self.random_image(), self.weights, steps, hooks)
        assert counter.projections == {layer_id: self.steps for layer_id in self.weights.layers}

    def test_deterministic(self):
        steps = StepSchedule.uniform(self.noise, self.steps)
        z_0 = self.random_image()
        first = reconstruct(z_0, self.weights, steps).numpy()
        second = reconstruct(z_0, self.weights, steps).numpy()
        assert np.array_equal(first, second)
        assert first.shape == z_0.shape

    def test_single_step_schedule(self):
        steps = StepSchedule.uniform(self.noise, 1)
        model = ConstantNoise(Tensor(np.zeros(self.config.input_shape)))
        z_0 = self.random_image()
        z_T = ddim_invert(z_0, model, steps)
        scale = np.sqrt(self.noise.alpha_bar(1))
        assert np.allclose(z_T.numpy(), scale * z_0.numpy(), atol=1e-6)
