import numpy as np
from pytest import mark, raises

from attn_style import (
    OrderingError,
    RangeError,
    ShapeError,
    StepSchedule,
    Tensor,
    build_noise_schedule,
    q_sample,
)


class TestNoiseSchedule(object):
    def test_linear_betas(self):
        noise = build_noise_schedule(1000)
        assert noise.T_train == 1000
        assert noise.betas[1] == 1e-4
        assert noise.betas[1000] == 0.02
        assert noise.alpha_bar(0) == 1.0
        assert np.all(np.diff(noise.alpha_bars) < 0)

    def test_single_step(self):
        assert build_noise_schedule(1, 0.5, 0.5).alpha_bar(1) == 0.5

    @mark.parametrize(
        ("T_train", "beta_min", "beta_max"),
        [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 0.05), (10, 1e-4, 1.0), (2.5, 1e-4, 0.02)],
    )
    def test_rejects_invalid_schedule(self, T_train, beta_min, beta_max):
        with raises(RangeError):
            build_noise_schedule(T_train, beta_min, beta_max)

    def test_timestep_bounds(self):
        noise = build_noise_schedule(20)
        with raises(RangeError):
            noise.alpha_bar(21)
        with raises(RangeError):
            noise.alpha_bar(-1)


class TestQSample(object):
    def setup_method(self, method):
        self.noise = build_noise_schedule(1000)
        self.rng = np.random.default_rng(11)

    def test_zero_timestep_is_identity(self):
        z_0 = Tensor(self.rng.standard_normal((3, 4, 4)))
        eps = Tensor(self.rng.standard_normal((3, 4, 4)))
        assert np.array_equal(q_sample(z_0, 0, eps, self.noise).numpy(), z_0.numpy())

    def test_mixes_signal_and_noise(self):
        z_0 = Tensor(np.ones((1, 2, 2)))
        eps = Tensor(np.full((1, 2, 2), -1.0))
        out = q_sample(z_0, 500, eps, self.noise).numpy()
        a = self.noise.alpha_bar(500)
        assert np.allclose(out, np.sqrt(a) - np.sqrt(1 - a), atol=1e-6)

    @mark.parametrize("t", [10, 500, 1000])
    def test_noise_variance(self, t):
        eps = self.rng.standard_normal((1, 100, 100))
        z_t = q_sample(Tensor(np.zeros(eps.shape)), t, Tensor(eps), self.noise).numpy()
        expected = 1.0 - self.noise.alpha_bar(t)
        assert abs(np.var(z_t, dtype=np.float64) / expected - 1.0) < 0.05

    def test_shape_mismatch(self):
        with raises(ShapeError):
            q_sample(Tensor(np.zeros((1, 2, 2))), 1, Tensor(np.zeros((1, 2, 3))), self.noise)


class TestStepSchedule(object):
    def setup_method(self, method):
        self.noise = build_noise_schedule(20)

    def test_uniform(self):
        steps = StepSchedule.uniform(self.noise, 5)
        assert steps.timesteps == (1, 5, 9, 13, 17)
        assert len(steps) == 5

    def test_uniform_default_scale(self):
        steps = StepSchedule.uniform(build_noise_schedule(1000), 50)
        assert steps.timesteps[:3] == (1, 21, 41)
        assert steps.timesteps[-1] == 981

    def test_single_step(self):
        assert StepSchedule.uniform(self.noise, 1).timesteps == (1,)

    def test_all_steps(self):
        assert StepSchedule.uniform(self.noise, 20).timesteps == tuple(range(1, 21))

    def test_directions(self):
        steps = StepSchedule([2, 7, 11], self.noise)
        assert list(steps.descending()) == [(11, 7), (7, 2), (2, 0)]
        assert list(steps.ascending()) == [(0, 2), (2, 7), (7, 11)]

    @mark.parametrize("steps", [0, 21, 2.5])
    def test_uniform_step_count(self, steps):
        with raises(RangeError):
            StepSchedule.uniform(self.noise, steps)

    def test_must_increase(self):
        with raises(OrderingError):
            StepSchedule([1, 5, 5], self.noise)
        with raises(OrderingError):
            StepSchedule([9, 5], self.noise)

    def test_bounds(self):
        with raises(RangeError):
            StepSchedule([0, 5], self.noise)
        with raises(RangeError):
            StepSchedule([5, 21], self.noise)
        with raises(RangeError):
            StepSchedule([], self.noise)
