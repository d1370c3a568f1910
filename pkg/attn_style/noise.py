"""Forward-noising machinery of the diffusion model: the linear β schedule and `q_sample`.
"""
import numpy as np
from cached_property import cached_property

from attn_style.exc import RangeError, ShapeError
from attn_style.tensor import Tensor, as_tensor


class NoiseSchedule(object):
    """Per-timestep β/α/ᾱ tables.

    Tables are indexed by timestep, index 0 standing for the clean sample (β₀ = 0, ᾱ₀ = 1), so
    `alpha_bars[t]` is ᾱ_t for t in [0, T_train].

    :param betas: sequence of β_1 … β_T, each in (0, 1)
    """

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise RangeError("A noise schedule needs at least one step")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise RangeError("Every beta must lie in (0, 1)")
        self.betas = np.concatenate([[0.0], betas])
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def T_train(self):
        return self.betas.size - 1

    @cached_property
    def sqrt_alpha_bars(self):
        return np.sqrt(self.alpha_bars)

    @cached_property
    def sqrt_one_minus_alpha_bars(self):
        return np.sqrt(1.0 - self.alpha_bars)

    def check_timestep(self, t, allow_zero=True):
        low = 0 if allow_zero else 1
        if int(t) != t or not low <= t <= self.T_train:
            raise RangeError("Timestep %r outside [%d, %d]" % (t, low, self.T_train))
        return int(t)

    def alpha_bar(self, t):
        return float(self.alpha_bars[self.check_timestep(t)])

    def as_dict(self):
        return {"T_train": self.T_train, "beta_min": float(self.betas[1]), "beta_max": float(self.betas[-1])}

    def __repr__(self):
        return "<NoiseSchedule T_train=%d>" % self.T_train


def build_noise_schedule(T_train=1000, beta_min=1e-4, beta_max=0.02):
    """Build the linear DDPM schedule β₁ = beta_min … β_T = beta_max.

    **Examples**

        >>> build_noise_schedule(1, 0.5, 0.5).alpha_bar(1)
        0.5

    :param T_train: number of training timesteps
    :param beta_min: first variance
    :param beta_max: last variance
    :raises RangeError: unless 0 < beta_min <= beta_max < 1 and T_train >= 1
    """
    if int(T_train) != T_train or T_train < 1:
        raise RangeError("T_train must be a positive integer, got %r" % T_train)
    if not 0 < beta_min <= beta_max < 1:
        raise RangeError("Need 0 < beta_min <= beta_max < 1, got %r, %r" % (beta_min, beta_max))
    return NoiseSchedule(np.linspace(beta_min, beta_max, int(T_train), dtype=np.float64))


def q_sample(z_0, t, noise, schedule):
    """Noise a clean sample to timestep t: z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε.

    :param z_0: clean sample
    :param t: timestep in [0, T_train]; t = 0 returns z_0 unchanged
    :param noise: ε, same shape as z_0
    :param schedule: NoiseSchedule
    """
    z_0, noise = as_tensor(z_0), as_tensor(noise)
    if z_0.shape != noise.shape:
        raise ShapeError("q_sample: noise shape %r differs from sample shape %r" % (noise.shape, z_0.shape))
    t = schedule.check_timestep(t)
    signal = schedule.sqrt_alpha_bars[t]
    sigma = schedule.sqrt_one_minus_alpha_bars[t]
    return Tensor(signal * z_0.numpy().astype(np.float64) + sigma * noise.numpy().astype(np.float64))
