"""Deterministic DDIM sampling and inversion (η = 0) over a strided sub-schedule.

Both directions evaluate the network once per scheduled timestep and pass the caller's hooks to every
evaluation, so attention features captured during inversion at timestep t line up with the features the
sampler sees at the same t.
"""
import logging

import numpy as np
from tqdm import tqdm

from attn_style.exc import OrderingError, RangeError
from attn_style.model import as_model
from attn_style.tensor import Tensor, as_tensor


logger = logging.getLogger(__name__)


class StepSchedule(object):
    """Ordered timesteps t₁ < … < t_S used by sampling and inversion.

    :param timesteps: strictly increasing timesteps within [1, T_train]
    :param noise: NoiseSchedule the timesteps index into
    """

    def __init__(self, timesteps, noise):
        timesteps = tuple(int(t) for t in timesteps)
        if not timesteps:
            raise RangeError("A step schedule needs at least one timestep")
        if any(b <= a for a, b in zip(timesteps, timesteps[1:])):
            raise OrderingError("Timesteps must be strictly increasing: %r" % (timesteps,))
        if timesteps[0] < 1 or timesteps[-1] > noise.T_train:
            raise RangeError("Timesteps must lie in [1, %d]" % noise.T_train)
        self.timesteps = timesteps
        self.noise = noise

    @classmethod
    def uniform(cls, noise, steps=50):
        """Uniformly strided schedule: t_i = 1 + i·(T_train // steps) for i in [0, steps)."""
        if int(steps) != steps or not 1 <= steps <= noise.T_train:
            raise RangeError("steps must be an integer in [1, %d], got %r" % (noise.T_train, steps))
        stride = noise.T_train // int(steps)
        return cls([1 + i * stride for i in range(int(steps))], noise)

    def __len__(self):
        return len(self.timesteps)

    def __iter__(self):
        return iter(self.timesteps)

    def descending(self):
        """Yield (t, t_prev) pairs from t_S down to (t₁, 0)."""
        previous = (0,) + self.timesteps[:-1]
        return reversed(list(zip(self.timesteps, previous)))

    def ascending(self):
        """Yield (t_prev, t) pairs from (0, t₁) up to t_S."""
        previous = (0,) + self.timesteps[:-1]
        return iter(list(zip(previous, self.timesteps)))

    def __repr__(self):
        return "<StepSchedule S=%d %d..%d>" % (len(self), self.timesteps[0], self.timesteps[-1])


def _coefficients(noise, t):
    t = noise.check_timestep(t)
    return noise.sqrt_alpha_bars[t], noise.sqrt_one_minus_alpha_bars[t]


def ddim_step(z_t, eps, t, t_prev, noise):
    """One deterministic DDIM update from t to t_prev < t.

    z_{t_prev} = √ᾱ_{t_prev}·(z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t + √(1−ᾱ_{t_prev})·ε̂, evaluated in float64.
    t_prev = 0 denotes the clean sample (ᾱ₀ = 1); t_prev = t returns z_t unchanged.

    :raises OrderingError: if t_prev > t
    """
    if t_prev > t:
        raise OrderingError("ddim_step goes from t=%s down to t_prev=%s" % (t, t_prev))
    z_t, eps = as_tensor(z_t), as_tensor(eps)
    if t_prev == t:
        return z_t
    signal, sigma = _coefficients(noise, t)
    signal_prev, sigma_prev = _coefficients(noise, t_prev)
    z = z_t.numpy().astype(np.float64)
    e = eps.numpy().astype(np.float64)
    predicted = (z - sigma * e) / signal
    return Tensor(signal_prev * predicted + sigma_prev * e)


def ddim_inverse_step(z_prev, eps, t_prev, t, noise):
    """The DDIM update run backwards, from t_prev up to t > t_prev; the algebraic inverse of `ddim_step`
    for the same ε̂.

    :raises OrderingError: if t < t_prev
    """
    if t < t_prev:
        raise OrderingError("ddim_inverse_step goes from t_prev=%s up to t=%s" % (t_prev, t))
    z_prev, eps = as_tensor(z_prev), as_tensor(eps)
    if t_prev == t:
        return z_prev
    signal, sigma = _coefficients(noise, t)
    signal_prev, sigma_prev = _coefficients(noise, t_prev)
    z = z_prev.numpy().astype(np.float64)
    e = eps.numpy().astype(np.float64)
    predicted = (z - sigma_prev * e) / signal_prev
    return Tensor(signal * predicted + sigma * e)


def ddim_sample(z_T, model, steps, hooks=None, progress=False):
    """Run the reverse process from z_T down to z_0.

    :param z_T: starting latent shaped like the model input
    :param model: UNetWeights or a callable `model(z_t, t, hooks)`
    :param steps: StepSchedule
    :param hooks: layer-id → AttentionHook map consulted at every step
    :param progress: show a progress bar
    """
    model = as_model(model)
    z = as_tensor(z_T)
    for t, t_prev in tqdm(list(steps.descending()), desc="sample", disable=not progress):
        eps = model(z, t, hooks)
        z = ddim_step(z, eps, t, t_prev, steps.noise)
    return z


def ddim_invert(z_0, model, steps, hooks=None, progress=False):
    """Invert a clean sample to noise with the reversed DDIM recurrence.

    ε̂ for the move t_prev → t is evaluated at the current, lower-noise latent with timestep t (first-order
    approximation, no fixed-point correction). This is where capture hooks run.
    """
    model = as_model(model)
    z = as_tensor(z_0)
    for t_prev, t in tqdm(list(steps.ascending()), desc="invert", disable=not progress):
        eps = model(z, t, hooks)
        z = ddim_inverse_step(z, eps, t_prev, t, steps.noise)
    return z


def reconstruct(z_0, model, steps):
    """Invert then sample back; the DDIM round trip."""
    return ddim_sample(ddim_invert(z_0, model, steps), model, steps)
