"""Injection module contains the training-free style transfer itself.

Content and style images are inverted with DDIM while their self-attention features are captured; the
stylized image is then sampled from an AdaIN-modulated initial latent while the injected layers attend
with a blend of the content query and the live query, against the style keys and values, at a raised
attention temperature.

The Module contains following Classes and functions
- `StyleIdConfig`: γ, τ, injected layers, step count and the component switches used by ablations.
- `StyleInjectionHook`: the override hook installed on injected layers while sampling.
- `StyleTransfer`: runs the pipeline for one model; `stylize` and `attention_std_report` wrap it.
- `initial_latent_adain`, `blend_query`, `injected_attention`.
"""
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from attn_style.config import Options
from attn_style.ddim import StepSchedule, ddim_invert, ddim_sample
from attn_style.exc import ConfigurationError, DegenerateInputWarning, RangeError, ShapeError
from attn_style.hooks import AttentionHook, CaptureHook, FeatureRecorder, LogitStdHook, merge_hooks
from attn_style.model import BOTTLENECK, DECODER, as_model, scaled_dot_product_attention
from attn_style.noise import build_noise_schedule
from attn_style.tensor import Tensor, add, as_tensor, scale


logger = logging.getLogger(__name__)

ADAIN_EPS = 1e-6


class StyleIdConfig(Options):
    """Options of a stylization run.

    Options:

    - `gamma`: query preservation ratio in [0, 1]; 1 keeps the content query only
    - `tau`: attention temperature, at least 1
    - `injected_layers`: explicit list of layer-ids; None selects the decoder attention layers
    - `include_bottleneck`: add the bottleneck attention layer to the default selection
    - `steps`: number of DDIM steps S
    - `enable_injection`, `enable_adain`, `enable_temperature`: component switches
    - `inject_style_query`: blend the captured style query instead of the live stylized query
    - `workers`: run the content and style inversions on a thread pool when greater than 1
    """

    defaults = {
        "gamma": 0.75,
        "tau": 1.5,
        "injected_layers": None,
        "include_bottleneck": False,
        "steps": 50,
        "enable_injection": True,
        "enable_adain": True,
        "enable_temperature": True,
        "inject_style_query": False,
        "workers": 1,
    }

    # Ablation configurations: full method, stronger style, and one component removed at a time.
    PRESETS = {
        "A": {},
        "A*": {"gamma": 0.6},
        "B": {"enable_injection": False},
        "C": {"enable_temperature": False},
        "D": {"enable_adain": False},
    }

    @classmethod
    def preset(cls, name, **overrides):
        try:
            options = dict(cls.PRESETS[name])
        except KeyError:
            raise ConfigurationError("Unknown preset %r, choose from %s" % (name, ", ".join(cls.PRESETS)))
        options.update(overrides)
        return cls(options)

    def validate(self):
        options = self.options
        if not 0.0 <= options["gamma"] <= 1.0:
            raise RangeError("gamma must lie in [0, 1], got %r" % options["gamma"])
        if not options["tau"] >= 1.0:
            raise RangeError("tau must be at least 1, got %r" % options["tau"])
        if int(options["steps"]) != options["steps"] or options["steps"] < 1:
            raise RangeError("steps must be a positive integer, got %r" % options["steps"])
        if int(options["workers"]) != options["workers"] or options["workers"] < 1:
            raise RangeError("workers must be a positive integer, got %r" % options["workers"])
        if options["injected_layers"] is not None:
            options["injected_layers"] = list(options["injected_layers"])

    @property
    def temperature(self):
        """τ applied on injected layers; 1 when temperature scaling is switched off."""
        return float(self.tau) if self.enable_temperature else 1.0

    def resolve_layers(self, registry):
        """Return the injected layer-ids for a model's layer registry.

        :raises ConfigurationError: if an explicit layer-id is not in the registry
        """
        if self.injected_layers is None:
            positions = (DECODER, BOTTLENECK) if self.include_bottleneck else (DECODER,)
            return [layer_id for layer_id, layer in registry.items() if layer.position in positions]
        unknown = [layer_id for layer_id in self.injected_layers if layer_id not in registry]
        if unknown:
            raise ConfigurationError(
                "Injected layer(s) %s not in the model (known: %s)"
                % (", ".join(unknown), ", ".join(registry))
            )
        return list(self.injected_layers)


def initial_latent_adain(z_content, z_style, eps=ADAIN_EPS):
    """Give the content latent the per-channel mean and standard deviation of the style latent.

    z_cs = σ(z_s)·(z_c − μ(z_c))/σ(z_c) + μ(z_s), statistics taken per channel over spatial positions.
    A content channel whose σ is below `eps` is clamped to `eps` with a DegenerateInputWarning.

    **Examples**

        >>> z = initial_latent_adain(z_c, z_s)
        >>> z.numpy().mean(axis=(1, 2))  # equals z_s.numpy().mean(axis=(1, 2))
    """
    z_content, z_style = as_tensor(z_content), as_tensor(z_style)
    if z_content.shape != z_style.shape:
        raise ShapeError("AdaIN needs equal shapes, got %r and %r" % (z_content.shape, z_style.shape))
    channels = z_content.shape[0]
    content = z_content.numpy().astype(np.float64).reshape(channels, -1)
    style = z_style.numpy().astype(np.float64).reshape(channels, -1)
    mean_c, std_c = content.mean(axis=1, keepdims=True), content.std(axis=1, keepdims=True)
    mean_s, std_s = style.mean(axis=1, keepdims=True), style.std(axis=1, keepdims=True)
    flat = std_c < eps
    if np.any(flat):
        warnings.warn(
            "Content latent channel(s) %s are constant; clamping their std to %g"
            % (np.flatnonzero(flat[:, 0]).tolist(), eps),
            DegenerateInputWarning,
        )
        std_c = np.maximum(std_c, eps)
    out = (content - mean_c) * (std_s / std_c) + mean_s
    return Tensor(out.reshape(z_content.shape))


def blend_query(query_content, query_stylized, gamma):
    """Query preservation: γ·Q_c + (1−γ)·Q_cs."""
    if not 0.0 <= gamma <= 1.0:
        raise RangeError("gamma must lie in [0, 1], got %r" % gamma)
    query_content, query_stylized = as_tensor(query_content), as_tensor(query_stylized)
    if query_content.shape != query_stylized.shape:
        raise ShapeError(
            "Cannot blend queries of shapes %r and %r" % (query_content.shape, query_stylized.shape)
        )
    return add(scale(query_content, gamma), scale(query_stylized, 1.0 - gamma))


def injected_attention(query, key, value, tau, d=None):
    """softmax(τ·Q̃(K_s)ᵀ/√d)·V_s.

    :param d: token dimension; checked against the query when given
    """
    if not tau >= 1.0:
        raise RangeError("tau must be at least 1, got %r" % tau)
    query = as_tensor(query)
    if d is not None and query.shape[1] != d:
        raise ShapeError("Query dimension %d differs from d=%d" % (query.shape[1], d))
    return scaled_dot_product_attention(query, as_tensor(key), as_tensor(value), tau)


class StyleInjectionHook(AttentionHook):
    """Override hook for an injected layer while sampling the stylized latent.

    At timestep t the block attends with the blended query γ·Q_c(t) + (1−γ)·Q_cs(t) against the style
    keys and values captured at the same t, with temperature τ.
    """

    def __init__(self, content_cache, style_cache, gamma, temperature, use_style_query=False):
        self.content_cache = content_cache
        self.style_cache = style_cache
        self.gamma = gamma
        self.temperature = temperature
        self.use_style_query = use_style_query

    def override(self, layer, t, query, key, value):
        query_content = self.content_cache.lookup(t, layer.layer_id, "q")
        if self.use_style_query:
            query = self.style_cache.lookup(t, layer.layer_id, "q")
        return (
            blend_query(query_content, query, self.gamma),
            self.style_cache.lookup(t, layer.layer_id, "k"),
            self.style_cache.lookup(t, layer.layer_id, "v"),
            self.temperature,
        )

    def __repr__(self):
        return "<StyleInjectionHook gamma=%g tau=%g>" % (self.gamma, self.temperature)


class StylizationResult(object):
    """Everything a stylization run produced.

    `latent` is the raw sampler output, `image` the same clipped to [−1, 1].
    """

    def __init__(self, latent, z_content, z_style, z_initial, content_cache, style_cache, timings):
        self.latent = latent
        self.image = Tensor(np.clip(latent.numpy(), -1.0, 1.0))
        self.z_content = z_content
        self.z_style = z_style
        self.z_initial = z_initial
        self.content_cache = content_cache
        self.style_cache = style_cache
        self.timings = timings


class AttentionStdReport(object):
    """Per-timestep std of the pre-softmax attention logits, averaged over the injected layers.

    Columns of each row:

    - `baseline`: plain generation from the content and from the style latent, averaged
    - `injected`: style injection with τ = 1
    - `scaled`: τ × `injected`, the std the same logits have once multiplied by τ
    - `measured`: std observed along a trajectory actually sampled with temperature τ
    """

    COLUMNS = ("t", "baseline", "injected", "scaled", "measured", "ratio_injected", "ratio_scaled")

    def __init__(self, tau, rows):
        self.tau = tau
        self.rows = rows

    def mean_ratio(self, column="ratio_injected"):
        return float(np.mean([row[column] for row in self.rows]))

    def __len__(self):
        return len(self.rows)


class StyleTransfer(object):
    """Runs the stylization pipeline with one model.

    :param weights: UNetWeights or a UNet; other callables must expose `weights` (for the config) and `layers`
    :param config: StyleIdConfig (Default value = None, meaning defaults)
    :param noise: NoiseSchedule; defaults to the linear schedule over the model's T_train
    """

    def __init__(self, weights, config=None, noise=None):
        self.model = as_model(weights)
        self.config = config if config is not None else StyleIdConfig()
        if noise is None:
            noise = build_noise_schedule(self.model.weights.config.T_train)
        self.noise = noise
        self.layers = self.config.resolve_layers(self.model.layers)

    @property
    def steps(self):
        return StepSchedule.uniform(self.noise, self.config.steps)

    def check_image(self, image, role):
        image = as_tensor(image)
        expected = self.model.weights.config.input_shape
        if image.shape != expected:
            raise ConfigurationError(
                "%s image has shape %r, model resolution needs %r" % (role, image.shape, expected)
            )
        return image

    def invert(self, image, role, components, steps):
        """DDIM-invert an image while capturing `components` on the injected layers.

        :returns: (z_T, AttentionCache)
        """
        recorder = FeatureRecorder(role)
        hooks = {}
        if components:
            hook = CaptureHook(recorder, components)
            hooks = {layer_id: hook for layer_id in self.layers}
        started = time.perf_counter()
        z_T = ddim_invert(image, self.model, steps, hooks)
        cache = recorder.freeze()
        if components:
            cache.check_complete(steps, self.layers, components)
        logger.debug(
            "inverted %s image in %.2fs, %d cached entries", role, time.perf_counter() - started, len(cache)
        )
        return z_T, cache

    def invert_pair(self, content, style, steps):
        style_components = ()
        if self.config.enable_injection:
            style_components = ("q", "k", "v") if self.config.inject_style_query else ("k", "v")
        content_components = ("q",) if self.config.enable_injection else ()
        jobs = [(content, "content", content_components), (style, "style", style_components)]
        if not (self.config.enable_injection or self.config.enable_adain):
            return [self.invert(content, "content", (), steps), (None, FeatureRecorder("style").freeze())]
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=2) as pool:
                return list(pool.map(lambda job: self.invert(job[0], job[1], job[2], steps), jobs))
        return [self.invert(image, role, components, steps) for image, role, components in jobs]

    def injection_hooks(self, content_cache, style_cache, temperature):
        hook = StyleInjectionHook(
            content_cache, style_cache, self.config.gamma, temperature, self.config.inject_style_query
        )
        return {layer_id: hook for layer_id in self.layers}

    def stylize(self, content, style):
        """Stylize `content` with `style`; both must already be at model resolution in [−1, 1].

        :returns: StylizationResult
        """
        content = self.check_image(content, "content")
        style = self.check_image(style, "style")
        started = time.perf_counter()
        inversion = self.invert_pair(content, style, self.steps)
        return self.sample(inversion, {"inversion": time.perf_counter() - started})

    def sample(self, inversion, timings=None):
        """Sample the stylized image from the output of `invert_pair`.

        A sweep over γ or τ can invert once and call this with configs that differ only in those values.
        """
        (z_content, content_cache), (z_style, style_cache) = inversion
        steps = self.steps
        timings = dict(timings or {})
        if self.config.enable_adain:
            z_initial = initial_latent_adain(z_content, z_style)
        else:
            z_initial = z_content
        hooks = {}
        if self.config.enable_injection:
            hooks = self.injection_hooks(content_cache, style_cache, self.config.temperature)
        started = time.perf_counter()
        latent = ddim_sample(z_initial, self.model, steps, hooks)
        timings["sampling"] = time.perf_counter() - started
        logger.debug("stylized with %r in %.2fs", self.config, sum(timings.values()))
        return StylizationResult(latent, z_content, z_style, z_initial, content_cache, style_cache, timings)

    def _observe(self, z_start, steps, hooks):
        observer = LogitStdHook()
        layer_hooks = merge_hooks(hooks, {layer_id: observer for layer_id in self.layers})
        ddim_sample(z_start, self.model, steps, layer_hooks)
        return observer.mean_by_timestep()

    def attention_std_report(self, content, style):
        """Measure how style injection changes the spread of the attention logits.

        :returns: AttentionStdReport with one row per scheduled timestep
        """
        content = self.check_image(content, "content")
        style = self.check_image(style, "style")
        steps = self.steps
        components = ("q", "k", "v")
        z_content, content_cache = self.invert(content, "content", components, steps)
        z_style, style_cache = self.invert(style, "style", components, steps)
        z_initial = initial_latent_adain(z_content, z_style) if self.config.enable_adain else z_content

        from_content = self._observe(z_content, steps, {})
        from_style = self._observe(z_style, steps, {})
        injected = self._observe(z_initial, steps, self.injection_hooks(content_cache, style_cache, 1.0))
        tau = float(self.config.tau)
        measured = self._observe(z_initial, steps, self.injection_hooks(content_cache, style_cache, tau))

        rows = []
        for t in steps:
            baseline = 0.5 * (from_content[t] + from_style[t])
            scaled = tau * injected[t]
            rows.append(
                {
                    "t": t,
                    "baseline": baseline,
                    "injected": injected[t],
                    "scaled": scaled,
                    "measured": measured[t],
                    "ratio_injected": injected[t] / baseline,
                    "ratio_scaled": scaled / baseline,
                }
            )
        return AttentionStdReport(tau, rows)


def stylize(content_image, style_image, weights, config=None, noise=None):
    """Stylize one content image with one style image.

    **Examples**

        >>> result = stylize(content, style, weights, StyleIdConfig(gamma=0.75, tau=1.5))
        >>> result.image.shape
        (3, 64, 64)

    :param content_image: 3×H×W Tensor in [−1, 1] at model resolution
    :param style_image: 3×H×W Tensor in [−1, 1] at model resolution
    :param weights: UNetWeights
    :param config: StyleIdConfig (Default value = None)
    :param noise: NoiseSchedule (Default value = None)
    :returns: StylizationResult
    """
    return StyleTransfer(weights, config, noise).stylize(content_image, style_image)


def attention_std_report(content_image, style_image, weights, config=None, noise=None):
    """Per-timestep logit std for no injection, injection with τ = 1 and injection with τ = config.tau."""
    return StyleTransfer(weights, config, noise).attention_std_report(content_image, style_image)
