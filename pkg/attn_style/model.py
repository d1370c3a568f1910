"""Model module contains the toy unconditional U-Net ε-predictor.

The network works directly on C×H×W pixel grids. Every resolution level has one residual block per side;
levels listed in `attention_levels` also get a single-head self-attention block on the encoder side, the
decoder side and (for the lowest level) the bottleneck. Each attention block is registered under a
stable layer-id and consults an AttentionHook, which is how features get captured and injected.

The Module contains following Classes and functions
- `UNetConfig`: architecture options.
- `AttentionLayer`: registry entry of one self-attention block.
- `UNetWeights`: parameter tensors plus the layer registry.
- `UNet`: callable wrapper `model(z_t, t, hooks)` used by the samplers and the trainer.
- `self_attention_forward`, `scaled_dot_product_attention`, `unet_forward`, `timestep_embedding`.
"""
import logging
import math
from collections import OrderedDict

import numpy as np
from cached_property import cached_property

from attn_style.config import Options
from attn_style.exc import ConfigurationError, RangeError, ShapeError
from attn_style.hooks.base import PASS
from attn_style.tensor import (
    Tensor,
    add,
    as_tensor,
    conv2d,
    group_norm,
    linear,
    matmul,
    reshape,
    scale,
    silu,
    softmax_rows,
    transpose,
    upsample2x,
)


logger = logging.getLogger(__name__)

ENCODER = "encoder"
BOTTLENECK = "bottleneck"
DECODER = "decoder"


class UNetConfig(Options):
    """Architecture of the toy U-Net.

    Options:

    - `resolution`: side of the square input grid
    - `in_channels`: channels of the input and of the predicted noise
    - `base_channels`: width of level 0, doubled at every level below
    - `levels`: number of resolution levels
    - `attention_levels`: levels that carry self-attention; level 0 (full resolution) is not allowed
    - `norm_groups`: group count of every group normalization
    - `time_embedding_dim`: width of the sinusoidal timestep embedding
    - `T_train`: largest timestep the network accepts
    - `init_seed`: seed of the weight initializer
    """

    defaults = {
        "resolution": 64,
        "in_channels": 3,
        "base_channels": 64,
        "levels": 3,
        "attention_levels": [1, 2],
        "norm_groups": 32,
        "time_embedding_dim": 128,
        "T_train": 1000,
        "init_seed": 0,
    }

    def validate(self):
        options = self.options
        for name in ("resolution", "in_channels", "base_channels", "levels", "norm_groups", "T_train"):
            if int(options[name]) != options[name] or options[name] < 1:
                raise ConfigurationError("%s must be a positive integer, got %r" % (name, options[name]))
        if options["resolution"] % 2 ** (options["levels"] - 1):
            raise ConfigurationError(
                "resolution %d cannot be halved %d times" % (options["resolution"], options["levels"] - 1)
            )
        if options["time_embedding_dim"] < 4 or options["time_embedding_dim"] % 2:
            raise ConfigurationError("time_embedding_dim must be an even number >= 4")
        levels = options["attention_levels"]
        if any(level < 1 or level >= options["levels"] for level in levels):
            raise ConfigurationError(
                "attention_levels must lie in [1, %d), got %r" % (options["levels"], levels)
            )
        options["attention_levels"] = sorted(set(int(level) for level in levels))
        for level in range(options["levels"]):
            if self.channels(level) % options["norm_groups"]:
                raise ConfigurationError(
                    "%d channels at level %d are not divisible into %d groups"
                    % (self.channels(level), level, options["norm_groups"])
                )

    def channels(self, level):
        return self.options["base_channels"] * 2**level

    def level_resolution(self, level):
        return self.options["resolution"] // 2**level

    @property
    def input_shape(self):
        return (self.options["in_channels"], self.options["resolution"], self.options["resolution"])

    @property
    def time_channels(self):
        return 4 * self.options["base_channels"]


class AttentionLayer(object):
    """Registry entry of a self-attention block.

    :param layer_id: stable identifier, e.g. "decoder.1.attn"
    :param position: ENCODER, BOTTLENECK or DECODER
    :param level: resolution level
    :param resolution: side of the spatial grid the block sees
    :param channels: feature width, which is also the token dimension d
    """

    __slots__ = ("layer_id", "position", "level", "resolution", "channels")

    def __init__(self, layer_id, position, level, resolution, channels):
        self.layer_id = layer_id
        self.position = position
        self.level = level
        self.resolution = resolution
        self.channels = channels

    @property
    def tokens(self):
        return self.resolution * self.resolution

    def __repr__(self):
        return "<AttentionLayer %s %dx%d d=%d>" % (
            self.layer_id,
            self.resolution,
            self.resolution,
            self.channels,
        )


def build_layer_registry(config):
    layers = OrderedDict()
    last = config.levels - 1

    def register(position, level, layer_id):
        layers[layer_id] = AttentionLayer(
            layer_id, position, level, config.level_resolution(level), config.channels(level)
        )

    for level in config.attention_levels:
        register(ENCODER, level, "%s.%d.attn" % (ENCODER, level))
    if last in config.attention_levels:
        register(BOTTLENECK, last, "%s.attn" % BOTTLENECK)
    for level in reversed(config.attention_levels):
        register(DECODER, level, "%s.%d.attn" % (DECODER, level))
    return layers


def _norm(layout, prefix, channels):
    layout[prefix + ".scale"] = ((channels,), "ones")
    layout[prefix + ".shift"] = ((channels,), "zeros")


def _conv(layout, prefix, c_out, c_in, kind="conv", kernel=3):
    layout[prefix + ".weight"] = ((c_out, c_in, kernel, kernel), kind)
    layout[prefix + ".bias"] = ((c_out,), "zeros")


def _dense(layout, prefix, n_in, n_out, kind="dense"):
    layout[prefix + ".weight"] = ((n_in, n_out), kind)
    layout[prefix + ".bias"] = ((n_out,), "zeros")


def _res_layout(layout, prefix, channels, time_channels):
    _norm(layout, prefix + ".norm1", channels)
    _conv(layout, prefix + ".conv1", channels, channels)
    _dense(layout, prefix + ".time", time_channels, channels)
    _norm(layout, prefix + ".norm2", channels)
    _conv(layout, prefix + ".conv2", channels, channels, kind="residual")


def _attn_layout(layout, prefix, channels):
    _norm(layout, prefix + ".norm", channels)
    for name in ("q", "k", "v"):
        _dense(layout, "%s.%s" % (prefix, name), channels, channels)
    _dense(layout, prefix + ".out", channels, channels, kind="residual")


def parameter_layout(config):
    """Return an ordered mapping of parameter name → (shape, initializer kind)."""
    layout = OrderedDict()
    time_channels = config.time_channels
    _dense(layout, "time.fc1", config.time_embedding_dim, time_channels)
    _dense(layout, "time.fc2", time_channels, time_channels)
    _conv(layout, "conv_in", config.base_channels, config.in_channels)
    registry = build_layer_registry(config)
    last = config.levels - 1
    for level in range(config.levels):
        prefix = "%s.%d" % (ENCODER, level)
        _res_layout(layout, prefix + ".res", config.channels(level), time_channels)
        if prefix + ".attn" in registry:
            _attn_layout(layout, prefix + ".attn", config.channels(level))
        if level < last:
            # 4×4 with stride 2 and pad 1 halves an even side exactly
            _conv(layout, prefix + ".down", config.channels(level + 1), config.channels(level), kernel=4)
    _res_layout(layout, BOTTLENECK + ".res", config.channels(last), time_channels)
    if BOTTLENECK + ".attn" in registry:
        _attn_layout(layout, BOTTLENECK + ".attn", config.channels(last))
    for level in reversed(range(config.levels)):
        prefix = "%s.%d" % (DECODER, level)
        _res_layout(layout, prefix + ".res", config.channels(level), time_channels)
        if prefix + ".attn" in registry:
            _attn_layout(layout, prefix + ".attn", config.channels(level))
        if level > 0:
            _conv(layout, prefix + ".up", config.channels(level - 1), config.channels(level))
    _norm(layout, "out.norm", config.base_channels)
    _conv(layout, "out.conv", config.in_channels, config.base_channels, kind="residual")
    return layout


def _initial_value(shape, kind, rng):
    if kind == "zeros":
        return np.zeros(shape, dtype=np.float32)
    if kind == "ones":
        return np.ones(shape, dtype=np.float32)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    std = math.sqrt(1.0 / fan_in)
    if kind == "residual":
        std *= 0.1
    return (rng.standard_normal(shape) * std).astype(np.float32)


class AttentionWeights(object):
    """Parameters of one attention block, addressed by short names ("q.weight", "norm.scale", ...)."""

    def __init__(self, layer, params, groups):
        self.layer = layer
        self.params = params
        self.groups = groups

    def __getitem__(self, name):
        return self.params[name]


class UNetWeights(object):
    """All parameter tensors of the toy U-Net and its attention layer registry.

    :param config: UNetConfig
    :param parameters: mapping of parameter name → Tensor; names and shapes must match
            `parameter_layout(config)`
    """

    def __init__(self, config, parameters):
        self.config = config
        layout = parameter_layout(config)
        missing = [name for name in layout if name not in parameters]
        unexpected = [name for name in parameters if name not in layout]
        if missing or unexpected:
            raise ConfigurationError(
                "Parameters do not match the architecture (missing %r, unexpected %r)"
                % (missing[:3], unexpected[:3])
            )
        self.parameters = OrderedDict()
        for name, (shape, _) in layout.items():
            value = as_tensor(parameters[name])
            if value.shape != tuple(shape):
                raise ShapeError("Parameter %s has shape %r, expected %r" % (name, value.shape, tuple(shape)))
            self.parameters[name] = value

    @classmethod
    def initialize(cls, config, seed=None):
        """Create randomly initialized weights; `seed` defaults to the config's `init_seed`."""
        rng = np.random.default_rng(config.init_seed if seed is None else seed)
        parameters = OrderedDict(
            (name, Tensor(_initial_value(shape, kind, rng)))
            for name, (shape, kind) in parameter_layout(config).items()
        )
        return cls(config, parameters)

    @cached_property
    def layers(self):
        return build_layer_registry(self.config)

    def layer_ids(self, position=None):
        return [
            layer_id
            for layer_id, layer in self.layers.items()
            if position is None or layer.position == position
        ]

    def attention(self, layer_id):
        prefix = layer_id + "."
        params = {
            name[len(prefix) :]: value for name, value in self.parameters.items() if name.startswith(prefix)
        }
        return AttentionWeights(self.layers[layer_id], params, self.config.norm_groups)

    def replace(self, parameters):
        """Return new weights with some parameters swapped for new values."""
        merged = OrderedDict(self.parameters)
        merged.update(parameters)
        return self.__class__(self.config, merged)

    def __getitem__(self, name):
        return self.parameters[name]

    def __len__(self):
        return len(self.parameters)

    def __eq__(self, other):
        if not isinstance(other, UNetWeights) or self.config != other.config:
            return False
        return all(
            np.array_equal(value.numpy(), other.parameters[name].numpy())
            for name, value in self.parameters.items()
        )

    def __ne__(self, other):
        return not (self == other)

    @property
    def parameter_count(self):
        return sum(value.size for value in self.parameters.values())

    def __repr__(self):
        return "<UNetWeights %d tensors, %d parameters>" % (len(self), self.parameter_count)


def timestep_embedding(t, dim):
    """Sinusoidal embedding of a timestep as a 1×dim Tensor."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / (half - 1))
    args = float(t) * freqs
    return Tensor(np.concatenate([np.sin(args), np.cos(args)])[None, :])


def scaled_dot_product_attention(query, key, value, temperature=1.0, observe=None):
    """softmax(τ·QKᵀ/√d)·V for a single head.

    The logits are scaled by 1/√d first and only then multiplied by τ, so the logit matrix of a τ call is
    exactly τ times that of a τ = 1 call.

    :param observe: optional callable receiving the pre-softmax logits
    """
    d = query.shape[1]
    if key.shape[1] != d:
        raise ShapeError("Query dimension %d differs from key dimension %d" % (d, key.shape[1]))
    if value.shape[0] != key.shape[0]:
        raise ShapeError("%d keys but %d values" % (key.shape[0], value.shape[0]))
    logits = scale(matmul(query, transpose(key)), 1.0 / math.sqrt(d))
    if temperature != 1.0:
        logits = scale(logits, temperature)
    if observe is not None:
        observe(logits)
    return matmul(softmax_rows(logits), value)


def self_attention_forward(phi, layer_weights, hook, t):
    """Run one single-head self-attention block with its hook.

    Q, K and V are projected from the group-normalized feature over its h·w tokens. The hook sees the
    projections right after they are computed (capture) and may replace them, together with a temperature,
    before the QKᵀ product (override). The attended tokens are projected back and added to φ.

    :param phi: C×H×W feature after the residual block
    :param layer_weights: AttentionWeights of the block
    :param hook: AttentionHook, `PASS` for plain attention
    :param t: current timestep
    """
    layer = layer_weights.layer
    channels, height, width = phi.shape
    if (height, width) != (layer.resolution, layer.resolution) or channels != layer.channels:
        raise ShapeError("%s expects %d×%d×%d features, got %r" % (
            layer.layer_id, layer.channels, layer.resolution, layer.resolution, phi.shape))
    w = layer_weights
    normed = group_norm(phi, w.groups, w["norm.scale"], w["norm.shift"])
    tokens = transpose(reshape(normed, (channels, height * width)))
    query = linear(tokens, w["q.weight"], w["q.bias"])
    key = linear(tokens, w["k.weight"], w["k.bias"])
    value = linear(tokens, w["v.weight"], w["v.bias"])
    hook.after_projection(layer, t, query, key, value)
    query, key, value, temperature = hook.override(layer, t, query, key, value)
    if query.shape != (height * width, channels):
        raise ShapeError(
            "%s: override query shape %r, expected %r"
            % (layer.layer_id, query.shape, (height * width, channels))
        )
    if value.shape[1] != channels:
        raise ShapeError(
            "%s: override value dimension %d, expected %d" % (layer.layer_id, value.shape[1], channels)
        )
    attended = scaled_dot_product_attention(
        query, key, value, temperature, observe=lambda logits: hook.after_logits(layer, t, logits)
    )
    out = linear(attended, w["out.weight"], w["out.bias"])
    return add(phi, reshape(transpose(out), (channels, height, width)))


def _res_block(h, time_act, params, prefix, groups):
    channels = h.shape[0]
    x = group_norm(h, groups, params[prefix + ".norm1.scale"], params[prefix + ".norm1.shift"])
    x = conv2d(silu(x), params[prefix + ".conv1.weight"], params[prefix + ".conv1.bias"], stride=1, pad=1)
    time_bias = linear(time_act, params[prefix + ".time.weight"], params[prefix + ".time.bias"])
    x = add(x, reshape(time_bias, (channels, 1, 1)))
    x = group_norm(x, groups, params[prefix + ".norm2.scale"], params[prefix + ".norm2.shift"])
    x = conv2d(silu(x), params[prefix + ".conv2.weight"], params[prefix + ".conv2.bias"], stride=1, pad=1)
    return add(h, x)


def unet_forward(z_t, t, weights, hooks=None):
    """Predict the noise contained in z_t.

    :param z_t: noised sample shaped like `weights.config.input_shape`
    :param t: timestep in [1, T_train]
    :param weights: UNetWeights
    :param hooks: mapping of layer-id → AttentionHook; layers not listed run with `PASS`
    :returns: ε̂, same shape as z_t
    :raises ConfigurationError: if `hooks` names a layer the registry does not know
    """
    config = weights.config
    hooks = hooks or {}
    unknown = [layer_id for layer_id in hooks if layer_id not in weights.layers]
    if unknown:
        raise ConfigurationError("Unknown attention layer id(s): %s" % ", ".join(map(repr, unknown)))
    z_t = as_tensor(z_t)
    if z_t.shape != config.input_shape:
        raise ShapeError("Model expects input of shape %r, got %r" % (config.input_shape, z_t.shape))
    if int(t) != t or not 1 <= t <= config.T_train:
        raise RangeError("Timestep %r outside [1, %d]" % (t, config.T_train))

    params = weights.parameters
    groups = config.norm_groups
    emb = timestep_embedding(t, config.time_embedding_dim)
    emb = silu(linear(emb, params["time.fc1.weight"], params["time.fc1.bias"]))
    time_act = silu(linear(emb, params["time.fc2.weight"], params["time.fc2.bias"]))

    def attend(h, layer_id):
        if layer_id not in weights.layers:
            return h
        return self_attention_forward(h, weights.attention(layer_id), hooks.get(layer_id) or PASS, t)

    h = conv2d(z_t, params["conv_in.weight"], params["conv_in.bias"], stride=1, pad=1)
    skips = []
    last = config.levels - 1
    for level in range(config.levels):
        prefix = "%s.%d" % (ENCODER, level)
        h = _res_block(h, time_act, params, prefix + ".res", groups)
        h = attend(h, prefix + ".attn")
        skips.append(h)
        if level < last:
            h = conv2d(h, params[prefix + ".down.weight"], params[prefix + ".down.bias"], stride=2, pad=1)
    h = _res_block(h, time_act, params, BOTTLENECK + ".res", groups)
    h = attend(h, BOTTLENECK + ".attn")
    for level in reversed(range(config.levels)):
        prefix = "%s.%d" % (DECODER, level)
        h = add(h, skips[level])
        h = _res_block(h, time_act, params, prefix + ".res", groups)
        h = attend(h, prefix + ".attn")
        if level > 0:
            h = conv2d(
                upsample2x(h), params[prefix + ".up.weight"], params[prefix + ".up.bias"], stride=1, pad=1
            )
    h = silu(group_norm(h, groups, params["out.norm.scale"], params["out.norm.shift"]))
    return conv2d(h, params["out.conv.weight"], params["out.conv.bias"], stride=1, pad=1)


class UNet(object):
    """Callable ε-predictor bound to a set of weights.

    Samplers and the trainer only rely on `model(z_t, t, hooks)` and `model.parameters`, so any object
    with that shape (a stub network in tests) can stand in.
    """

    def __init__(self, weights):
        self.weights = weights

    @property
    def parameters(self):
        return self.weights.parameters

    @property
    def layers(self):
        return self.weights.layers

    def __call__(self, z_t, t, hooks=None):
        return unet_forward(z_t, t, self.weights, hooks)


def as_model(weights_or_model):
    if isinstance(weights_or_model, UNetWeights):
        return UNet(weights_or_model)
    return weights_or_model
