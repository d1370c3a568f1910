import numpy as np
from pytest import mark, raises

from attn_style import (
    PASS,
    AttentionHook,
    ConfigurationError,
    GradTape,
    RangeError,
    ShapeError,
    Tensor,
    UNetConfig,
    UNetWeights,
    unet_forward,
)
from attn_style.hooks import CaptureHook, FeatureRecorder, HookCollection
from attn_style.injection import StyleInjectionHook
from attn_style.model import UNet, timestep_embedding
from attn_style.tensor import mean_squared_error
from tests import TINY_UNET, CallCounter, TestCase


class Temperature(AttentionHook):
    def __init__(self, tau):
        self.tau = tau

    def override(self, layer, t, query, key, value):
        return query, key, value, self.tau


class LogitRecorder(AttentionHook):
    def __init__(self):
        self.logits = []

    def after_logits(self, layer, t, logits):
        self.logits.append(logits.numpy().astype(np.float64))


class TestUNetConfig(object):
    def test_defaults(self):
        config = UNetConfig()
        assert config.input_shape == (3, 64, 64)
        assert config.channels(2) == 256
        assert config.level_resolution(2) == 16

    @mark.parametrize(
        "options",
        [
            {"resolution": 10},
            {"attention_levels": [0]},
            {"attention_levels": [3]},
            {"norm_groups": 3},
            {"time_embedding_dim": 7},
            {"base_channels": 0},
        ],
    )
    def test_rejects_invalid_architecture(self, options):
        with raises(ConfigurationError):
            UNetConfig(dict(TINY_UNET, **options))

    def test_rejects_unknown_option(self):
        with raises(ConfigurationError):
            UNetConfig(heads=4)

    def test_attention_levels_are_normalized(self):
        config = UNetConfig(dict(TINY_UNET, attention_levels=[2, 1, 2]))
        assert config.attention_levels == [1, 2]


class TestUNetWeights(TestCase):
    def test_layer_registry(self):
        assert list(self.weights.layers) == [
            "encoder.1.attn",
            "encoder.2.attn",
            "bottleneck.attn",
            "decoder.2.attn",
            "decoder.1.attn",
        ]
        assert self.weights.layer_ids("decoder") == ["decoder.2.attn", "decoder.1.attn"]
        layer = self.weights.layers["decoder.1.attn"]
        assert (layer.resolution, layer.channels, layer.tokens) == (4, 8, 16)

    def test_no_bottleneck_attention_without_lowest_level(self):
        weights = UNetWeights.initialize(UNetConfig(dict(TINY_UNET, attention_levels=[1])))
        assert list(weights.layers) == ["encoder.1.attn", "decoder.1.attn"]

    def test_initialize_is_seeded(self):
        assert UNetWeights.initialize(self.config, seed=0) == self.weights
        assert UNetWeights.initialize(self.config, seed=1) != self.weights

    def test_rejects_missing_parameter(self):
        parameters = dict(self.weights.parameters)
        del parameters["conv_in.bias"]
        with raises(ConfigurationError):
            UNetWeights(self.config, parameters)

    def test_rejects_wrong_shape(self):
        with raises(ShapeError):
            self.weights.replace({"conv_in.bias": Tensor(np.zeros(5))})

    def test_replace_leaves_original_untouched(self):
        replaced = self.weights.replace({"out.conv.bias": Tensor(np.ones(3))})
        assert replaced["out.conv.bias"].numpy().tolist() == [1.0, 1.0, 1.0]
        assert self.weights["out.conv.bias"].numpy().tolist() == [0.0, 0.0, 0.0]


class TestForward(TestCase):
    def test_output_shape_and_determinism(self):
        z = self.random_image()
        first = unet_forward(z, 7, self.weights).numpy()
        second = unet_forward(z, 7, self.weights).numpy()
        assert first.shape == self.config.input_shape
        assert np.array_equal(first, second)

    def test_timestep_changes_prediction(self):
        z = self.random_image()
        early = unet_forward(z, 1, self.weights).numpy()
        late = unet_forward(z, 20, self.weights).numpy()
        assert not np.array_equal(early, late)

    def test_model_wrapper(self):
        z = self.random_image()
        model = UNet(self.weights)
        assert model.parameters is self.weights.parameters
        assert np.array_equal(model(z, 3).numpy(), unet_forward(z, 3, self.weights).numpy())

    @mark.parametrize("t", [0, 21, 1.5])
    def test_timestep_out_of_range(self, t):
        with raises(RangeError):
            unet_forward(self.random_image(), t, self.weights)

    def test_wrong_input_shape(self):
        with raises(ShapeError):
            unet_forward(Tensor(np.zeros((3, 16, 16))), 1, self.weights)

    def test_unknown_layer_id(self):
        with raises(ConfigurationError):
            unet_forward(self.random_image(), 1, self.weights, {"decoder.0.attn": PASS})

    def test_timestep_embedding(self):
        emb = timestep_embedding(5, 8).numpy()
        assert emb.shape == (1, 8)
        assert np.allclose(emb[0, :4] ** 2 + emb[0, 4:] ** 2, 1.0, atol=1e-6)


class TestHooks(TestCase):
    def test_pass_hook_is_transparent(self):
        z = self.random_image()
        plain = unet_forward(z, 4, self.weights).numpy()
        hooks = {layer_id: PASS for layer_id in self.weights.layers}
        assert np.array_equal(unet_forward(z, 4, self.weights, hooks).numpy(), plain)

    def test_substituting_own_features_is_transparent(self):
        z = self.random_image()
        recorder = FeatureRecorder("content")
        capture = CaptureHook(recorder, ("q", "k", "v"))
        plain = unet_forward(z, 4, self.weights, {layer_id: capture for layer_id in self.weights.layers})
        cache = recorder.freeze()
        inject = StyleInjectionHook(cache, cache, gamma=1.0, temperature=1.0)
        substituted = unet_forward(z, 4, self.weights, {layer_id: inject for layer_id in self.weights.layers})
        assert np.array_equal(substituted.numpy(), plain.numpy())

    def test_each_hook_runs_once_per_layer(self):
        counter = CallCounter()
        hooks = {layer_id: counter for layer_id in self.weights.layers}
        unet_forward(self.random_image(), 2, self.weights, hooks)
        assert counter.projections == {layer_id: 1 for layer_id in self.weights.layers}
        assert counter.logits == counter.projections

    def test_unlisted_layers_run_plain(self):
        counter = CallCounter()
        unet_forward(self.random_image(), 2, self.weights, {"decoder.1.attn": counter})
        assert counter.projections == {"decoder.1.attn": 1}

    @mark.parametrize("tau", [2.0, 1.5])
    def test_temperature_scales_logits(self, tau):
        z = self.random_image()
        plain, hot = LogitRecorder(), LogitRecorder()
        unet_forward(z, 5, self.weights, {"encoder.1.attn": plain})
        unet_forward(z, 5, self.weights, {"encoder.1.attn": HookCollection([Temperature(tau), hot])})
        base, scaled = plain.logits[0], hot.logits[0]
        assert np.isclose(np.std(scaled), tau * np.std(base), rtol=1e-6)
        assert (scaled.argmax(axis=1) == base.argmax(axis=1)).all()

    def test_override_shape_is_checked(self):
        class Truncate(AttentionHook):
            def override(self, layer, t, query, key, value):
                return Tensor(query.numpy()[:, :-1]), key, value, 1.0

        with raises(ShapeError):
            unet_forward(self.random_image(), 1, self.weights, {"decoder.1.attn": Truncate()})


class TestGradients(TestCase):
    def loss(self, weights, z, target):
        return mean_squared_error(unet_forward(z, 6, weights), target)

    def test_every_parameter_receives_a_gradient(self):
        z, target = self.random_image(), self.random_image()
        with GradTape() as tape:
            loss = self.loss(self.weights, z, target)
        grads = tape.backward(loss, self.weights.parameters)
        assert set(grads) == set(self.weights.parameters)
        assert all(np.all(np.isfinite(grad)) for grad in grads.values())
        assert np.any(grads["decoder.1.attn.q.weight"] != 0)

    @mark.parametrize("name", ["out.conv.weight", "out.conv.bias"])
    def test_directional_derivative(self, name):
        z, target = self.random_image(), self.random_image()
        parameter = self.weights[name]
        with GradTape() as tape:
            loss = self.loss(self.weights, z, target)
        grad = tape.backward(loss, {name: parameter})[name].astype(np.float64)
        direction = self.rng.standard_normal(parameter.shape)
        h = 1e-2
        base = parameter.numpy().astype(np.float64)
        high = self.loss(self.weights.replace({name: Tensor(base + h * direction)}), z, target).item()
        low = self.loss(self.weights.replace({name: Tensor(base - h * direction)}), z, target).item()
        numeric = (high - low) / (2 * h)
        assert np.isclose(np.sum(grad * direction), numeric, rtol=2e-2, atol=1e-4)
