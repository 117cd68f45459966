"""
Tests for network construction, the forward pass and weight pruning.
"""

import numpy as np
import pytest

from gridbayes.errors import ConfigurationError, NotVariationalError, ShapeError
from gridbayes.models import ForwardMode, Variant
from gridbayes.network import PRUNED_RHO, build_network, forward
from gridbayes.schemas import NetworkConfig


@pytest.fixture
def features(rng):
    return rng.uniform(0.0, 1.0, size=(2, 4, 8, 8))


class TestConstruction:
    def test_variational_layers_per_variant(self, network_config):
        layers = {v: build_network(network_config(v)).variational_layers() for v in Variant}
        assert layers[Variant.DETERMINISTIC] == []
        assert layers[Variant.MC_DROPOUT] == []
        assert [c.name for c in layers[Variant.HYBRID]] == ["head"]
        assert len(layers[Variant.PROBABILISTIC]) == 3

    def test_layer_names(self, network_config):
        net = build_network(network_config())
        assert [c.name for c in net.conv_layers()] == ["aspp0.d1", "aspp0.d2", "head"]

    def test_parameter_count_identities(self):
        counts = {v: build_network(NetworkConfig(variant=v)) for v in Variant}
        det = counts[Variant.DETERMINISTIC]
        assert counts[Variant.PROBABILISTIC].conv_parameter_count() == 2 * det.conv_parameter_count()
        head = det.layer("head").conv_parameter_count()
        assert counts[Variant.HYBRID].parameter_count() == det.parameter_count() + head
        assert counts[Variant.MC_DROPOUT].parameter_count() == det.parameter_count()

    def test_same_seed_same_weights(self, network_config):
        cfg = network_config(Variant.PROBABILISTIC)
        a = build_network(cfg, np.random.default_rng(4)).state_dict()
        b = build_network(cfg, np.random.default_rng(4)).state_dict()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_rejects_non_config(self):
        with pytest.raises(ConfigurationError):
            build_network({"variant": "deterministic"})

    def test_unknown_layer(self, network_config):
        with pytest.raises(ConfigurationError):
            build_network(network_config()).layer("aspp9.d1")


class TestForward:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_outputs_are_distributions(self, network_config, features, variant, rng):
        net = build_network(network_config(variant))
        probs, _ = net.forward(features, ForwardMode.SAMPLE, rng)
        assert probs.shape == (2, 4, 8, 8)
        assert np.all(probs.data > 0) and np.all(probs.data < 1)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-5)

    @pytest.mark.parametrize("dilations, layers", [([1], 1), ([1, 2, 4], 2), ([1, 3, 5, 7], 1)])
    def test_grid_shape_preserved(self, network_config, rng, dilations, layers):
        net = build_network(network_config(dilations=dilations, aspp_layers=layers, c_l=6, c_w=10))
        probs, _ = net.forward(rng.uniform(size=(1, 4, 6, 10)))
        assert probs.shape == (1, 4, 6, 10)

    def test_deterministic_samples_are_identical(self, network_config, features):
        net = build_network(network_config())
        a, kl = net.forward(features, ForwardMode.SAMPLE, np.random.default_rng(1))
        b, _ = net.forward(features, ForwardMode.SAMPLE, np.random.default_rng(2))
        np.testing.assert_array_equal(a.data, b.data)
        assert kl.item() == 0.0

    def test_probabilistic_kl_positive(self, network_config, features, rng):
        net = build_network(network_config(Variant.PROBABILISTIC))
        _, kl = net.forward(features, ForwardMode.SAMPLE, rng)
        assert kl.item() > 0

    def test_collapsed_posteriors_match_mean_weights(self, network_config, features, rng):
        net = build_network(network_config(Variant.PROBABILISTIC))
        for conv in net.variational_layers():
            conv.weight.rho.data[...] = -20.0
            conv.bias.rho.data[...] = -20.0
        sampled, _ = net.forward(features, ForwardMode.SAMPLE, rng)
        mean, _ = net.forward(features, ForwardMode.MEAN)
        assert np.max(np.abs(sampled.data - mean.data)) < 1e-6

    @pytest.mark.parametrize("variant", [Variant.PROBABILISTIC, Variant.HYBRID, Variant.MC_DROPOUT])
    def test_stochastic_variants_vary(self, network_config, features, variant):
        net = build_network(network_config(variant, rho_init=-2.0))
        a, _ = net.forward(features, ForwardMode.SAMPLE, np.random.default_rng(1))
        b, _ = net.forward(features, ForwardMode.SAMPLE, np.random.default_rng(2))
        mean_a, _ = net.forward(features, ForwardMode.MEAN)
        mean_b, _ = net.forward(features, ForwardMode.MEAN)
        assert not np.allclose(a.data, b.data)
        np.testing.assert_array_equal(mean_a.data, mean_b.data)

    def test_sampling_stochastic_net_needs_rng(self, network_config, features):
        net = build_network(network_config(Variant.HYBRID))
        with pytest.raises(ConfigurationError):
            net.forward(features, ForwardMode.SAMPLE)

    def test_input_shape_mismatch(self, network_config, rng):
        net = build_network(network_config())
        with pytest.raises(ShapeError):
            net.forward(rng.uniform(size=(1, 3, 8, 8)))
        with pytest.raises(ShapeError):
            net.forward(rng.uniform(size=(1, 4, 8, 6)))

    def test_eval_mode_leaves_running_statistics(self, network_config, features):
        net = build_network(network_config())
        before = net.running.mean.copy()
        forward(net, features)
        np.testing.assert_array_equal(net.running.mean, before)
        forward(net, features, training=True)
        assert not np.array_equal(net.running.mean, before)


class TestState:
    def test_state_dict_round_trip(self, network_config, features):
        cfg = network_config(Variant.HYBRID)
        source = build_network(cfg, np.random.default_rng(1))
        target = build_network(cfg, np.random.default_rng(2))
        target.load_state_dict(source.state_dict())
        a, _ = source.forward(features)
        b, _ = target.forward(features)
        np.testing.assert_array_equal(a.data, b.data)

    def test_wrong_shape_rejected(self, network_config):
        net = build_network(network_config())
        state = {k: v.copy() for k, v in net.state_dict().items()}
        state["head.bias"] = np.zeros(7)
        with pytest.raises(ShapeError):
            net.load_state_dict(state)

    def test_missing_tensor_rejected(self, network_config):
        net = build_network(network_config())
        state = dict(net.state_dict())
        del state["bn.scale"]
        with pytest.raises(ShapeError):
            net.load_state_dict(state)


class TestPruning:
    def test_prunes_lowest_snr_fraction(self, network_config):
        net = build_network(network_config(Variant.PROBABILISTIC))
        total = sum(vp.size for conv in net.variational_layers() for vp in (conv.weight, conv.bias))
        count = net.prune_low_snr(0.5)
        assert count == int(0.5 * total)
        pruned = sum(
            int(np.sum(vp.rho.data == PRUNED_RHO)) for conv in net.variational_layers() for vp in (conv.weight, conv.bias)
        )
        assert pruned == count
        for conv in net.variational_layers():
            for vp in (conv.weight, conv.bias):
                assert np.all(vp.mu.data[vp.rho.data == PRUNED_RHO] == 0.0)

    def test_zero_fraction_is_a_no_op(self, network_config):
        net = build_network(network_config(Variant.HYBRID))
        before = net.layer("head").weight.mu.data.copy()
        assert net.prune_low_snr(0.0) == 0
        np.testing.assert_array_equal(net.layer("head").weight.mu.data, before)

    def test_point_networks_cannot_be_pruned(self, network_config):
        with pytest.raises(NotVariationalError):
            build_network(network_config(Variant.MC_DROPOUT)).prune_low_snr(0.3)

    def test_fraction_range(self, network_config):
        with pytest.raises(ConfigurationError):
            build_network(network_config(Variant.PROBABILISTIC)).prune_low_snr(1.0)
