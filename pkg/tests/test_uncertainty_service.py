"""
Tests for MC prediction and the entropy decomposition.
"""

import math

import numpy as np
import pytest

from gridbayes.errors import ConfigurationError, ShapeError, UncertaintyInconsistencyError
from gridbayes.models import Variant
from gridbayes.network import build_network
from gridbayes.services import ProbStack, UncertaintyService


def stack_of(*distributions):
    """One-cell stack from N class distributions"""
    return ProbStack(np.asarray(distributions, dtype=float)[:, None, None, :])


# ============================================================================
# Entropies
# ============================================================================

class TestEntropies:
    def test_predictive_reference(self):
        h = UncertaintyService.predictive_entropy(np.array([0.7, 0.3]))
        assert float(h) == pytest.approx(0.6109, abs=1e-4)

    def test_certain_distribution_has_zero_entropy(self):
        assert float(UncertaintyService.predictive_entropy(np.array([1.0, 0.0, 0.0, 0.0]))) == 0.0

    def test_uniform_distribution(self):
        h = UncertaintyService.predictive_entropy(np.full(4, 0.25))
        assert float(h) == pytest.approx(math.log(4))

    def test_decomposition_reference(self):
        maps = UncertaintyService.decompose(stack_of([0.8, 0.2], [0.6, 0.4]))
        assert maps.predictive[0, 0] == pytest.approx(0.6109, abs=1e-4)
        assert maps.aleatoric[0, 0] == pytest.approx(0.5867, abs=1e-4)
        assert maps.epistemic[0, 0] == pytest.approx(0.0242, abs=1e-4)
        assert maps.predicted[0, 0] == 0

    def test_disagreeing_certain_samples_are_purely_epistemic(self):
        maps = UncertaintyService.decompose(stack_of([1.0, 0.0], [0.0, 1.0]))
        assert maps.aleatoric[0, 0] == 0.0
        assert maps.epistemic[0, 0] == pytest.approx(math.log(2))

    def test_single_sample_has_no_epistemic_part(self):
        maps = UncertaintyService.decompose(stack_of([0.1, 0.2, 0.3, 0.4]))
        assert maps.epistemic[0, 0] == 0.0
        assert maps.aleatoric[0, 0] == pytest.approx(maps.predictive[0, 0])

    def test_predictive_bounds_aleatoric(self, rng):
        logits = rng.normal(scale=3.0, size=(10, 100, 100, 4))
        samples = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        maps = UncertaintyService.decompose(ProbStack(samples))
        assert np.all(maps.predictive >= maps.aleatoric - 1e-7)
        assert np.all(maps.epistemic >= 0)
        assert np.all(maps.predictive <= math.log(4) + 1e-12)

    def test_inconsistent_entropies(self):
        with pytest.raises(UncertaintyInconsistencyError):
            UncertaintyService.epistemic_entropy(np.array([0.2]), np.array([0.3]))

    def test_rounding_deficit_is_clamped(self):
        out = UncertaintyService.epistemic_entropy(np.array([0.3]), np.array([0.3 + 1e-9]))
        assert out[0] == 0.0

    def test_entropy_shape_mismatch(self):
        with pytest.raises(ShapeError):
            UncertaintyService.epistemic_entropy(np.zeros(2), np.zeros(3))


class TestProbStack:
    def test_mean_and_sizes(self):
        stack = stack_of([0.8, 0.2], [0.6, 0.4])
        assert (stack.n, stack.num_classes) == (2, 2)
        np.testing.assert_allclose(stack.mean[0, 0], [0.7, 0.3])

    @pytest.mark.parametrize("shape", [(2, 2, 4), (0, 2, 2, 4)])
    def test_rejects_bad_shapes(self, shape):
        with pytest.raises(ShapeError):
            ProbStack(np.zeros(shape))

    def test_rows_are_row_major(self):
        maps = UncertaintyService.decompose(ProbStack(np.full((1, 2, 3, 4), 0.25)))
        rows = list(maps.rows())
        assert [(r, c) for r, c, *_ in rows] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
        assert rows[0][2] == pytest.approx(math.log(4))
        assert rows[0][5] == 0


# ============================================================================
# MC prediction
# ============================================================================

class TestMCPredict:
    @pytest.fixture
    def features(self, rng):
        return rng.uniform(size=(4, 8, 8)).astype(np.float32)

    def test_deterministic_network_gets_one_pass(self, network_config, features, rng):
        net = build_network(network_config(Variant.DETERMINISTIC))
        stack = UncertaintyService.mc_predict(net, features, 20, rng)
        assert stack.n == 1
        assert stack.samples.shape == (1, 8, 8, 4)
        maps = UncertaintyService.decompose(stack)
        assert not maps.epistemic.any()

    @pytest.mark.parametrize("variant", [Variant.MC_DROPOUT, Variant.HYBRID, Variant.PROBABILISTIC])
    def test_stochastic_networks_sample(self, network_config, features, variant):
        net = build_network(network_config(variant))
        stack = UncertaintyService.mc_predict(net, features, 5, np.random.default_rng(9))
        assert stack.n == 5
        np.testing.assert_allclose(stack.samples.sum(axis=-1), 1.0, atol=1e-5)
        assert not np.array_equal(stack.samples[0], stack.samples[1])

        again = UncertaintyService.mc_predict(net, features, 5, np.random.default_rng(9))
        np.testing.assert_array_equal(stack.samples, again.samples)

    def test_thread_count_does_not_change_samples(self, network_config, features):
        net = build_network(network_config(Variant.PROBABILISTIC))
        serial = UncertaintyService.mc_predict(net, features, 6, np.random.default_rng(4), threads=1)
        pooled = UncertaintyService.mc_predict(net, features, 6, np.random.default_rng(4), threads=3)
        np.testing.assert_array_equal(serial.samples, pooled.samples)

    def test_batch_gives_one_stack_per_grid(self, network_config, rng):
        net = build_network(network_config(Variant.HYBRID))
        batch = rng.uniform(size=(3, 4, 8, 8)).astype(np.float32)
        stacks = UncertaintyService.mc_predict_batch(net, batch, 4, rng)
        assert len(stacks) == 3
        assert all(s.samples.shape == (4, 8, 8, 4) for s in stacks)

    def test_predict_maps(self, network_config, features, rng):
        net = build_network(network_config(Variant.PROBABILISTIC))
        stack, maps = UncertaintyService.predict_maps(net, features, 4, rng)
        assert maps.predicted.shape == (8, 8)
        np.testing.assert_array_equal(maps.predicted, np.argmax(stack.mean, axis=-1))

    def test_needs_a_sample(self, network_config, features, rng):
        net = build_network(network_config(Variant.HYBRID))
        with pytest.raises(ConfigurationError):
            UncertaintyService.mc_predict(net, features, 0, rng)

    def test_rejects_batches_in_single_prediction(self, network_config, rng):
        net = build_network(network_config(Variant.HYBRID))
        with pytest.raises(ShapeError):
            UncertaintyService.mc_predict(net, np.zeros((2, 4, 8, 8), dtype=np.float32), 2, rng)

    def test_rejects_wrong_rank(self, network_config, rng):
        net = build_network(network_config(Variant.HYBRID))
        with pytest.raises(ShapeError):
            UncertaintyService.mc_predict_batch(net, np.zeros((4, 8, 8), dtype=np.float32), 2, rng)
