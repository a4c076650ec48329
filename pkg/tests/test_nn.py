"""Tests for network construction, noise sampling and Adam."""

import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import Graph, Tensor
from src.config import AdamConfig, ModelConfig, TrainingConfig
from src.nn import (
    AdamState,
    BatchNorm,
    NetworkSpec,
    NetworkSpecError,
    ResBlockSpec,
    adam_step,
    auxiliary_spec,
    build_network,
    build_networks,
    discriminator_spec,
    fixed_code_noise,
    frozen,
    generator_spec,
    network_dtype,
    sample_noise,
    validate_spec,
)

TINY_MODEL = ModelConfig(gen_seed_channels=4, gen_seed_size=8, gen_widths=(4, 4), disc_widths=(4, 8))


@pytest.fixture
def tiny_config():
    """A training config with very narrow networks."""
    return TrainingConfig(batch_size=4, K=3, dim_z=5, model=TINY_MODEL, precision="float64").validate()


@pytest.fixture
def networks(tiny_config):
    """Built G, D and Q for the tiny config."""
    return build_networks(tiny_config)


class TestNetworkShapes:
    """Tests for forward shapes of G, D and Q."""

    def test_generator_output(self, networks, tiny_config):
        """Test that G maps noise to 32x32 RGB in [-1, 1]."""
        noise = sample_noise(4, tiny_config.K, tiny_config.dim_z, np.random.default_rng(0))
        out = networks.generator(noise.as_tensor()).values
        assert out.shape == (4, 3, 32, 32)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_discriminator_output(self, networks):
        """Test that D emits one scalar per sample."""
        x = np.random.default_rng(1).uniform(-1, 1, size=(2, 3, 32, 32))
        assert networks.discriminator(Tensor(x)).shape == (2,)

    def test_auxiliary_is_a_distribution(self, networks, tiny_config):
        """Test that Q rows are probability vectors over K codes."""
        x = np.random.default_rng(2).uniform(-1, 1, size=(3, 3, 32, 32))
        probs = networks.auxiliary(Tensor(x)).values
        assert probs.shape == (3, tiny_config.K)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        assert np.all(probs > 0)

    def test_block_outputs(self, networks):
        """Test intermediate block shapes of the critic."""
        x = Tensor(np.zeros((1, 3, 32, 32)))
        shapes = [b.shape for b in networks.discriminator.block_outputs(x)]
        assert shapes == [(1, 4, 16, 16), (1, 8, 8, 8)]

    def test_precision(self, networks):
        """Test that float64 precision reaches the parameters."""
        assert network_dtype(networks.discriminator) == np.float64
        assert network_dtype(lambda x: x) == np.float64


class TestTrunkSharing:
    """Tests for Q sharing the critic trunk."""

    def test_shared_trunk_is_the_same_object(self, networks):
        """Test that Q reuses D's trunk parameters."""
        assert networks.auxiliary.trunk is networks.discriminator.trunk
        assert networks.auxiliary.shared_trunk
        q_names = {name for name, _ in networks.auxiliary.named_parameters()}
        assert all(name.startswith("head") for name in q_names)

    def test_separate_trunk(self, tiny_config):
        """Test that share_trunk=False gives Q its own trunk."""
        cfg = TrainingConfig(batch_size=4, K=3, dim_z=5, precision="float64",
                             model=ModelConfig(gen_seed_channels=4, gen_widths=(4, 4), disc_widths=(4, 8),
                                               share_trunk=False))
        nets = build_networks(cfg)
        assert nets.auxiliary.trunk is not nets.discriminator.trunk
        assert any(name.startswith("trunk") for name, _ in nets.auxiliary.named_parameters())

    def test_no_batchnorm_in_critic(self, networks):
        """Test that the critic has no batch normalization."""
        names = [name for name, _ in networks.discriminator.named_parameters()]
        assert not any("bn" in name for name in names)
        assert any("bn" in name for name, _ in networks.generator.named_parameters())

    def test_same_seed_same_weights(self, tiny_config):
        """Test that initialization is deterministic in the seed."""
        a = build_networks(tiny_config).named_arrays()
        b = build_networks(tiny_config).named_arrays()
        assert a.keys() == b.keys()
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])


class TestSpecValidation:
    """Tests for architecture checks."""

    def test_channel_mismatch_names_block(self):
        """Test that the first non-chaining block is named."""
        spec = NetworkSpec("discriminator", [ResBlockSpec("downsample", 3, 8), ResBlockSpec("downsample", 4, 8)],
                           out_features=1)
        with pytest.raises(NetworkSpecError, match="block 1"):
            validate_spec(spec)

    def test_generator_must_reach_image_size(self):
        """Test that the generator must end at 32x32."""
        spec = generator_spec(ModelConfig(gen_seed_size=4, gen_widths=(8, 8)), K=2, dim_z=3)
        with pytest.raises(NetworkSpecError, match="16x16"):
            validate_spec(spec)

    def test_unknown_role(self):
        """Test that unknown roles are rejected."""
        with pytest.raises(NetworkSpecError, match="role"):
            validate_spec(NetworkSpec("encoder", [], out_features=1))

    def test_unknown_block_kind(self):
        """Test that block kinds are checked."""
        spec = NetworkSpec("discriminator", [ResBlockSpec("dilated", 3, 8)], out_features=1)
        with pytest.raises(NetworkSpecError, match="unknown kind"):
            build_network(spec, init_seed=0)

    def test_default_specs_chain(self):
        """Test that the default architecture validates."""
        model = ModelConfig()
        validate_spec(generator_spec(model, 5, 10))
        validate_spec(discriminator_spec(model))
        validate_spec(auxiliary_spec(model, 5))


class TestBatchNorm:
    """Tests for batch normalization modes."""

    def test_training_mode_normalizes(self):
        """Test that training mode uses batch statistics and updates running stats."""
        bn = BatchNorm(2, dtype=np.float64)
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(8, 2, 4, 4))
        out = bn(Tensor(x)).values
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
        assert np.all(bn._buffers["running_mean"] > 0.0)

    def test_eval_mode_uses_running_stats(self):
        """Test that eval mode is a fixed affine map."""
        bn = BatchNorm(1, dtype=np.float64).eval()
        x = np.full((2, 1, 2, 2), 4.0)
        np.testing.assert_allclose(bn(Tensor(x)).values, 4.0 / np.sqrt(1.0 + 1e-5))


class TestNoise:
    """Tests for noise sampling."""

    def test_sample_noise_layout(self):
        """Test one-hot codes followed by z."""
        noise = sample_noise(6, 4, 3, np.random.default_rng(0))
        arr = noise.as_array()
        assert arr.shape == (6, 7)
        np.testing.assert_array_equal(arr[:, :4].sum(axis=1), np.ones(6))
        np.testing.assert_array_equal(arr[:, :4].argmax(axis=1), noise.codes)
        assert noise.K == 4 and noise.batch == 6

    def test_sample_noise_rejects_zero(self):
        """Test that empty batches are rejected."""
        with pytest.raises(ValueError):
            sample_noise(0, 4, 3, np.random.default_rng(0))

    def test_fixed_code_noise(self):
        """Test chosen codes and z rows."""
        noise = fixed_code_noise([2, 0], np.ones((2, 3)), K=3)
        np.testing.assert_array_equal(noise.categorical, [[0, 0, 1], [1, 0, 0]])

    def test_fixed_code_noise_range(self):
        """Test that codes outside [0, K) are rejected."""
        with pytest.raises(ValueError, match="codes"):
            fixed_code_noise([3], np.ones((1, 2)), K=3)


class TestAdam:
    """Tests for the Adam update."""

    def test_first_step_moves_by_lr(self):
        """Test that the bias-corrected first step has magnitude lr."""
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        state = AdamState.zeros_like([p])
        cfg = AdamConfig(lr=0.1)
        adam_step([p], [np.array([2.0, -3.0])], state, cfg)
        np.testing.assert_allclose(p.values, [0.9, -0.9], atol=1e-6)
        assert state.t == 1

    def test_missing_gradient_is_zero(self):
        """Test that parameters absent from the map do not move on the first step."""
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = AdamState.zeros_like([p])
        adam_step([p], ad.GradientMap(), state, AdamConfig())
        np.testing.assert_allclose(p.values, [1.0])

    def test_shape_mismatch(self):
        """Test that gradient shapes are checked."""
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ValueError, match="shape"):
            adam_step([p], [np.zeros(3)], AdamState.zeros_like([p]), AdamConfig())

    def test_minimizes_quadratic(self):
        """Test that repeated steps approach the minimum of (p - 3)^2."""
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState.zeros_like([p])
        cfg = AdamConfig(lr=0.05, beta1=0.5, beta2=0.9)
        for _ in range(500):
            with Graph():
                diff = p - 3.0
                grads = ad.backward((diff * diff).sum())
            adam_step([p], grads, state, cfg)
        assert abs(p.values[0] - 3.0) < 1e-2


class TestFrozen:
    """Tests for temporarily freezing modules."""

    def test_frozen_blocks_gradients(self, networks):
        """Test that frozen parameters receive no gradient and are restored afterwards."""
        D = networks.discriminator
        x = Tensor(np.zeros((1, 3, 32, 32)), requires_grad=True)
        with Graph(), frozen(D):
            grads = ad.backward(D(x).sum())
        assert all(p not in grads for p in D.parameters())
        assert x in grads
        assert all(p.requires_grad for p in D.parameters())


class TestStateDict:
    """Tests for parameter and buffer persistence."""

    def test_round_trip(self, tiny_config):
        """Test that loading a state dict reproduces outputs."""
        a = build_networks(tiny_config).generator
        b = build_network(generator_spec(TINY_MODEL, 3, 5), init_seed=99, dtype=np.float64)
        b.load_state_dict(a.state_dict())
        a.eval(), b.eval()
        z = Tensor(np.random.default_rng(0).standard_normal((2, 8)))
        np.testing.assert_allclose(a(z).values, b(z).values)

    def test_missing_entries(self, networks):
        """Test that incomplete state dicts are rejected."""
        with pytest.raises(KeyError, match="missing"):
            networks.discriminator.load_state_dict({})

    def test_train_eval_flags_propagate(self, networks):
        """Test that train/eval reaches submodules."""
        networks.train(False)
        assert not networks.generator.bn_out.training
        networks.train(True)
        assert networks.generator.bn_out.training
