"""Generator, discriminator and auxiliary networks, the noise source and Adam."""

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMap, Tensor
from .config import AdamConfig, ConfigError, ModelConfig, TrainingConfig, debug_log

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
ROLES = ("generator", "discriminator", "auxiliary")
BLOCK_KINDS = ("plain", "upsample", "downsample")


class NetworkSpecError(ConfigError):
    """A network spec does not chain consistently."""


class Module:
    """Container of parameters (trainable Tensors), buffers and child modules."""

    def __init__(self):
        self.training = True
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, values: np.ndarray) -> Tensor:
        tensor = Tensor(values, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def add_buffer(self, name: str, values: np.ndarray) -> None:
        self._buffers[name] = values

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        items = [(prefix + name, p) for name, p in self._params.items()]
        for child_name, child in self._children.items():
            items.extend(child.named_parameters(f"{prefix}{child_name}."))
        return items

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        items = [(prefix + name, b) for name, b in self._buffers.items()]
        for child_name, child in self._children.items():
            items.extend(child.named_buffers(f"{prefix}{child_name}."))
        return items

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.values for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters and buffers in place."""
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        if missing:
            raise KeyError(f"missing entries: {', '.join(missing)}")
        for name, target in expected.items():
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise ValueError(f"{name}: shape {source.shape} does not match {target.shape}")
            target[...] = source

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def network_dtype(*networks) -> type:
    """Float dtype of the first parameterized network, float64 otherwise."""
    for net in networks:
        if isinstance(net, Module):
            params = net.parameters()
            if params:
                return params[0].dtype.type
    return np.float64


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = self.add_parameter("weight", _he_normal(rng, (in_features, out_features), in_features, dtype))
        self.bias = self.add_parameter("bias", np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.weight, self.bias)


class Conv2d(Module):
    """Stride-1 convolution with 'same' zero padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.pad = kernel // 2
        fan_in = in_channels * kernel * kernel
        self.weight = self.add_parameter(
            "weight", _he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        )
        self.bias = self.add_parameter("bias", np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, pad=self.pad)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.gamma = self.add_parameter("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_parameter("beta", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        running_mean = self._buffers["running_mean"]
        running_var = self._buffers["running_var"]
        if not self.training:
            return ad.batch_norm(x, self.gamma, self.beta, BN_EPS, running=(running_mean, running_var))
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        running_mean[...] = BN_MOMENTUM * running_mean + (1 - BN_MOMENTUM) * x.values.mean(axis=axes)
        running_var[...] = BN_MOMENTUM * running_var + (1 - BN_MOMENTUM) * x.values.var(axis=axes)
        return ad.batch_norm(x, self.gamma, self.beta, BN_EPS)


@dataclass
class ResBlockSpec:
    """One residual block: upsample doubles, downsample halves, plain keeps size."""
    kind: str
    in_channels: int
    out_channels: int
    use_batchnorm: bool = False
    preactivate: bool = True


class ResBlock(Module):
    """
    Residual block with matching resampling on both paths.

    Residual path: [BN] ReLU [up] conv3 [BN] ReLU conv3 [down].
    Skip path: [up] [conv1x1 when channels change] [down].
    """

    def __init__(self, spec: ResBlockSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.bn1 = self.add_module("bn1", BatchNorm(spec.in_channels, dtype)) if spec.use_batchnorm else None
        self.conv1 = self.add_module("conv1", Conv2d(spec.in_channels, spec.out_channels, 3, rng, dtype))
        self.bn2 = self.add_module("bn2", BatchNorm(spec.out_channels, dtype)) if spec.use_batchnorm else None
        self.conv2 = self.add_module("conv2", Conv2d(spec.out_channels, spec.out_channels, 3, rng, dtype))
        self.shortcut = None
        if spec.in_channels != spec.out_channels:
            self.shortcut = self.add_module("shortcut", Conv2d(spec.in_channels, spec.out_channels, 1, rng, dtype))

    def _resample_in(self, x: Tensor) -> Tensor:
        return ad.upsample2x(x) if self.spec.kind == "upsample" else x

    def _resample_out(self, x: Tensor) -> Tensor:
        return ad.meanpool2x(x) if self.spec.kind == "downsample" else x

    def forward(self, x: Tensor) -> Tensor:
        h = self.bn1(x) if self.bn1 is not None else x
        if self.spec.preactivate:
            h = ad.relu(h)
        h = self.conv1(self._resample_in(h))
        if self.bn2 is not None:
            h = self.bn2(h)
        h = self._resample_out(self.conv2(ad.relu(h)))

        skip = self._resample_in(x)
        if self.shortcut is not None:
            skip = self.shortcut(skip)
        return h + self._resample_out(skip)


@dataclass
class NetworkSpec:
    """
    Architecture of one network.

    ``out_features`` is the image channel count for the generator, 1 for
    the discriminator and K for the auxiliary network.
    """
    role: str
    blocks: List[ResBlockSpec]
    out_features: int
    in_features: int = 0
    seed_channels: int = 0
    seed_size: int = 0
    image_channels: int = 3
    image_size: int = 32


def generator_spec(model: ModelConfig, K: int, dim_z: int) -> NetworkSpec:
    blocks, channels = [], model.gen_seed_channels
    for width in model.gen_widths:
        blocks.append(ResBlockSpec("upsample", channels, width, use_batchnorm=True))
        channels = width
    return NetworkSpec("generator", blocks, out_features=3, in_features=K + dim_z,
                       seed_channels=model.gen_seed_channels, seed_size=model.gen_seed_size)


def discriminator_spec(model: ModelConfig) -> NetworkSpec:
    blocks, channels = [], 3
    for i, width in enumerate(model.disc_widths):
        blocks.append(ResBlockSpec("downsample", channels, width, preactivate=i > 0))
        channels = width
    return NetworkSpec("discriminator", blocks, out_features=1)


def auxiliary_spec(model: ModelConfig, K: int) -> NetworkSpec:
    spec = discriminator_spec(model)
    return NetworkSpec("auxiliary", spec.blocks, out_features=K)


def validate_spec(spec: NetworkSpec) -> None:
    """
    Trace channels and spatial size through the block list.

    Raises:
        NetworkSpecError: Naming the first block that does not chain
    """
    if spec.role not in ROLES:
        raise NetworkSpecError(f"unknown network role {spec.role!r}")
    if spec.role == "generator":
        channels, size = spec.seed_channels, spec.seed_size
        if spec.in_features < 1 or channels < 1 or size < 1:
            raise NetworkSpecError("generator needs positive input width, seed channels and seed size")
    else:
        channels, size = spec.image_channels, spec.image_size
    for i, block in enumerate(spec.blocks):
        if block.kind not in BLOCK_KINDS:
            raise NetworkSpecError(f"block {i}: unknown kind {block.kind!r}")
        if block.in_channels != channels:
            raise NetworkSpecError(f"block {i}: expects {block.in_channels} input channels, receives {channels}")
        if block.kind == "upsample":
            size *= 2
        elif block.kind == "downsample":
            if size % 2:
                raise NetworkSpecError(f"block {i}: cannot halve odd spatial size {size}")
            size //= 2
        channels = block.out_channels
    if spec.role == "generator" and size != spec.image_size:
        raise NetworkSpecError(f"generator produces {size}x{size}, expected {spec.image_size}x{spec.image_size}")
    if spec.role != "generator" and not spec.blocks:
        raise NetworkSpecError(f"{spec.role} needs at least one block")


class Generator(Module):
    """dense -> reshape to seed map -> upsampling blocks -> BN ReLU conv3 tanh."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.seed = self.add_module(
            "seed", Dense(spec.in_features, spec.seed_channels * spec.seed_size ** 2, rng, dtype)
        )
        self.blocks = [self.add_module(f"block{i}", ResBlock(b, rng, dtype)) for i, b in enumerate(spec.blocks)]
        last = spec.blocks[-1].out_channels if spec.blocks else spec.seed_channels
        self.bn_out = self.add_module("bn_out", BatchNorm(last, dtype))
        self.conv_out = self.add_module("conv_out", Conv2d(last, spec.out_features, 3, rng, dtype))

    def forward(self, noise: Tensor) -> Tensor:
        h = self.seed(noise).reshape(noise.shape[0], self.spec.seed_channels, self.spec.seed_size,
                                     self.spec.seed_size)
        for block in self.blocks:
            h = block(h)
        return ad.tanh(self.conv_out(ad.relu(self.bn_out(h))))


class DiscriminatorTrunk(Module):
    """Downsampling blocks, ReLU and global mean pooling."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.blocks = [self.add_module(f"block{i}", ResBlock(b, rng, dtype)) for i, b in enumerate(spec.blocks)]
        self.out_channels = spec.blocks[-1].out_channels

    def block_outputs(self, x: Tensor) -> List[Tensor]:
        outputs, h = [], x
        for block in self.blocks:
            h = block(h)
            outputs.append(h)
        return outputs

    def forward(self, x: Tensor) -> Tensor:
        h = ad.relu(self.block_outputs(x)[-1])
        return ad.mean(h, axis=(2, 3))


class Discriminator(Module):
    """Critic emitting one unbounded scalar per sample."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.trunk = self.add_module("trunk", DiscriminatorTrunk(spec, rng, dtype))
        self.head = self.add_module("head", Dense(self.trunk.out_channels, 1, rng, dtype))

    def block_outputs(self, x: Tensor) -> List[Tensor]:
        return self.trunk.block_outputs(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.trunk(x)).reshape(x.shape[0])


class Auxiliary(Module):
    """Posterior Q(c|x) as a K-way softmax over trunk features."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32,
                 trunk: Optional[DiscriminatorTrunk] = None):
        super().__init__()
        self.spec = spec
        self.shared_trunk = trunk is not None
        if trunk is None:
            trunk = self.add_module("trunk", DiscriminatorTrunk(spec, rng, dtype))
        self.trunk = trunk
        self.head = self.add_module("head", Dense(trunk.out_channels, spec.out_features, rng, dtype))

    def logits(self, x: Tensor) -> Tensor:
        return self.head(self.trunk(x))

    def forward(self, x: Tensor) -> Tensor:
        return ad.softmax(self.logits(x))


def build_network(spec: NetworkSpec, init_seed: int, dtype=np.float32,
                  trunk: Optional[DiscriminatorTrunk] = None) -> Module:
    """
    Build and initialize a network (He-normal weights, zero biases).

    Args:
        spec: Architecture description
        init_seed: Seed for weight initialization
        dtype: float32 or float64
        trunk: Existing discriminator trunk to share (auxiliary role only)

    Raises:
        NetworkSpecError: If the spec does not chain
    """
    validate_spec(spec)
    rng = np.random.default_rng(init_seed)
    if spec.role == "generator":
        net: Module = Generator(spec, rng, dtype)
    elif spec.role == "discriminator":
        net = Discriminator(spec, rng, dtype)
    else:
        if trunk is not None and trunk.out_channels != spec.blocks[-1].out_channels:
            raise NetworkSpecError("shared trunk width does not match the auxiliary spec")
        net = Auxiliary(spec, rng, dtype, trunk=trunk)
    debug_log(f"Built {spec.role} with {net.parameter_count()} parameters")
    return net


@dataclass
class GanNetworks:
    generator: Generator
    discriminator: Discriminator
    auxiliary: Auxiliary

    def modules(self) -> Dict[str, Module]:
        return {"G": self.generator, "D": self.discriminator, "Q": self.auxiliary}

    def named_arrays(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for prefix, module in self.modules().items():
            for name, arr in module.state_dict().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def train(self, mode: bool = True) -> None:
        for module in self.modules().values():
            module.train(mode)


def build_networks(cfg: TrainingConfig) -> GanNetworks:
    """Build G, D and Q for a training configuration."""
    dtype = np.dtype(cfg.precision).type
    seeds = np.random.SeedSequence(cfg.seed).generate_state(3)
    generator = build_network(generator_spec(cfg.model, cfg.K, cfg.dim_z), int(seeds[0]), dtype)
    discriminator = build_network(discriminator_spec(cfg.model), int(seeds[1]), dtype)
    trunk = discriminator.trunk if cfg.model.share_trunk else None
    auxiliary = build_network(auxiliary_spec(cfg.model, cfg.K), int(seeds[2]), dtype, trunk=trunk)
    return GanNetworks(generator, discriminator, auxiliary)


@dataclass
class NoiseVector:
    """A batch of generator inputs [one-hot c, z]."""
    codes: np.ndarray
    categorical: np.ndarray
    gaussian: np.ndarray

    @property
    def batch(self) -> int:
        return len(self.codes)

    @property
    def K(self) -> int:
        return self.categorical.shape[1]

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.concatenate([self.categorical, self.gaussian], axis=1).astype(dtype)

    def as_tensor(self, dtype=np.float64) -> Tensor:
        return Tensor(self.as_array(dtype))


def one_hot(codes: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((len(codes), K))
    out[np.arange(len(codes)), codes] = 1.0
    return out


def sample_noise(batch: int, K: int, dim_z: int, rng: np.random.Generator) -> NoiseVector:
    """Draw uniform categorical codes and standard-normal z."""
    if batch < 1 or K < 1 or dim_z < 1:
        raise ValueError(f"sample_noise: batch, K and dim_z must be >= 1, got {batch}, {K}, {dim_z}")
    codes = rng.integers(0, K, size=batch)
    gaussian = rng.standard_normal((batch, dim_z))
    return NoiseVector(codes, one_hot(codes, K), gaussian)


def fixed_code_noise(codes: Sequence[int], gaussian: np.ndarray, K: int) -> NoiseVector:
    """Noise with chosen codes and z rows (for montages)."""
    codes = np.asarray(codes, dtype=np.int64)
    gaussian = np.asarray(gaussian, dtype=np.float64)
    if gaussian.shape[0] != len(codes):
        raise ValueError(f"fixed_code_noise: {len(codes)} codes but {gaussian.shape[0]} z rows")
    if np.any(codes < 0) or np.any(codes >= K):
        raise ValueError(f"fixed_code_noise: codes must lie in [0, {K})")
    return NoiseVector(codes, one_hot(codes, K), gaussian)


@dataclass
class AdamState:
    """First and second moment estimates for a parameter list."""
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.values) for p in params], [np.zeros_like(p.values) for p in params], 0)


def adam_step(params: Sequence[Tensor], grads: Union[GradientMap, Sequence[Optional[np.ndarray]]],
              state: AdamState, cfg: AdamConfig, t: Optional[int] = None) -> AdamState:
    """
    Apply one bias-corrected Adam update in place.

    Parameters missing from a GradientMap are treated as having zero gradient.

    Raises:
        ValueError: If moment or gradient shapes do not match parameters, or t < 1
    """
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError(f"adam_step: step index must be >= 1, got {t}")
    if len(state.m) != len(params) or len(state.v) != len(params):
        raise ValueError(f"adam_step: state holds {len(state.m)} moments for {len(params)} parameters")
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        if isinstance(grads, GradientMap):
            g = grads.get(p)
            g = np.zeros_like(p.values) if g is None else g.values
        else:
            g = np.zeros_like(p.values) if grads[i] is None else np.asarray(grads[i])
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"adam_step: parameter {i} has shape {p.shape}, gradient {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        p.values -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.dtype)
    state.t = t
    return state


@contextmanager
def frozen(*modules: Module) -> Iterator[None]:
    """Temporarily stop parameters of the given modules from requiring grad."""
    params = [p for m in modules for p in m.parameters()]
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad = flag
