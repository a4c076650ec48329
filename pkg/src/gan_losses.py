"""Wasserstein critic loss with gradient penalty, generator loss and the mutual-information term."""

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Module, NoiseVector, frozen, network_dtype

Network = Callable[[Tensor], Tensor]
LOG_GUARD = 1e-12

CSV_HEADER = ["iter", "L_D", "L_G", "L_Q", "wasserstein_estimate", "grad_norm_mean", "penalty_mean"]


@dataclass
class InterpolatedSample:
    """Points x_hat = eps * x_real + (1 - eps) * x_fake, one eps per sample."""
    epsilon: np.ndarray
    x_hat: Tensor


@dataclass
class PenaltyResult:
    penalty: Tensor
    sample: InterpolatedSample
    grad_norms: np.ndarray


@dataclass
class DiscriminatorLoss:
    loss: Tensor
    wasserstein_estimate: float
    penalty_mean: float
    grad_norm_mean: float


@dataclass
class LossReport:
    """Scalars reported for one training iteration."""
    L_D: float
    L_G: float
    L_Q: float
    wasserstein_estimate: float
    penalty_mean: float
    grad_norm_mean: float

    def to_row(self, iteration: int) -> list:
        return [iteration, self.L_D, self.L_G, self.L_Q, self.wasserstein_estimate,
                self.grad_norm_mean, self.penalty_mean]

    @classmethod
    def from_row(cls, row: list) -> "LossReport":
        _, l_d, l_g, l_q, w, norm, penalty = (float(v) for v in row)
        return cls(l_d, l_g, l_q, w, penalty, norm)

    def as_array(self) -> np.ndarray:
        return np.array([self.L_D, self.L_G, self.L_Q, self.wasserstein_estimate,
                         self.penalty_mean, self.grad_norm_mean], dtype=np.float64)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "LossReport":
        return cls(*(float(v) for v in values))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))


def _batch(values: Union[Tensor, np.ndarray], dtype) -> np.ndarray:
    arr = values.values if isinstance(values, Tensor) else np.asarray(values)
    return arr.astype(dtype, copy=False)


def _noise_tensor(noise: Union[NoiseVector, np.ndarray, Tensor], dtype) -> Tensor:
    if isinstance(noise, NoiseVector):
        return noise.as_tensor(dtype)
    return Tensor(_batch(noise, dtype))


def interpolate(x_real: np.ndarray, x_fake: np.ndarray, epsilon: np.ndarray) -> InterpolatedSample:
    """Build x_hat as a fresh leaf that requires grad."""
    eps = np.asarray(epsilon, dtype=x_real.dtype).reshape((-1,) + (1,) * (x_real.ndim - 1))
    x_hat = eps * x_real + (1 - eps) * x_fake
    return InterpolatedSample(np.asarray(epsilon), Tensor(x_hat, requires_grad=True))


def gradient_penalty(D: Network, x_real, x_fake, lambda1: float, p: float,
                     rng: np.random.Generator, epsilon: Optional[np.ndarray] = None) -> PenaltyResult:
    """
    lambda1 * mean over the batch of (||grad D(x_hat)||_p - 1)^2.

    Args:
        D: Critic mapping a batch to one scalar per sample
        x_real: Real batch
        x_fake: Generated batch of the same shape (treated as a constant)
        lambda1: Penalty weight
        p: Norm order
        rng: Source of the per-sample interpolation weights
        epsilon: Fixed interpolation weights, overriding rng

    Raises:
        ValueError: If lambda1 < 0
        ShapeError: If the batches differ in shape
    """
    if lambda1 < 0:
        raise ValueError(f"gradient_penalty: lambda1 must be >= 0, got {lambda1}")
    dtype = network_dtype(D)
    real, fake = _batch(x_real, dtype), _batch(x_fake, dtype)
    if real.shape != fake.shape:
        raise ShapeError(f"gradient_penalty: real batch {real.shape} vs fake batch {fake.shape}")
    if epsilon is None:
        epsilon = rng.uniform(0.0, 1.0, size=real.shape[0])
    sample = interpolate(real, fake, epsilon)
    with ad.ensure_graph():
        scores = D(sample.x_hat)
        norms = ad.grad_norm(scores, sample.x_hat, p=p, create_graph=True)
        deviation = norms - 1.0
        penalty = ad.mean(deviation * deviation) * lambda1
    return PenaltyResult(penalty, sample, norms.values.copy())


def discriminator_loss(D: Network, G: Network, batch_real, noise, lambda1: float, p: float,
                       rng: np.random.Generator) -> DiscriminatorLoss:
    """
    mean D(G(z, c)) - mean D(x) + gradient penalty.

    The generator output is computed without recording, so gradients
    reach only the critic.

    Raises:
        ValueError: On an empty batch or mismatched noise batch size
    """
    dtype = network_dtype(D, G)
    real = _batch(batch_real, dtype)
    if real.shape[0] == 0:
        raise ValueError("discriminator_loss: empty batch")
    z = _noise_tensor(noise, dtype)
    if z.shape[0] != real.shape[0]:
        raise ValueError(f"discriminator_loss: {z.shape[0]} noise rows for {real.shape[0]} real samples")
    with ad.no_record():
        fake = G(z).values
    with ad.ensure_graph():
        d_real = ad.mean(D(Tensor(real)))
        d_fake = ad.mean(D(Tensor(fake)))
        result = gradient_penalty(D, real, fake, lambda1, p, rng)
        loss = d_fake - d_real + result.penalty
    return DiscriminatorLoss(
        loss=loss,
        wasserstein_estimate=float(d_real.values - d_fake.values),
        penalty_mean=float(result.penalty.values),
        grad_norm_mean=float(result.grad_norms.mean()),
    )


def generator_loss(D: Network, G: Network, noise) -> Tensor:
    """-mean D(G(z, c)); the critic's parameters are frozen."""
    dtype = network_dtype(G, D)
    z = _noise_tensor(noise, dtype)
    critic = [D] if isinstance(D, Module) else []
    with ad.ensure_graph(), frozen(*critic):
        return -ad.mean(D(G(z)))


def _true_code_probability(Q: Network, G: Network, noise) -> Tensor:
    dtype = network_dtype(G, Q)
    if isinstance(noise, NoiseVector):
        categorical = noise.categorical
    else:
        raise TypeError("auxiliary terms need a NoiseVector carrying the categorical codes")
    posterior = Q(G(_noise_tensor(noise, dtype)))
    if posterior.shape != categorical.shape:
        raise ShapeError(f"auxiliary: posterior shape {posterior.shape} vs codes {categorical.shape}")
    picked = (posterior * Tensor(categorical.astype(posterior.dtype))).sum(axis=1)
    return ad.clamp_min(picked, LOG_GUARD)


def auxiliary_loss(Q: Network, G: Network, noise: NoiseVector, lambda2: float) -> Tensor:
    """
    lambda2 * mean of -log Q(c | G(z, c)), posterior clamped at 1e-12.

    Gradients reach both G and Q.
    """
    with ad.ensure_graph():
        prob = _true_code_probability(Q, G, noise)
        return -ad.mean(ad.log(prob)) * lambda2


def mutual_information_lower_bound(Q: Network, G: Network, noise: NoiseVector, K: int) -> Tensor:
    """mean log Q(c | G(z, c)) + ln K, using H(c) = ln K for the uniform prior."""
    if noise.K != K:
        raise ShapeError(f"mutual_information_lower_bound: noise has {noise.K} categories, expected {K}")
    with ad.ensure_graph():
        prob = _true_code_probability(Q, G, noise)
        return ad.mean(ad.log(prob)) + math.log(K)
