"""Objective terms of the three-player game and the instance-noise schedule."""

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from trisr import tensor as T
from trisr.exceptions import ShapeError
from trisr.tensor import Tensor

LOG_EPS = 1e-12

# Stream ids for counter-keyed noise; real and fake get independent draws
ROLE_REAL = 0
ROLE_FAKE = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """sigma(t) = max(0, sigma0 * (1 - t / T)). T = 0 means no noise at all."""

    sigma0: float = 1.0
    total_iters: int = 1

    def __post_init__(self):
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")

    def sigma(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError("iteration must be >= 0")
        if self.total_iters == 0 or iteration >= self.total_iters:
            return 0.0
        return max(0.0, self.sigma0 * (1.0 - iteration / self.total_iters))


def _same_shape(x: Tensor, y: Tensor, what: str) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{what}: shapes {x.shape} and {y.shape} differ")


def pixel_loss(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "pixel_loss")
    return T.l1(x, y)


def perceptual_loss(fe_forward: Callable[[Tensor], Tensor], x: Tensor, y: Tensor) -> Tensor:
    """l1 between feature maps, averaged over the feature tensor's own elements."""
    _same_shape(x, y, "perceptual_loss")
    return T.l1(fe_forward(x), fe_forward(y))


def d_ra(c_real: Tensor, c_fake: Tensor) -> Tuple[Tensor, Tensor]:
    """Relativistic average outputs (D_Ra(x, y), D_Ra(y, x)) from critic logits."""
    real_rel = T.sub(c_real, T.mean(c_fake))
    fake_rel = T.sub(c_fake, T.mean(c_real))
    return T.sigmoid(real_rel), T.sigmoid(fake_rel)


def _ragan(c_a: Tensor, c_b: Tensor) -> Tensor:
    # -E[log D_Ra(a, b)] - E[log(1 - D_Ra(b, a))]
    d_ab, d_ba = d_ra(c_a, c_b)
    first = T.mean(T.log(d_ab, eps=LOG_EPS))
    second = T.mean(T.log(T.sub(1.0, d_ba), eps=LOG_EPS))
    return T.mul(T.add(first, second), -1.0)


def ragan_d_loss(c_real: Tensor, c_fake: Tensor) -> Tensor:
    return _ragan(c_real, c_fake)


def ragan_g_loss(c_real: Tensor, c_fake: Tensor) -> Tensor:
    return _ragan(c_fake, c_real)


def noise_rng(seed: int, iteration: int, role: int) -> np.random.Generator:
    """Independent stream per (seed, iteration, role); draw order elsewhere cannot affect it."""
    return np.random.default_rng([seed, iteration, role])


def add_instance_noise(
    t: Tensor,
    schedule: NoiseSchedule,
    iteration: int,
    seed: int,
    role: int = ROLE_REAL,
) -> Tensor:
    """t + eps with eps ~ N(0, sigma(iteration)^2) i.i.d.; returns t itself when sigma is 0."""
    sigma = schedule.sigma(iteration)
    if sigma == 0.0:
        return t
    eps = noise_rng(seed, iteration, role).normal(0.0, sigma, size=t.shape).astype(t.dtype)
    return T.add(t, Tensor._wrap(eps))


def generator_objective(
    perc: Tensor,
    pix: Tensor,
    ragan_g: Tensor,
    alpha: float = 0.01,
    beta: float = 0.005,
) -> Tensor:
    return T.add(T.add(perc, T.mul(pix, alpha)), T.mul(ragan_g, beta))
