"""Learnable encoding module: encoding branch x pooling branch -> C features."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .encoding import Codebook, descriptors, encode
from .params import Module


@dataclass(frozen=True)
class LemConfig:
    D: int
    K: int
    latent: int = 64
    C: int = 128

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 1:
                raise ContractError(f"LemConfig.{name} must be positive, got {v}")


class Affine(Module):
    """``y = x @ weight + bias`` with weight stored (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        std = np.sqrt(gain / n_in)
        self.weight = self.add_param("weight", rng.normal(0.0, std, size=(n_in, n_out)))
        self.bias = self.add_param("bias", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ContractError(f"affine map expects {self.n_in} inputs, got {x.shape[-1]}")
        return ad.linear(x, self.weight, self.bias)


def bilinear_combine(u: Tensor, v: Tensor) -> Tensor:
    """Flattened outer product of two equal-length latent vectors (u index outer)."""
    if u.shape != v.shape:
        raise ContractError(f"bilinear_combine needs equal shapes, got {u.shape} and {v.shape}")
    return ad.outer_product(u, v)


class LEM(Module):
    def __init__(self, config: LemConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c = config
        self.codebook = self.add_child("codebook", Codebook(c.K, c.D, rng))
        self.fc1 = self.add_child("fc1", Affine(c.K * c.D, c.latent, rng, gain=2.0))
        self.fc2 = self.add_child("fc2", Affine(c.D, c.latent, rng, gain=2.0))
        self.fc3 = self.add_child("fc3", Affine(c.latent * c.latent, c.C, rng))

    def __call__(self, fm: Tensor) -> Tensor:
        return lem_forward(fm, self)

    def clamp(self) -> None:
        self.codebook.clamp()


def lem_forward(fm: Tensor, lem: LEM) -> Tensor:
    """Feature map ``[B, D, H, W]`` -> ``[B, C]`` whatever H and W are."""
    if fm.ndim != 4 or fm.shape[1] != lem.config.D:
        raise ContractError(f"LEM expects {lem.config.D} channels, got feature map {fm.shape}")
    local = ad.relu(lem.fc1(encode(descriptors(fm), lem.codebook)))
    pooled = ad.relu(lem.fc2(ad.avgpool_global(fm)))
    return lem.fc3(bilinear_combine(local, pooled))
