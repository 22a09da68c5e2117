"""Residual texture encoding: learnable codebook, soft assignment, aggregation.

Descriptor sets are ``[..., N, D]`` tensors; leading axes are batch axes and
row order within a set is irrelevant to every function here.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .params import Module

SMOOTHING_FLOOR = 1e-6


class Codebook(Module):
    """K codewords of dimension D with one positive smoothing factor each."""

    def __init__(self, K: int, D: int, rng: np.random.Generator):
        super().__init__()
        if K < 1 or D < 1:
            raise ContractError(f"codebook needs K >= 1 and D >= 1, got K={K}, D={D}")
        self.K, self.D = K, D
        bound = 1.0 / np.sqrt(K)
        self.codewords = self.add_param("codewords", rng.uniform(-bound, bound, size=(K, D)))
        # uniform on (0, 1]
        self.smoothing = self.add_param("smoothing", 1.0 - rng.uniform(0.0, 1.0, size=K))

    def clamp(self) -> None:
        np.maximum(self.smoothing.data, SMOOTHING_FLOOR, out=self.smoothing.data)


def _check_dims(x: Tensor, codewords: Tensor) -> None:
    if x.ndim < 2 or x.shape[-1] != codewords.shape[-1]:
        raise ContractError(f"descriptor dim {x.shape[-1:]} does not match codewords {codewords.shape}")
    if x.shape[-2] < 1:
        raise ContractError("descriptor set is empty")


def assign(x: Tensor, codewords: Tensor, smoothing: Tensor) -> Tensor:
    """Soft-assignment weights softmax_k(-s_k * ||x_i - c_k||^2), shape ``[..., N, K]``."""
    _check_dims(x, codewords)
    d2 = ad.pairwise_sqdist(x, codewords)
    return ad.softmax(ad.neg(ad.multiply(d2, smoothing)), axis=-1)


def aggregate(x: Tensor, a: Tensor, codewords: Tensor) -> Tensor:
    """Residual sums e_k = sum_i a_ik (x_i - c_k), shape ``[..., K, D]``."""
    _check_dims(x, codewords)
    if a.shape[:-1] != x.shape[:-1] or a.shape[-1] != codewords.shape[0]:
        raise ContractError(
            f"assignment {a.shape} inconsistent with descriptors {x.shape} / codewords {codewords.shape}"
        )
    return ad.residual_aggregate(x, a, codewords)


def encode(x: Tensor, codebook: Codebook) -> Tensor:
    """Flattened (k outer, d inner) and L2-normalized residual encoding, ``[..., K*D]``."""
    a = assign(x, codebook.codewords, codebook.smoothing)
    e = aggregate(x, a, codebook.codewords)
    flat = ad.reshape(e, e.shape[:-2] + (codebook.K * codebook.D,))
    return ad.l2_normalize(flat)


def descriptors(feature_map: Tensor) -> Tensor:
    """``[B, D, H, W]`` feature map -> ``[B, H*W, D]`` descriptor set."""
    B, D, H, W = feature_map.shape
    return ad.transpose(ad.reshape(feature_map, (B, D, H * W)), (0, 2, 1))
