"""Finite-difference checks for every primitive, the encoding layer, one LEM and a tiny network."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .encoding import Codebook, encode
from .gradcheck import grad_check_resampling
from .lem import LEM, LemConfig, lem_forward
from .network import BackboneConfig, MulterConfig, MulterNet

TOLERANCE = 1e-4
STEP = 1e-4


def _leaf(rng, *shape, low=None):
    if low is None:
        return ad.Tensor(rng.normal(size=shape), requires_grad=True)
    return ad.Tensor(rng.uniform(low, 1.0, size=shape), requires_grad=True)


def _dims(rng, n, hi=6):
    return [int(v) for v in rng.integers(1, hi + 1, size=n)]


def _weighted_sum(y: ad.Tensor, rng) -> Callable[[ad.Tensor], ad.Tensor]:
    """Scalar head with fixed random weights so every output coordinate matters."""
    w = rng.normal(size=y.shape)
    return lambda out: ad.sum(ad.multiply(out, w))


def _wrap(op, inputs, rng):
    head = _weighted_sum(op(), rng)
    return (lambda: head(op())), inputs


def make_matmul(rng):
    M, P, Q = _dims(rng, 3)
    a, b = _leaf(rng, M, P), _leaf(rng, P, Q)
    return _wrap(lambda: ad.matmul(a, b), [a, b], rng)


def make_conv2d(rng):
    N, Cin, Cout = _dims(rng, 3, 3)
    kh, kw = _dims(rng, 2, 3)
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    H = int(rng.integers(max(1, kh - 2 * padding), 7))
    W = int(rng.integers(max(1, kw - 2 * padding), 7))
    x, k = _leaf(rng, N, Cin, H, W), _leaf(rng, Cout, Cin, kh, kw)
    return _wrap(lambda: ad.conv2d(x, k, stride, padding), [x, k], rng)


def make_softmax(rng):
    shape = _dims(rng, 2)
    x = _leaf(rng, *shape)
    axis = int(rng.integers(0, 2))
    return _wrap(lambda: ad.softmax(x, axis=axis), [x], rng)


def make_avgpool(rng):
    x = _leaf(rng, *_dims(rng, 4, 4))
    return _wrap(lambda: ad.avgpool_global(x), [x], rng)


def make_add(rng):
    shape = _dims(rng, 2)
    a, b = _leaf(rng, *shape), _leaf(rng, shape[-1])
    return _wrap(lambda: ad.add(a, b), [a, b], rng)


def make_multiply(rng):
    shape = _dims(rng, 2)
    a, b = _leaf(rng, *shape), _leaf(rng, *shape)
    return _wrap(lambda: ad.multiply(a, b), [a, b], rng)


def make_relu(rng):
    x = _leaf(rng, *_dims(rng, 2))
    return _wrap(lambda: ad.relu(x), [x], rng)


def make_concat(rng):
    rows = int(rng.integers(1, 7))
    a, b = _leaf(rng, rows, int(rng.integers(1, 7))), _leaf(rng, rows, int(rng.integers(1, 7)))
    return _wrap(lambda: ad.concat([a, b], axis=-1), [a, b], rng)


def make_reshape(rng):
    m, n = _dims(rng, 2)
    x = _leaf(rng, m, n)
    return _wrap(lambda: ad.reshape(x, (n, m)), [x], rng)


def make_outer(rng):
    A, B = _dims(rng, 2)
    u, v = _leaf(rng, A), _leaf(rng, B)
    return _wrap(lambda: ad.outer_product(u, v), [u, v], rng)


def make_l2_normalize(rng):
    x = _leaf(rng, *_dims(rng, 2))
    return _wrap(lambda: ad.l2_normalize(x), [x], rng)


def make_pairwise(rng):
    N, K, D = _dims(rng, 3)
    x, c = _leaf(rng, N, D), _leaf(rng, K, D)
    return _wrap(lambda: ad.pairwise_sqdist(x, c), [x, c], rng)


def make_residual_aggregate(rng):
    N, K, D = _dims(rng, 3)
    x, c = _leaf(rng, N, D), _leaf(rng, K, D)
    a = _leaf(rng, N, K, low=0.0)
    return _wrap(lambda: ad.residual_aggregate(x, a, c), [x, a, c], rng)


def make_cross_entropy(rng):
    B, n = _dims(rng, 2)
    logits = _leaf(rng, B, n)
    labels = rng.integers(0, n, size=B)
    return (lambda: ad.cross_entropy(logits, labels)), [logits]


def make_encoding(rng):
    N, K, D = _dims(rng, 3)
    x = _leaf(rng, N, D)
    cb = Codebook(K, D, rng)
    w = rng.normal(size=(K * D, 3))
    params = [x] + cb.parameters()
    return (lambda: ad.sum(ad.matmul(ad.reshape(encode(x, cb), (1, -1)), w))), params


def _randomize(params, rng, scale=0.5):
    for p in params:
        p.data[...] = rng.normal(scale=scale, size=p.shape)


def make_lem(rng):
    D, K = _dims(rng, 2, 4)
    H, W = _dims(rng, 2, 4)
    lem = LEM(LemConfig(D=D, K=K, latent=3, C=4), rng)
    _randomize(lem.parameters(), rng)
    lem.clamp()
    fm = _leaf(rng, 1, D, H, W)
    w = rng.normal(size=(1, 4))
    return (lambda: ad.sum(ad.multiply(lem_forward(fm, lem), w))), [fm] + lem.parameters()


TINY = MulterConfig(n_classes=3, C=6, latent=4, K=2, backbone=BackboneConfig.tiny())


def make_multer(rng):
    net = MulterNet(TINY, rng)
    _randomize(net.parameters(), rng)
    net.clamp()
    image = rng.normal(size=(1, 1, 8, 8))
    label = rng.integers(0, TINY.n_classes, size=1)
    return (lambda: ad.cross_entropy(net(image), label)), net.parameters()


PRIMITIVES: dict[str, Callable] = {
    "matmul": make_matmul,
    "conv2d": make_conv2d,
    "softmax": make_softmax,
    "avgpool_global": make_avgpool,
    "add": make_add,
    "multiply": make_multiply,
    "relu": make_relu,
    "concat": make_concat,
    "reshape": make_reshape,
    "outer_product": make_outer,
    "l2_normalize": make_l2_normalize,
    "pairwise_sqdist": make_pairwise,
    "residual_aggregate": make_residual_aggregate,
    "cross_entropy": make_cross_entropy,
}

TARGETS: dict[str, Callable] = {
    **PRIMITIVES,
    "encoding": make_encoding,
    "lem": make_lem,
    "multer_tiny": make_multer,
}


@dataclass
class CheckResult:
    target: str
    instances: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= TOLERANCE)


def _corrupt(grads: list[np.ndarray]) -> None:
    grads[0].reshape(-1)[0] += 1.0


def run_suite(
    seed: int = 0,
    instances: int = 20,
    targets: list[str] | None = None,
    corrupt: str | None = None,
) -> list[CheckResult]:
    """Check every target over ``instances`` random draws; one stream per target."""
    results = []
    for i, name in enumerate(targets or list(TARGETS)):
        make = TARGETS[name]
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        worst = 0.0
        for _ in range(instances):
            err = grad_check_resampling(make, rng, h=STEP, corrupt=_corrupt if corrupt == name else None)
            worst = max(worst, err)
        results.append(CheckResult(name, instances, float(worst), time.perf_counter() - start))
    return results
