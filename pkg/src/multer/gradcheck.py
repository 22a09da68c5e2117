"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward


class KinkProximityError(RuntimeError):
    """A relu pre-activation sits too close to zero for finite differences to be valid."""


def relu_margin(loss: Tensor, tape: Tape | None = None) -> float:
    """Smallest |pre-activation| over every relu on the tape (inf when there are none)."""
    tape = tape or Tape.trace(loss)
    margin = np.inf
    for rec in tape.records():
        if rec.op == "relu":
            margin = min(margin, float(np.abs(rec.saved["input"]).min()))
    return margin


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    corrupt: Callable[[list[np.ndarray]], None] | None = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` must rebuild its graph from ``params`` on every call.  ``corrupt``
    lets tests tamper with the analytic gradients (negative control).
    """
    for p in params:
        p.grad = None
    loss = f()
    tape = Tape.trace(loss)
    if relu_margin(loss, tape) <= 10 * h:
        raise KinkProximityError(f"relu pre-activation within {10 * h:g} of zero; resample the point")
    backward(loss, tape, inputs=params)
    analytic = [p.grad.copy() for p in params]
    if corrupt is not None:
        corrupt(analytic)

    # finite differences need values only, so skip building records
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        return _numeric_compare(f, params, analytic, h)
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def _numeric_compare(f, params, analytic, h) -> float:
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(gflat[i] - numeric) / max(1.0, abs(numeric)))
    return worst


def grad_check_resampling(
    make: Callable[[np.random.Generator], tuple[Callable[[], Tensor], Sequence[Tensor]]],
    rng: np.random.Generator,
    h: float = 1e-4,
    max_tries: int = 50,
    corrupt=None,
) -> float:
    """Draw instances from ``make`` until one clears the relu kink margin, then check it."""
    for _ in range(max_tries):
        f, params = make(rng)
        try:
            return grad_check(f, params, h=h, corrupt=corrupt)
        except KinkProximityError:
            continue
    raise KinkProximityError(f"no kink-free instance in {max_tries} draws")
