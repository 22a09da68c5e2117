"""Named parameters and their bit-exact serialization."""

from __future__ import annotations

import base64
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .autodiff import ContractError, Tensor

_MAGIC = b"MLTRPRM1"


@dataclass(frozen=True)
class Parameter:
    name: str
    tensor: Tensor


class Module:
    """Owns named leaf tensors plus child modules; names are dotted paths."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, data) -> Tensor:
        if name in self._params or name in self._children:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name: str, child: "Module") -> "Module":
        if name in self._params or name in self._children:
            raise ContractError(f"duplicate child name {name!r}")
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[Parameter]:
        for name, t in self._params.items():
            yield Parameter(prefix + name, t)
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p.tensor for p in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.tensor.data for p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = {p.name: p.tensor for p in self.named_parameters()}
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def check_unique(params: Iterable[Parameter]) -> None:
    seen: set[str] = set()
    for p in params:
        if p.name in seen:
            raise ContractError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)


def to_json_entries(params: Iterable[Parameter]) -> list[dict]:
    """Ordered ``{name, shape, data}`` entries; data is base64 little-endian float64."""
    params = list(params)
    check_unique(params)
    return [
        {
            "name": p.name,
            "shape": list(p.tensor.shape),
            "data": base64.b64encode(p.tensor.data.astype("<f8").tobytes()).decode("ascii"),
        }
        for p in params
    ]


def from_json_entries(entries: list[dict]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for e in entries:
        arr = np.frombuffer(base64.b64decode(e["data"]), dtype="<f8").astype(np.float64)
        shape = tuple(e["shape"])
        if arr.size != int(np.prod(shape)):
            raise ContractError(f"{e['name']}: {arr.size} values do not fill shape {shape}")
        out[e["name"]] = arr.reshape(shape)
    return out


def write_binary(params: Iterable[Parameter], fp: BinaryIO) -> None:
    """Flat layout: magic, count, then per entry name, ndim, extents, float64 data."""
    params = list(params)
    check_unique(params)
    fp.write(_MAGIC)
    fp.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        fp.write(struct.pack("<I", len(name)))
        fp.write(name)
        fp.write(struct.pack("<I", p.tensor.ndim))
        fp.write(struct.pack(f"<{p.tensor.ndim}Q", *p.tensor.shape))
        fp.write(p.tensor.data.astype("<f8").tobytes())


def read_binary(fp: BinaryIO) -> dict[str, np.ndarray]:
    if fp.read(len(_MAGIC)) != _MAGIC:
        raise ContractError("not a parameter file")
    (count,) = struct.unpack("<I", fp.read(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", fp.read(4))
        name = fp.read(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", fp.read(4))
        shape = struct.unpack(f"<{ndim}Q", fp.read(8 * ndim))
        size = int(np.prod(shape))
        out[name] = np.frombuffer(fp.read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    return out
