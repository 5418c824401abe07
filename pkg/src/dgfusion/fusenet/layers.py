"""Parameter store and functional building blocks on diffmath tensors."""
from __future__ import annotations

import math
import zlib
from typing import Iterator

import numpy as np

from .. import diffmath as dm
from ..diffmath import Tensor


class Params:
    """Named parameters, each initialised from its own (seed, name) stream.

    Per-name streams keep every tensor identical across configurations that
    add or remove other tensors.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._p: dict[str, Tensor] = {}

    def new(self, name: str, shape: tuple[int, ...], init: str = "he", fan_in: int | None = None,
            value: float = 0.0) -> Tensor:
        if name in self._p:
            raise KeyError(f"duplicate parameter {name}")
        rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        if init == "he":
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif init == "xavier":
            data = rng.normal(0.0, math.sqrt(1.0 / fan_in), size=shape)
        elif init == "small":
            data = rng.normal(0.0, 0.02, size=shape)
        elif init == "const":
            data = np.full(shape, value)
        else:
            raise ValueError(f"unknown init {init}")
        t = Tensor(data, requires_grad=True, name=name)
        self._p[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __iter__(self) -> Iterator[str]:
        return iter(self._p)

    def __len__(self) -> int:
        return len(self._p)

    def items(self):
        return self._p.items()

    def values(self):
        return self._p.values()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._p if n.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        return sum(self._p[n].size for n in self.names(prefix))

    def zero_grad(self) -> None:
        for t in self._p.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._p.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._p):
            missing = sorted(set(self._p) - set(state))
            extra = sorted(set(state) - set(self._p))
            raise KeyError(f"parameter mismatch: missing {missing[:5]} extra {extra[:5]}")
        for n, arr in state.items():
            if arr.shape != self._p[n].shape:
                raise ValueError(f"{n}: shape {arr.shape} != {self._p[n].shape}")
            self._p[n].data = np.array(arr, dtype=np.float64)


# -- parameter declarations ---------------------------------------------------------


def declare_linear(p: Params, name: str, d_in: int, d_out: int, bias: bool = True, init: str = "xavier") -> None:
    p.new(f"{name}.w", (d_in, d_out), init, fan_in=d_in)
    if bias:
        p.new(f"{name}.b", (d_out,), "const")


def declare_conv(p: Params, name: str, c_in: int, c_out: int, k: int, bias: bool = True, init: str = "he") -> None:
    p.new(f"{name}.w", (c_out, c_in, k, k), init)
    if bias:
        p.new(f"{name}.b", (c_out,), "const")


def declare_layernorm(p: Params, name: str, d: int) -> None:
    p.new(f"{name}.g", (d,), "const", value=1.0)
    p.new(f"{name}.b", (d,), "const")


def declare_attention(p: Params, name: str, d: int) -> None:
    # no key bias: it shifts every score of a query equally, so softmax ignores it
    for proj in ("q", "k", "v", "o"):
        declare_linear(p, f"{name}.{proj}", d, d, bias=proj != "k")


def declare_mlp(p: Params, name: str, d: int, ratio: int) -> None:
    declare_linear(p, f"{name}.fc1", d, d * ratio, init="he")
    declare_linear(p, f"{name}.fc2", d * ratio, d)


# -- functional blocks ----------------------------------------------------------------


def linear(p: Params, name: str, x: Tensor) -> Tensor:
    y = dm.matmul(x, p[f"{name}.w"])
    if f"{name}.b" in p:
        y = dm.add(y, p[f"{name}.b"])
    return y


def conv(p: Params, name: str, x: Tensor, pad_mode: str = "zero") -> Tensor:
    b = p[f"{name}.b"] if f"{name}.b" in p else None
    return dm.conv2d(x, p[f"{name}.w"], b, pad_mode=pad_mode)


def layernorm(p: Params, name: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = dm.mean(x, axis=-1, keepdims=True)
    xc = dm.sub(x, mu)
    var = dm.mean(dm.mul(xc, xc), axis=-1, keepdims=True)
    y = dm.div(xc, dm.sqrt(dm.add(var, eps)))
    return dm.add(dm.mul(y, p[f"{name}.g"]), p[f"{name}.b"])


class AttentionRecorder:
    """Collects attention probability arrays while active (tests, diagnostics)."""

    active: list | None = None

    def __enter__(self):
        self.maps: list[np.ndarray] = []
        AttentionRecorder.active = self.maps
        return self

    def __exit__(self, *exc):
        AttentionRecorder.active = None
        return False


def attention(p: Params, name: str, q_in: Tensor, kv_in: Tensor, heads: int) -> Tensor:
    """Multi-head attention; q_in (B, Tq, D), kv_in (B, Tk, D)."""
    b, tq, d = q_in.shape
    tk = kv_in.shape[1]
    hd = d // heads

    def split(x: Tensor, t: int) -> Tensor:
        return dm.transpose(dm.reshape(x, (b, t, heads, hd)), (0, 2, 1, 3))

    q = split(linear(p, f"{name}.q", q_in), tq)
    k = split(linear(p, f"{name}.k", kv_in), tk)
    v = split(linear(p, f"{name}.v", kv_in), tk)
    scores = dm.mul(dm.matmul(q, dm.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    att = dm.softmax(scores, axis=-1)
    if AttentionRecorder.active is not None:
        AttentionRecorder.active.append(att.data.copy())
    out = dm.reshape(dm.transpose(dm.matmul(att, v), (0, 2, 1, 3)), (b, tq, d))
    return linear(p, f"{name}.o", out)


def mlp(p: Params, name: str, x: Tensor) -> Tensor:
    return linear(p, f"{name}.fc2", dm.gelu(linear(p, f"{name}.fc1", x)))
