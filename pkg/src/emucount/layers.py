"""Small parameter-holding building blocks over the autodiff engine."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class RunContext:
    """Per-call mode flags threaded through forward passes."""
    training: bool = False
    rng: np.random.Generator | None = None


EVAL = RunContext(training=False)


# uniform fan-in init; gain sqrt(2) (kaiming) for relu-followed layers,
# gain 1 for purely linear ones so activation variance does not compound
INIT_GAINS = {"relu": math.sqrt(2.0), "linear": 1.0}


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int,
                   init: str = "relu") -> np.ndarray:
    bound = INIT_GAINS[init] * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return fan_in_uniform(rng, shape, fan_in, init="relu")


class Module:
    """Base class tracking parameter tensors and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        else:
            self._params.pop(name, None)
            self._children.pop(name, None)
        object.__setattr__(self, name, value)

    def named_params(self, prefix=""):
        for n, p in self._params.items():
            yield prefix + n, p
        for n, child in self._children.items():
            yield from child.named_params(prefix + n + ".")

    def params(self):
        return [p for _, p in self.named_params()]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """y = x @ w + b with w stored (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias=True,
                 init: str = "linear"):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = Tensor(fan_in_uniform(rng, (in_dim, out_dim), in_dim, init),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = ad.add(y, self.b)
        return y


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride=1, padding=0, bias=True, init: str = "relu"):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(fan_in_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, init),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, stride=self.stride, padding=self.padding, bias=self.b)
