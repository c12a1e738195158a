"""Minimal module system on top of :mod:`glossattn.numerics`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


class Module:
    """Parameter container.

    Any :class:`Tensor` attribute is state (saved in checkpoints); the ones
    with ``requires_grad`` are trainable parameters.  Attributes that are
    modules or lists of modules are walked recursively, in assignment order.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_tensors(prefix + name + ".")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.named_tensors() if t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, t in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
            t.data = value.copy()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(xavier_uniform(rng, d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight)
        return y if self.bias is None else nx.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class BatchNorm(Module):
    """Feature-wise batch norm over every (unmasked) position in the batch."""

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.running_mean = Tensor(np.zeros(d))
        self.running_var = Tensor(np.ones(d))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return nx.batch_norm(
            x,
            self.gain,
            self.bias,
            self.running_mean.data,
            self.running_var.data,
            self.training,
            mask=mask,
            momentum=self.momentum,
            eps=self.eps,
        )


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.table = Tensor(xavier_uniform(rng, n, d), requires_grad=True)

    def forward(self, ids) -> Tensor:
        return nx.embedding(self.table, ids)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.inner = Linear(d, hidden, rng)
        self.outer = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(nx.relu(self.inner(x)))
