"""Small fully connected building blocks on top of the tape."""
from __future__ import annotations

import numpy as np

from . import tensor as T


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / np.sqrt(max(n_in, 1))
        if zero:
            w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
        else:
            w = rng.uniform(-bound, bound, (n_in, n_out))
            b = rng.uniform(-bound, bound, n_out)
        self.weight = T.tensor(w, requires_grad=True)
        self.bias = T.tensor(b, requires_grad=True)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def np_forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.data + self.bias.data

    def parameters(self) -> list:
        return [self.weight, self.bias]


class Module:
    """Anything exposing ``parameters()``; adds casting and flat get/set."""

    def parameters(self) -> list:
        raise NotImplementedError

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_arrays(self) -> list:
        return [p.data for p in self.parameters()]

    def load_arrays(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a)
            if a.shape != p.shape:
                raise ValueError(f"parameter shape mismatch: {a.shape} vs {p.shape}")
            p.data = a.astype(p.data.dtype)


class MLP(Module):
    """Two ReLU hidden layers followed by one or more linear output heads."""

    def __init__(self, n_in: int, hidden: int, head_sizes, rng: np.random.Generator, zero_heads: bool = False):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.heads = [Linear(hidden, n, rng, zero=zero_heads) for n in head_sizes]
        self.calls = 0

    def trunk(self, x: T.Tensor) -> T.Tensor:
        return T.relu(self.fc2(T.relu(self.fc1(x))))

    def __call__(self, x: T.Tensor) -> list:
        self.calls += 1
        h = self.trunk(x)
        return [head(h) for head in self.heads]

    def np_forward(self, x: np.ndarray) -> list:
        self.calls += 1
        h = np.maximum(self.fc1.np_forward(x), 0.0)
        h = np.maximum(self.fc2.np_forward(h), 0.0)
        return [head.np_forward(h) for head in self.heads]

    def parameters(self) -> list:
        ps = self.fc1.parameters() + self.fc2.parameters()
        for h in self.heads:
            ps += h.parameters()
        return ps
