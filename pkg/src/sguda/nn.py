"""Layers with hand-written backward passes, Adam, and a step LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ShapeError, as_matrix

DOMAINS = ("source", "target")
SHARED = "shared"


class UsageError(RuntimeError):
    """A layer method was called out of order (e.g. backward before forward)."""


class Param:
    """A trainable array together with its gradient accumulator."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.array(data, dtype=DTYPE)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.data.shape})"


class Linear:
    """``y = x @ W + b`` with W of shape (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 name: str = "linear", bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        if rng is None:
            w = np.zeros((in_dim, out_dim))
        else:
            # He-normal: the layer usually feeds a ReLU
            w = rng.standard_normal((in_dim, out_dim)) * np.sqrt(2.0 / in_dim)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_dim)) if bias else None
        self._x = None

    def params(self) -> list[Param]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def forward(self, x, domain=None, mode="train") -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected {self.in_dim} input columns, got shape {x.shape}")
        self._x = x
        out = x @ self.weight.data
        if self.bias is not None:
            out = out + self.bias.data
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise UsageError(f"{self.name}: backward called before forward")
        self.weight.grad += self._x.T @ grad_out
        if self.bias is not None:
            self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.data.T


class ReLU:
    def __init__(self, name: str = "relu"):
        self.name = name
        self._mask = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x, domain=None, mode="train") -> np.ndarray:
        x = as_matrix(x)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise UsageError(f"{self.name}: backward called before forward")
        return np.where(self._mask, grad_out, 0.0)


@dataclass
class BNStats:
    mean: np.ndarray
    var: np.ndarray

    def copy(self) -> "BNStats":
        return BNStats(self.mean.copy(), self.var.copy())


class BatchNorm:
    """Batch normalization whose running statistics are kept per domain.

    ``gamma``/``beta`` are shared by all domains; only the running mean and
    variance live in per-domain slots. With ``domains=("shared",)`` the layer
    degenerates to ordinary batch norm and every domain tag maps to the single
    slot.
    """

    def __init__(self, dim: int, domains=DOMAINS, momentum: float = 0.1, eps: float = 1e-5,
                 name: str = "bn"):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(dim))
        self.beta = Param(f"{name}.beta", np.zeros(dim))
        self.stats: dict[str, BNStats] = {d: BNStats(np.zeros(dim), np.ones(dim)) for d in domains}
        self._cache = None

    @property
    def domains(self) -> tuple[str, ...]:
        return tuple(self.stats)

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def slot(self, domain: str) -> str:
        if domain in self.stats:
            return domain
        if SHARED in self.stats and domain in DOMAINS:
            return SHARED
        raise KeyError(f"{self.name}: unknown domain tag {domain!r}")

    def forward(self, x, domain: str = "source", mode: str = "train") -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.dim:
            raise ShapeError(f"{self.name}: expected {self.dim} columns, got shape {x.shape}")
        st = self.stats[self.slot(domain)]
        if mode == "train":
            n = x.shape[0]
            if n < 2:
                raise ValueError(f"{self.name}: train-mode batch norm needs batch size >= 2, got {n}")
            mu = x.mean(axis=0)
            xc = x - mu
            var = (xc * xc).mean(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = xc * inv_std
            m = self.momentum
            st.mean = (1.0 - m) * st.mean + m * mu
            # running variance uses the unbiased estimate
            st.var = (1.0 - m) * st.var + m * var * (n / (n - 1))
            self._cache = (xhat, inv_std)
        elif mode == "eval":
            xhat = (x - st.mean) / np.sqrt(st.var + self.eps)
            self._cache = None
        else:
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        return xhat * self.gamma.data + self.beta.data

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise UsageError(f"{self.name}: backward requires a preceding train-mode forward")
        xhat, inv_std = self._cache
        self.gamma.grad += (grad_out * xhat).sum(axis=0)
        self.beta.grad += grad_out.sum(axis=0)
        g = grad_out * self.gamma.data
        n = g.shape[0]
        return inv_std / n * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))

    def batchnorm_backward(self, grad_out: np.ndarray):
        """Return ``(grad_in, grad_gamma, grad_beta)`` for this call only."""
        g0, b0 = self.gamma.grad.copy(), self.beta.grad.copy()
        grad_in = self.backward(grad_out)
        return grad_in, self.gamma.grad - g0, self.beta.grad - b0


@dataclass
class LrSchedule:
    initial_lr: float = 0.00035
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1

    def lr_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        n = sum(1 for e in self.decay_epochs if e <= epoch)
        return self.initial_lr * self.decay_factor ** n


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    return schedule.lr_at(epoch)


@dataclass
class _Moments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class Adam:
    """Adam with L2 weight decay folded into the gradient.

    Moments and step counters are tracked per parameter, so a parameter added
    later (a freshly initialised classifier head) starts its own bias
    correction from step 1.
    """

    lr: float = 0.00035
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict = field(default_factory=dict)

    def reset(self, params) -> None:
        for p in params:
            self.state.pop(id(p), None)

    def step(self, params) -> None:
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name}")
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = _Moments(np.zeros_like(p.data), np.zeros_like(p.data))
            adam_update(p.data, p.grad, st, self.lr, self.weight_decay,
                        self.beta1, self.beta2, self.eps)


def adam_update(param: np.ndarray, grad: np.ndarray, st: _Moments, lr: float,
                weight_decay: float, beta1: float, beta2: float, eps: float) -> None:
    """In-place Adam update of ``param``."""
    if grad.shape != param.shape:
        raise ShapeError(f"adam: gradient shape {grad.shape} != parameter shape {param.shape}")
    g = grad + weight_decay * param if weight_decay else grad
    st.t += 1
    st.m *= beta1
    st.m += (1.0 - beta1) * g
    st.v *= beta2
    st.v += (1.0 - beta2) * g * g
    m_hat = st.m / (1.0 - beta1 ** st.t)
    v_hat = st.v / (1.0 - beta2 ** st.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(state: Adam, params, grads=None) -> list[Param]:
    """Functional form: optionally install ``grads`` then step ``params``."""
    params = list(params)
    if grads is not None:
        grads = list(grads)
        if len(grads) != len(params):
            raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
        for p, g in zip(params, grads):
            g = np.asarray(g, dtype=DTYPE)
            if g.shape != p.data.shape:
                raise ShapeError(f"adam_step: gradient for {p.name} has shape {g.shape}, expected {p.data.shape}")
            p.grad[...] = g
    state.step(params)
    return params
