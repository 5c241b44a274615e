"""Parameter containers, layers and the Adam optimiser."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .conv import conv, conv_transpose
from .tensor import Tensor, get_default_dtype


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


def buffer(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()))


class Module:
    """Holds parameters (tensors with ``requires_grad``), buffers (other
    tensors) and sub-modules as plain attributes, torch style."""

    def named_tensors(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".")
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield from v.named_tensors(f"{name}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors(prefix)}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        own = dict(self.named_tensors(prefix))
        missing = [k for k in own if k not in state]
        if strict and missing:
            raise KeyError(f"missing tensors in state: {missing[:5]}")
        for name, t in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != t.shape:
                    raise ValueError(f"{name}: shape {arr.shape} does not match {t.shape}")
                t.data = arr.astype(t.dtype)

    def cast(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0):
        bound = gain * math.sqrt(6.0 / n_in)
        self.weight = parameter(_uniform(rng, (n_in, n_out), bound))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def zero_(self) -> "Linear":
        self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)
        return self


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8):
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))

    def __call__(self, x) -> Tensor:
        return F.group_norm(x, self.groups, self.gamma, self.beta)


class Conv(Module):
    """N-d convolution layer; ``dims`` is 2 or 3."""

    def __init__(self, n_in, n_out, kernel, rng, dims=3, stride=1, padding=None, bias=True):
        k = (kernel,) * dims if isinstance(kernel, int) else tuple(kernel)
        fan_in = n_in * int(np.prod(k))
        self.weight = parameter(_uniform(rng, (n_out, n_in) + k, math.sqrt(6.0 / fan_in)))
        self.bias = parameter(np.zeros(n_out)) if bias else None
        self.stride = stride
        self.padding = (k[0] // 2) if padding is None else padding

    def __call__(self, x) -> Tensor:
        return conv(x, self.weight, self.bias, self.stride, self.padding)

    def zero_(self) -> "Conv":
        self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)
        return self


class ConvTranspose(Module):
    def __init__(self, n_in, n_out, kernel, rng, dims=3, stride=2, padding=0, bias=True):
        k = (kernel,) * dims if isinstance(kernel, int) else tuple(kernel)
        fan_in = n_in * int(np.prod(k)) // max(int(np.prod([stride] * dims)), 1)
        self.weight = parameter(_uniform(rng, (n_in, n_out) + k, math.sqrt(6.0 / max(fan_in, 1))))
        self.bias = parameter(np.zeros(n_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> Tensor:
        return conv_transpose(x, self.weight, self.bias, self.stride, self.padding)

    def zero_(self) -> "ConvTranspose":
        self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)
        return self


class MultiHeadAttention(Module):
    """Multi-head attention over lists of tokens.

    Each token is an (N, dim) tensor, so a batch of N independent token sets
    is processed at once. Token projections run one token at a time and the
    sums over tokens are order-independent, which makes the result exactly
    invariant to permuting the key tokens.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, q_dim=None, kv_dim=None,
                 out_proj: bool = True):
        if dim % heads:
            raise ValueError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.wq = Linear(q_dim or dim, dim, rng, gain=0.5)
        self.wk = Linear(kv_dim or dim, dim, rng, gain=0.5)
        self.wv = Linear(kv_dim or dim, dim, rng)
        self.wo = Linear(dim, dim, rng) if out_proj else None

    def __call__(self, queries: Sequence[Tensor], keys: Sequence[Tensor],
                 mask: Optional[np.ndarray] = None) -> List[Tensor]:
        """``mask`` is (N, len(keys)) booleans marking usable keys."""
        h, dh = self.heads, self.dim // self.heads
        ks = [F.reshape(self.wk(k), (-1, h, dh)) for k in keys]
        vs = [F.reshape(self.wv(k), (-1, h, dh)) for k in keys]
        vstack = F.stack(vs, axis=2)  # (N, h, T, dh)
        m = None if mask is None else np.asarray(mask, dtype=bool)[:, None, :]
        outs = []
        scale = 1.0 / math.sqrt(dh)
        for q in queries:
            qh = F.reshape(self.wq(q), (-1, h, dh))
            logits = F.stack([F.sum(F.mul(qh, k), axis=-1) for k in ks], axis=-1) * scale
            p = F.softmax(logits, axis=-1, mask=m, symmetric=True)  # (N, h, T)
            o = F.sum_symmetric(F.mul(F.reshape(p, p.shape + (1,)), vstack), axis=2)
            o = F.reshape(o, (-1, self.dim))
            outs.append(self.wo(o) if self.wo is not None else o)
        return outs


class Adam:
    """Adam with per-group learning rates; groups are lists of tensors."""

    def __init__(self, groups: Dict[str, Sequence[Tensor]], lrs: Dict[str, float],
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = {k: list(v) for k, v in groups.items()}
        self.lrs = dict(lrs)
        self.betas = betas
        self.eps = eps
        self.state: Dict[int, list] = {}

    def step(self, active: Optional[Sequence[str]] = None) -> None:
        b1, b2 = self.betas
        for name, params in self.groups.items():
            if active is not None and name not in active:
                continue
            lr = self.lrs[name]
            for p in params:
                if p.grad is None:
                    continue
                st = self.state.setdefault(id(p), [np.zeros_like(p.data), np.zeros_like(p.data), 0])
                st[2] += 1
                st[0] = b1 * st[0] + (1 - b1) * p.grad
                st[1] = b2 * st[1] + (1 - b2) * p.grad * p.grad
                mhat = st[0] / (1 - b1 ** st[2])
                vhat = st[1] / (1 - b2 ** st[2])
                p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm
