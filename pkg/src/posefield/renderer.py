"""Radiance decoder and alpha compositing."""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from .autodiff import Linear, Module, Tensor, as_tensor, functional as F
from .fusion import encoded_size, positional_encode

NERF_FREQS = 6


class RadianceMLP(Module):
    """Fully connected decoder (encoded x_c, f) -> (density, colour).

    ``depth`` hidden layers of ``width`` units; the network input is
    concatenated again in front of hidden layer ``skip`` (0-based).
    Density is ``density_scale * softplus(raw)``, colour a sigmoid.
    """

    def __init__(self, feature_dim: int, rng: np.random.Generator, width: int = 256, depth: int = 8,
                 skip: int = 4, density_scale: float = 1.0, freqs: int = NERF_FREQS):
        self.freqs = freqs
        n_in = encoded_size(3, freqs) + feature_dim
        sizes = []
        for i in range(depth):
            fan = n_in if i == 0 else width
            if i == skip and i > 0:
                fan += n_in
            sizes.append(fan)
        self.layers = [Linear(f, width, rng) for f in sizes]
        self.out = Linear(width, 4, rng, gain=0.1)
        # start near sigma = 1: a dense initial field gets driven to zero by
        # the mostly-black background and never recovers
        self.out.bias.data[0] = math.log(math.expm1(1.0 / density_scale))
        self.skip = skip
        self.density_scale = float(density_scale)

    def __call__(self, x_norm, f) -> Tuple[Tensor, Tensor]:
        """``x_norm`` are box-normalised canonical points (N, 3); returns (sigma (N,), rgb (N, 3))."""
        f = as_tensor(f)
        inp = F.concat([positional_encode(as_tensor(x_norm), self.freqs), f], axis=1)
        h = inp
        for i, layer in enumerate(self.layers):
            if i == self.skip and i > 0:
                h = F.concat([h, inp], axis=1)
            h = F.relu(layer(h))
        raw = self.out(h)
        sigma = F.softplus(raw[:, 0])
        if self.density_scale != 1.0:
            sigma = F.mul(sigma, self.density_scale)
        return sigma, F.sigmoid(raw[:, 1:4])


def decode(mlp: RadianceMLP, x_norm, f, free: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """Density and colour for N queries; free-space queries skip the MLP and
    get zero density (colour 0)."""
    x_norm = as_tensor(x_norm)
    n = x_norm.shape[0]
    if free is None or not np.any(free):
        return mlp(x_norm, f)
    live = np.flatnonzero(~np.asarray(free))
    if live.size == 0:
        z = np.zeros(n, dtype=x_norm.dtype)
        return as_tensor(z), as_tensor(np.zeros((n, 3), dtype=x_norm.dtype))
    sig, rgb = mlp(F.take(x_norm, live), F.take(as_tensor(f), live))
    return F.scatter(sig, live, n), F.scatter(rgb, live, n)


def composite(sigma, rgb, deltas: np.ndarray, bg=(0.0, 0.0, 0.0)):
    """Front-to-back compositing of (R, M) samples.

    Returns (colour (R, 3), opacity (R,), visibility weights (R, M)).
    """
    sigma, rgb = as_tensor(sigma), as_tensor(rgb)
    dt = sigma.dtype
    tau = F.mul(sigma, np.asarray(deltas, dtype=dt))
    trans = F.exp(F.neg(F.cumsum(tau, axis=1, exclusive=True)))
    alpha = F.sub(1.0, F.exp(F.neg(tau)))
    w = F.mul(trans, alpha)
    colour = F.sum(F.mul(F.reshape(w, w.shape + (1,)), rgb), axis=1)
    opacity = F.sub(1.0, F.exp(F.neg(F.sum(tau, axis=1))))
    bg = np.asarray(bg, dtype=dt).reshape(1, 3)
    colour = F.add(colour, F.mul(F.reshape(F.sub(1.0, opacity), (-1, 1)), bg))
    return colour, opacity, w
