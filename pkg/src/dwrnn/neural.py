"""Dense feedforward networks with exact first and second derivatives.

The network is a tanh multilayer perceptron from R^2 to R.  Value, spatial
gradient and Laplacian are propagated together through the layers in
forward mode (the chain rule applied layer by layer), so the derivatives
are analytically exact and remain differentiable with respect to the
parameters.  The boundary ansatz multiplies the raw network by
x(1-x)y(1-y), which vanishes exactly on the boundary of the unit square,
plus an optional extension of inhomogeneous boundary data.

All tensors are double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "Mlp", "BoundaryAnsatz", "init_mlp", "forward_with_derivatives",
    "ansatz_eval", "ansatz_value", "save_params", "load_params",
    "boundary_gap", "boundary_gap_grad", "boundary_gap_laplacian",
]


class Mlp(torch.nn.Module):
    """Fully connected tanh network; input dimension 2, output dimension 1."""

    def __init__(self, layer_sizes):
        super().__init__()
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2 or layer_sizes[0] != 2 or layer_sizes[-1] != 1:
            raise ValueError(
                f"layer sizes must run from 2 to 1, got {layer_sizes}")
        self.layer_sizes = layer_sizes
        self.layers = torch.nn.ModuleList(
            torch.nn.Linear(m, n, dtype=torch.float64)
            for m, n in zip(layer_sizes, layer_sizes[1:]))

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_mlp(layer_sizes, seed: int) -> Mlp:
    """Seeded init: weights uniform within 1/sqrt(fan_in), biases zero."""
    net = Mlp(layer_sizes)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in net.layers:
            bound = 1.0 / math.sqrt(layer.in_features)
            layer.weight.uniform_(-bound, bound, generator=gen)
            layer.bias.zero_()
    return net


def _derivs_t(net: Mlp, x: torch.Tensor):
    """Forward-mode value/gradient/Laplacian pass, differentiable in params.

    Propagates (v, dv/dx_k, d2v/dx_k2) through each layer; tanh uses
    sigma'' = -2*tanh*(1 - tanh^2).  Returns (value (n,), grad (n,2),
    laplacian (n,)).
    """
    n = x.shape[0]
    v = x
    g = torch.eye(2, dtype=x.dtype).expand(n, 2, 2)
    h = torch.zeros(n, 2, 2, dtype=x.dtype)
    for i, layer in enumerate(net.layers):
        w = layer.weight
        v = layer(v)
        g = g @ w.T
        h = h @ w.T
        if i < len(net.layers) - 1:
            t = torch.tanh(v)
            s = 1.0 - t * t
            v = t
            h = s.unsqueeze(1) * h - 2.0 * (t * s).unsqueeze(1) * g * g
            g = s.unsqueeze(1) * g
    return v[:, 0], g[:, :, 0], h[:, 0, 0] + h[:, 1, 0]


def forward_with_derivatives(net: Mlp, x):
    """Value, gradient and Laplacian at the given points (numpy in/out)."""
    pts = torch.as_tensor(np.atleast_2d(np.asarray(x, dtype=float)))
    with torch.no_grad():
        v, g, lap = _derivs_t(net, pts)
    return v.numpy(), g.numpy(), lap.numpy()


# ------------------------------------------------------------- boundary ansatz

def boundary_gap(x, y):
    """x(1-x)y(1-y): zero exactly on the boundary, positive inside."""
    return x * (1.0 - x) * y * (1.0 - y)


def boundary_gap_grad(x, y):
    return ((1.0 - 2.0 * x) * y * (1.0 - y), x * (1.0 - x) * (1.0 - 2.0 * y))


def boundary_gap_laplacian(x, y):
    return -2.0 * y * (1.0 - y) - 2.0 * x * (1.0 - x)


@dataclass
class BoundaryAnsatz:
    """Network times the boundary gap, plus an extension of boundary data.

    ``g_tilde`` must provide vectorized ``value`` and ``laplacian`` point
    fields, or be None for homogeneous Dirichlet data.
    """

    net: Mlp
    g_tilde: object = None


def _ansatz_parts_t(a: BoundaryAnsatz, pts: torch.Tensor):
    x, y = pts[:, 0], pts[:, 1]
    v, g, lap = _derivs_t(a.net, pts)
    d = boundary_gap(x, y)
    dx, dy = boundary_gap_grad(x, y)
    dl = boundary_gap_laplacian(x, y)
    value = d * v
    laplacian = dl * v + 2.0 * (dx * g[:, 0] + dy * g[:, 1]) + d * lap
    return value, laplacian


def ansatz_eval(a: BoundaryAnsatz, pts):
    """Value and Laplacian of the ansatz at the given points.

    The Laplacian follows the product rule
    lap(d*v + g) = lap(d)*v + 2*grad(d).grad(v) + d*lap(v) + lap(g).
    """
    t = torch.as_tensor(np.atleast_2d(np.asarray(pts, dtype=float)))
    with torch.no_grad():
        value, laplacian = _ansatz_parts_t(a, t)
    value = value.numpy()
    laplacian = laplacian.numpy()
    if a.g_tilde is not None:
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        value = value + a.g_tilde.value(p)
        laplacian = laplacian + a.g_tilde.laplacian(p)
    return value, laplacian


def ansatz_value(a: BoundaryAnsatz, pts):
    """Ansatz values only (no derivative pass)."""
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    t = torch.as_tensor(p)
    with torch.no_grad():
        v = a.net(t)[:, 0].numpy()
    out = boundary_gap(p[:, 0], p[:, 1]) * v
    if a.g_tilde is not None:
        out = out + a.g_tilde.value(p)
    return out


# ------------------------------------------------------------- persistence

_MAGIC = "mlp-params-v1"


def save_params(net: Mlp, path) -> None:
    """Write parameters as an ASCII shape header plus raw little-endian
    float64 bytes (per layer: weight row-major, then bias)."""
    header = f"{_MAGIC} {' '.join(str(s) for s in net.layer_sizes)}\n"
    flat = np.concatenate([
        arr for layer in net.layers
        for arr in (layer.weight.detach().numpy().ravel(),
                    layer.bias.detach().numpy())
    ])
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(flat.astype("<f8").tobytes())


def load_params(net: Mlp, path) -> None:
    """Load parameters written by ``save_params`` into an existing net."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if header[0] != _MAGIC:
            raise ValueError(f"not a parameter snapshot: {path}")
        sizes = [int(s) for s in header[1:]]
        if sizes != net.layer_sizes:
            raise ValueError(
                f"snapshot shape {sizes} does not match net {net.layer_sizes}")
        flat = np.frombuffer(fh.read(), dtype="<f8").copy()
    if len(flat) != net.n_params:
        raise ValueError("snapshot has wrong parameter count")
    pos = 0
    with torch.no_grad():
        for layer in net.layers:
            for par in (layer.weight, layer.bias):
                k = par.numel()
                par.copy_(torch.from_numpy(
                    flat[pos:pos + k].reshape(par.shape)))
                pos += k
