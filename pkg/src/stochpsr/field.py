"""Sine-activated MLP scalar fields and their input derivatives.

Two heads share one layer stack:

* ``"linear"``: the mean field ``g(x)``.
* ``"softplus_sym"``: the covariance field
  ``c(x1, x2) = (sp(n(x1, x2)) + sp(n(x2, x1))) / 2``, positive and symmetric.

Input derivatives are propagated forward through the layers alongside the
activations, carrying ``(h, dh/da, dh/db, d2h/da db)`` for two blocks of input
coordinates ``a`` and ``b``.  Everything is built from differentiable torch
ops, so parameter gradients of any loss built on these derivatives (up to
third order overall) come from ``torch.autograd``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ShapeError

DTYPE = torch.float64
HEADS = ("linear", "softplus_sym")


def as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def softplus(y):
    return torch.logaddexp(y, torch.zeros_like(y))


@dataclass
class DerivativeBundle:
    """Value and input derivatives of a field at a batch of inputs.

    ``grad`` is ``(B, d)`` for the mean field.  For the covariance field
    ``grad`` and ``grad2`` are the gradients in the first and second argument
    and ``mixed`` is the ``(B, d, d)`` matrix of ``d2c / dx1_i dx2_j``.
    """

    value: torch.Tensor
    grad: torch.Tensor | None = None
    grad2: torch.Tensor | None = None
    mixed: torch.Tensor | None = None


class ScalarFieldNet(nn.Module):
    """MLP with ``depth - 1`` sine layers followed by a linear output layer.

    The first layer computes ``sin(omega0 * (W x + b))``, later ones
    ``sin(W h + b)``.  Inputs are the spatial argument(s) followed by an
    optional latent code of width ``latent_width``.
    """

    def __init__(self, spatial_dim, head="linear", hidden_width=512, depth=5, omega0=30.0,
                 latent_width=0, generator=None):
        super().__init__()
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if depth < 2:
            raise ValueError("depth must be at least 2")
        self.spatial_dim = int(spatial_dim)
        self.head = head
        self.hidden_width = int(hidden_width)
        self.depth = int(depth)
        self.omega0 = float(omega0)
        self.latent_width = int(latent_width)
        dims = [self.input_dim] + [self.hidden_width] * (self.depth - 1) + [1]
        self.weights = nn.ParameterList(
            nn.Parameter(torch.zeros(dims[i + 1], dims[i], dtype=DTYPE)) for i in range(self.depth)
        )
        self.biases = nn.ParameterList(nn.Parameter(torch.zeros(dims[i + 1], dtype=DTYPE)) for i in range(self.depth))
        self.reset_parameters(generator)

    @property
    def n_args(self):
        return 1 if self.head == "linear" else 2

    @property
    def input_dim(self):
        return self.n_args * self.spatial_dim + self.latent_width

    def reset_parameters(self, generator=None):
        """SIREN initialization: first layer ``U(+-1/fan_in)``, later ``U(+-sqrt(6/fan_in))``."""
        with torch.no_grad():
            for k, (w, b) in enumerate(zip(self.weights, self.biases)):
                fan_in = w.shape[1]
                bound = 1.0 / fan_in if k == 0 else math.sqrt(6.0 / fan_in)
                w.copy_(torch.rand(w.shape, generator=generator, dtype=DTYPE) * 2 * bound - bound)
                bb = 1.0 / math.sqrt(fan_in)
                b.copy_(torch.rand(b.shape, generator=generator, dtype=DTYPE) * 2 * bb - bb)

    def n_parameters(self):
        return sum(p.numel() for p in self.parameters())

    # -- input assembly ---------------------------------------------------

    def _check(self, x, name="x"):
        x = as_tensor(x)
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.spatial_dim:
            raise ShapeError(f"{name} must be (B, {self.spatial_dim}), got {tuple(x.shape)}")
        return x

    def _latent(self, z, batch):
        if self.latent_width == 0:
            if z is not None:
                raise ShapeError("this network takes no latent code")
            return None
        if z is None:
            raise ShapeError(f"latent code of width {self.latent_width} required")
        z = as_tensor(z)
        if z.ndim == 1:
            z = z[None].expand(batch, -1)
        if z.shape != (batch, self.latent_width):
            raise ShapeError(f"latent codes must be ({batch}, {self.latent_width}), got {tuple(z.shape)}")
        return z

    def _inputs(self, x, x2, z):
        x = self._check(x)
        if self.head == "linear":
            if x2 is not None:
                raise ShapeError("mean field takes a single spatial argument")
            parts = [x]
        else:
            if x2 is None:
                raise ShapeError("covariance field needs two spatial arguments")
            x2 = self._check(x2, "x2")
            if x2.shape[0] != x.shape[0]:
                raise ShapeError("covariance arguments must have equal batch size")
            # both argument orders stacked so the symmetrization is one pass
            parts = [torch.cat([x, x2]), torch.cat([x2, x])]
        zz = self._latent(z, x.shape[0])
        if zz is not None:
            parts.append(zz if self.head == "linear" else torch.cat([zz, zz]))
        return torch.cat(parts, dim=1)

    # -- propagation ------------------------------------------------------

    def _propagate(self, u, a_cols=(), b_cols=(), cross=True):
        """Raw network output and its derivatives in input columns ``a_cols``/``b_cols``.

        Returns ``y (B,)``, ``ya (B, p)``, ``yb (B, q)``, ``yab (B, p, q)``; the
        derivative entries are ``None`` when the matching block is empty or,
        for ``yab``, when ``cross`` is false.
        """
        W, b = self.weights[0], self.biases[0]
        w0 = self.omega0
        z = w0 * (u @ W.T + b)
        B = u.shape[0]
        s, c = torch.sin(z), torch.cos(z)
        h = s
        ha = hb = hab = None
        za = zb = None
        if a_cols:
            za = (w0 * W[:, list(a_cols)].T).expand(B, -1, -1)
            ha = c[:, None] * za
        if b_cols:
            zb = (w0 * W[:, list(b_cols)].T).expand(B, -1, -1)
            hb = c[:, None] * zb
        if a_cols and b_cols and cross:
            # first-layer pre-activation is affine in the input, so no z_ab term
            hab = -s[:, None, None] * za[:, :, None, :] * zb[:, None, :, :]
        for W, b in zip(list(self.weights)[1:-1], list(self.biases)[1:-1]):
            z = h @ W.T + b
            s, c = torch.sin(z), torch.cos(z)
            h = s
            if ha is not None:
                za = ha @ W.T
                ha = c[:, None] * za
            if hb is not None:
                zb = hb @ W.T
                hb = c[:, None] * zb
            if hab is not None:
                zab = hab @ W.T
                hab = c[:, None, None] * zab - s[:, None, None] * za[:, :, None, :] * zb[:, None, :, :]
        W, b = self.weights[-1], self.biases[-1]
        y = (h @ W.T + b)[:, 0]
        ya = (ha @ W.T)[..., 0] if ha is not None else None
        yb = (hb @ W.T)[..., 0] if hb is not None else None
        yab = (hab @ W.T)[..., 0] if hab is not None else None
        return y, ya, yb, yab

    def hidden_preactivations(self, x, x2=None, z=None):
        """Pre-activations of every sine layer (diagnostics only)."""
        u = self._inputs(x, x2, z)
        out = []
        h = u
        for k, (W, b) in enumerate(zip(list(self.weights)[:-1], list(self.biases)[:-1])):
            pre = (h @ W.T + b) * (self.omega0 if k == 0 else 1.0)
            out.append(pre)
            h = torch.sin(pre)
        return out

    # -- public evaluation ------------------------------------------------

    def forward(self, x, x2=None, z=None):
        u = self._inputs(x, x2, z)
        y = self._propagate(u)[0]
        if self.head == "linear":
            return y
        sp_ = softplus(y)
        B = sp_.shape[0] // 2
        return 0.5 * (sp_[:B] + sp_[B:])

    def value_and_grad(self, x, z=None) -> DerivativeBundle:
        """Mean-field value and spatial gradient."""
        if self.head != "linear":
            raise ShapeError("value_and_grad is for the mean field; use mixed() for covariance")
        u = self._inputs(x, None, z)
        y, ya, _, _ = self._propagate(u, a_cols=tuple(range(self.spatial_dim)))
        return DerivativeBundle(y, ya)

    def mixed(self, x1, x2, z=None, need_mixed=True) -> DerivativeBundle:
        """Covariance value, gradients in both arguments and the mixed second derivative."""
        if self.head != "softplus_sym":
            raise ShapeError("mixed() needs a covariance-headed network")
        d = self.spatial_dim
        u = self._inputs(x1, x2, z)
        a_cols = tuple(range(d))
        b_cols = tuple(range(d, 2 * d))
        y, ya, yb, yab = self._propagate(u, a_cols, b_cols, cross=need_mixed)
        sig = torch.sigmoid(y)
        val = softplus(y)
        ca = sig[:, None] * ya
        cb = sig[:, None] * yb
        B = y.shape[0] // 2
        value = 0.5 * (val[:B] + val[B:])
        # second half of the batch has the arguments swapped
        grad1 = 0.5 * (ca[:B] + cb[B:])
        grad2 = 0.5 * (cb[:B] + ca[B:])
        mixed = None
        if need_mixed:
            dsig = sig * (1.0 - sig)
            cab = dsig[:, None, None] * ya[:, :, None] * yb[:, None, :] + sig[:, None, None] * yab
            mixed = 0.5 * (cab[:B] + cab[B:].transpose(1, 2))
        return DerivativeBundle(value, grad1, grad2, mixed)


def make_pair(d, hidden_width=512, depth=5, omega0=30.0, latent_width=0, seed=0):
    """Fresh (mean, covariance) networks, deterministically initialized from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed) % (2**63))
    mean_net = ScalarFieldNet(d, "linear", hidden_width, depth, omega0, latent_width, gen)
    cov_net = ScalarFieldNet(d, "softplus_sym", hidden_width, depth, omega0, latent_width, gen)
    return mean_net, cov_net


# ---------------------------------------------------------------------------
# array-level helpers


def forward(net: ScalarFieldNet, x, x2=None, z=None) -> np.ndarray:
    with torch.no_grad():
        return net(x, x2, z).numpy()


def input_gradient(net: ScalarFieldNet, x, x2=None, z=None):
    """Spatial gradient(s): ``(B, d)`` for a mean net, a pair for a covariance net."""
    with torch.no_grad():
        if net.head == "linear":
            return net.value_and_grad(x, z).grad.numpy()
        bundle = net.mixed(x, x2, z, need_mixed=False)
        return bundle.grad.numpy(), bundle.grad2.numpy()


def mixed_second(net: ScalarFieldNet, x1, x2, z=None) -> np.ndarray:
    with torch.no_grad():
        return net.mixed(x1, x2, z).mixed.numpy()


def parameter_gradient(net: ScalarFieldNet, loss_closure):
    """Gradient of ``loss_closure(net)`` with respect to every parameter of ``net``."""
    loss = loss_closure(net)
    params = list(net.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


# ---------------------------------------------------------------------------
# checkpoints
#
#   b"NSSF" | u32 version | u8 head | u32 spatial_dim | u32 latent_width
#   | u32 hidden_width | u32 depth | f64 omega0
#   then per layer: f64[out*in] weight (row-major) | f64[out] bias, little-endian

_NET_MAGIC = b"NSSF"
_NET_VERSION = 1
_NET_HEADER = struct.Struct("<4sIBIIIId")


def write_net(net: ScalarFieldNet, fh):
    fh.write(_NET_HEADER.pack(_NET_MAGIC, _NET_VERSION, HEADS.index(net.head), net.spatial_dim,
                              net.latent_width, net.hidden_width, net.depth, net.omega0))
    for w, b in zip(net.weights, net.biases):
        fh.write(w.detach().numpy().astype("<f8").tobytes())
        fh.write(b.detach().numpy().astype("<f8").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def read_net(fh) -> ScalarFieldNet:
    magic, version, head, d, lw, width, depth, omega0 = _NET_HEADER.unpack(
        _read_exact(fh, _NET_HEADER.size, "network header"))
    if magic != _NET_MAGIC:
        raise CheckpointError("not a network checkpoint")
    if version != _NET_VERSION:
        raise CheckpointError(f"unsupported network checkpoint version {version}")
    if head >= len(HEADS):
        raise CheckpointError(f"unknown head tag {head}")
    net = ScalarFieldNet(d, HEADS[head], width, depth, omega0, lw)
    with torch.no_grad():
        for w, b in zip(net.weights, net.biases):
            w.copy_(torch.from_numpy(np.frombuffer(_read_exact(fh, w.numel() * 8, "weights"), "<f8")
                                     .astype(np.float64).reshape(w.shape)))
            b.copy_(torch.from_numpy(np.frombuffer(_read_exact(fh, b.numel() * 8, "biases"), "<f8")
                                     .astype(np.float64)))
    return net


def save_checkpoint(net: ScalarFieldNet, path):
    with open(path, "wb") as fh:
        write_net(net, fh)


def load_checkpoint(path) -> ScalarFieldNet:
    path = Path(path)
    with open(path, "rb") as fh:
        net = read_net(fh)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after network data")
    return net
