"""Dense ReLU networks with inverted dropout and hand-written backprop.

Every network keeps its parameters in one flat vector; the per-layer weight
and bias arrays are views into it, so an optimiser can treat a network as a
single parameter vector.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..errors import DomainError


@dataclass
class _LayerCache:
    x: np.ndarray
    active: np.ndarray | None  # ReLU derivative mask (None on a linear layer)
    keep: np.ndarray | None  # scaled dropout mask (None when dropout is off)


class MLP:
    """Stack of dense layers.

    ``hidden_output`` marks whether the last layer is itself hidden (ReLU and
    dropout applied, as in a trunk feeding a head) or a linear read-out.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        dropout: float = 0.0,
        hidden_output: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise DomainError(f"layer sizes must chain at least two positive widths, got {sizes}")
        if not 0.0 <= dropout < 1.0:
            raise DomainError(f"dropout rate must lie in [0, 1), got {dropout}")
        self.sizes = tuple(int(s) for s in sizes)
        self.dropout = float(dropout)
        self.hidden_output = hidden_output
        self.dtype = np.dtype(dtype)
        self.params = np.zeros(self.n_params, dtype=self.dtype)
        self.weights, self.biases = self._views(self.params)
        if rng is not None:
            self.initialise(rng)

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def _views(self, flat: np.ndarray):
        ws, bs, off = [], [], 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            ws.append(flat[off:off + i * o].reshape(i, o))
            off += i * o
            bs.append(flat[off:off + o])
            off += o
        return ws, bs

    def _is_hidden(self, layer: int) -> bool:
        return layer < self.n_layers - 1 or self.hidden_output

    def initialise(self, rng: np.random.Generator) -> None:
        """Fan-in scaled uniform weights (He limit before a ReLU), zero biases."""
        for layer, w in enumerate(self.weights):
            fan_in = w.shape[0]
            limit = np.sqrt((6.0 if self._is_hidden(layer) else 1.0) / fan_in)
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        for b in self.biases:
            b[...] = 0.0

    def set_params(self, flat: np.ndarray) -> None:
        if flat.shape != self.params.shape:
            raise DomainError(f"expected {self.params.shape} parameters, got {flat.shape}")
        self.params[...] = flat

    def copy(self) -> MLP:
        clone = MLP.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = self.params.copy()
        clone.weights, clone.biases = clone._views(clone.params)
        return clone

    def forward(self, x: np.ndarray, dropout_active: bool = False, rng: np.random.Generator | None = None):
        """Returns ``(output, caches)``; ``caches`` feeds :meth:`backward`."""
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DomainError(f"input shape {x.shape} does not match network input width {self.in_dim}")
        use_dropout = dropout_active and self.dropout > 0.0
        if use_dropout and rng is None:
            raise DomainError("active dropout needs a random generator")
        a = x.astype(self.dtype, copy=False)
        caches = []
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            if not self._is_hidden(layer):
                caches.append(_LayerCache(a, None, None))
                a = z
                continue
            active = z > 0
            out = np.where(active, z, 0)
            keep = None
            if use_dropout:
                keep = (rng.random(z.shape) >= self.dropout).astype(self.dtype) / (1.0 - self.dropout)
                out = out * keep
            caches.append(_LayerCache(a, active, keep))
            a = out
        return a, caches

    def backward(self, caches, grad_out: np.ndarray):
        """Gradient w.r.t. the input and the flat parameter vector."""
        grad = np.zeros_like(self.params)
        gw, gb = self._views(grad)
        g = grad_out.astype(self.dtype, copy=False)
        for layer in range(self.n_layers - 1, -1, -1):
            c = caches[layer]
            if c.active is not None:
                if c.keep is not None:
                    g = g * c.keep
                g = np.where(c.active, g, 0)
            gw[layer][...] = c.x.T @ g
            gb[layer][...] = g.sum(axis=0)
            g = g @ self.weights[layer].T
        return g, grad


class Trunk(MLP):
    """Shared feature extractor; every layer is hidden."""

    def __init__(self, sizes, dropout=0.0, rng=None, dtype=np.float32):
        super().__init__(sizes, dropout, hidden_output=True, rng=rng, dtype=dtype)


class Head(MLP):
    """Anchor-specific read-out: 2 outputs (position) or 4 (position + log-variances)."""

    def __init__(self, sizes, dropout=0.0, anchor_id: int = 1, rng=None, dtype=np.float32):
        if sizes[-1] not in (2, 4):
            raise DomainError(f"head must end in 2 or 4 outputs, got {sizes[-1]}")
        super().__init__(sizes, dropout, hidden_output=False, rng=rng, dtype=dtype)
        self.anchor_id = anchor_id

    @property
    def mode(self) -> str:
        return "nll" if self.out_dim == 4 else "mse"


def flatten_input(fp) -> np.ndarray:
    """Fingerprint, (N_R, N_C, 2) array or batch (n, N_R, N_C, 2) -> (n, features)."""
    values = getattr(fp, "values", fp)
    values = np.asarray(values)
    if values.ndim == 3:
        values = values[None]
    return values.reshape(values.shape[0], -1)


def forward(trunk: Trunk, head: Head, fp, dropout_active: bool = False, rng: np.random.Generator | None = None):
    """Raw head outputs for one fingerprint or a batch, shape (n, 2|4)."""
    x = flatten_input(fp)
    if x.shape[1] != trunk.in_dim:
        raise DomainError(f"fingerprint has {x.shape[1]} features, trunk expects {trunk.in_dim}")
    if head.in_dim != trunk.out_dim:
        raise DomainError("head input width does not match trunk output width")
    h, _ = trunk.forward(x, dropout_active, rng)
    out, _ = head.forward(h, dropout_active, rng)
    return out
