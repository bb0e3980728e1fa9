"""Position losses and the shared-trunk (multi-task) backward pass."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from ..errors import DomainError
from .network import Head, Trunk

LOSS_OUTPUTS = {"mse": 2, "nll": 4}


def mse_loss(pred: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of the squared error, summed over x and y.

    Returns the loss and its gradient w.r.t. ``pred`` (B, 2).
    """
    if pred.shape[-1] != 2:
        raise DomainError(f"MSE loss expects 2 outputs per sample, got {pred.shape[-1]}")
    err = pred - labels
    n = len(pred)
    return float(np.sum(err * err) / n), 2.0 * err / n


def nll_loss(out: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Gaussian negative log-likelihood with log-variance outputs.

    ``out`` columns are ``[x, y, s_x, s_y]`` with ``s = log(sigma^2)``. Per
    sample the loss is ``e_x^2 exp(-s_x)/2 + e_y^2 exp(-s_y)/2 + (s_x + s_y)/2``,
    averaged over the batch.
    """
    if out.shape[-1] != 4:
        raise DomainError(f"NLL loss expects 4 outputs per sample, got {out.shape[-1]}")
    n = len(out)
    err = out[:, :2] - labels
    s = out[:, 2:]
    prec = np.exp(-s)
    sq = err * err
    loss = np.sum(0.5 * sq * prec + 0.5 * s) / n
    grad = np.empty_like(out)
    grad[:, :2] = err * prec / n
    grad[:, 2:] = 0.5 * (1.0 - sq * prec) / n
    return float(loss), grad


def task_loss(out: np.ndarray, labels: np.ndarray, mode: str) -> tuple[float, np.ndarray]:
    if mode == "mse":
        return mse_loss(out, labels)
    if mode == "nll":
        return nll_loss(out, labels)
    raise DomainError(f"unknown loss mode {mode!r}")


def mtl_loss(outputs: Sequence[np.ndarray], labels: np.ndarray, mode: str) -> tuple[float, list[np.ndarray]]:
    """Unweighted sum of the per-anchor losses on one shared mini-batch.

    In NLL mode each anchor's learned variances weight its own term, so no
    explicit task weights appear.
    """
    if len(outputs) == 0:
        raise DomainError("need at least one anchor output")
    total = 0.0
    grads = []
    for out in outputs:
        if len(out) != len(labels):
            raise DomainError("every anchor must be evaluated on the same mini-batch")
        loss, g = task_loss(out, labels, mode)
        total += loss
        grads.append(g)
    return total, grads


def shared_loss_and_grads(
    trunk: Trunk,
    heads: Sequence[Head],
    inputs: Sequence[np.ndarray],
    labels: np.ndarray,
    mode: str,
    dropout_active: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Loss and gradients for a trunk shared by ``len(heads)`` anchors.

    ``inputs[n]`` is the flattened batch for anchor ``n``. The trunk runs once
    on the stacked batches; its gradient is therefore the sum of the
    per-anchor trunk gradients.
    """
    if len(inputs) != len(heads):
        raise DomainError(f"{len(heads)} heads but {len(inputs)} input batches")
    b = len(labels)
    x = np.concatenate(inputs, axis=0) if len(inputs) > 1 else inputs[0]
    h, trunk_cache = trunk.forward(x, dropout_active, rng)
    outs, head_caches = [], []
    for n, head in enumerate(heads):
        o, c = head.forward(h[n * b:(n + 1) * b], dropout_active, rng)
        outs.append(o)
        head_caches.append(c)
    loss, out_grads = mtl_loss(outs, labels, mode)
    g_h = np.empty_like(h)
    head_grads = []
    for n, head in enumerate(heads):
        g_in, g_p = head.backward(head_caches[n], out_grads[n])
        g_h[n * b:(n + 1) * b] = g_in
        head_grads.append(g_p)
    _, trunk_grad = trunk.backward(trunk_cache, g_h)
    return loss, trunk_grad, head_grads


def evaluate_loss(trunk: Trunk, heads: Sequence[Head], inputs: Sequence[np.ndarray], labels: np.ndarray, mode: str,
                  batch: int = 2048) -> float:
    """Deterministic (dropout off) summed loss over a full split."""
    total = 0.0
    n = len(labels)
    for start in range(0, n, batch):
        sl = slice(start, start + batch)
        for head, x in zip(heads, inputs):
            h, _ = trunk.forward(x[sl])
            out, _ = head.forward(h)
            loss, _ = task_loss(out.astype(np.float64), labels[sl], mode)
            total += loss * (min(n, start + batch) - start)
    return total / n
