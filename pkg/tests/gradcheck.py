"""Central finite-difference oracle for the network losses."""

import numpy as np

from posfuse.nn_core import Head, Trunk, shared_loss_and_grads


def random_problem(rng, n_heads, loss, dropout=0.2):
    """A small float64 trunk + heads with a random batch and labels."""
    d_in = int(rng.integers(3, 9))
    trunk_w = [int(v) for v in rng.integers(4, 10, size=rng.integers(1, 3))]
    head_w = [int(v) for v in rng.integers(3, 8, size=rng.integers(0, 2))]
    trunk = Trunk((d_in, *trunk_w), dropout, rng=rng, dtype=np.float64)
    out = 4 if loss == "nll" else 2
    heads = [Head((trunk.out_dim, *head_w, out), dropout, anchor_id=k + 1, rng=rng, dtype=np.float64)
             for k in range(n_heads)]
    # zero biases put dead units exactly on the ReLU kink; move off it
    for net in (trunk, *heads):
        for bias in net.biases:
            bias[...] = rng.normal(scale=0.1, size=bias.shape)
    b = int(rng.integers(3, 7))
    xs = [rng.normal(size=(b, d_in)) for _ in range(n_heads)]
    y = rng.normal(size=(b, 2))
    return trunk, heads, xs, y


def relative_errors(trunk, heads, xs, y, loss, mask_seed=0, n_probe=25, h=1e-6, rng=None):
    """Relative gap between analytic and central-difference gradients for a
    random subset of every network's parameters. Dropout masks are held fixed
    by re-seeding the mask generator for each evaluation."""
    rng = rng or np.random.default_rng(1)

    def f():
        return shared_loss_and_grads(trunk, heads, xs, y, loss, True, np.random.default_rng(mask_seed))

    _, g_trunk, g_heads = f()
    errs = []
    for net, grad in [(trunk, g_trunk), *zip(heads, g_heads)]:
        idx = rng.choice(net.n_params, size=min(n_probe, net.n_params), replace=False)
        for i in idx:
            orig = net.params[i]
            net.params[i] = orig + h
            lp = f()[0]
            net.params[i] = orig - h
            lm = f()[0]
            net.params[i] = orig
            fd = (lp - lm) / (2 * h)
            a = grad[i]
            errs.append(abs(a - fd) / max(abs(a), abs(fd), 1e-7))
    return np.array(errs)


def gradient_check_suite(n_networks=24, seed=0):
    """Relative errors pooled over MSE, NLL and MTL problems."""
    rng = np.random.default_rng(seed)
    out = {"mse": [], "nll": [], "mtl": []}
    for k in range(n_networks):
        for kind in out:
            loss = ("mse", "nll")[k % 2] if kind == "mtl" else kind
            n_heads = int(rng.integers(2, 5)) if kind == "mtl" else 1
            trunk, heads, xs, y = random_problem(rng, n_heads, loss)
            out[kind].append(relative_errors(trunk, heads, xs, y, loss, mask_seed=k, rng=rng))
    return {k: np.concatenate(v) for k, v in out.items()}
