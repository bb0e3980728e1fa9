import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posfuse.errors import DataError, DomainError, TrainingError
from posfuse.nn_core import (
    MLP,
    VARIANCE_FLOOR,
    AdamState,
    Head,
    ModelFile,
    Trunk,
    adam_step,
    forward,
    mcd_passes,
    mcd_predict,
    mcd_predict_batch,
    mse_loss,
    mtl_loss,
    nll_loss,
    population_variance,
    shared_loss_and_grads,
    summarise_passes,
)

from .gradcheck import gradient_check_suite, random_problem, relative_errors


# -- forward pass -------------------------------------------------------------------


def test_zero_weights_give_zero_output():
    trunk = Trunk((6, 5, 4), 0.3)
    head = Head((4, 3, 4), 0.3)
    out = forward(trunk, head, np.ones((3, 1, 2)), dropout_active=True, rng=np.random.default_rng(0))
    assert out.shape == (1, 4) and not out.any()


def test_zero_dropout_is_deterministic():
    rng = np.random.default_rng(0)
    trunk = Trunk((8, 6), 0.0, rng=rng)
    head = Head((6, 2), 0.0, rng=rng)
    x = rng.random((5, 4, 1, 2))
    a = forward(trunk, head, x, dropout_active=True, rng=np.random.default_rng(1))
    b = forward(trunk, head, x, dropout_active=False)
    assert np.array_equal(a, b)


def test_layers_match_naive_matmul():
    rng = np.random.default_rng(3)
    net = MLP((5, 4, 3), hidden_output=False, rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 5))
    w1, w2 = net.weights
    b1, b2 = net.biases
    ref = np.zeros((2, 3))
    for n in range(2):
        hidden = [max(sum(x[n, i] * w1[i, j] for i in range(5)) + b1[j], 0.0) for j in range(4)]
        for k in range(3):
            ref[n, k] = sum(hidden[j] * w2[j, k] for j in range(4)) + b2[k]
    out, _ = net.forward(x)
    assert np.allclose(out, ref, atol=1e-12)


def test_parameters_are_views_of_flat_vector():
    net = MLP((3, 2, 2), rng=np.random.default_rng(0))
    net.params[:] = 0
    assert not any(w.any() for w in net.weights)
    with pytest.raises(DomainError):
        MLP((3,))
    with pytest.raises(DomainError):
        Head((3, 5))


def test_dropout_is_unbiased():
    rng = np.random.default_rng(0)
    net = MLP((6, 5), dropout=0.3, hidden_output=True, dtype=np.float64)
    net.weights[0][...] = rng.uniform(0.1, 1.0, (6, 5))
    x = rng.uniform(0.1, 1.0, (1, 6))
    clean, _ = net.forward(x)
    g = np.random.default_rng(1)
    samples = np.concatenate([net.forward(x, True, g)[0] for _ in range(10_000)])
    se = samples.std(axis=0) / np.sqrt(len(samples))
    assert np.all(np.abs(samples.mean(axis=0) - clean[0]) < 3 * se)


# -- losses ------------------------------------------------------------------------------


def test_mse_examples():
    assert mse_loss(np.array([[1.0, 2.0]]), np.array([[1.0, 2.0]]))[0] == 0.0
    assert mse_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]]))[0] == 1.0


def test_nll_with_unit_variance_is_half_mse():
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(7, 2))
    y = rng.normal(size=(7, 2))
    out = np.hstack([pos, np.zeros((7, 2))])
    assert nll_loss(out, y)[0] == pytest.approx(0.5 * mse_loss(pos, y)[0], rel=1e-12)


def test_nll_minimised_at_log_squared_error():
    # error 1 on y only: d/ds [e^2 exp(-s)/2 + s/2] vanishes at s = log e^2 = 0;
    # error sqrt(2) -> s* = log 2
    y = np.zeros((1, 2))
    s_star = np.log(2.0)
    out = np.array([[0.0, np.sqrt(2.0), 0.0, s_star]])
    loss, grad = nll_loss(out, y)
    assert grad[0, 3] == pytest.approx(0.0, abs=1e-15)
    for ds in (-1e-3, 1e-3):
        shifted = out.copy()
        shifted[0, 3] += ds
        assert nll_loss(shifted, y)[0] > loss


def test_wrong_output_width_rejected():
    with pytest.raises(DomainError):
        mse_loss(np.zeros((2, 4)), np.zeros((2, 2)))
    with pytest.raises(DomainError):
        nll_loss(np.zeros((2, 2)), np.zeros((2, 2)))


def test_mtl_single_anchor_equals_task_loss():
    rng = np.random.default_rng(1)
    out, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
    assert mtl_loss([out], y, "nll")[0] == nll_loss(out, y)[0]
    assert mtl_loss([out, out], y, "nll")[0] == pytest.approx(2 * nll_loss(out, y)[0], rel=1e-15)


def test_mtl_trunk_gradient_is_sum_of_isolated_gradients():
    rng = np.random.default_rng(4)
    trunk, heads, xs, y = random_problem(rng, 3, "nll", dropout=0.0)
    _, g_shared, g_heads = shared_loss_and_grads(trunk, heads, xs, y, "nll", False)
    total = np.zeros_like(g_shared)
    for head, x, gh in zip(heads, xs, g_heads):
        _, g_t, (g_h,) = shared_loss_and_grads(trunk, [head], [x], y, "nll", False)
        total += g_t
        assert np.allclose(g_h, gh, atol=1e-12)
    assert np.max(np.abs(total - g_shared)) <= 1e-10


@pytest.mark.parametrize("loss,n_heads", [("mse", 1), ("nll", 1), ("nll", 3), ("mse", 2)])
def test_gradients_match_finite_differences(loss, n_heads):
    rng = np.random.default_rng([n_heads, len(loss)])
    trunk, heads, xs, y = random_problem(rng, n_heads, loss)
    errs = relative_errors(trunk, heads, xs, y, loss)
    assert np.percentile(errs, 95) <= 1e-4


def test_gradient_suite_small():
    errs = gradient_check_suite(n_networks=3, seed=11)
    for kind, e in errs.items():
        assert np.percentile(e, 95) <= 1e-4, kind


# -- Adam --------------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    adam_step(p, np.zeros(2), AdamState.zeros(2, dtype=np.float64))
    assert np.array_equal(p, [1.0, -2.0])


def test_adam_constant_gradient_moves_against_it():
    p = np.zeros(3)
    st = AdamState.zeros(3, lr=0.01, dtype=np.float64)
    g = np.array([1.0, -2.0, 0.5])
    for _ in range(10):
        adam_step(p, g, st)
    assert np.all(np.sign(p) == -np.sign(g))
    # bias correction makes every step exactly lr for a constant gradient
    assert np.allclose(np.abs(p), 0.1, rtol=1e-6)


def test_adam_matches_formula():
    rng = np.random.default_rng(2)
    p = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(3)]
    st = AdamState.zeros(5, lr=0.05, dtype=np.float64)
    ref_p, m, v = p.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, start=1):
        adam_step(p, g, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref_p = ref_p - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p, ref_p, rtol=1e-12, atol=1e-15)
    assert st.step == 3


def test_adam_rejects_non_finite_gradient():
    p = np.ones(2)
    with pytest.raises(TrainingError):
        adam_step(p, np.array([1.0, np.nan]), AdamState.zeros(2, dtype=np.float64))
    assert np.array_equal(p, [1.0, 1.0])


# -- Monte-Carlo dropout -------------------------------------------------------------------


def _pair(dropout, out=4, seed=0):
    rng = np.random.default_rng(seed)
    return Trunk((12, 8), dropout, rng=rng), Head((8, 6, out), dropout, rng=rng)


def test_no_dropout_means_no_epistemic_variance():
    trunk, head = _pair(0.0)
    p = mcd_predict(trunk, head, np.random.default_rng(1).random((3, 2, 2)), 10, 0)
    assert not p.epistemic.any()
    assert np.all(p.combined > 0)


def test_two_pass_variance_example():
    outs = np.array([[[1.0, 1.0, 0.0, 0.0]], [[3.0, 3.0, np.log(3.0), 0.0]]])
    p = summarise_passes(outs)
    assert np.allclose(p.mean, [[2.0, 2.0]])
    assert np.allclose(p.epistemic, [[1.0, 1.0]])
    assert np.allclose(p.aleatoric, [[2.0, 1.0]])
    assert np.allclose(p.combined, [[3.0, 2.0]])


def test_mse_head_variance_is_floored():
    trunk, head = _pair(0.0, out=2)
    p = mcd_predict(trunk, head, np.zeros((3, 2, 2)), 5, 0)
    assert np.all(p.combined == VARIANCE_FLOOR)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_population_variance_non_negative(values):
    assert population_variance(np.array(values)) >= 0


def test_mcd_variances_non_negative():
    trunk, head = _pair(0.5, seed=3)
    x = np.random.default_rng(0).random((1000, 12))
    p = mcd_predict_batch(trunk, head, x, 5, 7)
    assert np.all(p.epistemic >= 0) and np.all(p.aleatoric > 0) and np.all(p.combined > 0)


def test_mcd_reproducible_and_batch_consistent():
    trunk, head = _pair(0.2)
    x = np.random.default_rng(0).random((6, 12))
    a = mcd_passes(trunk, head, x, 4, 9)
    b = mcd_passes(trunk, head, x, 4, 9)
    assert np.array_equal(a, b)
    assert mcd_passes(trunk, head, x, 4, 10).tobytes() != a.tobytes()
    with pytest.raises(DomainError):
        mcd_passes(trunk, head, x, 0, 0)


# -- model file ------------------------------------------------------------------------------


def test_model_file_roundtrip():
    rng = np.random.default_rng(0)
    trunk = Trunk((10, 7, 5), 0.1, rng=rng)
    heads = [Head((5, 3, 4), 0.1, anchor_id=a, rng=rng) for a in (3, 8)]
    opt = [AdamState.zeros(n.n_params) for n in (trunk, *heads)]
    for o in opt:
        o.m += 0.5
        o.step = 17
    mf = ModelFile("mtl", "nll", 2, [trunk], heads, opt, {"note": "x"})
    back = ModelFile.from_bytes(mf.to_bytes())
    assert back.mode == "mtl" and back.loss == "nll" and back.meta == {"note": "x"}
    assert back.trunks[0].sizes == trunk.sizes and back.trunks[0].dropout == 0.1
    assert np.array_equal(back.trunks[0].params, trunk.params)
    assert [h.anchor_id for h in back.heads] == [3, 8]
    assert back.optimizer[1].step == 17 and np.array_equal(back.optimizer[2].m, opt[2].m)
    assert back.to_bytes() == mf.to_bytes()
    with pytest.raises(DataError):
        ModelFile.from_bytes(mf.to_bytes()[:50])
