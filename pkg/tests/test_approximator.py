import math

import numpy as np
import pytest

from eimplace import env
from eimplace.approximator import (Arch, OptimizerState, QMapModel, ShapeError, adam_step,
                                   backward, check_param_gradient, finite_diff_check, forward,
                                   init_model, load_model, model_from_dict, model_to_dict,
                                   save_model)

SMALL = Arch(grid_n=4, hidden=8)
PIXEL = Arch(grid_n=4, hidden=8, pixel_hidden=5)


def rand_features(arch, rng, batch=None):
    shape = (arch.channels, arch.grid_n, arch.grid_n)
    return rng.uniform(0, 1, size=shape if batch is None else (batch,) + shape)


def oracle_forward(model, x):
    """Loop-based re-derivation of the forward pass for one state."""
    a = model.arch
    N, C, H, P = a.grid_n, a.channels, a.hidden, a.pixel_hidden
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    W1, b1, W2, b2 = (v.copy() for v in model.unpack())
    hid = [math.tanh(sum(W1[j, i] * flat[i] for i in range(flat.size)) + b1[j]) for j in range(H)]
    out = np.array([sum(W2[o, j] * hid[j] for j in range(H)) + b2[o] for o in range(a.outputs)])
    if P:
        P1, c1, p2, c2 = model.unpack_pixel()
        chans = flat.reshape(C, N * N)
        w, h = chans[3, 0], chans[4, 0]
        for cell in range(N * N):
            y, xx = divmod(cell, N)
            edge = min(xx / N, y / N, 1 - w - xx / N, 1 - h - y / N)
            z = list(chans[:, cell]) + [edge]
            acc = c2[0]
            for k in range(P):
                acc += p2[k] * math.tanh(sum(P1[k, i] * z[i] for i in range(len(z))) + c1[k])
            out[cell] += acc
    return out


def test_param_count_formula():
    for N, C, H, O in [(4, 6, 8, None), (16, 6, 256, None), (8, 3, 5, 1), (16, 6, 0, None)]:
        a = Arch(grid_n=N, channels=C, hidden=H, out_dim=O)
        out = N * N if O is None else O
        assert a.param_count == H * C * N * N + H + out * H + out
        assert init_model(a, 0).params.shape == (a.param_count,)
    assert PIXEL.param_count == SMALL.param_count + 5 * 7 + 5 + 5 + 1
    with pytest.raises(ShapeError):
        Arch(grid_n=4, out_dim=1, pixel_hidden=3)
    with pytest.raises(ShapeError):
        QMapModel(SMALL, np.zeros(3))


def test_init_biases_zero_and_deterministic():
    m = init_model(PIXEL, 7)
    _, b1, _, b2 = m.unpack()
    _, c1, _, c2 = m.unpack_pixel()
    assert not b1.any() and not b2.any() and not c1.any() and not c2.any()
    assert np.array_equal(m.params, init_model(PIXEL, 7).params)
    assert not np.array_equal(m.params, init_model(PIXEL, 8).params)


def test_init_glorot_bounds_and_mean():
    a = Arch(grid_n=8, hidden=32)
    bound1 = math.sqrt(6 / (a.in_dim + 32))
    samples = []
    for seed in range(10):
        W1, _, W2, _ = init_model(a, seed).unpack()
        assert np.abs(W1).max() <= bound1
        assert np.abs(W2).max() <= math.sqrt(6 / (32 + 64))
        samples.append(W1.ravel())
    w = np.concatenate(samples)
    sigma = bound1 / math.sqrt(3 * w.size)
    assert abs(w.mean()) < 3 * sigma


def test_forward_trivial_cases():
    x = rand_features(SMALL, np.random.default_rng(0))
    zero = QMapModel(SMALL, np.zeros(SMALL.param_count))
    assert not forward(zero, x).any()
    p = np.random.default_rng(1).normal(size=SMALL.param_count)
    m = QMapModel(SMALL, p)
    _, _, W2, b2 = m.unpack()
    W2[...] = 0
    b2[...] = 2.5
    np.testing.assert_array_equal(forward(m, np.zeros_like(x)), np.full(16, 2.5))


@pytest.mark.parametrize("arch", [SMALL, PIXEL, Arch(grid_n=4, hidden=0, pixel_hidden=3)])
def test_forward_matches_loop_oracle(arch):
    rng = np.random.default_rng(3)
    m = QMapModel(arch, rng.normal(scale=0.3, size=arch.param_count))
    for _ in range(3):
        x = rand_features(arch, rng)
        np.testing.assert_allclose(forward(m, x), oracle_forward(m, x), rtol=0, atol=1e-12)


def test_forward_batch_and_feature_maps(design1):
    a = Arch(grid_n=16, hidden=4, pixel_hidden=2)
    m = init_model(a, 0)
    fm = env.feature_maps(env.reset(design1))
    one = forward(m, fm)
    batch = forward(m, np.stack([fm.stack(), fm.stack()]))
    assert batch.shape == (2, 256)
    np.testing.assert_allclose(batch[0], one, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        forward(m, np.zeros(10))


def test_backward_trivial_cases():
    rng = np.random.default_rng(4)
    m = QMapModel(PIXEL, rng.normal(size=PIXEL.param_count))
    x = rand_features(PIXEL, rng)
    assert not backward(m, x, np.zeros(16)).any()
    g = rng.normal(size=16)
    _, _, _, gb2 = m.unpack(backward(m, x, g))
    np.testing.assert_array_equal(gb2, g)


@pytest.mark.parametrize("arch", [SMALL, PIXEL, Arch(grid_n=4, hidden=6, out_dim=1)])
def test_backward_finite_differences_20_triples(arch):
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(20):
        # Glorot weights plus random biases keep tanh out of saturation, where
        # gradients shrink to round-off level
        m = init_model(arch, k)
        m = m.with_params(m.params + np.where(m.params == 0,
                                              rng.normal(scale=0.3, size=arch.param_count), 0))
        x = rand_features(arch, rng, batch=3)
        g = rng.normal(size=(3, arch.outputs))
        worst = max(worst, finite_diff_check(
            m, x, lambda out: (float((g * out).sum()), g), n_coords=60, seed=k))
    assert worst < 1e-4


def test_finite_diff_linear_loss():
    rng = np.random.default_rng(6)
    m = init_model(PIXEL, 1)
    x = rand_features(PIXEL, rng)
    err = finite_diff_check(m, x, lambda out: (float(out.sum()), np.ones_like(out)))
    assert err < 1e-6


def test_check_param_gradient_catches_wrong_gradient():
    m = init_model(SMALL, 0)
    x = rand_features(SMALL, np.random.default_rng(0))

    def wrong(mdl):
        out = forward(mdl, x)
        return float((out ** 2).sum()), backward(mdl, x, out)   # missing factor 2

    assert check_param_gradient(m, wrong) > 0.1


def test_adam_zero_gradient_is_identity():
    m = init_model(SMALL, 0)
    opt = OptimizerState.fresh(m)
    opt2, m2 = adam_step(opt, m, np.zeros_like(m.params))
    assert np.array_equal(m2.params, m.params) and opt2.step_count == 1


def test_adam_descends_and_converges():
    a = Arch(grid_n=1, channels=1, hidden=1, out_dim=4)
    assert a.param_count == 10
    m = QMapModel(a, np.ones(10))
    opt = OptimizerState.fresh(m)
    _, m1 = adam_step(opt, m, 2 * m.params)
    assert (m1.params ** 2).sum() < (m.params ** 2).sum()
    m = QMapModel(a, np.random.default_rng(0).normal(size=10))
    opt = OptimizerState.fresh(m, lr=0.05)
    for _ in range(200):
        opt, m = adam_step(opt, m, 2 * m.params)
    assert np.abs(m.params).max() < 1e-2


def test_checkpoint_round_trip(tmp_path):
    m = init_model(PIXEL, 3)
    path = tmp_path / "m.qmap.json"
    save_model(m, path)
    back = load_model(path)
    assert back.arch == m.arch and back.init_seed == 3
    assert np.array_equal(back.params, m.params)
    doc = model_to_dict(m)
    doc["param_count"] += 1
    with pytest.raises(ShapeError):
        model_from_dict(doc)
    first = path.read_bytes()
    save_model(load_model(path), path)
    assert path.read_bytes() == first
