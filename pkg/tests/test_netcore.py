import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetseg.netcore import (
    EmaState,
    NetConfig,
    NetError,
    backward,
    ema_from,
    ema_update,
    forward,
    grad_check,
    init_params,
    load_checkpoint,
    new_sgd_state,
    reduced_config,
    save_checkpoint,
    sgd_step,
    softmax,
    zero_params,
)


def naive_forward(params, image, cfg):
    """Direct-definition reference: zero-padded 3x3 correlation, ReLU, 1x1 head."""
    x = image[None].astype(np.float64)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        k = w.shape[-1]
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        h, wd = x.shape[1:]
        z = np.zeros((w.shape[0], h, wd))
        for dy in range(k):
            for dx in range(k):
                patch = xp[:, dy:dy + h, dx:dx + wd]
                z += np.einsum("oc,chw->ohw", w[:, :, dy, dx], patch)
        z += b[:, None, None]
        x = np.maximum(z, 0) if i < len(params.weights) - 1 else z
    return x


def test_shapes_and_receptive_field():
    cfg = NetConfig()
    assert cfg.n_layers == 7
    assert cfg.receptive_field == 13
    params = init_params(cfg, 0)
    logits, _ = forward(params, np.zeros((64, 64), np.float32), cfg)
    assert logits.shape == (7, 64, 64)
    batch, _ = forward(params, np.zeros((3, 20, 24), np.float32), cfg)
    assert batch.shape == (3, 7, 20, 24)


def test_forward_matches_naive_reference():
    cfg = NetConfig(channels=(5, 3, 4), dropout_rates=(0.0,) * 4, dtype="float64")
    params = init_params(cfg, 3)
    rng = np.random.default_rng(0)
    for b in params.biases:
        b[:] = rng.normal(size=b.shape)
    image = rng.normal(size=(9, 11))
    logits, _ = forward(params, image, cfg)
    np.testing.assert_allclose(logits, naive_forward(params, image, cfg), atol=1e-10)


def test_float32_forward_close_to_reference():
    cfg = NetConfig()
    params = init_params(cfg, 1)
    image = np.random.default_rng(1).normal(size=(16, 16)).astype(np.float32)
    logits, _ = forward(params, image, cfg)
    ref = naive_forward(params, image, cfg)
    np.testing.assert_allclose(logits, ref, rtol=1e-4, atol=1e-4 * np.abs(ref).max())


def test_batch_equals_single_images():
    cfg = NetConfig()
    params = init_params(cfg, 2)
    images = np.random.default_rng(2).normal(size=(3, 12, 12)).astype(np.float32)
    batch, _ = forward(params, images, cfg)
    for i in range(3):
        single, _ = forward(params, images[i], cfg)
        np.testing.assert_allclose(batch[i], single, rtol=1e-5, atol=1e-5)


def test_init_params():
    cfg = NetConfig()
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert a == b
    assert all(not bias.any() for bias in a.biases)
    pooled = np.concatenate([init_params(cfg, s).weights[0].ravel() for s in range(10)])
    assert pooled.size == 16 * 9 * 10
    assert abs(pooled.std() / math.sqrt(2 / 9) - 1) < 0.10


def test_zero_params_give_uniform_posteriors():
    cfg = NetConfig()
    logits, _ = forward(zero_params(cfg), np.ones((8, 8), np.float32), cfg)
    assert not logits.any()
    np.testing.assert_allclose(softmax(logits), 1 / 7, rtol=1e-6)


def test_eval_mode_ignores_dropout():
    cfg = NetConfig()
    params = init_params(cfg, 4)
    image = np.random.default_rng(4).normal(size=(10, 10)).astype(np.float32)
    plain, _ = forward(params, image, cfg)
    dropped, _ = forward(params, image, cfg.with_dropout((0.5,) * 7))
    np.testing.assert_array_equal(plain, dropped)


def test_train_mode_determinism_and_masks():
    cfg = NetConfig().with_dropout((0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5))
    params = init_params(cfg, 5)
    image = np.random.default_rng(5).normal(size=(10, 10)).astype(np.float32)
    a, ta = forward(params, image, cfg, np.random.default_rng(9))
    b, _ = forward(params, image, cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert ta.masks[0] is None and ta.masks[1] is None
    for mask in ta.masks[2:]:
        assert set(np.unique(mask)) <= {0.0, 2.0}


def test_forward_rejects_non_finite():
    cfg = NetConfig()
    with pytest.raises(NetError):
        forward(init_params(cfg, 0), np.full((4, 4), np.nan), cfg)
    params = init_params(cfg, 0)
    params.weights[2][:] = 1e38
    with pytest.raises(NetError, match="layer"):
        forward(params, np.ones((6, 6), np.float32), cfg)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros((7, 1, 1))), 1 / 7)
    big = softmax(np.array([1000.0, 0, 0, 0]).reshape(4, 1, 1))
    assert np.isfinite(big).all() and big[0, 0, 0] >= 1 - 1e-6
    two = softmax(np.array([math.log(2), 0.0]).reshape(2, 1, 1))
    np.testing.assert_allclose(two.ravel(), [2 / 3, 1 / 3], rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50))
def test_softmax_rows(seed, scale):
    post = softmax(np.random.default_rng(seed).normal(scale=scale, size=(7, 3, 4)))
    np.testing.assert_allclose(post.sum(axis=0), 1.0, atol=1e-6)
    assert (post >= 0).all()


def test_backward_contract():
    cfg = reduced_config()
    params = init_params(cfg, 0)
    image = np.random.default_rng(0).normal(size=(8, 8))
    logits, trace = forward(params, image, cfg)
    zero = backward(trace, np.zeros_like(logits))
    assert all(not g.any() for g in zero.arrays())
    with pytest.raises(NetError):
        backward(trace, np.zeros_like(logits))

    g = np.random.default_rng(1).normal(size=logits.shape)
    _, t1 = forward(params, image, cfg)
    _, t2 = forward(params, image, cfg)
    once, twice = backward(t1, g), backward(t2, 2 * g)
    for a, b in zip(once.arrays(), twice.arrays()):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("loss", ["ce", "ace", "consistency"])
def test_grad_check(loss):
    assert grad_check(loss=loss, seed=0) < 1e-5


def test_grad_check_deeper_net():
    cfg = NetConfig(num_classes=4, channels=(3, 4, 3), dtype="float64",
                    dropout_rates=(0.0,) * 4)
    assert grad_check(cfg, loss="ace", seed=1, n_params=100) < 1e-5


def test_backward_with_dropout_matches_finite_differences():
    # freeze one mask draw and check gradients of that fixed sub-network
    cfg = reduced_config(dropout_rates=(0.5, 0.5))
    params = init_params(cfg, 3)
    image = np.random.default_rng(3).normal(size=(6, 6))
    target = np.random.default_rng(4).normal(size=(7, 6, 6))

    def loss_and_trace(p):
        logits, trace = forward(p, image, cfg, np.random.default_rng(11))
        return float((logits * target).sum()), trace

    _, trace = loss_and_trace(params)
    grads = backward(trace, target)
    eps = 1e-6
    for a, arr in enumerate(params.arrays()):
        flat = arr.reshape(-1)
        for j in range(0, flat.size, max(1, flat.size // 7)):
            saved = flat[j]
            flat[j] = saved + eps
            up, _ = loss_and_trace(params)
            flat[j] = saved - eps
            down, _ = loss_and_trace(params)
            flat[j] = saved
            fd = (up - down) / (2 * eps)
            assert grads.arrays()[a].reshape(-1)[j] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_inverted_dropout_expectation():
    # dropout on the classifier input only, so the train-mode output is linear in the mask
    cfg = reduced_config(dropout_rates=(0.0, 0.5))
    params = init_params(cfg, 2)
    image = np.random.default_rng(2).normal(size=(8, 8))
    ref, _ = forward(params, image, cfg)
    rng = np.random.default_rng(0)
    draws = np.stack([forward(params, image, cfg, rng, keep_trace=False)[0][:, 4, 4]
                      for _ in range(2000)])
    se = draws.std(axis=0) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - ref[:, 4, 4]) <= 3 * se + 1e-12)


def test_sgd_examples():
    cfg = reduced_config()
    params = init_params(cfg, 0)
    start = params.copy()
    grads = init_params(cfg, 1)
    state = new_sgd_state(params)
    sgd_step(params, grads, state, lr=1.0, momentum=0.0)
    for p, s, g in zip(params.arrays(), start.arrays(), grads.arrays()):
        np.testing.assert_allclose(p, s - g, rtol=1e-12)

    params = start.copy()
    state = new_sgd_state(params)
    sgd_step(params, grads.zeros_like(), state, lr=0.1, momentum=0.9)
    assert params == start

    state = new_sgd_state(params)
    for _ in range(2):
        sgd_step(params, grads, state, lr=0.1, momentum=0.9)
    for p, s, g in zip(params.arrays(), start.arrays(), grads.arrays()):
        np.testing.assert_allclose(p, s - 0.1 * g - 0.1 * 1.9 * g, rtol=1e-12, atol=1e-15)


def test_sgd_rejects_non_finite():
    cfg = reduced_config()
    params = init_params(cfg, 0)
    grads = params.zeros_like()
    grads.weights[0][0, 0, 0, 0] = np.inf
    with pytest.raises(NetError):
        sgd_step(params, grads, new_sgd_state(params), 0.1, 0.9)


def test_ema_examples():
    cfg = reduced_config()
    theta = init_params(cfg, 0)
    ema = ema_from(theta.zeros_like(), 0.0)
    ema_update(ema, theta)
    assert ema.params == theta

    ones = theta.zeros_like()
    for arr in ones.arrays():
        arr += 1.0
    ema = ema_from(theta.zeros_like(), 0.99)
    ema_update(ema, ones)
    for arr in ema.params.arrays():
        np.testing.assert_allclose(arr, 0.01, rtol=1e-12)

    with pytest.raises(ValueError):
        EmaState(theta, alpha=1.0)


@pytest.mark.parametrize("dtype, tol", [("float64", 1e-12), ("float32", 1e-5)])
def test_ema_geometric_decay(dtype, tol):
    cfg = replace(reduced_config(), dtype=dtype)
    theta = init_params(cfg, 0)
    ema = ema_from(init_params(cfg, 1), 0.99)
    gap0 = max(np.abs(e - t).max() for e, t in zip(ema.params.arrays(), theta.arrays()))
    for k in range(1, 501):
        ema_update(ema, theta)
        if k in (1, 10, 100, 500):
            gap = max(np.abs(e.astype(np.float64) - t).max()
                      for e, t in zip(ema.params.arrays(), theta.arrays()))
            assert gap <= 0.99 ** k * gap0 + tol
    assert 0.99 ** 500 == pytest.approx(6.57e-3, rel=1e-2)


def test_checkpoint_round_trip(tmp_path):
    cfg = NetConfig().with_dropout((0.0, 0.0) + (0.5,) * 5)
    params = init_params(cfg, 0)
    ema = ema_from(init_params(cfg, 1), 0.95)
    ema.steps = 12
    save_checkpoint(tmp_path / "ck", params, cfg, ema, step=12, meta={"note": "x"})
    p2, e2, c2, manifest = load_checkpoint(tmp_path / "ck")
    assert p2 == params and e2.params == ema.params and e2.alpha == 0.95
    assert c2 == cfg
    assert manifest["step"] == 12 and manifest["meta"] == {"note": "x"}
    raw = (tmp_path / "ck" / "params.f32").read_bytes()
    assert len(raw) == 4 * params.size
    assert np.frombuffer(raw[:4], "<f4")[0] == params.weights[0].ravel()[0]


def test_checkpoint_without_teacher(tmp_path):
    cfg = NetConfig()
    save_checkpoint(tmp_path, init_params(cfg, 0), cfg)
    _, ema, _, manifest = load_checkpoint(tmp_path)
    assert ema is None and not manifest["has_ema"]


def test_checkpoint_truncated(tmp_path):
    cfg = NetConfig()
    save_checkpoint(tmp_path, init_params(cfg, 0), cfg)
    path = tmp_path / "params.f32"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(NetError):
        load_checkpoint(tmp_path)
