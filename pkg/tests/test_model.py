import numpy as np
import pytest

from rct.errors import NumericalError, ShapeError, StateError
from rct.model import (
    ModelConfig, backward, channel_norm, channel_norm_backward, context_gate, context_gate_backward, ema_update, forward, glorot_limit, gru_cell,
    gru_sequence, gru_sequence_backward, heads_from_logits, init_params, load_checkpoint, param_shapes, pooled_conv,
    pooled_conv_backward, predict, save_checkpoint, sigmoid,
)

# a model small enough for finite differences over every parameter
TINY = ModelConfig(n_classes=3, n_mels=16, n_frames=8, channels=(2, 3), time_pools=(2, 2), freq_pools=(4, 2),
                   gru_hidden=3, gru_layers=2)


def _rel_err(a, n):
    # absolute error relative to the gradient scale; the floor covers exact zeros
    return np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-6)


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


# ---------------------------------------------------------------- init

def test_init_deterministic_and_seed_dependent():
    a, b, c = init_params(ModelConfig(), 3), init_params(ModelConfig(), 3), init_params(ModelConfig(), 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if a[k].ndim > 1)


def test_init_glorot_bounds_and_zero_biases():
    p = init_params(ModelConfig(gru_layers=2), 0)
    for name, v in p.items():
        if name.endswith(".g"):
            assert np.all(v == 1.0), name
        elif v.ndim == 1:
            assert not v.any(), name
        else:
            lim = np.sqrt(6.0 / (sum(_fans(v.shape))))
            assert np.abs(v).max() <= lim, name
            assert np.isclose(glorot_limit(v.shape), lim)


def _fans(shape):
    if len(shape) == 4:
        return shape[0] * shape[1] * shape[2], shape[0] * shape[1] * shape[3]
    return shape


def test_param_shapes_match_config():
    shapes = param_shapes(ModelConfig(gru_layers=2))
    assert shapes["conv0.w"] == (3, 3, 1, 16)
    assert shapes["gru1.fwd.wx"] == (64, 96)
    assert shapes["strong.w"] == (64, 4)


# ---------------------------------------------------------------- context gate

def test_context_gate_zero_weights_halves():
    x = np.random.default_rng(0).normal(size=(5, 4))
    y, _ = context_gate(x, np.zeros((4, 4)), np.zeros(4))
    np.testing.assert_allclose(y, 0.5 * x)


def test_context_gate_saturated_is_identity():
    x = np.random.default_rng(1).normal(size=(5, 4))
    y, _ = context_gate(x, np.zeros((4, 4)), np.full(4, 30.0))
    np.testing.assert_allclose(y, x, rtol=0, atol=1e-9 * np.abs(x).max() * 10)


def test_context_gate_gradient():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 4)), rng.normal(size=4)
    g = rng.normal(size=(2, 3, 4))
    loss = lambda: float((context_gate(x, w, b)[0] * g).sum())  # noqa: E731
    _, cache = context_gate(x, w, b)
    dx, dw, db = context_gate_backward(g, w, cache)
    for a, v in ((dx, x), (dw, w), (db, b)):
        assert _rel_err(a, _fd(loss, v)) < 1e-5


def test_channel_norm_statistics_and_gradient():
    rng = np.random.default_rng(17)
    z, g, b = rng.normal(3.0, 2.0, size=(2, 5, 4, 3)), rng.normal(size=3), rng.normal(size=3)
    y, cache = channel_norm(z, np.ones(3), np.zeros(3))
    np.testing.assert_allclose(y.mean(axis=(1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(1, 2)), 1.0, atol=1e-5)
    gy = rng.normal(size=z.shape)
    loss = lambda: float((channel_norm(z, g, b)[0] * gy).sum())  # noqa: E731
    _, cache = channel_norm(z, g, b)
    dz, dg, db = channel_norm_backward(gy, g, cache)
    for a, v in ((dz, z), (dg, g), (db, b)):
        assert _rel_err(a, _fd(loss, v)) < 1e-5


def test_channel_norm_is_per_clip():
    rng = np.random.default_rng(18)
    z = rng.normal(size=(3, 4, 2, 2))
    full, _ = channel_norm(z, np.ones(2), np.zeros(2))
    single, _ = channel_norm(z[1:2], np.ones(2), np.zeros(2))
    np.testing.assert_allclose(full[1:2], single, atol=1e-15)


def test_sigmoid_values():
    np.testing.assert_allclose(sigmoid(np.array([0.0, 2.0, -2.0])), [0.5, 1 / (1 + np.exp(-2)), 1 / (1 + np.exp(2))])
    assert sigmoid(np.array([-1000.0]))[0] == 0.0


# ---------------------------------------------------------------- pooled conv

def _naive_conv_pool(x, w, b, tp, fp):
    bsz, t, f, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    conv = np.zeros((bsz, t, f, w.shape[-1]))
    for i in range(3):
        for j in range(3):
            conv += np.einsum("btfc,cd->btfd", xp[:, i:i + t, j:j + f], w[i, j])
    conv += b
    return conv.reshape(bsz, t // tp, tp, f // fp, fp, -1).mean(axis=(2, 4))


def test_pooled_conv_equals_conv_then_avgpool():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 8, 12, 3)), rng.normal(size=(3, 3, 3, 5)), rng.normal(size=5)
    for tp, fp in [(1, 1), (2, 4), (2, 3), (1, 2)]:
        z, _ = pooled_conv(x, w, b, tp, fp)
        np.testing.assert_allclose(z, _naive_conv_pool(x, w, b, tp, fp), atol=1e-12)


def test_pooled_conv_gradient():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(2, 4, 8, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    g = rng.normal(size=(2, 2, 2, 3))
    loss = lambda: float((pooled_conv(x, w, b, 2, 4)[0] * g).sum())  # noqa: E731
    _, cache = pooled_conv(x, w, b, 2, 4)
    dx, dw, db = pooled_conv_backward(g, w, cache, 2, 4)
    for a, v in ((dx, x), (dw, w), (db, b)):
        assert _rel_err(a, _fd(loss, v)) < 1e-5


# ---------------------------------------------------------------- gru

def test_gru_cell_zero_params():
    h = np.array([[0.3, -0.2]])
    params = {"wx": np.zeros((3, 6)), "wh": np.zeros((2, 6)), "b": np.zeros(6)}
    # z = 0.5, n = 0 -> h_t = 0.5 h_prev
    np.testing.assert_allclose(gru_cell(np.ones((1, 3)), h, params), 0.5 * h)


def test_gru_cell_matches_equations():
    rng = np.random.default_rng(5)
    x, h = rng.normal(size=(1, 3)), rng.normal(size=(1, 2))
    wx, wh, b = rng.normal(size=(3, 6)), rng.normal(size=(2, 6)), rng.normal(size=6)
    s = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    z = s(x @ wx[:, :2] + h @ wh[:, :2] + b[:2])
    r = s(x @ wx[:, 2:4] + h @ wh[:, 2:4] + b[2:4])
    n = np.tanh(x @ wx[:, 4:] + (r * h) @ wh[:, 4:] + b[4:])
    np.testing.assert_allclose(gru_cell(x, h, {"wx": wx, "wh": wh, "b": b}), (1 - z) * n + z * h, atol=1e-14)


@pytest.mark.parametrize("reverse", [False, True])
def test_gru_sequence_gradient(reverse):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 5, 3))
    wx, wh, b = rng.normal(size=(3, 6)) * 0.5, rng.normal(size=(2, 6)) * 0.5, rng.normal(size=6) * 0.5
    g = rng.normal(size=(2, 5, 2))
    loss = lambda: float((gru_sequence(x, wx, wh, b, reverse)[0] * g).sum())  # noqa: E731
    _, cache = gru_sequence(x, wx, wh, b, reverse)
    grads = gru_sequence_backward(g, wx, wh, cache)
    for a, v in zip(grads, (x, wx, wh, b)):
        assert _rel_err(a, _fd(loss, v)) < 1e-5


def test_attention_head_gradient():
    rng = np.random.default_rng(7)
    sl, al = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 6, 3))
    gs, gw = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 3))

    def loss():
        s, w, _ = heads_from_logits(sl, al)
        return float((s * gs).sum() + (w * gw).sum())

    s, w, a = heads_from_logits(sl, al)
    # same formulas as the model's backward pass for the two heads
    ds = gs + a * gw[:, None, :]
    da = s * gw[:, None, :]
    d_al = a * (da - (a * da).sum(axis=1, keepdims=True))
    d_sl = ds * s * (1 - s)
    assert _rel_err(d_sl, _fd(loss, sl)) < 1e-5
    assert _rel_err(d_al, _fd(loss, al)) < 1e-5


# ---------------------------------------------------------------- full model

def test_full_model_gradient():
    rng = np.random.default_rng(8)
    params = init_params(TINY, 1, np.float64)
    for k in params:
        if params[k].ndim == 1:
            params[k] = rng.normal(scale=0.3, size=params[k].shape)
    x = rng.uniform(-1, 1, size=(2, TINY.n_frames, TINY.n_mels))
    gs = rng.normal(size=(2, TINY.out_frames, TINY.n_classes))
    gw = rng.normal(size=(2, TINY.n_classes))

    def loss():
        p, _ = forward(params, x, TINY)
        return float((p.strong * gs).sum() + (p.weak * gw).sum())

    _, cache = forward(params, x, TINY)
    grads = backward(params, cache, gs, gw, TINY)
    assert any(k.startswith("norm") for k in params)
    worst = max(_rel_err(grads[k], _fd(loss, params[k], h=1e-4)) for k in params)
    assert worst < 1e-3


def test_output_shapes_default_config():
    cfg = ModelConfig()
    p, _ = forward(init_params(cfg, 0, np.float32), np.zeros((2, 626, 128), np.float32), cfg)
    assert p.strong.shape == (2, 156, 4)
    assert p.weak.shape == (2, 4)


def test_weak_is_convex_combination_and_attention_normalised():
    cfg = ModelConfig(n_classes=3)
    x = np.random.default_rng(9).uniform(-1, 1, size=(3, 624, 128))
    p, cache = forward(init_params(cfg, 2), x, cfg)
    np.testing.assert_allclose(cache.att.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p.weak >= p.strong.min(axis=1) - 1e-12)
    assert np.all(p.weak <= p.strong.max(axis=1) + 1e-12)


def test_forward_is_deterministic():
    cfg = ModelConfig()
    params = init_params(cfg, 5, np.float32)
    x = np.random.default_rng(10).uniform(-1, 1, size=(2, 624, 128)).astype(np.float32)
    a, _ = forward(params, x, cfg)
    b, _ = forward(params, x.copy(), cfg)
    assert a.strong.tobytes() == b.strong.tobytes() and a.weak.tobytes() == b.weak.tobytes()


def test_predict_matches_forward():
    params = init_params(TINY, 0)
    x = np.random.default_rng(11).normal(size=(7, 8, 16))
    p = predict(params, x, TINY, batch_size=3)
    np.testing.assert_allclose(p.strong, forward(params, x, TINY)[0].strong, atol=1e-14)


def test_backward_zero_and_linear():
    params = init_params(TINY, 0)
    x = np.random.default_rng(12).normal(size=(2, 8, 16))
    p, cache = forward(params, x, TINY)
    zero = backward(params, cache, np.zeros_like(p.strong), np.zeros_like(p.weak), TINY)
    assert all(not v.any() for v in zero.values())
    rng = np.random.default_rng(13)
    g1 = (rng.normal(size=p.strong.shape), rng.normal(size=p.weak.shape))
    g2 = (rng.normal(size=p.strong.shape), rng.normal(size=p.weak.shape))
    a = backward(params, cache, *g1, TINY)
    b = backward(params, cache, *g2, TINY)
    c = backward(params, cache, 2 * g1[0] + g2[0], 2 * g1[1] + g2[1], TINY)
    for k in params:
        np.testing.assert_allclose(c[k], 2 * a[k] + b[k], atol=1e-10)


def test_backward_rejects_foreign_cache_and_bad_shapes():
    params = init_params(TINY, 0)
    x = np.random.default_rng(14).normal(size=(1, 8, 16))
    p, cache = forward(params, x, TINY)
    other = ModelConfig(n_classes=3, n_mels=16, n_frames=8, channels=(2, 3), time_pools=(2, 2), freq_pools=(4, 2),
                        gru_hidden=3, gru_layers=1)
    with pytest.raises(StateError):
        backward(params, cache, p.strong, p.weak, other)
    with pytest.raises(ShapeError):
        backward(params, cache, p.strong[:, :1], p.weak, TINY)


def test_forward_rejects_short_input_and_reports_layer():
    params = init_params(TINY, 0)
    with pytest.raises(ShapeError):
        forward(params, np.zeros((1, 4, 16)), TINY)
    params["conv0.w"] = params["conv0.w"] * np.inf
    with pytest.raises(NumericalError) as info, np.errstate(invalid="ignore"):
        forward(params, np.ones((1, 8, 16)), TINY)
    assert info.value.layer == 0


# ---------------------------------------------------------------- EMA

def test_ema_single_step_example():
    t = ema_update({"w": np.zeros(1)}, {"w": np.ones(1)}, 0.999)
    np.testing.assert_allclose(t["w"], 0.001)


def test_ema_closed_form():
    rng = np.random.default_rng(15)
    s, theta0 = rng.normal(size=10), rng.normal(size=10)
    alpha = 0.99
    t = {"w": theta0.copy()}
    for k in range(1, 1001):
        t = ema_update(t, {"w": s}, alpha)
        if k in (1, 10, 100, 500, 1000):
            np.testing.assert_allclose(t["w"], s * (1 - alpha ** k) + theta0 * alpha ** k, rtol=0, atol=1e-12)


def test_ema_contraction():
    rng = np.random.default_rng(16)
    s, t = {"w": rng.normal(size=20)}, {"w": rng.normal(size=20)}
    dist = [np.linalg.norm(t["w"] - s["w"])]
    for _ in range(50):
        t = ema_update(t, s, 0.9)
        dist.append(np.linalg.norm(t["w"] - s["w"]))
    assert all(b <= a for a, b in zip(dist, dist[1:]))


def test_ema_rejects_mismatch():
    with pytest.raises(ShapeError):
        ema_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"w": np.zeros(2)}, {"w": np.zeros(2)}, 1.0)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig()
    s, t = init_params(cfg, 0, np.float32), init_params(cfg, 1, np.float32)
    save_checkpoint(tmp_path / "m.ckpt", cfg, s, t, {"epoch": 3})
    cfg2, s2, t2, meta = load_checkpoint(tmp_path / "m.ckpt", cfg)
    assert cfg2 == cfg and meta == {"epoch": 3}
    for k in s:
        np.testing.assert_array_equal(s2[k], s[k])
        np.testing.assert_array_equal(t2[k], t[k])
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_config_mismatch(tmp_path):
    cfg = ModelConfig()
    save_checkpoint(tmp_path / "m.ckpt", cfg, init_params(cfg, 0), init_params(cfg, 0))
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "m.ckpt", ModelConfig(gru_hidden=16))


def test_config_json_round_trip():
    cfg = ModelConfig(channels=(8, 8, 8), gru_layers=2)
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    assert cfg.digest() != ModelConfig().digest()


def test_config_rejects_bad_pooling():
    with pytest.raises(ShapeError):
        ModelConfig(n_frames=625)
    with pytest.raises(ShapeError):
        ModelConfig(channels=(16, 32))
