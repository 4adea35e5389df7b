import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import SEEDS, TINY, analytic, max_relative_error, tiny_problem
from rsmm.density import Family, simplex_softmax, softplus, scaled_sigmoid
from rsmm.errors import InvalidArgument, InvalidState
from rsmm.network import (
    VARIANTS,
    ModelConfig,
    ModelWeights,
    attention_pool,
    backward,
    conv_length,
    conv_stream,
    forward,
    forward_batch,
    gru_step,
    head_outputs,
    tensor_shapes,
)
from rsmm.training import init_weights, recording_windows

GATES = ("u", "r", "h")


def random_weights(cfg, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return ModelWeights(cfg, {k: rng.uniform(-scale, scale, size=s) for k, s in tensor_shapes(cfg).items()})


# ---------------------------------------------------------------- GRU cell


def test_gru_zero_weights_halves_state():
    H, X = 3, 2
    W = {g: np.zeros((H, H)) for g in GATES}
    U = {g: np.zeros((H, X)) for g in GATES}
    h = np.array([0.4, -1.0, 2.0])
    np.testing.assert_array_equal(gru_step(h, np.ones(X), W, U), 0.5 * h)
    np.testing.assert_array_equal(gru_step(np.zeros(H), np.ones(X), W, U), np.zeros(H))


def test_gru_matches_scalar_loop():
    rng = np.random.default_rng(0)
    H, X = 3, 2
    W = {g: rng.normal(size=(H, H)) for g in GATES}
    U = {g: rng.normal(size=(H, X)) for g in GATES}
    b = {g: rng.normal(size=H) for g in GATES}
    h, x = rng.normal(size=H), rng.normal(size=X)

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    expect = []
    for i in range(H):
        au = sum(W["u"][i, j] * h[j] for j in range(H)) + sum(U["u"][i, j] * x[j] for j in range(X)) + b["u"][i]
        ar = sum(W["r"][i, j] * h[j] for j in range(H)) + sum(U["r"][i, j] * x[j] for j in range(X)) + b["r"][i]
        wh = sum(W["h"][i, j] * h[j] for j in range(H))
        cand = math.tanh(sig(ar) * wh + sum(U["h"][i, j] * x[j] for j in range(X)) + b["h"][i])
        expect.append(sig(au) * h[i] + (1 - sig(au)) * cand)
    np.testing.assert_allclose(gru_step(h, x, W, U, b), expect, rtol=0, atol=1e-14)


def test_gru_shape_mismatch():
    W = {g: np.zeros((3, 3)) for g in GATES}
    U = {g: np.zeros((3, 2)) for g in GATES}
    with pytest.raises(InvalidArgument):
        gru_step(np.zeros(3), np.zeros(4), W, U)


# ---------------------------------------------------------------- attention


def test_attention_single_step_and_uniform():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(1, 5))
    pooled, beta = attention_pool(h, rng.normal(size=(5, 5)), rng.normal(size=5))
    np.testing.assert_array_equal(beta, [1.0])
    np.testing.assert_array_equal(pooled, h[0])
    h = rng.normal(size=(7, 5))
    pooled, beta = attention_pool(h, np.zeros((5, 5)), rng.normal(size=5))
    np.testing.assert_allclose(beta, np.full(7, 1 / 7), atol=1e-16)
    np.testing.assert_allclose(pooled, h.mean(axis=0), atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.floats(-1e3, 1e3))
def test_attention_simplex_and_shift_invariance(seed, L, shift):
    rng = np.random.default_rng(seed)
    h = rng.normal(scale=3, size=(L, 4))
    W_a, W_q, b_a = rng.normal(size=(4, 4)), rng.normal(scale=5, size=4), rng.normal(size=4)
    _, beta = attention_pool(h, W_a, W_q, b_a)
    assert np.all(beta >= 0) and abs(beta.sum() - 1) < 1e-12
    scores = np.tanh(h @ W_a.T + b_a) @ W_q
    np.testing.assert_allclose(simplex_softmax(scores + shift), beta, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- convolution


def test_conv_geometry_and_impulse():
    assert conv_length(70, 10, 3) == 21
    x = np.arange(70.0)
    assert conv_stream(x, np.ones(10)).shape == (21,)
    impulse = np.zeros(10)
    impulse[0] = 1
    np.testing.assert_array_equal(conv_stream(x, impulse), x[::3][:21])
    with pytest.raises(InvalidArgument):
        conv_stream(np.zeros(9), np.ones(10))


def test_conv_matches_double_loop():
    rng = np.random.default_rng(2)
    x, f = rng.normal(size=70), rng.normal(size=10)
    expect = [sum(x[3 * t + k] * f[k] for k in range(10)) for t in range(21)]
    np.testing.assert_allclose(conv_stream(x, f), expect, rtol=0, atol=1e-13)


@given(st.integers(10, 500))
def test_conv_length_formula(t):
    out = conv_stream(np.zeros(t), np.ones(10))
    assert out.shape[0] == (t - 10) // 3 + 1 == conv_length(t, 10, 3)


# ---------------------------------------------------------------- forward


def test_variants_flags():
    assert VARIANTS["RGMM"] == (Family.GAUSSIAN, False, True)
    assert VARIANTS["RGMM-MR"] == (Family.GAUSSIAN, True, True)
    assert VARIANTS["RSMM"] == (Family.STUDENT_T, False, True)
    assert VARIANTS["RSMM-MR"] == (Family.STUDENT_T, True, True)
    assert VARIANTS["RSMM-MR-NoAttn"] == (Family.STUDENT_T, True, False)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        ModelConfig(P=2, seq_len=10, multires=True)
    with pytest.raises(InvalidArgument):
        ModelConfig(P=0)
    with pytest.raises(InvalidArgument):
        ModelConfig.from_variant("nope", P=2)
    cfg = ModelConfig.from_variant("RSMM-MR", P=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.stream_lengths() == [70, 21]
    assert "head.W_nu" not in tensor_shapes(ModelConfig.from_variant("RGMM", P=3))


def test_output_invariants_over_random_weights():
    cfg = ModelConfig.from_variant("RSMM-MR", **TINY)
    rng = np.random.default_rng(3)
    for i in range(1000):
        w = random_weights(cfg, i, scale=float(rng.uniform(0.05, 3.0)))
        params, _ = forward(rng.normal(size=(cfg.seq_len, cfg.P)), w)
        assert np.all(params.alpha >= 0) and abs(params.alpha.sum() - 1) < 1e-12
        for comp in params.components:
            assert np.all(np.diag(comp.chol_lower) > 0)
            assert cfg.nu_lo <= comp.nu <= cfg.nu_hi


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_head_range_safety_with_large_inputs(variant):
    cfg = ModelConfig.from_variant(variant, **TINY)
    w = random_weights(cfg, 4, scale=1.0)
    x = np.random.default_rng(4).uniform(-1e3, 1e3, size=(64, cfg.seq_len, cfg.P))
    raw = head_outputs(x, w)
    for k, v in raw.arrays().items():
        assert np.all(np.isfinite(v)), k
    assert np.all(raw.cholesky()[..., np.arange(cfg.P), np.arange(cfg.P)] > 0)
    for i in range(raw.batch):
        raw.to_params(i)


def test_window_has_no_outside_leakage():
    cfg = ModelConfig.from_variant("RSMM", **TINY)
    w = random_weights(cfg, 5)
    rng = np.random.default_rng(5)
    tail = rng.normal(size=(cfg.seq_len + 1, cfg.P))
    a = np.concatenate([rng.normal(size=(9, cfg.P)), tail])
    b = np.concatenate([rng.normal(size=(4, cfg.P)), tail])
    xa, _ = recording_windows(a, cfg.seq_len)
    xb, _ = recording_windows(b, cfg.seq_len)
    ra, rb = head_outputs(xa[-1:], w), head_outputs(xb[-1:], w)
    for k in ra.arrays():
        np.testing.assert_array_equal(ra.arrays()[k], rb.arrays()[k])


def straight_line(window, w: ModelWeights):
    """Per-step re-evaluation of the network with single-vector operations."""
    cfg = w.config
    H = cfg.hidden
    streams = [np.asarray(window)]
    for s in range(1, cfg.n_streams):
        prev = streams[-1]
        conv = np.stack(
            [conv_stream(prev[:, p], w[f"s{s}.conv.filter"][p], cfg.conv_stride) + w[f"s{s}.conv.bias"][p]
             for p in range(cfg.P)], axis=1)
        streams.append(conv)
    pooled = []
    for s, seq in enumerate(streams):
        for layer in range(cfg.layers):
            pre = f"s{s}.gru{layer}"
            W = {g: w[f"{pre}.W_{g}"] for g in GATES}
            U = {g: w[f"{pre}.U_{g}"] for g in GATES}
            b = {g: w[f"{pre}.b_{g}"] for g in GATES}
            h = np.zeros(H)
            out = []
            for x_t in seq:
                h = gru_step(h, x_t, W, U, b)
                out.append(h)
            seq = np.array(out)
        if cfg.attention:
            vec, _ = attention_pool(seq, w[f"s{s}.attn.W_a"], w[f"s{s}.attn.W_q"], w[f"s{s}.attn.b_a"])
        else:
            vec = seq[-1]
        pooled.append(vec)
    act = np.maximum(w["trunk.W_1"] @ np.concatenate(pooled) + w["trunk.b_1"], 0)
    head = {n: w[f"head.W_{n}"] @ act + w[f"head.b_{n}"] for n in ("alpha", "mu", "sigma_diag", "sigma_lower", "nu")
            if f"head.W_{n}" in w.tensors}
    return head


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_forward_matches_straight_line(variant):
    cfg = ModelConfig.from_variant(variant, **TINY)
    w = random_weights(cfg, 6, scale=0.8)
    window = np.random.default_rng(6).normal(size=(cfg.seq_len, cfg.P))
    params, _ = forward(window, w)
    ref = straight_line(window, w)
    c, P = cfg.c, cfg.P
    np.testing.assert_allclose(params.alpha, simplex_softmax(ref["alpha"]), atol=1e-13)
    mu = ref["mu"].reshape(c, P)
    diag = softplus(ref["sigma_diag"].reshape(c, P)) + 1e-6
    low = ref["sigma_lower"].reshape(c, -1)
    for k, comp in enumerate(params.components):
        np.testing.assert_allclose(comp.mu, mu[k], atol=1e-13)
        np.testing.assert_allclose(np.diag(comp.chol_lower), diag[k], atol=1e-13)
        np.testing.assert_allclose(comp.chol_lower[np.tril_indices(P, -1)], low[k], atol=1e-13)
        if cfg.family is Family.STUDENT_T:
            assert comp.nu == pytest.approx(scaled_sigmoid(ref["nu"][k], cfg.nu_lo, cfg.nu_hi), abs=1e-13)


def test_forward_rejects_wrong_window():
    cfg = ModelConfig.from_variant("RSMM", **TINY)
    w = random_weights(cfg, 7)
    with pytest.raises(InvalidArgument):
        forward(np.zeros((cfg.seq_len + 1, cfg.P)), w)
    with pytest.raises(InvalidArgument):
        forward(np.zeros((cfg.seq_len, cfg.P)), w, ModelConfig.from_variant("RGMM", **TINY))


def test_determinism_across_calls_and_threads():
    cfg = ModelConfig.from_variant("RSMM-MR", P=3, hidden=8, seq_len=20, c=2)
    w = init_weights(cfg, 8)
    x = np.random.default_rng(8).normal(size=(16, cfg.seq_len, cfg.P))
    ref = head_outputs(x, w).arrays()
    with ThreadPoolExecutor(4) as pool:
        outs = list(pool.map(lambda _: head_outputs(x, w).arrays(), range(8)))
    for out in outs:
        for k in ref:
            np.testing.assert_array_equal(out[k], ref[k])


def test_tensor_validation():
    cfg = ModelConfig.from_variant("RSMM", **TINY)
    good = {k: np.zeros(s) for k, s in tensor_shapes(cfg).items()}
    bad = dict(good)
    bad["trunk.b_1"] = np.zeros(3)
    with pytest.raises(InvalidArgument):
        ModelWeights(cfg, bad)
    bad = dict(good)
    bad["trunk.b_1"] = np.full(cfg.trunk, np.nan)
    with pytest.raises(InvalidArgument):
        ModelWeights(cfg, bad)
    bad = dict(good)
    del bad["trunk.b_1"]
    with pytest.raises(InvalidArgument):
        ModelWeights(cfg, bad)


# ---------------------------------------------------------------- backward


@pytest.mark.parametrize("variant", list(VARIANTS))
@pytest.mark.parametrize("seed", SEEDS)
def test_gradient_matches_finite_differences(variant, seed):
    weights, x, y = tiny_problem(variant, seed)
    assert max_relative_error(weights, x, y) < 1e-4


def test_zero_upstream_gives_zero_gradient():
    weights, x, _ = tiny_problem("RSMM-MR", 0)
    raw, trace = forward_batch(x, weights)
    zero = raw.replace(**{k: np.zeros_like(v) for k, v in raw.arrays().items()})
    for name, g in backward(trace, zero).items():
        assert not np.any(g), name


def test_stale_trace_rejected():
    weights, x, y = tiny_problem("RSMM", 0)
    raw, trace = forward_batch(x, weights)
    weights.touch()
    with pytest.raises(InvalidState):
        backward(trace, raw)
    raw, trace = forward_batch(x, weights)
    with pytest.raises(InvalidState):
        backward(trace, raw.replace(**{k: v[:1] for k, v in raw.arrays().items()}))


def test_no_attention_path_equals_engineered_attention():
    """With attention weights that put all mass on the last step, gradients match the last-state model.

    Zero biases and zero inputs before the last frame keep every earlier
    hidden state at exactly zero, so a large score on the last step makes
    beta one-hot in fp64.
    """
    # seq_len 13 lets the last frame reach the second step of the strided stream
    dims = dict(TINY, seq_len=13)
    att_cfg = ModelConfig.from_variant("RSMM-MR", **dims)
    last_cfg = ModelConfig.from_variant("RSMM-MR-NoAttn", **dims)
    rng = np.random.default_rng(9)
    shared = {}
    for k, s in tensor_shapes(last_cfg).items():
        zero_bias = (".b_" in k and ".gru" in k) or k.endswith("conv.bias")
        shared[k] = np.zeros(s) if zero_bias else rng.uniform(-0.8, 0.8, size=s)
    x = np.zeros((1, att_cfg.seq_len, att_cfg.P))
    x[:, -1] = rng.normal(scale=2.0, size=(1, att_cfg.P))
    last = ModelWeights(last_cfg, shared)
    hs_last = [np.sign(stream["layers"][-1]["hs"][-1, 0]) for stream in forward_batch(x, last)[1].streams]
    att_tensors = dict(shared)
    H = att_cfg.hidden
    for s, sign in enumerate(hs_last):
        att_tensors[f"s{s}.attn.W_a"] = 100.0 * np.eye(H)
        att_tensors[f"s{s}.attn.b_a"] = np.zeros(H)
        att_tensors[f"s{s}.attn.W_q"] = 1e4 * sign
    att = ModelWeights(att_cfg, {k: att_tensors[k] for k in tensor_shapes(att_cfg)})
    raw_a, trace_a = forward_batch(x, att)
    for stream in trace_a.streams:
        np.testing.assert_array_equal(stream["beta"][-1], 1.0)
    raw_l, _ = forward_batch(x, last)
    y = raw_l.mu.mean(axis=1)
    ga, gl = analytic(att, x, y), analytic(last, x, y)
    for name in gl:
        np.testing.assert_allclose(ga[name], gl[name], rtol=1e-12, atol=1e-14, err_msg=name)
