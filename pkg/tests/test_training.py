import logging

import numpy as np
import pytest

from rsmm.checkpoint import encode, load_checkpoint
from rsmm.data import FrameSequence
from rsmm.errors import InvalidArgument, NumericalError
from rsmm.network import ModelConfig, ModelWeights, tensor_shapes
from rsmm.training import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    batch_loss_and_grads,
    format_loss_csv,
    init_weights,
    make_windows,
    train,
)

SMALL = dict(P=2, hidden=8, seq_len=10, c=2)


def ar1_recordings(seed, n=16, T=50, P=2, phi=0.6):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = np.empty((T, P))
        x[0] = rng.normal(size=P) / np.sqrt(1 - phi**2)
        for t in range(1, T):
            x[t] = phi * x[t - 1] + rng.normal(size=P)
        out.append(x / 4.0)
    return out


def scalar_weights(value):
    cfg = ModelConfig.from_variant("RGMM", P=1, hidden=1, seq_len=1, c=1, layers=1)
    tensors = {k: np.zeros(s) for k, s in tensor_shapes(cfg).items()}
    tensors["trunk.b_1"] = np.array([value])
    return ModelWeights(cfg, tensors)


# ---------------------------------------------------------------- windows


def test_window_counts():
    assert len(make_windows([np.zeros((71, 3))], 70)) == 1
    assert len(make_windows([np.zeros((100, 3))], 70)) == 30
    a = np.arange(80.0)[:, None] * np.ones((1, 2))
    ws = make_windows([a, a + 1000], 70)
    assert len(ws) == 20
    np.testing.assert_array_equal(ws.recording, [0] * 10 + [1] * 10)
    for w, y, r in zip(ws.windows, ws.targets, ws.recording):
        # consecutive frames of one recording only
        assert np.all(np.diff(w[:, 0]) == 1) and y[0] == w[-1, 0] + 1
        assert (w[0, 0] >= 1000) == bool(r)


def test_short_recordings_skipped_with_count(caplog):
    with caplog.at_level(logging.WARNING):
        ws = make_windows([np.zeros((70, 2)), np.zeros((75, 2)), np.zeros((5, 2))], 70)
    assert len(ws) == 5 and ws.skipped == 2
    assert "skipped 2" in caplog.text
    with pytest.raises(InvalidArgument):
        make_windows([np.zeros((80, 2)), np.zeros((80, 3))], 70)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_weights():
    w = init_weights(ModelConfig.from_variant("RSMM", **SMALL), 0)
    before = w.copy()
    grads = {k: np.zeros_like(v) for k, v in w.items()}
    adam_step(w, grads, AdamState(w), 1, TrainConfig(weight_decay=0.0, lr=0.1))
    assert w.equal(before)


def test_adam_scalar_quadratic():
    w = scalar_weights(1.0)
    state = AdamState(w)
    cfg = TrainConfig(lr=0.1, weight_decay=0.0)
    for t in range(1, 201):
        grads = {k: np.zeros_like(v) for k, v in w.items()}
        grads["trunk.b_1"] = 2.0 * w["trunk.b_1"]
        adam_step(w, grads, state, t, cfg)
    assert abs(w["trunk.b_1"][0]) < 1e-3


def test_adam_rejects_non_finite_gradient_by_name():
    w = scalar_weights(1.0)
    before = w.copy()
    state = AdamState(w)
    grads = {k: np.zeros_like(v) for k, v in w.items()}
    grads["head.b_mu"] = np.array([np.nan])
    with pytest.raises(NumericalError, match="head.b_mu"):
        adam_step(w, grads, state, 1, TrainConfig(lr=0.1))
    assert w.equal(before) and state.t == 0
    with pytest.raises(InvalidArgument):
        adam_step(w, {k: np.zeros_like(v) for k, v in w.items()}, state, 0, TrainConfig())


def test_l2_shrinks_norm_every_step():
    cfg = ModelConfig.from_variant("RSMM", **SMALL)
    w = init_weights(cfg, 3)
    state = AdamState(w)
    tcfg = TrainConfig(lr=1e-3, weight_decay=1e-3)
    zero = {k: np.zeros_like(v) for k, v in w.items()}
    norms = [sum(float(np.sum(v * v)) for _, v in w.items())]
    for t in range(1, 21):
        adam_step(w, zero, state, t, tcfg)
        norms.append(sum(float(np.sum(v * v)) for _, v in w.items()))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_train_config_validation():
    with pytest.raises(InvalidArgument):
        TrainConfig(lr=-1)
    with pytest.raises(InvalidArgument):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(TrainConfig(seed=4).to_dict()) == TrainConfig(seed=4)


# ---------------------------------------------------------------- init


def test_init_range_and_determinism():
    cfg = ModelConfig.from_variant("RSMM-MR", P=4, hidden=16, seq_len=30, c=3)
    a, b = init_weights(cfg, 5), init_weights(cfg, 5)
    assert a.equal(b)
    assert not a.equal(init_weights(cfg, 6))
    for _, v in a.items():
        assert np.all(np.abs(v) <= 0.1)


def test_init_streams_decorrelated():
    cfg = ModelConfig.from_variant("RGMM", P=1, hidden=100, seq_len=5, c=1, layers=1)
    w = init_weights(cfg, 0)
    a, b = w["s0.gru0.W_u"].ravel(), w["s0.gru0.W_r"].ravel()
    assert a.size == 10**4
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_adding_tensors_does_not_perturb_others():
    small = init_weights(ModelConfig.from_variant("RGMM", **SMALL), 1)
    big = init_weights(ModelConfig.from_variant("RSMM-MR", **dict(SMALL, seq_len=12)), 1)
    for name in ("s0.gru0.W_u", "s0.gru1.U_h", "trunk.W_1", "head.W_mu"):
        if small[name].shape == big[name].shape:
            np.testing.assert_array_equal(small[name], big[name])


# ---------------------------------------------------------------- training loop


def test_training_is_deterministic(tmp_path):
    cfg = ModelConfig.from_variant("RSMM", **SMALL)
    data = make_windows(ar1_recordings(0, n=4), cfg.seq_len)
    tcfg = TrainConfig(epochs=2, batch_size=16, lr=1e-3, seed=3)
    w1, h1 = train(cfg, tcfg, data, checkpoint_path=tmp_path / "a.rmdn")
    w2, h2 = train(cfg, tcfg, data, checkpoint_path=tmp_path / "b.rmdn")
    assert h1 == h2 and w1.equal(w2)
    assert (tmp_path / "a.rmdn").read_bytes() == (tmp_path / "b.rmdn").read_bytes()
    assert load_checkpoint(tmp_path / "a.rmdn").equal(w1)
    w3, _ = train(cfg, TrainConfig(epochs=2, batch_size=16, lr=1e-3, seed=4), data)
    assert encode(w3) != encode(w1)


def test_zero_learning_rate_keeps_init():
    cfg = ModelConfig.from_variant("RSMM-MR", **dict(SMALL, seq_len=12))
    data = make_windows(ar1_recordings(1, n=3), cfg.seq_len)
    tcfg = TrainConfig(epochs=3, batch_size=8, lr=0.0, seed=2)
    w, hist = train(cfg, tcfg, data)
    assert w.equal(init_weights(cfg, 2, tcfg.init_scale)) and len(hist) == 3


def test_gaussian_family_has_no_nu_gradient():
    cfg = ModelConfig.from_variant("RGMM", **SMALL)
    w = init_weights(cfg, 0)
    data = make_windows(ar1_recordings(2, n=2), cfg.seq_len)
    _, grads = batch_loss_and_grads(w, data.windows[:8], data.targets[:8])
    assert set(grads) == set(tensor_shapes(cfg))
    assert not any("nu" in k for k in grads)


@pytest.mark.parametrize("variant", ["RGMM", "RGMM-MR", "RSMM", "RSMM-MR"])
def test_first_epoch_loss_finite(variant):
    cfg = ModelConfig.from_variant(variant, P=3, hidden=8, seq_len=20, c=2)
    rng = np.random.default_rng(0)
    for seed in range(10):
        recs = [rng.uniform(-1, 1, size=(40, 3)) for _ in range(3)]
        _, hist = train(cfg, TrainConfig(epochs=1, batch_size=32, seed=seed), make_windows(recs, cfg.seq_len))
        assert np.isfinite(hist[0])


def test_loss_non_increasing_on_ar1():
    cfg = ModelConfig.from_variant("RSMM", **SMALL)
    passed = 0
    for seed in range(10):
        data = make_windows(ar1_recordings(100 + seed), cfg.seq_len)
        _, hist = train(cfg, TrainConfig(epochs=10, batch_size=32, lr=3e-4, seed=seed), data)
        passed += all(b <= a for a, b in zip(hist, hist[1:]))
    assert passed >= 8, passed


def test_divergence_keeps_last_good(tmp_path):
    cfg = ModelConfig.from_variant("RGMM", **SMALL)
    recs = ar1_recordings(4, n=2)
    data = make_windows(recs, cfg.seq_len)
    good, _ = train(cfg, TrainConfig(epochs=1, batch_size=8, seed=0), data, checkpoint_path=tmp_path / "m.rmdn")
    data.targets[-1, 0] = 1e300
    with pytest.raises(TrainingDiverged) as info, np.errstate(all="ignore"):
        train(cfg, TrainConfig(epochs=2, batch_size=8, seed=0), data, checkpoint_path=tmp_path / "m.rmdn", weights=good.copy())
    assert info.value.weights.equal(good)
    assert load_checkpoint(tmp_path / "m.rmdn").equal(good)


def test_train_rejects_bad_input():
    cfg = ModelConfig.from_variant("RSMM", **SMALL)
    with pytest.raises(InvalidArgument):
        train(cfg, TrainConfig(), make_windows([np.zeros((5, 2))], cfg.seq_len))
    with pytest.raises(InvalidArgument):
        train(cfg, TrainConfig(), make_windows([np.zeros((30, 3))], cfg.seq_len))


def test_frame_sequences_and_loss_csv():
    recs = [FrameSequence(v, f"r{i}", "m0", "normal") for i, v in enumerate(ar1_recordings(5, n=2))]
    assert len(make_windows(recs, 10)) == 80
    assert format_loss_csv([2.5, 1.25]) == "epoch,mean_nll\n1,2.5\n2,1.25\n"
