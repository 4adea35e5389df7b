"""Recurrent mixture-density network: forward pass and exact reverse-mode gradients.

The network reads a window of ``seq_len`` frames and predicts the density of
the next frame. It has one recurrent stream over the raw window and, when
``multires`` is on, further streams over strided per-dimension convolutions
of it. Each stream is a stack of GRU layers followed by attention pooling
(or the last hidden state). The pooled vectors are concatenated, passed
through a ReLU trunk and mapped by five linear heads to the raw mixture
parameters, see :class:`rsmm.density.RawMixture`.

All activations are processed time-major, ``(T, B, features)``, so the GRU
kernels in :mod:`rsmm.kernels` step over contiguous blocks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import kernels
from .density import Family, RawMixture, n_lower
from .errors import InvalidArgument, InvalidState

VARIANTS = {
    "RGMM": (Family.GAUSSIAN, False, True),
    "RGMM-MR": (Family.GAUSSIAN, True, True),
    "RSMM": (Family.STUDENT_T, False, True),
    "RSMM-MR": (Family.STUDENT_T, True, True),
    "RSMM-MR-NoAttn": (Family.STUDENT_T, True, False),
}


def conv_length(t: int, kernel: int, stride: int) -> int:
    return (t - kernel) // stride + 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``trunk`` defaults to ``hidden``. ``resolutions`` counts the recurrent
    streams when ``multires`` is on; stream ``k`` reads the convolution of
    stream ``k-1``'s input, so strides compose.
    """

    P: int
    hidden: int = 64
    layers: int = 2
    seq_len: int = 70
    c: int = 3
    family: Family = Family.STUDENT_T
    multires: bool = True
    attention: bool = True
    conv_kernel: int = 10
    conv_stride: int = 3
    conv_padding: int = 0
    nu_lo: float = 1.0
    nu_hi: float = 10.0
    trunk: Optional[int] = None
    resolutions: int = 2

    def __post_init__(self):
        self.family = Family.parse(self.family)
        if self.trunk is None:
            self.trunk = self.hidden
        for name in ("P", "hidden", "layers", "c", "seq_len", "trunk"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.conv_padding != 0:
            raise InvalidArgument("only conv_padding=0 is supported")
        if not self.nu_lo < self.nu_hi:
            raise InvalidArgument("nu_lo must be below nu_hi")
        if self.multires:
            if self.resolutions < 2:
                raise InvalidArgument("multires needs at least two resolutions")
            lengths = self.stream_lengths()
            if min(lengths) < 1 or self.seq_len <= self.conv_kernel:
                raise InvalidArgument(
                    f"seq_len={self.seq_len} too short for {self.resolutions} resolutions "
                    f"with kernel {self.conv_kernel}"
                )

    @property
    def n_streams(self) -> int:
        return self.resolutions if self.multires else 1

    def stream_lengths(self) -> list:
        lengths = [self.seq_len]
        for _ in range(1, self.resolutions if self.multires else 1):
            prev = lengths[-1]
            lengths.append(conv_length(prev, self.conv_kernel, self.conv_stride) if prev >= self.conv_kernel else 0)
        return lengths

    def to_dict(self) -> dict:
        out = asdict(self)
        out["family"] = self.family.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgument(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_variant(cls, variant: str, P: int, **overrides) -> "ModelConfig":
        if variant not in VARIANTS:
            raise InvalidArgument(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
        family, multires, attention = VARIANTS[variant]
        return cls(P=P, family=family, multires=multires, attention=attention, **overrides)

    def variant(self) -> Optional[str]:
        key = (self.family, self.multires, self.attention)
        for name, flags in VARIANTS.items():
            if flags == key:
                return name
        return None


def tensor_shapes(config: ModelConfig) -> dict:
    """Ordered mapping of every trainable tensor name to its shape."""
    P, H, c = config.P, config.hidden, config.c
    shapes = {}
    for s in range(config.n_streams):
        if s > 0:
            shapes[f"s{s}.conv.filter"] = (P, config.conv_kernel)
            shapes[f"s{s}.conv.bias"] = (P,)
        for layer in range(config.layers):
            n_in = P if layer == 0 else H
            pre = f"s{s}.gru{layer}"
            for gate in ("u", "r", "h"):
                shapes[f"{pre}.W_{gate}"] = (H, H)
                shapes[f"{pre}.U_{gate}"] = (H, n_in)
                shapes[f"{pre}.b_{gate}"] = (H,)
        if config.attention:
            shapes[f"s{s}.attn.W_a"] = (H, H)
            shapes[f"s{s}.attn.b_a"] = (H,)
            # a bias on the scalar score would cancel in the softmax
            shapes[f"s{s}.attn.W_q"] = (H,)
    D = config.trunk
    shapes["trunk.W_1"] = (D, H * config.n_streams)
    shapes["trunk.b_1"] = (D,)
    heads = {
        "mu": c * P,
        "alpha": c,
        "sigma_diag": c * P,
        "sigma_lower": c * n_lower(P),
    }
    if config.family is Family.STUDENT_T:
        heads["nu"] = c
    for name, width in heads.items():
        shapes[f"head.W_{name}"] = (width, D)
        shapes[f"head.b_{name}"] = (width,)
    return shapes


class ModelWeights:
    """All trainable tensors of one model, keyed by name.

    ``version`` increases whenever the tensors are modified in place; forward
    traces record it so that a stale trace cannot be backpropagated.
    """

    def __init__(self, config: ModelConfig, tensors: dict):
        expected = tensor_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            if missing or extra:
                raise InvalidArgument(f"tensor names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
            tensors = {name: tensors[name] for name in expected}
        self.tensors = {}
        for name, shape in expected.items():
            arr = np.array(tensors[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise InvalidArgument(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidArgument(f"{name} has non-finite entries")
            self.tensors[name] = arr
        self.config = config
        self.version = 0

    def __getitem__(self, name) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def touch(self):
        self.version += 1

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def equal(self, other: "ModelWeights") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def zeros_like(weights: ModelWeights) -> dict:
    return {name: np.zeros_like(arr) for name, arr in weights.items()}


# ---------------------------------------------------------------------------
# building blocks


def gru_step(h_prev, x_in, W, U, b=None):
    """One GRU update for a single vector, written exactly as the cell equations.

    ``W``, ``U`` and ``b`` are dicts keyed by gate ``"u"``, ``"r"``, ``"h"``;
    biases default to zero.
    """
    h_prev = np.asarray(h_prev, dtype=float)
    x_in = np.asarray(x_in, dtype=float)
    hid = h_prev.shape[0]
    for g in ("u", "r", "h"):
        if W[g].shape != (hid, hid) or U[g].shape != (hid, x_in.shape[0]):
            raise InvalidArgument(f"gate {g}: weight shapes do not match h_prev/x_in")
    b = b or {g: np.zeros(hid) for g in ("u", "r", "h")}
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))  # noqa: E731
    u = sig(W["u"] @ h_prev + U["u"] @ x_in + b["u"])
    r = sig(W["r"] @ h_prev + U["r"] @ x_in + b["r"])
    cand = np.tanh(r * (W["h"] @ h_prev) + U["h"] @ x_in + b["h"])
    return u * h_prev + (1.0 - u) * cand


def conv_stream(x_dim, filt, stride: int = 3):
    """Valid strided cross-correlation of one univariate series with ``filt``."""
    x_dim = np.asarray(x_dim, dtype=float)
    filt = np.asarray(filt, dtype=float)
    k = filt.shape[0]
    if x_dim.shape[0] < k:
        raise InvalidArgument(f"series of length {x_dim.shape[0]} shorter than kernel {k}")
    n_out = conv_length(x_dim.shape[0], k, stride)
    view = np.lib.stride_tricks.sliding_window_view(x_dim, k)[::stride][:n_out]
    return view @ filt


def _conv_forward(x, filt, bias, stride):
    # x (T, B, P), filt (P, K) -> (T', B, P)
    t_len = x.shape[0]
    k = filt.shape[1]
    n_out = conv_length(t_len, k, stride)
    span = stride * (n_out - 1) + 1
    out = np.broadcast_to(bias, (n_out,) + x.shape[1:]).copy()
    for j in range(k):
        out += x[j : j + span : stride] * filt[:, j]
    return out


def _conv_backward(x, filt, dout, stride, need_dx):
    k = filt.shape[1]
    n_out = dout.shape[0]
    span = stride * (n_out - 1) + 1
    dfilt = np.empty_like(filt)
    dx = np.zeros_like(x) if need_dx else None
    for j in range(k):
        seg = x[j : j + span : stride]
        dfilt[:, j] = np.einsum("tbp,tbp->p", dout, seg)
        if need_dx:
            dx[j : j + span : stride] += dout * filt[:, j]
    return dfilt, dout.sum(axis=(0, 1)), dx


def attention_pool(h_seq, W_a, W_q, b_a=None):
    """Attention-weighted average of a hidden-state sequence.

    ``h_seq`` is (L, hidden) for one sequence or (L, B, hidden) for a batch.
    Returns ``(pooled, beta)`` with ``beta`` summing to one over the L steps.
    """
    h_seq = np.asarray(h_seq, dtype=float)
    if h_seq.shape[0] < 1:
        raise InvalidArgument("attention needs at least one step")
    if b_a is None:
        b_a = np.zeros(W_a.shape[0])
    q = np.tanh(h_seq @ W_a.T + b_a)
    scores = q @ W_q
    beta = np.exp(scores - scores.max(axis=0, keepdims=True))
    beta /= beta.sum(axis=0, keepdims=True)
    pooled = np.einsum("l...,l...h->...h", beta, h_seq)
    return pooled, beta


def _stack(weights, pre, kind):
    return np.concatenate([weights[f"{pre}.{kind}_{g}"] for g in ("u", "r", "h")], axis=0)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    """Intermediate activations of one batched forward pass.

    ``streams[s]`` holds, per stream, the input sequence, the per-layer GRU
    inputs and kernel outputs, and the attention quantities. ``beta`` per
    stream is a simplex over that stream's time steps.
    """

    weights: ModelWeights
    version: int
    batch: int
    streams: list
    feat: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray

    def attention_weights(self, stream: int = 0) -> Optional[np.ndarray]:
        beta = self.streams[stream]["beta"]
        return None if beta is None else beta.T


def _as_batch(windows, config: ModelConfig) -> np.ndarray:
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.seq_len, config.P):
        raise InvalidArgument(
            f"windows must have shape (B, {config.seq_len}, {config.P}); got {np.shape(windows)}"
        )
    return x


def forward_batch(windows, weights: ModelWeights):
    """Forward pass for a batch of windows (B, seq_len, P).

    Returns ``(raw, trace)`` where ``raw`` is a :class:`RawMixture` of batch B.
    """
    cfg = weights.config
    x = _as_batch(windows, cfg)
    b = x.shape[0]
    H = cfg.hidden
    inp = np.ascontiguousarray(x.transpose(1, 0, 2))
    streams = []
    pooled = []
    for s in range(cfg.n_streams):
        st = {"conv_in": None}
        # stream s reads the convolution of stream s-1's input
        if s > 0:
            st["conv_in"] = inp
            inp = _conv_forward(inp, weights[f"s{s}.conv.filter"], weights[f"s{s}.conv.bias"], cfg.conv_stride)
        layers = []
        seq = inp
        for layer in range(cfg.layers):
            pre = f"s{s}.gru{layer}"
            U = _stack(weights, pre, "U")
            bias = _stack(weights, pre, "b")
            W = _stack(weights, pre, "W")
            xproj = np.ascontiguousarray(seq @ U.T + bias)
            h0 = np.zeros((b, H))
            hs, gates, hn = kernels.gru_forward(xproj, W, h0)
            layers.append({"x": seq, "hs": hs, "gates": gates, "hn": hn, "h0": h0, "U": U, "W": W})
            seq = hs
        st["layers"] = layers
        if cfg.attention:
            W_a = weights[f"s{s}.attn.W_a"]
            q = np.tanh(seq @ W_a.T + weights[f"s{s}.attn.b_a"])
            scores = q @ weights[f"s{s}.attn.W_q"]
            beta = np.exp(scores - scores.max(axis=0, keepdims=True))
            beta /= beta.sum(axis=0, keepdims=True)
            pool = np.einsum("tb,tbh->bh", beta, seq)
            st["q"] = q
            st["beta"] = beta
        else:
            pool = seq[-1].copy()
            st["q"] = st["beta"] = None
        pooled.append(pool)
        streams.append(st)

    feat = np.concatenate(pooled, axis=1)
    pre1 = feat @ weights["trunk.W_1"].T + weights["trunk.b_1"]
    act1 = np.maximum(pre1, 0.0)

    def head(name):
        return act1 @ weights[f"head.W_{name}"].T + weights[f"head.b_{name}"]

    c, P = cfg.c, cfg.P
    raw = RawMixture(
        alpha_logits=head("alpha"),
        mu=head("mu").reshape(b, c, P),
        diag_raw=head("sigma_diag").reshape(b, c, P),
        lower_raw=head("sigma_lower").reshape(b, c, n_lower(P)),
        nu_raw=head("nu") if cfg.family is Family.STUDENT_T else None,
        family=cfg.family,
        nu_lo=cfg.nu_lo,
        nu_hi=cfg.nu_hi,
    )
    trace = ForwardTrace(weights, weights.version, b, streams, feat, pre1, act1)
    return raw, trace


def backward(trace: ForwardTrace, grad: RawMixture) -> dict:
    """Reverse-mode gradient of a scalar loss w.r.t. every weight tensor.

    ``grad`` holds dLoss/d(raw head outputs) for the batch of ``trace``.
    Returns a dict with the same keys and shapes as the weights.
    """
    weights = trace.weights
    if trace.version != weights.version:
        raise InvalidState("forward trace is stale: weights changed after the forward pass")
    cfg = weights.config
    b = trace.batch
    if grad.batch != b or grad.family is not cfg.family:
        raise InvalidState("head gradient does not match the forward trace")
    out = zeros_like(weights)
    act1 = trace.act1

    head_grads = {
        "alpha": grad.alpha_logits,
        "mu": grad.mu.reshape(b, -1),
        "sigma_diag": grad.diag_raw.reshape(b, -1),
        "sigma_lower": grad.lower_raw.reshape(b, -1),
    }
    if cfg.family is Family.STUDENT_T:
        head_grads["nu"] = grad.nu_raw
    dact1 = np.zeros_like(act1)
    for name, g in head_grads.items():
        out[f"head.W_{name}"] = g.T @ act1
        out[f"head.b_{name}"] = g.sum(axis=0)
        dact1 += g @ weights[f"head.W_{name}"]

    dpre1 = dact1 * (trace.pre1 > 0)
    out["trunk.W_1"] = dpre1.T @ trace.feat
    out["trunk.b_1"] = dpre1.sum(axis=0)
    dfeat = dpre1 @ weights["trunk.W_1"]

    H = cfg.hidden
    dconv_in = None
    for s in range(cfg.n_streams - 1, -1, -1):
        st = trace.streams[s]
        dpool = dfeat[:, s * H : (s + 1) * H]
        top = st["layers"][-1]["hs"]
        if cfg.attention:
            beta, q = st["beta"], st["q"]
            W_a = weights[f"s{s}.attn.W_a"]
            W_q = weights[f"s{s}.attn.W_q"]
            dbeta = np.einsum("tbh,bh->tb", top, dpool)
            dhs = beta[:, :, None] * dpool[None]
            dscore = beta * (dbeta - np.sum(beta * dbeta, axis=0, keepdims=True))
            out[f"s{s}.attn.W_q"] = np.einsum("tb,tbh->h", dscore, q)
            dpre_a = dscore[:, :, None] * W_q * (1.0 - q * q)
            out[f"s{s}.attn.W_a"] = dpre_a.reshape(-1, H).T @ top.reshape(-1, H)
            out[f"s{s}.attn.b_a"] = dpre_a.sum(axis=(0, 1))
            dhs += dpre_a @ W_a
        else:
            dhs = np.zeros_like(top)
            dhs[-1] = dpool
        for layer in range(cfg.layers - 1, -1, -1):
            lay = st["layers"][layer]
            dxproj, dhid, _ = kernels.gru_backward(
                np.ascontiguousarray(dhs), lay["hs"], lay["h0"], lay["gates"], lay["hn"], lay["W"]
            )
            hprev = np.concatenate([lay["h0"][None], lay["hs"][:-1]], axis=0)
            dW = dhid.reshape(-1, 3 * H).T @ hprev.reshape(-1, H)
            dU = dxproj.reshape(-1, 3 * H).T @ lay["x"].reshape(-1, lay["x"].shape[-1])
            db = dxproj.sum(axis=(0, 1))
            pre = f"s{s}.gru{layer}"
            for i, g in enumerate(("u", "r", "h")):
                sl = slice(i * H, (i + 1) * H)
                out[f"{pre}.W_{g}"] = dW[sl]
                out[f"{pre}.U_{g}"] = dU[sl]
                out[f"{pre}.b_{g}"] = db[sl]
            need_dx = layer > 0 or s > 0
            if need_dx:
                dhs = dxproj @ lay["U"]
        if s > 0:
            dinput = dhs
            if dconv_in is not None:
                dinput = dinput + dconv_in
            dfilt, dbias, dconv_in = _conv_backward(
                st["conv_in"], weights[f"s{s}.conv.filter"], dinput, cfg.conv_stride, need_dx=s > 1
            )
            out[f"s{s}.conv.filter"] = dfilt
            out[f"s{s}.conv.bias"] = dbias
    return out


def forward(window, weights: ModelWeights, config: Optional[ModelConfig] = None):
    """Predict the next-frame density for one window (seq_len, P).

    Returns ``(MixtureParams, ForwardTrace)``; the trace has batch size one.
    """
    if config is not None and config != weights.config:
        raise InvalidArgument("config does not match the weights' config")
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise InvalidArgument("forward expects a single (seq_len, P) window")
    raw, trace = forward_batch(window[None], weights)
    return raw.to_params(0), trace


def head_outputs(windows, weights: ModelWeights, chunk: int = 512) -> RawMixture:
    """Forward pass without a trace, processed in chunks to bound memory."""
    x = _as_batch(windows, weights.config)
    parts = [forward_batch(x[i : i + chunk], weights)[0] for i in range(0, x.shape[0], chunk)]
    if len(parts) == 1:
        return parts[0]
    first = parts[0]
    merged = {k: np.concatenate([p.arrays()[k] for p in parts]) for k in first.arrays()}
    return first.replace(**merged)
