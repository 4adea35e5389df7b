"""Window datasets, Adam with L2 penalty, weight initialization and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np

from .checkpoint import save_checkpoint
from .data import FrameSequence, rng_for
from .density import batch_logpdf_and_grad
from .errors import InvalidArgument, NumericalError
from .network import ModelConfig, ModelWeights, backward, forward_batch, tensor_shapes

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-5
    weight_decay: float = 1e-3
    init_scale: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise InvalidArgument("lr must be non-negative")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.epochs < 0:
            raise InvalidArgument("epochs must be >= 0")
        if self.weight_decay < 0 or self.init_scale < 0:
            raise InvalidArgument("weight_decay and init_scale must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise InvalidArgument("invalid Adam hyperparameters")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise InvalidArgument("clip_norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class WindowSet:
    """Stride-1 (window, next frame) pairs.

    ``windows`` is (N, seq_len, P), ``targets`` (N, P) and ``recording`` (N,)
    the index of the source recording of every pair.
    """

    windows: np.ndarray
    targets: np.ndarray
    recording: np.ndarray
    skipped: int = 0

    def __len__(self):
        return self.targets.shape[0]


def _frames(rec) -> np.ndarray:
    return rec.values if isinstance(rec, FrameSequence) else np.asarray(rec, dtype=np.float64)


def recording_windows(values: np.ndarray, seq_len: int):
    """All (window, target) pairs of one recording as arrays (T-seq_len, seq_len, P) and (T-seq_len, P)."""
    n = values.shape[0] - seq_len
    if n < 1:
        raise InvalidArgument(f"recording has {values.shape[0]} frames, need at least {seq_len + 1}")
    view = np.lib.stride_tricks.sliding_window_view(values, seq_len, axis=0)[:n]
    return np.ascontiguousarray(view.transpose(0, 2, 1)), values[seq_len:].copy()


def make_windows(recordings, seq_len: int) -> WindowSet:
    if seq_len < 1:
        raise InvalidArgument("seq_len must be >= 1")
    xs, ys, idx = [], [], []
    skipped = 0
    dim = None
    for i, rec in enumerate(recordings):
        values = _frames(rec)
        if dim is None:
            dim = values.shape[1]
        elif values.shape[1] != dim:
            raise InvalidArgument(f"recording {i} has {values.shape[1]} dimensions, expected {dim}")
        if values.shape[0] < seq_len + 1:
            skipped += 1
            continue
        x, y = recording_windows(values, seq_len)
        xs.append(x)
        ys.append(y)
        idx.append(np.full(len(y), i, dtype=np.int64))
    if skipped:
        log.warning("skipped %d recording(s) shorter than %d frames", skipped, seq_len + 1)
    if not xs:
        p = dim or 0
        return WindowSet(np.empty((0, seq_len, p)), np.empty((0, p)), np.empty(0, dtype=np.int64), skipped)
    return WindowSet(np.concatenate(xs), np.concatenate(ys), np.concatenate(idx), skipped)


def init_weights(config: ModelConfig, seed: int, scale: float = 0.1) -> ModelWeights:
    """Uniform(-scale, scale) for every tensor, each from its own keyed stream."""
    tensors = {
        name: rng_for(seed, "init", name).uniform(-scale, scale, size=shape)
        for name, shape in tensor_shapes(config).items()
    }
    return ModelWeights(config, tensors)


class AdamState:
    """First and second moment estimates plus the step counter."""

    def __init__(self, weights: ModelWeights):
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0


def adam_step(weights: ModelWeights, grads: dict, moments: AdamState, t: int, cfg: TrainConfig):
    """Apply one bias-corrected Adam update in place.

    The L2 penalty enters as ``grad + weight_decay * w`` before the moments.
    Every gradient is checked before anything changes, so a rejected step
    leaves weights and moments untouched.
    """
    if t < 1:
        raise InvalidArgument("Adam step index starts at 1")
    for name in weights:
        g = grads.get(name)
        if g is None:
            raise InvalidArgument(f"missing gradient for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in tensor {name}")
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, w in weights.items():
        g = grads[name]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * w
        m = moments.m[name]
        v = moments.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        w -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    moments.t = t
    weights.touch()
    return weights, moments


def _clip(grads: dict, max_norm: float):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        s = max_norm / total
        for g in grads.values():
            g *= s


def batch_loss_and_grads(weights: ModelWeights, x, y):
    """Mean NLL of a batch and its gradient for every tensor."""
    raw, trace = forward_batch(x, weights)
    logp, g = batch_logpdf_and_grad(y, raw)
    b = y.shape[0]
    scale = -1.0 / b
    grad_raw = g.replace(**{k: v * scale for k, v in g.arrays().items()})
    return -float(np.mean(logp)), backward(trace, grad_raw)


class TrainingDiverged(NumericalError):
    """Raised when a batch loss or gradient becomes non-finite.

    ``weights`` holds the last weights whose epoch completed cleanly.
    """

    def __init__(self, message, weights, history):
        super().__init__(message)
        self.weights = weights
        self.history = history


def train(
    config: ModelConfig,
    tcfg: TrainConfig,
    data: WindowSet,
    checkpoint_path=None,
    weights: Optional[ModelWeights] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
):
    """Minimize the mean per-window NLL with Adam.

    Returns ``(weights, history)`` where ``history[e]`` is the mean NLL of
    epoch ``e + 1`` over all windows, measured batch by batch before each
    update. Window order is reshuffled every epoch from ``tcfg.seed``. With a
    ``checkpoint_path`` the weights are saved after every completed epoch, so
    on divergence the file still holds the last good state.
    """
    n = len(data)
    if n == 0:
        raise InvalidArgument("no training windows")
    if data.windows.shape[1:] != (config.seq_len, config.P):
        raise InvalidArgument(f"windows have shape {data.windows.shape[1:]}, model expects {(config.seq_len, config.P)}")
    if weights is None:
        weights = init_weights(config, tcfg.seed, tcfg.init_scale)
    elif weights.config != config:
        raise InvalidArgument("initial weights do not match the model config")
    moments = AdamState(weights)
    shuffle = rng_for(tcfg.seed, "shuffle")
    history = []
    last_good = weights.copy()
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = np.sort(order[start : start + tcfg.batch_size])
            loss, grads = batch_loss_and_grads(weights, data.windows[idx], data.targets[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", last_good, history)
            if tcfg.clip_norm is not None:
                _clip(grads, tcfg.clip_norm)
            step += 1
            try:
                adam_step(weights, grads, moments, step, tcfg)
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, history) from exc
            total += loss * len(idx)
        mean = total / n
        history.append(mean)
        last_good = weights.copy()
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, weights)
        log.info("epoch %d mean NLL %.6f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    if checkpoint_path is not None and tcfg.epochs == 0:
        save_checkpoint(checkpoint_path, weights)
    return weights, history


def format_loss_csv(history) -> str:
    lines = ["epoch,mean_nll"]
    lines += [f"{i},{v:.17g}" for i, v in enumerate(history, start=1)]
    return "\n".join(lines) + "\n"
