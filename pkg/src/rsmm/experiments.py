"""Synthetic detection experiments shared by the ``ablate`` command and the acceptance suite.

One experiment = one synthetic machine, a training split of normal
recordings, a longer test split of normal and anomalous recordings, optional
noise-burst contamination of the training split, then train and score one
model variant.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

from .data import Scaler, SynthSpec, encode_fseq, generate
from .errors import InvalidArgument
from .network import VARIANTS, ModelConfig
from .scoring import auc, inject_noise_bursts, pauc, score_recordings
from .training import TrainConfig, make_windows, train


@dataclass
class ExperimentSpec:
    P: int = 8
    train_T: int = 80
    test_T: int = 160
    n_train: int = 200
    n_test_normal: int = 50
    n_test_anomalous: int = 50
    anomaly: str = "freq_shift"
    magnitude: float = 1.0
    hidden: int = 64
    layers: int = 2
    seq_len: int = 70
    c: int = 3
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-3
    contamination: float = 0.0
    sigma2: float = 5.0
    p: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    train: list
    test: list

    def digest(self) -> str:
        h = hashlib.sha256()
        for rec in self.train + self.test:
            h.update(rec.recording_id.encode() + b"\0" + rec.label.encode() + b"\0")
            h.update(encode_fseq(rec.values))
        return h.hexdigest()


@dataclass
class VariantResult:
    variant: str
    seed: int
    auc: float
    pauc: float
    final_nll: float
    history: list
    dataset_hash: str


def synthetic_dataset(spec: ExperimentSpec, seed: int) -> Dataset:
    train_spec = SynthSpec(P=spec.P, T=spec.train_T, n_recordings=spec.n_train, n_anomalous=0,
                           anomaly=spec.anomaly, magnitude=spec.magnitude, seed=seed, split="train")
    test_spec = SynthSpec(P=spec.P, T=spec.test_T, n_recordings=spec.n_test_normal,
                          n_anomalous=spec.n_test_anomalous, anomaly=spec.anomaly,
                          magnitude=spec.magnitude, seed=seed, split="test")
    train_normal, _ = generate(train_spec)
    test_normal, test_anomalous = generate(test_spec)
    return Dataset(train_normal, test_normal + test_anomalous)


def prepare(dataset: Dataset, contamination: float, sigma2: float, seed: int):
    """Contaminate the training split (raw units), then fit the scaler on it and scale both splits."""
    train_set = dataset.train
    if contamination > 0:
        train_set, _ = inject_noise_bursts(train_set, contamination, sigma2, seed)
    scaler = Scaler.fit(train_set)
    scale = lambda recs: [r.with_values(scaler.apply(r.values)) for r in recs]  # noqa: E731
    return scale(train_set), scale(dataset.test), scaler


def model_config(spec: ExperimentSpec, variant: str) -> ModelConfig:
    return ModelConfig.from_variant(variant, P=spec.P, hidden=spec.hidden, layers=spec.layers,
                                    seq_len=spec.seq_len, c=spec.c)


def run_variant(variant: str, spec: ExperimentSpec, seed: int, dataset: Dataset | None = None) -> VariantResult:
    if variant not in VARIANTS:
        raise InvalidArgument(f"unknown variant {variant!r}; choose from {list(VARIANTS)}")
    dataset = dataset or synthetic_dataset(spec, seed)
    train_recs, test_recs, _ = prepare(dataset, spec.contamination, spec.sigma2, seed)
    tcfg = TrainConfig(epochs=spec.epochs, batch_size=spec.batch_size, lr=spec.lr,
                       weight_decay=spec.weight_decay, seed=seed)
    weights, history = train(model_config(spec, variant), tcfg, make_windows(train_recs, spec.seq_len))
    reports, _ = score_recordings(weights, test_recs, variant)
    neg = [r.score for r in reports if r.label == "normal"]
    pos = [r.score for r in reports if r.label == "anomaly"]
    return VariantResult(variant, seed, auc(neg, pos), pauc(neg, pos, spec.p),
                         history[-1] if history else float("nan"), history, dataset.digest())


def ablation(spec: ExperimentSpec, seed: int, dataset: Dataset | None = None, variants=None):
    """Run every variant on the same dataset and seed."""
    dataset = dataset or synthetic_dataset(spec, seed)
    return [run_variant(v, spec, seed, dataset) for v in (variants or list(VARIANTS))]

