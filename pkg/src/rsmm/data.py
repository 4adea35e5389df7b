"""Frame sequences: synthetic generation, [-1, 1] scaling and file I/O.

Two on-disk formats hold one T x P matrix each:

* CSV with header ``t,f0,...,f{P-1}``, one frame per row, 17 significant digits.
* FSEQ binary: ``b"FSEQ" | u32 version | u64 T | u64 P | row-major float64
  payload | u32 CRC32`` (little-endian, CRC over every preceding byte).
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import os
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from ._fileio import atomic_write
from .errors import CorruptFile, InvalidArgument, ParseError

LABELS = ("normal", "anomaly", "unknown")


@dataclass
class FrameSequence:
    values: np.ndarray
    recording_id: str = ""
    machine_id: str = ""
    label: str = "unknown"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise InvalidArgument(f"frame matrix must be T x P with T >= 1, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument(f"recording {self.recording_id!r} has non-finite frames")
        if self.label not in LABELS:
            raise InvalidArgument(f"label must be one of {LABELS}, got {self.label!r}")
        self.values = v

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def with_values(self, values) -> "FrameSequence":
        return FrameSequence(values, self.recording_id, self.machine_id, self.label)


def rng_for(seed: int, *key) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and a tuple of names.

    Streams for different keys are independent, so adding a new consumer does
    not shift the numbers drawn by existing ones.
    """
    digest = hashlib.sha256(repr((int(seed),) + tuple(str(k) for k in key)).encode()).digest()
    words = np.frombuffer(digest[:16], dtype="<u8")
    return np.random.Generator(np.random.Philox(key=words))


# ---------------------------------------------------------------------------
# synthetic generator


class AnomalyType(str, enum.Enum):
    FREQ_SHIFT = "freq_shift"
    AMPLITUDE_BURST = "amplitude_burst"
    EXTRA_TONE = "extra_tone"


@dataclass
class SynthSpec:
    """Sum-of-sinusoids plus AR(1) noise per dimension.

    Per-dimension frequency, amplitude, phase jitter, AR coefficient and noise
    std are drawn once per machine from ``seed``. Setting ``amplitude`` or
    ``ar_coef`` fixes that parameter for every dimension instead. ``split``
    names an independent set of recordings of the same machine, e.g. a test
    set with a different ``T``.
    """

    P: int = 8
    T: int = 100
    n_recordings: int = 200
    n_anomalous: int = 50
    anomaly: AnomalyType = AnomalyType.FREQ_SHIFT
    magnitude: float = 1.0
    seed: int = 0
    machine_id: str = "m0"
    split: str = "train"
    freq_range: tuple = (0.02, 0.15)
    amplitude_range: tuple = (0.5, 1.5)
    ar_range: tuple = (0.3, 0.8)
    noise_std: float = 0.2
    amplitude: float | None = None
    ar_coef: float | None = None

    def __post_init__(self):
        self.anomaly = AnomalyType(self.anomaly)
        if self.P < 1 or self.T < 1:
            raise InvalidArgument("P and T must be positive")
        if self.n_recordings < 0 or self.n_anomalous < 0:
            raise InvalidArgument("recording counts must be non-negative")
        lo, hi = self.ar_range
        if not (-1 < lo <= hi < 1):
            raise InvalidArgument("AR coefficients must lie in (-1, 1)")
        if self.ar_coef is not None and not -1 < self.ar_coef < 1:
            raise InvalidArgument("AR coefficient must lie in (-1, 1)")
        if self.noise_std < 0 or self.magnitude < 0:
            raise InvalidArgument("noise_std and magnitude must be non-negative")
        self.freq_range = tuple(self.freq_range)
        self.amplitude_range = tuple(self.amplitude_range)
        self.ar_range = tuple(self.ar_range)

    def machine_parameters(self) -> dict:
        rng = rng_for(self.seed, "machine", self.machine_id)
        p = self.P
        params = {
            "freq": rng.uniform(*self.freq_range, size=p),
            "amp": rng.uniform(*self.amplitude_range, size=p),
            "ar": rng.uniform(*self.ar_range, size=p),
            "noise": np.full(p, self.noise_std),
        }
        if self.amplitude is not None:
            params["amp"] = np.full(p, float(self.amplitude))
        if self.ar_coef is not None:
            params["ar"] = np.full(p, float(self.ar_coef))
        return params


def _ar1(rng, ar, std, t_len):
    e = rng.standard_normal((t_len, ar.size)) * std
    out = np.empty_like(e)
    # start from the stationary distribution
    out[0] = e[0] / np.sqrt(1.0 - ar * ar)
    for t in range(1, t_len):
        out[t] = ar * out[t - 1] + e[t]
    return out


def _recording(spec: SynthSpec, params, index: int, anomalous: bool):
    rng = rng_for(spec.seed, "recording", spec.machine_id, spec.split, index)
    t_len = spec.T
    t = np.arange(t_len)[:, None]
    phase = rng.uniform(0, 2 * np.pi, size=spec.P)
    freq = params["freq"] * (1.0 + 0.02 * rng.standard_normal(spec.P))
    amp = params["amp"].copy()
    signal = amp * np.sin(2 * np.pi * freq * t + phase)
    noise = _ar1(rng, params["ar"], params["noise"], t_len)
    if anomalous:
        lo = max(int(np.ceil(0.2 * t_len)), 1)
        hi = max(int(np.floor(0.5 * t_len)), lo)
        span = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, t_len - span + 1))
        sl = slice(start, start + span)
        m = spec.magnitude
        tt = t[sl]
        if spec.anomaly is AnomalyType.FREQ_SHIFT:
            shifted = amp * np.sin(2 * np.pi * freq * (1.0 + m) * tt + phase)
            signal[sl] = shifted
        elif spec.anomaly is AnomalyType.AMPLITUDE_BURST:
            signal[sl] *= 1.0 + m
        else:
            tone_freq = rng.uniform(0.2, 0.45)
            signal[sl] += m * np.mean(amp) * np.sin(2 * np.pi * tone_freq * tt)
    return signal + noise


def generate(spec: SynthSpec):
    """Return ``(normal, anomalous)`` lists of FrameSequence.

    Anomalous recordings share the machine's base process and carry one
    planted deviation over a contiguous span covering 20-50% of the frames.
    """
    params = spec.machine_parameters()
    normal = [
        FrameSequence(_recording(spec, params, i, False), f"{spec.machine_id}_{spec.split}_normal_{i:05d}", spec.machine_id, "normal")
        for i in range(spec.n_recordings)
    ]
    anomalous = [
        FrameSequence(
            _recording(spec, params, spec.n_recordings + i, True),
            f"{spec.machine_id}_{spec.split}_anomaly_{i:05d}",
            spec.machine_id,
            "anomaly",
        )
        for i in range(spec.n_anomalous)
    ]
    return normal, anomalous


def recording_pair(spec: SynthSpec, index: int):
    """The clean and the anomalous version of one recording, as (T, P) arrays.

    Both share the phase, frequency jitter and noise draws of ``index``, so
    they differ only inside the planted span.
    """
    params = spec.machine_parameters()
    return _recording(spec, params, index, False), _recording(spec, params, index, True)


# ---------------------------------------------------------------------------
# scaling


@dataclass
class Scaler:
    """Per-dimension affine map ``x -> x * scale + offset``."""

    scale: np.ndarray
    offset: np.ndarray
    constant_dims: list = field(default_factory=list)

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if self.scale.shape != self.offset.shape or self.scale.ndim != 1:
            raise InvalidArgument("scale and offset must be equal-length vectors")

    @classmethod
    def fit(cls, recordings) -> "Scaler":
        frames = np.concatenate([_values(r) for r in recordings], axis=0)
        lo = frames.min(axis=0)
        hi = frames.max(axis=0)
        width = hi - lo
        constant = [int(i) for i in np.flatnonzero(width <= 0)]
        if constant:
            warnings.warn(f"constant training dimensions {constant} are mapped to 0", RuntimeWarning, stacklevel=2)
        safe = np.where(width > 0, width, 1.0)
        scale = np.where(width > 0, 2.0 / safe, 0.0)
        offset = np.where(width > 0, -1.0 - lo * scale, 0.0)
        return cls(scale, offset, constant)

    def apply(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != self.scale.size:
            raise InvalidArgument(f"scaler has {self.scale.size} dimensions, data has {values.shape[-1]}")
        return values * self.scale + self.offset

    def compose(self, inner: "Scaler") -> "Scaler":
        """The map equal to applying ``inner`` first and then ``self``."""
        return Scaler(self.scale * inner.scale, self.scale * inner.offset + self.offset,
                      sorted(set(self.constant_dims) | set(inner.constant_dims)))

    def to_dict(self) -> dict:
        return {"scale": self.scale.tolist(), "offset": self.offset.tolist(), "constant_dims": list(self.constant_dims)}

    @classmethod
    def from_dict(cls, d) -> "Scaler":
        return cls(d["scale"], d["offset"], d.get("constant_dims", []))


def _values(rec):
    return rec.values if isinstance(rec, FrameSequence) else np.asarray(rec, dtype=np.float64)


def scale_to_unit(data, fit_on=None):
    """Fit on ``fit_on`` (default: ``data``) and apply to ``data``.

    Returns ``(scaled recordings, Scaler)``.
    """
    scaler = Scaler.fit(data if fit_on is None else fit_on)
    out = [r.with_values(scaler.apply(r.values)) if isinstance(r, FrameSequence) else scaler.apply(r) for r in data]
    return out, scaler


# ---------------------------------------------------------------------------
# file formats

FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1


def _check_savable(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
        raise InvalidArgument(f"cannot save an empty frame matrix of shape {v.shape}")
    return v


def encode_fseq(values) -> bytes:
    v = _check_savable(values)
    body = FSEQ_MAGIC + struct.pack("<IQQ", FSEQ_VERSION, *v.shape) + np.ascontiguousarray(v, dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_fseq(blob: bytes) -> np.ndarray:
    header = 4 + struct.calcsize("<IQQ")
    if len(blob) < header + 4 or blob[:4] != FSEQ_MAGIC:
        raise CorruptFile("not an FSEQ file (bad magic)")
    body = blob[:-4]
    if struct.unpack("<I", blob[-4:])[0] != zlib.crc32(body):
        raise CorruptFile("FSEQ CRC32 mismatch")
    version, t_len, p = struct.unpack_from("<IQQ", body, 4)
    if version != FSEQ_VERSION:
        raise CorruptFile(f"unsupported FSEQ version {version}")
    if len(body) - header != 8 * t_len * p:
        raise CorruptFile("FSEQ payload length does not match its header")
    return np.frombuffer(body, dtype="<f8", offset=header).reshape(t_len, p).astype(np.float64)


def format_csv(values) -> str:
    v = _check_savable(values)
    buf = io.StringIO()
    buf.write(",".join(["t"] + [f"f{j}" for j in range(v.shape[1])]) + "\n")
    for t, row in enumerate(v):
        buf.write(str(t) + "," + ",".join("%.17g" % x for x in row) + "\n")
    return buf.getvalue()


def parse_csv(text: str) -> np.ndarray:
    """Parse the frame CSV. Row numbers in errors count data rows from 1."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty CSV file") from None
    if not header or header[0].strip() != "t" or len(header) < 2:
        raise ParseError("CSV header must be 't,f0,...'", row=0)
    width = len(header)
    rows = []
    for i, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"row {i} has {len(row)} fields, expected {width}", row=i)
        try:
            rows.append([float(x) for x in row[1:]])
        except ValueError:
            raise ParseError(f"row {i} has a non-numeric cell", row=i) from None
    if not rows:
        raise ParseError("CSV has no frames")
    return np.array(rows, dtype=np.float64)


def save_frames(path, values, fmt: str | None = None):
    path = str(path)
    fmt = fmt or ("csv" if path.endswith(".csv") else "fseq")
    if fmt == "csv":
        data = format_csv(values).encode()
    elif fmt == "fseq":
        data = encode_fseq(values)
    else:
        raise InvalidArgument(f"unknown frame format {fmt!r}")
    atomic_write(path, data)


def load_frames(path, fmt: str | None = None) -> np.ndarray:
    path = str(path)
    fmt = fmt or ("csv" if path.endswith(".csv") else "fseq")
    if fmt == "csv":
        with open(path, encoding="utf-8") as fh:
            return parse_csv(fh.read())
    if fmt == "fseq":
        with open(path, "rb") as fh:
            return decode_fseq(fh.read())
    raise InvalidArgument(f"unknown frame format {fmt!r}")


# ---------------------------------------------------------------------------
# dataset directories: manifest.csv plus one frame file per recording

MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ("recording_id", "machine_id", "label", "split", "file")


@dataclass
class ManifestEntry:
    recording_id: str
    machine_id: str
    label: str
    split: str
    file: str


def format_manifest(entries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for e in entries:
        w.writerow([e.recording_id, e.machine_id, e.label, e.split, e.file])
    return buf.getvalue()


def read_manifest(directory) -> list:
    path = os.path.join(directory, MANIFEST)
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ParseError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}", row=0)
        entries = []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ParseError(f"{path}: row {i} has {len(row)} fields, expected {len(MANIFEST_COLUMNS)}", row=i)
            if row[2] not in LABELS:
                raise ParseError(f"{path}: row {i} has unknown label {row[2]!r}", row=i)
            entries.append(ManifestEntry(*row))
    return entries


def write_dataset(directory, splits: dict, fmt: str = "fseq") -> list:
    """Write ``{split: [FrameSequence]}`` below ``directory``; returns the manifest entries."""
    if fmt not in ("fseq", "csv"):
        raise InvalidArgument(f"unknown frame format {fmt!r}")
    entries = []
    for split, recs in splits.items():
        os.makedirs(os.path.join(directory, split), exist_ok=True)
        for rec in recs:
            rel = f"{split}/{rec.recording_id}.{fmt}"
            save_frames(os.path.join(directory, rel), rec.values, fmt)
            entries.append(ManifestEntry(rec.recording_id, rec.machine_id, rec.label, split, rel))
    atomic_write(os.path.join(directory, MANIFEST), format_manifest(entries).encode())
    return entries


def load_dataset(directory, split: str | None = None) -> list:
    """Recordings listed in the manifest, optionally restricted to one split."""
    out = []
    for e in read_manifest(directory):
        if split is not None and e.split != split:
            continue
        values = load_frames(os.path.join(directory, e.file))
        out.append(FrameSequence(values, e.recording_id, e.machine_id, e.label))
    return out
