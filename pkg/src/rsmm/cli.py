"""Command-line interface.

Every command reads one JSON configuration document (``--config``), applies
``--set section.key=value`` overrides and writes its outputs plus a
``run.json`` record of the resolved configuration into the output directory.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

from . import __version__
from ._fileio import atomic_write
from .checkpoint import load_checkpoint
from .data import (
    FrameSequence,
    SynthSpec,
    Scaler,
    generate,
    load_dataset,
    load_frames,
    read_manifest,
    save_frames,
    write_dataset,
)
from .errors import CorruptFile, InvalidArgument, InvalidState, NumericalError, ParseError
from .experiments import Dataset, ExperimentSpec, ablation, synthetic_dataset
from .network import VARIANTS, ModelConfig
from .scoring import (
    ensemble,
    evaluate,
    format_eval,
    format_scores,
    inject_noise_bursts,
    parse_scores,
    score_recordings,
    standardize_reports,
)
from .training import TrainConfig, TrainingDiverged, format_loss_csv, make_windows, train

SCHEMA_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "variant": "RSMM-MR",
    "output": {"dir": "out"},
    "model": {"hidden": 64, "layers": 2, "seq_len": 70, "c": 3, "nu_lo": 1.0, "nu_hi": 10.0,
              "conv_kernel": 10, "conv_stride": 3, "resolutions": 2},
    "train": {"epochs": 30, "batch_size": 128, "lr": 1e-5, "weight_decay": 1e-3, "init_scale": 0.1,
              "seed": 0, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "clip_norm": None},
    "synth": {"P": 8, "T": 100, "n_recordings": 200, "n_anomalous": 0, "anomaly": "freq_shift",
              "magnitude": 1.0, "seed": 0, "machine_id": "m0", "noise_std": 0.2},
    "test": {"T": 160, "n_recordings": 50, "n_anomalous": 50},
    "data": {"dir": None, "format": "fseq"},
    "score": {"checkpoint": None, "scaler": None, "split": "test", "model_id": None},
    "eval": {"scores": None, "p": 0.1},
    "ensemble": {"scores": [], "train_scores": [], "mode": "mean", "standardize": True, "model_id": None},
    "contaminate": {"fraction": 0.10, "sigma2": 5.0, "seed": 0, "split": "train"},
}

FIELD_HELP = """\
configuration fields (JSON sections, override with --set section.key=value):
  variant                 RGMM | RGMM-MR | RSMM | RSMM-MR | RSMM-MR-NoAttn
  output.dir              directory receiving all outputs and run.json
  model.hidden            GRU hidden size (64)
  model.layers            GRU depth (2)
  model.seq_len           window length (70)
  model.c                 mixture components (3)
  model.nu_lo/nu_hi       degrees-of-freedom bounds (1, 10)
  model.conv_kernel       multiresolution filter length (10)
  model.conv_stride       multiresolution stride (3)
  model.resolutions       number of streams when multiresolution is on (2)
  train.epochs            training epochs (30)
  train.batch_size        windows per mini-batch (128)
  train.lr                Adam step size (1e-5)
  train.weight_decay      L2 penalty added to the gradient (1e-3)
  train.init_scale        uniform initialization half-width (0.1)
  train.seed              seed for initialization and shuffling (0)
  train.beta1/beta2/eps   Adam moments (0.9, 0.999, 1e-8)
  train.clip_norm         optional global gradient-norm clip (null)
  synth.*                 synthetic generator: P, T, n_recordings, n_anomalous,
                          anomaly (freq_shift | amplitude_burst | extra_tone),
                          magnitude, seed, machine_id, noise_std
  test.T/n_recordings/n_anomalous
                          test split written by `generate` (160, 50, 50)
  data.dir                dataset directory with manifest.csv
  data.format             frame file format for written datasets (fseq | csv)
  score.checkpoint        RMDN checkpoint to score with
  score.scaler            scaler JSON (default: scaler.json beside the checkpoint)
  score.split             manifest split to score (test)
  score.model_id          model id written to the score table (default: variant)
  eval.scores             score table to evaluate
  eval.p                  pAUC false-positive range (0.1)
  ensemble.scores         list of score tables to combine
  ensemble.train_scores   matching training-split score tables for standardization
  ensemble.mode           mean | max
  ensemble.standardize    standardize per machine before combining (true)
  contaminate.fraction    fraction of frames hit by noise bursts (0.10)
  contaminate.sigma2      burst noise variance (5.0)
  contaminate.seed        seed of burst placement and noise (0)
  contaminate.split       manifest split to contaminate (train)
"""

log = logging.getLogger("rsmm")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown configuration key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path, overrides) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        cfg = _merge(cfg, doc)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown configuration key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown configuration key {key!r}")
        node[parts[-1]] = _parse_value(value)
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {list(VARIANTS)}, got {cfg['variant']!r}")
    return cfg


def _model_config(cfg: dict, P: int, variant: str | None = None) -> ModelConfig:
    return ModelConfig.from_variant(variant or cfg["variant"], P=P, **cfg["model"])


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def _outdir(cfg: dict) -> str:
    out = cfg["output"]["dir"]
    if not out:
        raise ConfigError("output.dir is required")
    os.makedirs(out, exist_ok=True)
    return out


def _write_text(path, text: str):
    atomic_write(path, text.encode())


def _write_run(out: str, command: str, cfg: dict, outputs: list, extra: dict | None = None):
    record = {"schema_version": SCHEMA_VERSION, "command": command, "rsmm_version": __version__,
              "config": cfg, "outputs": sorted(outputs)}
    if extra:
        record.update(extra)
    _write_text(os.path.join(out, "run.json"), json.dumps(record, indent=2, sort_keys=True) + "\n")


def _require_dir(cfg: dict) -> str:
    d = cfg["data"]["dir"]
    if not d:
        raise ConfigError("data.dir is required (set it in the config or with --data)")
    if not os.path.isfile(os.path.join(d, "manifest.csv")):
        raise ConfigError(f"data directory {d!r} has no manifest.csv")
    return d


def _require_file(path, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} is required")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_split(directory: str, split: str):
    recs = load_dataset(directory, split)
    if not recs:
        raise DataError(f"no recordings in split {split!r} of {directory}")
    return recs


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict) -> int:
    out = _outdir(cfg)
    synth = dict(cfg["synth"])
    train_spec = SynthSpec(**synth, split="train")
    test = cfg["test"]
    test_spec = SynthSpec(**{**synth, "T": test["T"], "n_recordings": test["n_recordings"],
                             "n_anomalous": test["n_anomalous"]}, split="test")
    tr_normal, tr_anomalous = generate(train_spec)
    te_normal, te_anomalous = generate(test_spec)
    entries = write_dataset(out, {"train": tr_normal + tr_anomalous, "test": te_normal + te_anomalous},
                            cfg["data"]["format"])
    _write_run(out, "generate", cfg, ["manifest.csv"] + [e.file for e in entries])
    print(f"wrote {len(entries)} recordings to {out}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    directory = _require_dir(cfg)
    out = _outdir(cfg)
    recs = [r for r in _load_split(directory, "train") if r.label != "anomaly"]
    if not recs:
        raise DataError("training split has no normal recordings")
    scaler = Scaler.fit(recs)
    scaled = [r.with_values(scaler.apply(r.values)) for r in recs]
    mcfg = _model_config(cfg, scaled[0].dim)
    windows = make_windows(scaled, mcfg.seq_len)
    if len(windows) == 0:
        raise DataError(f"no recording is longer than seq_len={mcfg.seq_len}")
    ckpt = os.path.join(out, "model.rmdn")
    _write_text(os.path.join(out, "scaler.json"), json.dumps(scaler.to_dict(), sort_keys=True) + "\n")
    try:
        weights, history = train(mcfg, _train_config(cfg), windows, checkpoint_path=ckpt)
    except TrainingDiverged as exc:
        _write_text(os.path.join(out, "loss.csv"), format_loss_csv(exc.history))
        raise
    _write_text(os.path.join(out, "loss.csv"), format_loss_csv(history))
    _write_run(out, "train", cfg, ["model.rmdn", "scaler.json", "loss.csv"],
               {"n_windows": len(windows), "skipped_recordings": windows.skipped})
    print(f"trained {cfg['variant']} on {len(windows)} windows; final mean NLL {history[-1] if history else float('nan'):.6f}")
    return EXIT_OK


def cmd_score(cfg: dict) -> int:
    sc = cfg["score"]
    ckpt = _require_file(sc["checkpoint"], "score.checkpoint")
    scaler_path = sc["scaler"] or os.path.join(os.path.dirname(os.path.abspath(ckpt)), "scaler.json")
    scaler_path = _require_file(scaler_path, "score.scaler")
    directory = _require_dir(cfg)
    out = _outdir(cfg)
    weights = load_checkpoint(ckpt)
    with open(scaler_path, encoding="utf-8") as fh:
        scaler = Scaler.from_dict(json.load(fh))
    recs = _load_split(directory, sc["split"])
    scaled = [r.with_values(scaler.apply(r.values)) for r in recs]
    model_id = sc["model_id"] or weights.config.variant()
    reports, skipped = score_recordings(weights, scaled, model_id)
    _write_text(os.path.join(out, "scores.csv"), format_scores(reports))
    frames = {r.recording_id: r.n_frames for r in recs}
    need = weights.config.seq_len + 1
    lines = ["recording_id,n_frames,required"] + [f"{rid},{frames[rid]},{need}" for rid in skipped]
    _write_text(os.path.join(out, "skipped.csv"), "\n".join(lines) + "\n")
    _write_run(out, "score", cfg, ["scores.csv", "skipped.csv"])
    print(f"scored {len(reports)} recordings, skipped {len(skipped)}")
    return EXIT_OK


def _read_scores(path):
    with open(path, encoding="utf-8") as fh:
        return parse_scores(fh.read())


def cmd_eval(cfg: dict) -> int:
    path = _require_file(cfg["eval"]["scores"], "eval.scores")
    out = _outdir(cfg)
    results = evaluate(_read_scores(path), float(cfg["eval"]["p"]))
    _write_text(os.path.join(out, "eval.csv"), format_eval(results))
    _write_run(out, "eval", cfg, ["eval.csv"])
    for r in results:
        print(f"{r.machine_id} {r.model_id}: AUC {r.auc:.4f} pAUC {r.pauc:.4f}")
    return EXIT_OK


def cmd_ensemble(cfg: dict) -> int:
    ens = cfg["ensemble"]
    paths = ens["scores"]
    if isinstance(paths, str):
        paths = [paths]
    if not paths:
        raise ConfigError("ensemble.scores needs at least one score table")
    train_paths = ens["train_scores"] or []
    if isinstance(train_paths, str):
        train_paths = [train_paths]
    if train_paths and len(train_paths) != len(paths):
        raise ConfigError("ensemble.train_scores must match ensemble.scores one to one")
    out = _outdir(cfg)
    lists = [_read_scores(_require_file(p, "ensemble score table")) for p in paths]
    if ens["standardize"]:
        refs = [_read_scores(_require_file(p, "ensemble training score table")) for p in train_paths] or lists
        lists = [standardize_reports(ref, lst) for ref, lst in zip(refs, lists)]
    combined = ensemble(lists, ens["mode"], ens["model_id"])
    _write_text(os.path.join(out, "ensemble.csv"), format_scores(combined))
    _write_run(out, "ensemble", cfg, ["ensemble.csv"])
    print(f"combined {len(lists)} score tables over {len(combined)} recordings ({ens['mode']})")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    out = _outdir(cfg)
    m, t = cfg["model"], cfg["train"]
    seed = int(t["seed"])
    if cfg["data"]["dir"]:
        directory = _require_dir(cfg)
        train_recs = [r for r in _load_split(directory, "train") if r.label != "anomaly"]
        dataset = Dataset(train_recs, _load_split(directory, "test"))
        P = train_recs[0].dim
    else:
        dataset = None
        P = cfg["synth"]["P"]
    spec = ExperimentSpec(P=P, train_T=cfg["synth"]["T"], test_T=cfg["test"]["T"],
                          n_train=cfg["synth"]["n_recordings"], n_test_normal=cfg["test"]["n_recordings"],
                          n_test_anomalous=cfg["test"]["n_anomalous"], anomaly=cfg["synth"]["anomaly"],
                          magnitude=cfg["synth"]["magnitude"], hidden=m["hidden"], layers=m["layers"],
                          seq_len=m["seq_len"], c=m["c"], epochs=t["epochs"], batch_size=t["batch_size"],
                          lr=t["lr"], weight_decay=t["weight_decay"], p=float(cfg["eval"]["p"]))
    if dataset is None:
        dataset = synthetic_dataset(spec, cfg["synth"]["seed"])
    results = ablation(spec, seed, dataset)
    lines = ["variant,family,multires,attention,auc,pauc,final_nll,dataset_hash"]
    for r in results:
        fam, mr, att = VARIANTS[r.variant]
        lines.append(f"{r.variant},{fam.value},{int(mr)},{int(att)},{r.auc:.17g},{r.pauc:.17g},{r.final_nll:.17g},{r.dataset_hash}")
    _write_text(os.path.join(out, "ablation.csv"), "\n".join(lines) + "\n")
    _write_run(out, "ablate", cfg, ["ablation.csv"])
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_contaminate(cfg: dict) -> int:
    directory = _require_dir(cfg)
    c = cfg["contaminate"]
    out = _outdir(cfg)
    if os.path.abspath(out) == os.path.abspath(directory):
        raise ConfigError("output.dir must differ from data.dir")
    entries = read_manifest(directory)
    targets = [e for e in entries if e.split == c["split"]]
    recs = [FrameSequence(load_frames(os.path.join(directory, e.file)), e.recording_id, e.machine_id, e.label) for e in targets]
    dirty, masks = inject_noise_bursts(recs, float(c["fraction"]), float(c["sigma2"]), int(c["seed"]))
    replaced = {e.recording_id: (rec, mask) for e, rec, mask in zip(targets, dirty, masks)}
    mask_lines = ["recording_id,frame"]
    for e in entries:
        dst = os.path.join(out, e.file)
        os.makedirs(os.path.dirname(dst), exist_ok=True)
        if e.recording_id in replaced:
            rec, mask = replaced[e.recording_id]
            save_frames(dst, rec.values, "csv" if e.file.endswith(".csv") else "fseq")
            mask_lines += [f"{e.recording_id},{i}" for i in mask.nonzero()[0]]
        else:
            with open(os.path.join(directory, e.file), "rb") as fh:
                atomic_write(dst, fh.read())
    with open(os.path.join(directory, "manifest.csv"), "rb") as fh:
        atomic_write(os.path.join(out, "manifest.csv"), fh.read())
    _write_text(os.path.join(out, "mask.csv"), "\n".join(mask_lines) + "\n")
    _write_run(out, "contaminate", cfg, ["manifest.csv", "mask.csv"] + [e.file for e in entries])
    print(f"contaminated {len(mask_lines) - 1} frames in split {c['split']!r}")
    return EXIT_OK


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic dataset (train and test splits) with a manifest"),
    "train": (cmd_train, "fit a model variant; writes model.rmdn, scaler.json and loss.csv"),
    "score": (cmd_score, "score recordings against a checkpoint; writes scores.csv and skipped.csv"),
    "eval": (cmd_eval, "compute AUC and pAUC per machine and model from a score table"),
    "ensemble": (cmd_ensemble, "standardize per machine and combine several score tables"),
    "ablate": (cmd_ablate, "train and evaluate all five variants on one dataset and seed"),
    "contaminate": (cmd_contaminate, "add Gaussian noise bursts to one split and write the frame mask"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsmm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=FIELD_HELP)
    parser.add_argument("--version", action="version", version=f"rsmm {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=FIELD_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON configuration document")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration field, e.g. train.lr=1e-3 (repeatable)")
        p.add_argument("--out", help="shorthand for --set output.dir=DIR")
        p.add_argument("--data", help="shorthand for --set data.dir=DIR")
        p.add_argument("--threads", type=int, default=None, help="cap the number of BLAS worker threads")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.set)
    if args.out:
        overrides.append(f"output.dir={json.dumps(args.out)}")
    if args.data:
        overrides.append(f"data.dir={json.dumps(args.data)}")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, overrides)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return func(cfg)
        return func(cfg)
    except (ConfigError, InvalidArgument, InvalidState, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorruptFile, ParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
