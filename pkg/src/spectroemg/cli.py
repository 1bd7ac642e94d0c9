"""Command-line pipeline: synthesize recordings, extract features, train,
evaluate, predict.

Settings merge in three layers: built-in defaults, then an INI file given
with --config (sections [ingest], [dsp], [model], [train]), then repeated
--set section.key=value flags. Exit codes: 0 success, 2 bad input, 3 dataset
contract violation, 4 numerical failure, 5 artifact mismatch, 64 usage.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__, backend, dsp, ingest
from . import evaluate as eval_mod
from . import model as model_mod
from . import train as train_mod
from .errors import (ArtifactMismatchError, DatasetError, InputError,
                     PipelineError)

USAGE_EXIT = 64


class Parser(argparse.ArgumentParser):
    """argparse parser whose usage failures exit with code 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


# ---------------------------------------------------------------------------
# settings
# ---------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_SCHEMA = {
    "ingest": {"window_len": int, "segment_len": int, "per_class": int,
               "subjects_per_class": int, "train_ratio": float,
               "val_ratio": float, "test_ratio": float},
    "dsp": {"delta_mode": str, "delta_width": int},
    "model": {"stem_channels": int, "feature_channels": int,
              "attention_hidden": int, "standardize": _parse_bool},
    "train": {"lr": float, "batch_size": int, "max_epochs": int,
              "patience": int, "class_weighting": _parse_bool,
              "optimizer": str, "momentum": float},
}

_DEFAULTS = {
    "ingest": {"window_len": ingest.DEFAULT_WINDOW_LEN,
               "segment_len": ingest.DEFAULT_SEGMENT_LEN,
               "per_class": 60, "subjects_per_class": 5,
               "train_ratio": 0.6, "val_ratio": 0.2, "test_ratio": 0.2},
    "dsp": {"delta_mode": "regression", "delta_width": dsp.DELTA_WIDTH},
    "model": {"stem_channels": 16, "feature_channels": 32,
              "attention_hidden": 32, "standardize": True},
    "train": {"lr": 1e-3, "batch_size": 32, "max_epochs": 100, "patience": 10,
              "class_weighting": False, "optimizer": "adam", "momentum": 0.9},
}


def _apply_setting(settings: dict, section: str, key: str, raw: str) -> None:
    key = key.replace("-", "_")
    if section not in _SCHEMA or key not in _SCHEMA[section]:
        raise InputError(f"unknown setting {section}.{key}")
    try:
        settings[section][key] = _SCHEMA[section][key](raw)
    except ValueError as exc:
        raise InputError(f"bad value for {section}.{key}: {raw!r}") from exc


def load_settings(config_path: str | None, overrides: list[str] | None) -> dict:
    settings = {section: dict(values) for section, values in _DEFAULTS.items()}
    if config_path is not None:
        if not os.path.exists(config_path):
            raise InputError(f"config file not found: {config_path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(config_path)
        except configparser.Error as exc:
            raise InputError(f"bad config file {config_path}: {exc}") from exc
        for section in parser.sections():
            if section not in _SCHEMA:
                raise InputError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                _apply_setting(settings, section, key, raw)
    for item in overrides or []:
        dotted, sep, raw = item.partition("=")
        if not sep or "." not in dotted:
            raise InputError(f"--set needs section.key=value, got {item!r}")
        section, _, key = dotted.partition(".")
        _apply_setting(settings, section, key, raw)
    return settings


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, settings) -> int:
    ing = settings["ingest"]
    per_class = args.per_class if args.per_class is not None else ing["per_class"]
    subjects = (args.subjects_per_class if args.subjects_per_class is not None
                else ing["subjects_per_class"])
    if per_class < 1 or subjects < 1:
        raise InputError("per-class and subjects-per-class must be >= 1")
    window_len = ing["window_len"]
    rec_dir = os.path.join(args.out, "recordings")
    os.makedirs(rec_dir, exist_ok=True)
    entries = []
    for label, name in enumerate(ingest.CLASS_NAMES):
        for subj in range(subjects):
            n_here = per_class // subjects + (1 if subj < per_class % subjects else 0)
            gain = ingest._subject_gain(args.seed, label, subj)
            for i in range(n_here):
                rng = np.random.default_rng([args.seed, label, subj, i])
                x = gain * ingest.synth_signal(label, rng, window_len,
                                               float(ingest.DEFAULT_SAMPLE_RATE))
                fname = f"{name}-subj{subj}-seg{i:03d}.semg"
                ingest.write_recording(os.path.join(rec_dir, fname), x,
                                       ingest.DEFAULT_SAMPLE_RATE)
                entries.append(ingest.ManifestEntry(f"recordings/{fname}", "semg",
                                                    label, f"{name}-subj{subj}", "auto"))
    ingest.write_manifest(os.path.join(args.out, "manifest.csv"),
                          ingest.DatasetManifest(entries))
    print(f"wrote {len(entries)} recordings and manifest.csv to {args.out}")
    return 0


def cmd_featurize(args, settings) -> int:
    ing, d = settings["ingest"], settings["dsp"]
    ratios = (ing["train_ratio"], ing["val_ratio"], ing["test_ratio"])
    manifest = ingest.read_manifest(args.manifest)
    if not manifest.entries:
        raise DatasetError(f"manifest {args.manifest} lists no recordings")
    base = os.path.dirname(os.path.abspath(args.manifest))

    split_segments = {"train": [], "val": [], "test": []}
    auto = []
    for entry in manifest.entries:
        path = entry.path if os.path.isabs(entry.path) else os.path.join(base, entry.path)
        rec = ingest.load_recording(path, entry.format_tag, label=entry.label,
                                    subject_id=entry.subject_id)
        segs = ingest.segments_from_recording(rec, ing["window_len"], ing["segment_len"])
        if not segs:
            raise DatasetError(f"recording {entry.path} is shorter than one window "
                               f"({ing['window_len']} samples)")
        if entry.split == "auto":
            auto.extend(segs)
        else:
            split_segments[entry.split].extend(segs)
    if auto:
        try:
            auto_train, auto_val, auto_test = ingest.split_by_subject(
                auto, ratios, seed=args.seed)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        split_segments["train"].extend(auto_train)
        split_segments["val"].extend(auto_val)
        split_segments["test"].extend(auto_test)

    os.makedirs(args.out, exist_ok=True)
    frames = ing["segment_len"] // dsp.HOP + 1
    for split in ("train", "val", "test"):
        segs = split_segments[split]
        if segs:
            tensors = np.stack([dsp.featurize(s.samples, delta_width=d["delta_width"],
                                              delta_mode=d["delta_mode"]) for s in segs])
            labels = np.array([s.label for s in segs], dtype=np.uint8)
        else:
            tensors = np.zeros((0, dsp.N_BINS, frames, 2), dtype=np.float32)
            labels = np.zeros(0, dtype=np.uint8)
        dsp.write_features(os.path.join(args.out, f"{split}.sftr"), tensors, labels)
        print(f"{split}: {tensors.shape}")
    return 0


def cmd_train(args, settings) -> int:
    m, tr = settings["model"], settings["train"]
    x, y = dsp.read_features(os.path.join(args.features, "train.sftr"))
    vx, vy = dsp.read_features(os.path.join(args.features, "val.sftr"))
    if x.shape[1:] != vx.shape[1:]:
        raise DatasetError(f"train and val features disagree on shape: "
                           f"{x.shape[1:]} vs {vx.shape[1:]}")
    config = model_mod.ModelConfig(
        stem_channels=m["stem_channels"], feature_channels=m["feature_channels"],
        attention_hidden=m["attention_hidden"],
        input_shape=tuple(int(v) for v in x.shape[1:]),
        seed=args.seed, standardize=m["standardize"])
    tcfg = train_mod.TrainConfig(
        lr=tr["lr"], batch_size=tr["batch_size"], max_epochs=tr["max_epochs"],
        patience=tr["patience"], seed=args.seed,
        class_weighting=tr["class_weighting"], optimizer=tr["optimizer"],
        momentum=tr["momentum"])

    net = model_mod.init(config)
    os.makedirs(args.out, exist_ok=True)
    result = train_mod.train(net, x, y, vx, vy, tcfg,
                             checkpoint_dir=args.out if args.checkpoint_every else None,
                             checkpoint_every=args.checkpoint_every)
    model_path = os.path.join(args.out, "model.smdl")
    model_mod.save(net, model_path)
    train_mod.write_history_csv(os.path.join(args.out, "history.csv"), result.history)
    echo = {"model": dataclasses.asdict(config), "train": dataclasses.asdict(tcfg),
            "backend": backend.kernel_backend(),
            "best_epoch": result.best_epoch, "best_val_acc": result.best_val_acc}
    blob = json.dumps(echo, indent=2, sort_keys=True) + "\n"
    ingest._atomic_write_bytes(os.path.join(args.out, "train_config.json"),
                               blob.encode("utf-8"))
    print(f"trained {len(result.history)} epoch(s), best epoch {result.best_epoch}, "
          f"val accuracy {result.best_val_acc:.4f}")
    print(f"model: {model_path}")
    return 0


def _check_feature_shape(net, x, features_path) -> None:
    if tuple(x.shape[1:]) != tuple(net.config.input_shape):
        raise ArtifactMismatchError(
            f"model expects inputs of shape {tuple(net.config.input_shape)}, "
            f"features in {features_path} are {tuple(x.shape[1:])}")


def cmd_evaluate(args, settings) -> int:
    net = model_mod.load(args.model)
    x, y = dsp.read_features(args.features)
    _check_feature_shape(net, x, args.features)
    if x.shape[0] == 0:
        raise DatasetError(f"feature file {args.features} is empty")
    _, cm = eval_mod.evaluate(net, x, y)
    report = eval_mod.build_report(cm, config={"model": dataclasses.asdict(net.config)})
    os.makedirs(args.out, exist_ok=True)
    eval_mod.write_report(os.path.join(args.out, "report.json"), report)
    eval_mod.write_confusion(cm, os.path.join(args.out, "confusion.csv"),
                             os.path.join(args.out, "confusion.svg"))
    print(f"overall accuracy: {eval_mod.percent(eval_mod.overall_accuracy(cm))}")
    print(f"macro sensitivity: {eval_mod.percent(eval_mod.macro_sensitivity(cm))}")
    print(f"macro specificity: {eval_mod.percent(eval_mod.macro_specificity(cm))}")
    return 0


def cmd_predict(args, settings) -> int:
    net = model_mod.load(args.model)
    x, _ = dsp.read_features(args.features)
    _check_feature_shape(net, x, args.features)
    limit = x.shape[0] if args.limit is None else min(args.limit, x.shape[0])
    for start in range(0, limit, 64):
        probs = net.forward_probs(x[start:min(start + 64, limit)], train=False)
        for row, p in enumerate(probs):
            name = ingest.CLASS_NAMES[int(np.argmax(p))]
            print(f"{start + row} " + " ".join(f"{v:.6f}" for v in p) + f" {name}")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="spectroemg",
                    description="EMG spectrogram classification pipeline")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="INI settings file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        default=None, help="override one setting (repeatable)")
    common.add_argument("--seed", type=int, default=0, help="run seed")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic labeled recording set")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--per-class", type=int, default=None,
                   help="recordings per class")
    p.add_argument("--subjects-per-class", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", parents=[common],
                       help="window, resample, and extract feature tensors")
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    p.add_argument("--out", required=True, help="output feature directory")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[common], help="fit the classifier")
    p.add_argument("--features", required=True,
                   help="directory holding train.sftr and val.sftr")
    p.add_argument("--out", required=True, help="output model directory")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="save a checkpoint every N epochs (0 disables)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a model on a feature file")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--features", required=True, help="feature file to score")
    p.add_argument("--out", required=True, help="output report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common],
                       help="print per-record class probabilities")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--features", required=True, help="feature file")
    p.add_argument("--limit", type=int, default=None,
                   help="only print the first N records")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = load_settings(args.config, args.set)
        return args.func(args, settings)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
