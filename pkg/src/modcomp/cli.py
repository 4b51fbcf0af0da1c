"""Command-line entry points.

Commands: gen, pretrain-aux, train, eval, fuse, gradcheck, sweep-lambda,
export-embeddings. All state lives in the JSON config file and the files a
command reads and writes; there are no environment variables, so a command
line plus its config reproduces a run exactly.

Exit codes: 0 success, 1 validation/config error, 2 numeric-invariant
failure (e.g. gradient check over tolerance).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .adaptation import AdaptationConfig
from .errors import ConfigError, ModcompError, NumericError
from .model import AuxiliaryEncoder, score_fusion, init_res_lstm, init_v_lstm, encode_auxiliary, stream_forward
from .seeding import TAG_INIT, child_rng
from .synthdata import GeneratorConfig, make_dataset, split
from .train import (
    DEFAULT_LAMBDA_GRID,
    ProbeConfig,
    TrainConfig,
    evaluate_stream,
    gradient_check,
    new_model,
    per_class_average_precision,
    pretrain_auxiliary,
    sweep_lambda,
    train_stream,
)

GRADCHECK_TOLERANCE = 1e-4

_MODEL_KEYS = {"kind": "res_lstm", "hidden_units": 16,
               "res_lstm_dropout": True, "res_fc_dropout": False}
_SPLIT_KEYS = {"fractions": [0.6, 0.15, 0.25], "seed": 0}
_TRAIN_KEYS = {"learning_rate": 0.001, "adam_beta1": 0.9, "adam_beta2": 0.999,
               "adam_epsilon": 1e-8, "batch_size": 20, "epochs": 40,
               "dropout_rate": 0.5, "seed": 0}
_ADAPT_KEYS = {"level": "none", "weight": 0.0, "joint_weights": None}
_GEN_KEYS = {f.name: getattr(GeneratorConfig(), f.name)
             for f in GeneratorConfig.__dataclass_fields__.values()}


def _strict_section(raw: dict, name: str, known: dict) -> dict:
    section = raw.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key!r} in config")
    merged = dict(known)
    merged.update(section)
    return merged


class RunConfig:
    """Strictly parsed config file: any unknown key is a hard error."""

    SECTIONS = ("generator", "split", "model", "train", "adaptation")

    def __init__(self, raw: dict):
        for key in raw:
            if key not in self.SECTIONS:
                raise ConfigError(f"unknown config section {key!r}")
        self.raw = raw
        gen = _strict_section(raw, "generator", _GEN_KEYS)
        self.generator = GeneratorConfig(**gen)
        self.split = _strict_section(raw, "split", _SPLIT_KEYS)
        if abs(sum(self.split["fractions"]) - 1.0) > 1e-9:
            raise ConfigError(f"split.fractions must sum to 1, got {self.split['fractions']}")
        self.model = _strict_section(raw, "model", _MODEL_KEYS)
        if self.model["kind"] not in ("res_lstm", "v_lstm"):
            raise ConfigError(f"model.kind must be res_lstm or v_lstm, got {self.model['kind']!r}")
        adapt = _strict_section(raw, "adaptation", _ADAPT_KEYS)
        jw = adapt["joint_weights"]
        if isinstance(jw, dict):
            for key in jw:
                if key not in ("domain", "category", "sample"):
                    raise ConfigError(f"unknown key adaptation.joint_weights.{key!r}")
            jw = (jw.get("domain", 0.0), jw.get("category", 0.0), jw.get("sample", 0.0))
        self.adaptation = AdaptationConfig(level=adapt["level"], weight=adapt["weight"],
                                           joint_weights=jw)
        tr = _strict_section(raw, "train", _TRAIN_KEYS)
        self.train = TrainConfig(adaptation=self.adaptation, **tr)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be an object")
        return cls(raw)


def _check_target(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"{path}: exists, pass --force to overwrite")


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_split(cfg: RunConfig, data_path):
    dataset, _ = fileio.load_dataset(_require(data_path, "dataset"))
    return split(dataset, cfg.split["fractions"], cfg.split["seed"])


def _select_split(splits, name: str):
    idx = {"train": 0, "val": 1, "test": 2}
    if name not in idx:
        raise ConfigError(f"--split must be train, val, or test, got {name!r}")
    part = splits[idx[name]]
    if part.source.size == 0:
        raise ConfigError(f"requested split {name!r} is empty")
    return part


def _load_encoder(path) -> AuxiliaryEncoder:
    enc, header = fileio.load_checkpoint(_require(path, "encoder checkpoint"))
    if not isinstance(enc, AuxiliaryEncoder):
        raise ConfigError(f"{path}: expected an aux_encoder checkpoint, got {header['model_kind']}")
    return enc


def cmd_gen(args) -> int:
    cfg = RunConfig.load(args.config)
    gen = cfg.generator if args.seed is None else replace(cfg.generator, seed=args.seed)
    out = Path(args.out)
    _check_target(out, args.force)
    dataset = make_dataset(gen)
    fileio.save_dataset(out, dataset, generator_echo=vars(gen).copy())
    counts_src = np.bincount(dataset.source.labels, minlength=gen.classes)
    counts_aux = np.bincount(dataset.auxiliary.labels, minlength=gen.classes)
    print(f"wrote {out} alignment={gen.alignment} "
          f"n_source={dataset.source.size} n_aux={dataset.auxiliary.size}")
    for c in range(gen.classes):
        print(f"  class {c}: source={counts_src[c]} aux={counts_aux[c]}")
    return 0


def cmd_pretrain_aux(args) -> int:
    cfg = RunConfig.load(args.config)
    tcfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    out = Path(args.out)
    _check_target(out, args.force)
    train_set, _, _ = _load_split(cfg, args.data)
    enc = pretrain_auxiliary(train_set.auxiliary, cfg.model["hidden_units"], tcfg)
    fileio.save_checkpoint(out, enc, init_seed=tcfg.seed, config_echo=cfg.raw)
    print(f"wrote {out} pretrain_accuracy={enc.pretrain_accuracy:.4f}")
    return 0


def _build_model(cfg: RunConfig, input_dim: int, num_classes: int, tcfg: TrainConfig):
    rng = child_rng(tcfg.seed, TAG_INIT)
    m = cfg.model
    if m["kind"] == "res_lstm":
        return init_res_lstm(input_dim, m["hidden_units"], num_classes, rng,
                             tcfg.dropout_rate, m["res_lstm_dropout"], m["res_fc_dropout"])
    return init_v_lstm(input_dim, m["hidden_units"], num_classes, rng, tcfg.dropout_rate)


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    tcfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [out_dir / "model.ckpt", out_dir / "metrics_steps.csv", out_dir / "metrics_epochs.csv"]
    for t in targets:
        _check_target(t, args.force)
    train_set, val_set, _ = _load_split(cfg, args.data)
    enc = None
    if tcfg.adaptation.level != "none":
        if args.encoder is None:
            raise ConfigError(f"adaptation level {tcfg.adaptation.level!r} requires --encoder")
        enc = _load_encoder(args.encoder)
    model = _build_model(cfg, train_set.source.feature_dim, train_set.num_classes, tcfg)
    history = train_stream(model, train_set, enc, tcfg,
                           val_set=val_set if val_set.source.size else None)
    fileio.save_checkpoint(targets[0], model, init_seed=tcfg.seed, config_echo=cfg.raw)
    fileio.write_metrics(out_dir, history)
    last = history.epochs[-1] if history.epochs else None
    if last:
        print(f"wrote {out_dir} train_acc={last.train_acc:.4f} val_acc={last.val_acc:.4f}")
    else:
        print(f"wrote {out_dir} (no epochs trained)")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    part = _select_split(_load_split(cfg, args.data), args.split)
    model, header = fileio.load_checkpoint(_require(args.checkpoint, "checkpoint"))
    if isinstance(model, AuxiliaryEncoder):
        raise ConfigError("eval: expected a model checkpoint, got an aux_encoder")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [out_dir / "eval_summary.csv", out_dir / "probs.csv"]
    for t in targets:
        _check_target(t, args.force)
    acc, probs = evaluate_stream(model, part.source)
    ap = per_class_average_precision(probs, part.source.labels, part.num_classes)
    fileio.write_eval_summary(targets[0], acc, ap)
    fileio.write_probs(targets[1], probs, part.source.labels)
    print(f"wrote {out_dir} split={args.split} accuracy={acc:.4f}")
    return 0


def cmd_fuse(args) -> int:
    out = Path(args.out)
    _check_target(out, args.force)
    weights = [float(w) for w in args.weights]
    if len(weights) != len(args.inputs):
        raise ConfigError(f"fuse: {len(args.inputs)} inputs but {len(weights)} weights")
    streams, labels = [], None
    for path in args.inputs:
        probs, labs = fileio.read_probs(_require(path, "probability CSV"))
        if labels is not None and not np.array_equal(labels, labs):
            raise ConfigError("fuse: input CSVs disagree on sample labels")
        labels = labs
        streams.append(probs)
    fused = score_fusion(streams, weights)
    fileio.write_probs(out, fused, labels)
    acc = float((fused.argmax(axis=1) == labels).mean())
    print(f"wrote {out} fused_accuracy={acc:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    probe = ProbeConfig() if args.seed is None else ProbeConfig(seed=args.seed)
    worst = 0.0
    print(f"{'model':10s} {'level':10s} {'max rel err':>12s}")
    for kind in ("res_lstm", "v_lstm"):
        for level in ("none", "domain", "category", "sample", "joint"):
            rep = gradient_check(kind, level, probe)
            worst = max(worst, rep.max_relative_error)
            print(f"{kind:10s} {level:10s} {rep.max_relative_error:12.3e}")
    print(f"worst: {worst:.3e} tolerance: {GRADCHECK_TOLERANCE:.0e}")
    if worst > GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: {worst:.3e} > {GRADCHECK_TOLERANCE:.0e}")
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = RunConfig.load(args.config)
    tcfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [out_dir / "sweep.csv", out_dir / "model.ckpt"]
    for t in targets:
        _check_target(t, args.force)
    grid = [float(g) for g in args.grid] if args.grid else list(DEFAULT_LAMBDA_GRID)
    train_set, val_set, _ = _load_split(cfg, args.data)
    enc = None
    if tcfg.adaptation.level != "none":
        if args.encoder is None:
            raise ConfigError(f"adaptation level {tcfg.adaptation.level!r} requires --encoder")
        enc = _load_encoder(args.encoder)
    result = sweep_lambda(tcfg, grid, cfg.model["kind"], cfg.model["hidden_units"],
                          train_set, enc, val_set=val_set if val_set.source.size else None)
    fileio.write_sweep(targets[0], result)
    fileio.save_checkpoint(targets[1], result.selected.model, init_seed=tcfg.seed, config_echo=cfg.raw)
    print(f"wrote {out_dir} selected_lambda={result.selected_lambda:g} "
          f"val_accuracy={result.selected.val_accuracy:.4f}")
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out)
    _check_target(out, args.force)
    part = _select_split(_load_split(cfg, args.data), args.split)
    model, _ = fileio.load_checkpoint(_require(args.checkpoint, "checkpoint"))
    if isinstance(model, AuxiliaryEncoder):
        raise ConfigError("export-embeddings: expected a model checkpoint, got an aux_encoder")
    enc = _load_encoder(args.encoder)
    fwd = stream_forward(part.source, model, training=False)
    _, a_hat = encode_auxiliary(part.auxiliary, enc)
    rows = [(i, part.source.labels[i], "source", fwd.r_hat.descriptors[i])
            for i in range(part.source.size)]
    rows += [(i, part.auxiliary.labels[i], "auxiliary", a_hat.descriptors[i])
             for i in range(part.auxiliary.size)]
    fileio.write_embeddings(out, rows)
    print(f"wrote {out} split={args.split} rows={len(rows)}")
    return 0


def _add_common(p, config=True, out=True):
    if config:
        p.add_argument("--config", required=True, help="JSON config file")
    if out:
        p.add_argument("--out", required=True, help="output file or directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modcomp")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multimodal dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("pretrain-aux", help="pretrain and freeze the auxiliary encoder")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset file from gen")
    p.set_defaults(fn=cmd_pretrain_aux)

    p = sub.add_parser("train", help="train a source-stream model")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", default=None, help="frozen encoder checkpoint (required unless level=none)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", help="train, val, or test (default test)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("fuse", help="fuse per-stream probability CSVs by weighted sum")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--weights", nargs="+", default=["0.5", "0.5"])
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("sweep-lambda", help="train across a weight grid, select by validation accuracy")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", default=None)
    p.add_argument("--grid", nargs="+", default=None, help="weights to try (default 0 1e-4 ... 1)")
    p.set_defaults(fn=cmd_sweep_lambda)

    p = sub.add_parser("export-embeddings", help="dump source/auxiliary descriptors to CSV")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(fn=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ModcompError, FileNotFoundError, TypeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
