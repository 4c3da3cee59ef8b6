"""Command line entry point.

Every subcommand reads an optional JSON config (``--config``) whose sections
are ``model``, ``train``, ``pretext``, ``data`` and ``experiment``; any key can
be overridden with ``--set section.key=value``.  Relative output paths live
under ``--out`` (default: ``$PROMPTMOE_OUT`` or ``./runs``).

Exit codes: 0 ok, 2 bad configuration, 3 missing or unreadable data,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import synth
from .backbone import ModelConfig
from .harness import (ExperimentSpec, config_hash, evaluate, export_embeddings, format_param_table,
                      fresh_model, report_params, run_ablation, run_stage_a, run_stage_b, write_results)
from .model import MoEModel, load_checkpoint, save_checkpoint
from .synth import Dataset, DatasetSpec, cap_per_class, kshot_support
from .tensor import NumericError
from .training import PretextConfig, Regime, TrainConfig, adapt, pretext_pretrain

log = logging.getLogger("promptmoe")

OUT_ENV = "PROMPTMOE_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class DataConfig:
    source_per_class: int = 200
    source_seed: int = 100
    target_per_class: int = 300
    target_seed: int = 1
    control: bool = True  # also build an unshifted copy of the target task
    source: list | None = None  # explicit DatasetSpec dicts replace the defaults
    target: dict | None = None

    def source_specs(self) -> list[DatasetSpec]:
        if self.source is not None:
            return [DatasetSpec.from_dict(d) for d in self.source]
        return synth.default_source_specs(self.source_per_class, self.source_seed)

    def target_spec(self, shifted: bool = True) -> DatasetSpec:
        if self.target is not None and shifted:
            return DatasetSpec.from_dict(self.target)
        return synth.default_target_spec(self.target_per_class, self.target_seed, shifted=shifted)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretext: PretextConfig = field(default_factory=PretextConfig)
    data: DataConfig = field(default_factory=DataConfig)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)

    def to_dict(self) -> dict:
        return {f.name: _asdict(getattr(self, f.name)) for f in fields(self)}


def _asdict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        raw.setdefault(section, {})[name] = _coerce(value)
    defaults = RunConfig()
    built = {}
    for f in fields(RunConfig):
        section = raw.pop(f.name, {})
        base = getattr(defaults, f.name)
        known = {x.name for x in fields(base)}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown keys in [{f.name}]: {sorted(unknown)}")
        try:
            built[f.name] = type(base)(**{**_asdict(base), **section})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{f.name}] {e}") from e
    if raw:
        raise ConfigError(f"unknown config sections {sorted(raw)}")
    return RunConfig(**built)


# paths & data ------------------------------------------------------------------------

def out_root(args) -> str:
    return args.out or os.environ.get(OUT_ENV) or "runs"


def _under(root: str, path: str | None, default: str) -> str:
    path = path or default
    return path if os.path.isabs(path) else os.path.join(root, path)


def _load(directory: str) -> Dataset:
    try:
        return synth.load_dataset(directory)
    except FileNotFoundError as e:
        raise DataError(f"dataset not found at {directory} (run `promptmoe synth` first)") from e
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise DataError(f"dataset at {directory} is unreadable: {e}") from e


def _checkpoint(path: str) -> tuple[MoEModel, dict]:
    try:
        return load_checkpoint(path)
    except FileNotFoundError as e:
        raise DataError(f"checkpoint {path} not found") from e
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise DataError(f"checkpoint {path} is unreadable: {e}") from e


def _progress(args):
    return (lambda msg: log.info(msg)) if not args.quiet else None


# subcommands -----------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    root = _under(out_root(args), args.data, "data")
    for i, spec in enumerate(cfg.data.source_specs()):
        ds = synth.build_dataset(spec)
        synth.save_dataset(ds, os.path.join(root, f"source_{i}"))
        log.info("source slice %d: %d records", i, len(ds.records))
    target = synth.build_dataset(cfg.data.target_spec(True))
    synth.save_dataset(target, os.path.join(root, "target"))
    log.info("target: %d records (partition digest %s)", len(target.records), target.partition_digest()[:12])
    if cfg.data.control:
        synth.save_dataset(synth.build_dataset(cfg.data.target_spec(False)), os.path.join(root, "control"))
    print(root)
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    root = out_root(args)
    data = _under(root, args.data, "data")
    slices = [_load(os.path.join(data, f"source_{i}")) for i in range(cfg.model.n_experts)]
    model = MoEModel(cfg.model, seed=cfg.pretext.seed)
    rep = pretext_pretrain(model, slices, cfg.pretext, _progress(args))
    path = _under(root, args.checkpoint_out, "pretext")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_checkpoint(model, path, meta={"stage": "pretext", "val_acc": rep["val_acc"],
                                       "best_epoch": rep["best_epoch"], "pretext": _asdict(cfg.pretext)})
    for i, acc in enumerate(rep["val_acc"]):
        print(f"expert {i}: source val accuracy {acc:.4f}")
    print(path)
    return EXIT_OK


def cmd_adapt(args, cfg: RunConfig) -> int:
    root = out_root(args)
    ckpt_in = _under(root, args.checkpoint_in, "pretext")
    data = _load(_under(root, args.data, os.path.join("data", "target")))
    regime = Regime.parse(args.regime, args.prompt_len)
    tcfg = replace(cfg.train, seed=args.seed)
    if args.cap is not None and args.shots is not None:
        raise ConfigError("--cap and --shots are mutually exclusive")
    train = data.train
    if args.cap is not None:
        train = cap_per_class(train, args.cap)
    elif args.shots is not None:
        train = kshot_support(train, args.shots)
    _checkpoint(ckpt_in)
    model = fresh_model(ckpt_in, data.n_classes, args.seed)
    if regime.uses_prompts:
        model.add_prompts(regime.prompt_len, seed=args.seed)
    _, hist = adapt(model, regime, train, data.val, tcfg, _progress(args))
    rep = evaluate(model, data.test, regime)
    out = _under(root, args.checkpoint_out, f"adapt_{regime.kind}_s{args.seed}")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_checkpoint(model, out, meta={"regime": regime.label, "M": regime.prompt_len if regime.uses_prompts else 0,
                                      "seed": args.seed, "epoch": hist.best_epoch, "metrics": rep.to_dict()})
    hist.write_csv(out + ".history.csv")
    print(f"{regime.label}: test accuracy {rep.accuracy:.4f}  macro F1 {rep.macro_f1:.4f}  "
          f"trainable {rep.trainable_params:,}/{rep.total_params:,}")
    return EXIT_OK


def _sweep(args, cfg: RunConfig, stage: str) -> int:
    root = out_root(args)
    ckpt = _under(root, args.checkpoint_in, "pretext")
    _checkpoint(ckpt)
    data_dir = _under(root, args.data, os.path.join("data", "target"))
    data = _load(data_dir)
    spec = replace(cfg.experiment, stage=stage)
    run = {"A": run_stage_a, "B": run_stage_b, "Ablation": run_ablation}[spec.stage]
    cells = run(spec, ckpt, data, cfg.train, _progress(args))
    header = {"config_hash": config_hash(cfg.to_dict(), spec.stage, data.partition_digest()),
              "seeds": ",".join(map(str, spec.seeds)), "stage": spec.stage,
              "dataset": os.path.basename(os.path.normpath(data_dir))}
    csv_path, txt_path = write_results(cells, _under(root, spec.output_dir, "results"),
                                       f"stage_{spec.stage.lower()}", header)
    with open(txt_path) as fh:
        print(fh.read(), end="")
    print(csv_path)
    return EXIT_OK


def cmd_report_params(args, cfg: RunConfig) -> int:
    if args.checkpoint_in:
        model, _ = _checkpoint(_under(out_root(args), args.checkpoint_in, "pretext"))
        model.prompts = None
    else:
        model = MoEModel(cfg.model, seed=0)
    regimes = [Regime.parse(r, args.prompt_len) for r in (args.regime or ["frozen", "pft", "rfprompt"])]
    reports = []
    for r in regimes:
        reports.append(report_params(model, r))
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=1))
    else:
        print(format_param_table(reports))
    return EXIT_OK


def cmd_export_embeddings(args, cfg: RunConfig) -> int:
    root = out_root(args)
    model, _ = _checkpoint(_under(root, args.checkpoint_in, "pretext"))
    data = _load(_under(root, args.data, os.path.join("data", "target")))
    path = _under(root, args.output, "embeddings.csv")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    n = export_embeddings(model, data.part(args.split), path)
    print(f"{n} rows -> {path}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    root = out_root(args)
    model, header = _checkpoint(_under(root, args.checkpoint_in, "pretext"))
    data = _load(_under(root, args.data, os.path.join("data", "target")))
    if model.cfg.n_classes != data.n_classes:
        model.reset_head(args.seed, data.n_classes)
    regime_label = header.get("meta", {}).get("regime")
    regime = Regime.parse(regime_label, model.prompts.length if model.prompts else 16) if regime_label else None
    rep = evaluate(model, data.part(args.split), regime)
    if args.json:
        print(json.dumps(rep.to_dict(), indent=1))
    else:
        print(f"accuracy {rep.accuracy:.4f}  macro F1 {rep.macro_f1:.4f}  n={rep.n}")
        print("confusion (rows true, cols predicted):")
        print(np.array2string(rep.confusion))
    return EXIT_OK


# parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptmoe", description="Prompted mixture-of-experts spectrogram classifier")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("--data", help="dataset directory (relative to the output root)")
    common.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="build source and target datasets")

    s = sub.add_parser("pretrain", parents=[common], help="pretext-train the experts")
    s.add_argument("--checkpoint-out")

    s = sub.add_parser("adapt", parents=[common], help="one adaptation run")
    s.add_argument("--regime", default="rfprompt", help="frozen | pft | rfprompt")
    s.add_argument("--cap", type=int, help="records per class (data-scale setting)")
    s.add_argument("--shots", type=int, help="exact records per class (few-shot setting)")
    s.add_argument("--prompt-len", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--checkpoint-in")
    s.add_argument("--checkpoint-out")

    for name, helptext in (("stage-a", "regime x training-cap sweep"), ("stage-b", "regime x shot sweep"),
                           ("ablation", "prompt-length sweep")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint-in")

    s = sub.add_parser("report-params", parents=[common], help="parameter accounting per regime")
    s.add_argument("--regime", action="append")
    s.add_argument("--prompt-len", type=int, default=16)
    s.add_argument("--checkpoint-in")
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("export-embeddings", parents=[common], help="write fused embeddings as CSV")
    s.add_argument("--checkpoint-in")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--output", help="CSV path (default embeddings.csv)")

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    s.add_argument("--checkpoint-in")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json", action="store_true")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "stage-a": lambda a, c: _sweep(a, c, "A"),
    "stage-b": lambda a, c: _sweep(a, c, "B"),
    "ablation": lambda a, c: _sweep(a, c, "Ablation"),
    "report-params": cmd_report_params,
    "export-embeddings": cmd_export_embeddings,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
