"""Experiment sweeps, metrics, parameter accounting and embedding export."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .backbone import ModelConfig
from .model import MoEModel, checksum, load_checkpoint
from .prompts import count_prompt_params
from .synth import Dataset, LabeledSet, cap_per_class, kshot_support
from .training import Regime, TrainConfig, TrainHistory, adapt, select_trainable

log = logging.getLogger(__name__)

REGIME_LABELS = ("FrozenExpert", "PFT", "RFPrompt")


# metrics ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    confusion: np.ndarray  # rows = true class, columns = predicted
    trainable_params: int = 0
    total_params: int = 0

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / self.total_params if self.total_params else 0.0

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        d["trainable_fraction"] = self.trainable_fraction
        return d


def metrics_from_predictions(y_true, y_pred, n_classes: int) -> MetricsReport:
    """Accuracy, per-class P/R and macro F1 (absent predictions count as F1 = 0)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("cannot score an empty test set")
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label/prediction length mismatch {y_true.shape} vs {y_pred.shape}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    prec = np.divide(tp, pred_tot, out=np.zeros(n_classes), where=pred_tot > 0)
    rec = np.divide(tp, true_tot, out=np.zeros(n_classes), where=true_tot > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(n_classes), where=denom > 0)
    return MetricsReport(float(tp.sum() / cm.sum()), float(f1.mean()), prec.tolist(), rec.tolist(), cm)


def evaluate(model: MoEModel, test: LabeledSet, regime: Regime | None = None,
             batch_size: int = 64) -> MetricsReport:
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    logits, _ = model.predict(test.specs, batch_size)
    rep = metrics_from_predictions(test.labels, logits.argmax(axis=1), model.cfg.n_classes)
    rep.total_params = model.num_params()
    rep.trainable_params = (sum(model.named_parameters()[n].size for n in select_trainable(model, regime))
                            if regime is not None else 0)
    return rep


def binomial_sd(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n) if n else float("inf")


# parameter accounting ---------------------------------------------------------------

# Reference per-regime figures, shown only as a comparison column.
REFERENCE_FIGURES = {
    "FrozenExpert": {"backbone": 0, "prompts": None, "percent": 0.37},
    "PFT": {"backbone": 800_000, "prompts": None, "percent": 17.0},
    "RFPrompt": {"backbone": 0, "prompts": 73_728, "percent": 0.34},
    "router": 16_000,
    "head": 165_000,
    "rfprompt_trainable": 255_000,
    "total": 4_800_000,
}


@dataclass
class ParamReport:
    regime: str
    backbone: int
    prompts: int
    router: int
    head: int
    trainable: int
    total: int

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_fraction"] = self.trainable_fraction
        return d


def report_params(model: MoEModel, regime: Regime) -> ParamReport:
    """Exact trainable/total counts under ``regime``, enumerated from stored tensors.

    An RFPrompt regime on a model without a matching prompt bank gets one added.
    """
    if regime.uses_prompts and (model.prompts is None or model.prompts.length != regime.prompt_len):
        model.add_prompts(regime.prompt_len)
    params = model.named_parameters()
    chosen = select_trainable(model, regime)

    def tally(prefix: str) -> int:
        return sum(params[n].size for n in chosen if n.startswith(prefix))

    total = sum(p.size for n, p in params.items() if regime.uses_prompts or not n.startswith("prompts."))
    return ParamReport(regime.label, tally("expert."), tally("prompts."), tally("router."), tally("head."),
                       sum(params[n].size for n in chosen), total)


def _fmt_delta(ours: float, claim: float | None) -> str:
    if claim is None:
        return "--"
    return f"{ours - claim:+,.0f}"


def format_param_table(reports: Sequence[ParamReport]) -> str:
    """Per-regime table with the reference figure and our delta beside each count."""
    head = (f"{'Regime':<14}{'Backbone':>12}{'(claim)':>10}{'delta':>11}{'Prompts':>10}{'(claim)':>9}"
            f"{'delta':>8}{'Trainable':>11}{'Total':>11}{'Total %':>9}{'(claim)':>9}")
    lines = [head, "-" * len(head)]
    for r in reports:
        c = REFERENCE_FIGURES.get(r.regime, {})
        bb_claim = c.get("backbone")
        pr_claim = c.get("prompts")
        pct_claim = f"{c['percent']:.2f}%" if c else "--"
        lines.append(
            f"{r.regime:<14}{r.backbone:>12,}{_short(bb_claim):>10}{_fmt_delta(r.backbone, bb_claim):>11}"
            f"{(f'{r.prompts:,}' if r.prompts else '--'):>10}{_short(pr_claim):>9}"
            f"{(_fmt_delta(r.prompts, pr_claim) if r.prompts else '--'):>8}"
            f"{r.trainable:>11,}{r.total:>11,}{100 * r.trainable_fraction:>8.2f}%"
            f"{pct_claim:>9}")
    if reports:
        r = reports[-1]
        lines.append("")
        for label, ours, key in (("router", r.router, "router"), ("head", r.head, "head")):
            claim = REFERENCE_FIGURES[key]
            lines.append(f"{label:<14}{ours:>12,}{_short(claim):>10}{_fmt_delta(ours, claim):>11}")
        lines.append(f"{'model total':<14}{r.total:>12,}{_short(REFERENCE_FIGURES['total']):>10}"
                     f"{_fmt_delta(r.total, REFERENCE_FIGURES['total']):>11}")
    return "\n".join(lines)


def _short(v) -> str:
    if v is None:
        return "--"
    if v >= 1_000_000:
        return f"~{v / 1e6:.1f}M"
    if v >= 10_000 and v % 1000 == 0:
        return f"~{v // 1000}K"
    return f"{v:,}"


# experiment specs -----------------------------------------------------------------

@dataclass
class ExperimentSpec:
    stage: str = "A"  # "A" | "B" | "Ablation"
    caps: list[int] = field(default_factory=lambda: [100, 200, 400, 800, 1600])
    shots: list[int] = field(default_factory=lambda: [0, 2, 4, 8, 16, 32, 64, 128])
    prompt_lengths: list[int] = field(default_factory=lambda: [8, 12, 16, 20, 32])
    regimes: list[str] = field(default_factory=lambda: list(REGIME_LABELS))
    seeds: list[int] = field(default_factory=lambda: [0])
    prompt_len: int = 16
    output_dir: str = "results"

    def __post_init__(self) -> None:
        stage = {"a": "A", "b": "B", "ablation": "Ablation"}.get(str(self.stage).lower())
        if stage is None:
            raise ValueError(f"unknown stage {self.stage!r}")
        self.stage = stage
        for name in ("caps", "shots", "prompt_lengths", "regimes", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        if any(k < 0 for k in self.shots):
            raise ValueError("shot counts must be >= 0")
        if any(n < 1 for n in self.caps):
            raise ValueError("caps must be >= 1")
        if any(p < 1 for p in self.prompt_lengths):
            raise ValueError("prompt lengths must be >= 1")
        self.regime_objs()  # validates names

    def regime_objs(self, prompt_len: int | None = None) -> list[Regime]:
        m = self.prompt_len if prompt_len is None else prompt_len
        return [Regime.parse(r, m) for r in self.regimes]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown experiment keys {sorted(extra)}")
        return cls(**d)


def config_hash(*parts) -> str:
    """Short stable digest of JSON-serializable configuration parts."""
    blob = json.dumps([_plain(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _plain(p):
    return p.to_dict() if hasattr(p, "to_dict") else p


# single cells -----------------------------------------------------------------------

@dataclass
class CellResult:
    regime: str
    key: str  # "N", "K" or "P"
    value: int
    seed: int
    metrics: MetricsReport
    history: TrainHistory
    backbone_checksum: str
    prompt_params: int = 0


def fresh_model(checkpoint: str, n_classes: int, seed: int) -> MoEModel:
    """Pretext weights with a new head and router drawn from ``seed``."""
    model, _ = load_checkpoint(checkpoint)
    model.prompts = None
    model.reset_head(int(np.random.SeedSequence((seed, 1)).generate_state(1)[0]), n_classes)
    model.reset_router(int(np.random.SeedSequence((seed, 2)).generate_state(1)[0]))
    return model


def run_cell(checkpoint: str, data: Dataset, regime: Regime, train: LabeledSet, cfg: TrainConfig,
             key: str, value: int, progress: Callable[[str], None] | None = None) -> CellResult:
    model = fresh_model(checkpoint, data.n_classes, cfg.seed)
    if regime.uses_prompts:
        model.add_prompts(regime.prompt_len, seed=cfg.seed)
    _, hist = adapt(model, regime, train, data.val, cfg, progress)
    rep = evaluate(model, data.test, regime)
    return CellResult(regime.label, key, value, cfg.seed, rep, hist,
                      checksum(model.named_parameters(), "expert."),
                      model.prompts.num_params() if model.prompts is not None and regime.uses_prompts else 0)


# sweeps -------------------------------------------------------------------------------

def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)


def run_stage_a(spec: ExperimentSpec, checkpoint: str, data: Dataset, cfg: TrainConfig,
                progress: Callable[[str], None] | None = None) -> list[CellResult]:
    """Regime x per-class cap; every cell scores on the same uncapped test split."""
    _require(checkpoint)
    out = []
    for seed in spec.seeds:
        for n in spec.caps:
            train = cap_per_class(data.train, n)
            for regime in spec.regime_objs():
                if progress:
                    progress(f"stage A: {regime.label} N={n} seed={seed}")
                out.append(run_cell(checkpoint, data, regime, train, _seeded(cfg, seed), "N", n, progress))
    return out


def run_stage_b(spec: ExperimentSpec, checkpoint: str, data: Dataset, cfg: TrainConfig,
                progress: Callable[[str], None] | None = None) -> list[CellResult]:
    """Regime x shot budget K with nested supports; K = 0 scores the untrained head."""
    _require(checkpoint)
    out = []
    for seed in spec.seeds:
        for k in spec.shots:
            support = kshot_support(data.train, k)
            for regime in spec.regime_objs():
                if progress:
                    progress(f"stage B: {regime.label} K={k} seed={seed}")
                out.append(run_cell(checkpoint, data, regime, support, _seeded(cfg, seed), "K", k, progress))
    return out


def run_ablation(spec: ExperimentSpec, checkpoint: str, data: Dataset, cfg: TrainConfig,
                 progress: Callable[[str], None] | None = None, cap: int | None = None) -> list[CellResult]:
    """RFPrompt only, one cell per prompt length."""
    _require(checkpoint)
    train = data.train if cap is None else cap_per_class(data.train, cap)
    out = []
    for seed in spec.seeds:
        for p in spec.prompt_lengths:
            if progress:
                progress(f"ablation: P={p} seed={seed}")
            cell = run_cell(checkpoint, data, Regime("rfprompt", p), train, _seeded(cfg, seed), "P", p, progress)
            expected = count_prompt_params(m=p, d=data_d(checkpoint), n_layers=_ckpt_cfg(checkpoint).n_layers,
                                           n_experts=_ckpt_cfg(checkpoint).n_experts)
            if cell.prompt_params != expected:
                raise AssertionError(f"P={p}: enumerated {cell.prompt_params} prompt values, expected {expected}")
            out.append(cell)
    return out


def _ckpt_cfg(checkpoint: str) -> ModelConfig:
    with open(_base(checkpoint) + ".json") as fh:
        return ModelConfig(**json.load(fh)["config"])


def data_d(checkpoint: str) -> int:
    return _ckpt_cfg(checkpoint).d_model


def _base(path: str) -> str:
    path = os.fspath(path)
    for ext in (".json", ".bin"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def _require(checkpoint: str) -> None:
    base = _base(checkpoint)
    for ext in (".json", ".bin"):
        if not os.path.exists(base + ext):
            raise FileNotFoundError(f"pretext checkpoint {base + ext} not found")


# tables ---------------------------------------------------------------------------------

CSV_FIELDS = ("regime", "key", "value", "seed", "accuracy", "macro_f1", "n_test", "trainable_params",
              "total_params", "trainable_fraction", "prompt_params", "best_epoch", "epochs_run",
              "backbone_checksum")


def results_csv(cells: Sequence[CellResult], header: dict) -> str:
    """Canonical CSV; ``header`` items become leading ``# key: value`` comment lines."""
    buf = io.StringIO()
    for k, v in header.items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for c in cells:
        m = c.metrics
        w.writerow([c.regime, c.key, c.value, c.seed, repr(m.accuracy), repr(m.macro_f1), m.n,
                    m.trainable_params, m.total_params, repr(m.trainable_fraction), c.prompt_params,
                    c.history.best_epoch, len(c.history.epoch), c.backbone_checksum])
    return buf.getvalue()


def pretty_table(cells: Sequence[CellResult], header: dict | None = None) -> str:
    """Accuracy grid, one row per sweep value, one column per regime (mean over seeds)."""
    if not cells:
        return "(no results)"
    key = cells[0].key
    regimes = list(dict.fromkeys(c.regime for c in cells))
    values = list(dict.fromkeys(c.value for c in cells))
    lines = [f"# {k}: {v}" for k, v in (header or {}).items()]
    if key == "P":
        lines.append(f"{'P':>4}{'prompt params':>15}{'acc %':>8}{'macro F1':>10}")
        for v in values:
            sel = [c for c in cells if c.value == v]
            acc = np.mean([c.metrics.accuracy for c in sel])
            f1 = np.mean([c.metrics.macro_f1 for c in sel])
            lines.append(f"{v:>4}{sel[0].prompt_params:>15,}{100 * acc:>8.2f}{f1:>10.4f}")
        return "\n".join(lines)
    lines.append(f"{key:>6}" + "".join(f"{r:>14}" for r in regimes))
    for v in values:
        row = f"{v:>6}"
        for r in regimes:
            sel = [c.metrics.accuracy for c in cells if c.value == v and c.regime == r]
            row += f"{100 * np.mean(sel):>13.2f}%" if sel else f"{'--':>14}"
        lines.append(row)
    return "\n".join(lines)


def write_results(cells: Sequence[CellResult], directory: str, name: str, header: dict) -> tuple[str, str]:
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, f"{name}.csv")
    txt_path = os.path.join(directory, f"{name}.txt")
    with open(csv_path, "w") as fh:
        fh.write(results_csv(cells, header))
    with open(txt_path, "w") as fh:
        fh.write(pretty_table(cells, header) + "\n")
    return csv_path, txt_path


# embeddings ---------------------------------------------------------------------------

def export_embeddings(model: MoEModel, data: LabeledSet, path: str, batch_size: int = 64) -> int:
    """Write ``label, z_0..z_{d-1}`` for every record; returns the row count."""
    _, z = model.predict(data.specs, batch_size)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"z_{i}" for i in range(model.cfg.d_model)])
        for y, row in zip(data.labels, z):
            w.writerow([int(y)] + [repr(float(v)) for v in row])
    return len(z)
