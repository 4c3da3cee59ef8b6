"""Loss, AdamW, schedules, regime selection, pretext pretraining and adaptation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .backbone import ModelConfig, expert_forward
from .model import FrozenPrefixCache, MoEModel
from .router import ClassifierHead, classify
from .synth import Dataset, LabeledSet
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


# loss -----------------------------------------------------------------------------

def smoothed_targets(y: np.ndarray, n_classes: int, eps: float) -> np.ndarray:
    """(1 - eps) one-hot + eps / C."""
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if not 0 <= eps < 1:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    t = np.full((y.size, n_classes), eps / n_classes)
    t[np.arange(y.size), y] += 1.0 - eps
    return t


def smoothed_cross_entropy(logits: Tensor, y, eps: float = 0.1, n_classes: int | None = None) -> Tensor:
    """Batch mean of -sum_c target_c log softmax(logits)_c."""
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    c = logits.shape[-1] if n_classes is None else n_classes
    if c != logits.shape[-1]:
        raise ValueError(f"{logits.shape[-1]} logits for {c} classes")
    target = smoothed_targets(y, c, eps).astype(logits.data.dtype)
    per_sample = -(T.log_softmax(logits) * target).sum(axis=-1)
    return per_sample.mean()


# optimizer ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(w: np.ndarray, g: np.ndarray, state: AdamState | None, lr: float, weight_decay: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """In-place AdamW update of ``w``; decay is applied to the weights, not the gradient."""
    if g.shape != w.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameter {w.shape}")
    if state is None:
        state = AdamState(np.zeros_like(w), np.zeros_like(w))
    b1, b2 = betas
    state.t += 1
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * g * g
    mhat = state.m / (1 - b1 ** state.t)
    vhat = state.v / (1 - b2 ** state.t)
    if weight_decay:
        w *= 1.0 - lr * weight_decay
    w -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(w.dtype)
    return state


class AdamW:
    """AdamW over a named parameter table; state exists only for parameters it has stepped."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 decay_filter: Callable[[str, Tensor], bool] | None = None) -> None:
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.decay_filter = decay_filter or default_decay_filter
        self.state: dict[str, AdamState] = {}

    def step(self, names: Sequence[str], lr_for: Callable[[str], float]) -> None:
        for n in names:
            p = self.params[n]
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {n}")
            wd = self.weight_decay if self.decay_filter(n, p) else 0.0
            self.state[n] = adamw_step(p.data, p.grad, self.state.get(n), lr_for(n), wd, self.betas, self.eps)

    def zero_grad(self, names: Sequence[str]) -> None:
        for n in names:
            self.params[n].grad = None


def default_decay_filter(name: str, p: Tensor) -> bool:
    """Decay weight matrices only: no biases, norms, embeddings or prompt tokens."""
    if name.startswith("prompts.") or "pos_embed" in name or "cls_token" in name:
        return False
    return p.ndim >= 2


def lr_schedule(progress: float, total_epochs: float, base_lr: float, warmup_epochs: float) -> float:
    """Linear warm-up from 0 to ``base_lr``, then cosine decay to 0 at ``total_epochs``.

    ``progress`` is fractional epochs (epoch + step / steps_per_epoch).
    """
    if warmup_epochs > 0 and progress < warmup_epochs:
        return base_lr * progress / warmup_epochs
    span = total_epochs - warmup_epochs
    if span <= 0:
        return base_lr
    frac = min(max((progress - warmup_epochs) / span, 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


# regimes --------------------------------------------------------------------------

@dataclass(frozen=True)
class Regime:
    kind: str  # "frozen" | "pft" | "rfprompt"
    prompt_len: int = 16

    def __post_init__(self) -> None:
        if self.kind not in ("frozen", "pft", "rfprompt"):
            raise ValueError(f"unknown regime {self.kind!r}")

    @classmethod
    def parse(cls, text: str, prompt_len: int = 16) -> "Regime":
        key = text.strip().lower().replace("_", "").replace("-", "")
        aliases = {"frozen": "frozen", "frozenexpert": "frozen", "fe": "frozen", "frz": "frozen",
                   "pft": "pft", "partialfinetune": "pft", "rfprompt": "rfprompt", "prompt": "rfprompt",
                   "rfp": "rfprompt"}
        if key not in aliases:
            raise ValueError(f"unknown regime {text!r}")
        return cls(aliases[key], prompt_len)

    @property
    def label(self) -> str:
        return {"frozen": "FrozenExpert", "pft": "PFT", "rfprompt": "RFPrompt"}[self.kind]

    @property
    def uses_prompts(self) -> bool:
        return self.kind == "rfprompt"


FROZEN = Regime("frozen")
PFT = Regime("pft")
RFPROMPT = Regime("rfprompt", 16)


def is_backbone(name: str) -> bool:
    return name.startswith("expert.")


def select_trainable(model: MoEModel, regime: Regime) -> set[str]:
    names = model.named_parameters()
    chosen = {n for n in names if n.startswith(("router.", "head."))}
    if regime.kind == "pft":
        layers = model.cfg.pft_layers
        for n in names:
            parts = n.split(".")
            if n.startswith("expert.") and parts[2] == "layer" and int(parts[3]) in layers:
                chosen.add(n)
    elif regime.kind == "rfprompt":
        if model.prompts is None:
            raise ValueError("RFPrompt regime needs a prompt bank on the model")
        chosen |= {n for n in names if n.startswith("prompts.")}
    return chosen


# configs & history ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr_backbone: float = 1e-5
    lr_adapt: float = 1e-3
    weight_decay: float = 0.01
    warmup_epochs: float = 5
    router_warmup_epochs: int = 2
    max_epochs: int = 100
    batch_size: int = 32
    label_smoothing: float = 0.1
    early_stop_patience: int = 10
    seed: int = 0
    eval_batch_size: int = 128

    def __post_init__(self) -> None:
        if min(self.lr_backbone, self.lr_adapt) <= 0:
            raise ValueError("learning rates must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    lr_backbone: list[float] = field(default_factory=list)
    lr_adapt: list[float] = field(default_factory=list)
    stale: list[int] = field(default_factory=list)
    best_epoch: int = -1

    def append(self, **row) -> None:
        for k, v in row.items():
            getattr(self, k).append(v)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr_backbone", "lr_adapt"])
        for i in range(len(self.epoch)):
            w.writerow([self.epoch[i], repr(self.train_loss[i]), repr(self.val_loss[i]),
                        repr(self.val_acc[i]), repr(self.lr_backbone[i]), repr(self.lr_adapt[i])])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


# adaptation -------------------------------------------------------------------------------

def cache_start(model: MoEModel, regime: Regime) -> int:
    """First block that must run live under ``regime``."""
    if regime.kind == "frozen":
        return model.cfg.n_layers
    if regime.kind == "pft":
        return min(model.cfg.pft_layers) if model.cfg.pft_layers else model.cfg.n_layers
    return 0


def evaluate_loss(model: MoEModel, data: LabeledSet, cfg: TrainConfig, use_prompts: bool,
                  cache: FrozenPrefixCache | None = None) -> tuple[float, float, np.ndarray]:
    """(mean smoothed loss, accuracy, logits) without recording gradients."""
    if len(data) == 0:
        return float("nan"), float("nan"), np.zeros((0, model.cfg.n_classes), np.float32)
    out = []
    total = 0.0
    with T.no_grad():
        for i in range(0, len(data), cfg.eval_batch_size):
            rows = np.arange(i, min(i + cfg.eval_batch_size, len(data)))
            c = cache.select(rows) if cache is not None else None
            logits = model.forward(data.specs[rows], use_prompts=use_prompts, cache=c).logits
            loss = smoothed_cross_entropy(logits, data.labels[rows], cfg.label_smoothing, model.cfg.n_classes)
            total += float(loss.data) * len(rows)
            out.append(logits.data)
    logits = np.concatenate(out)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits during evaluation")
    acc = float(np.mean(logits.argmax(axis=1) == data.labels))
    return total / len(data), acc, logits


def adapt(model: MoEModel, regime: Regime, train: LabeledSet, val: LabeledSet, cfg: TrainConfig,
          progress: Callable[[str], None] | None = None) -> tuple[dict, TrainHistory]:
    """Train ``model`` in place under ``regime``; returns (best trainable state, history).

    The first ``router_warmup_epochs`` epochs update only router and head.
    After that the regime's full trainable set is used, with backbone
    parameters on ``lr_backbone`` and everything else on ``lr_adapt``.  One
    warm-up + cosine schedule spans the whole run.  The weights with the
    lowest validation loss are restored at the end.  An empty training set
    (zero-shot) leaves the model untouched.
    """
    history = TrainHistory()
    if len(train) == 0:
        return {}, history
    if len(val) == 0:
        raise ValueError("adaptation needs a non-empty validation set")
    if regime.uses_prompts and (model.prompts is None or model.prompts.length != regime.prompt_len):
        model.add_prompts(regime.prompt_len, model.cfg.prompt_sigma, seed=cfg.seed)
    use_prompts = regime.uses_prompts
    params = model.named_parameters()
    full = select_trainable(model, regime)
    warm = {n for n in full if n.startswith(("router.", "head."))}
    full_order = [n for n in params if n in full]
    opt = AdamW(params, cfg.weight_decay)

    start = cache_start(model, regime)
    # everything ahead of ``start`` is frozen for the whole run
    model.set_trainable(())
    train_cache = FrozenPrefixCache(model, train.specs, start)
    val_cache = FrozenPrefixCache(model, val.specs, start)

    n = len(train)
    steps = math.ceil(n / cfg.batch_size)
    best_loss, stale = float("inf"), 0
    best_state: dict = {}
    for epoch in range(cfg.max_epochs):
        active = warm if epoch < cfg.router_warmup_epochs else full
        names = [n_ for n_ in full_order if n_ in active]
        model.set_trainable(names)
        order = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, epoch)))).permutation(n)
        running = 0.0
        lr_b = lr_a = 0.0
        for s in range(steps):
            rows = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            prog = epoch + s / steps
            lr_b = lr_schedule(prog, cfg.max_epochs, cfg.lr_backbone, cfg.warmup_epochs)
            lr_a = lr_schedule(prog, cfg.max_epochs, cfg.lr_adapt, cfg.warmup_epochs)
            logits = model.forward(train.specs[rows], use_prompts=use_prompts,
                                   cache=train_cache.select(rows)).logits
            loss = smoothed_cross_entropy(logits, train.labels[rows], cfg.label_smoothing, model.cfg.n_classes)
            T.backward(loss)
            opt.step(names, lambda nm: lr_b if is_backbone(nm) else lr_a)
            opt.zero_grad(names)
            running += float(loss.data) * len(rows)
        model.set_trainable(())
        val_loss, val_acc, _ = evaluate_loss(model, val, cfg, use_prompts, val_cache)
        if val_loss < best_loss:
            best_loss, stale = val_loss, 0
            best_state = {k: params[k].data.copy() for k in full_order}
            history.best_epoch = epoch
        else:
            stale += 1
        history.append(epoch=epoch, train_loss=running / n, val_loss=val_loss, val_acc=val_acc,
                       lr_backbone=lr_b, lr_adapt=lr_a, stale=stale)
        if progress:
            progress(f"{regime.label} epoch {epoch}: train {running / n:.4f} val {val_loss:.4f} acc {val_acc:.3f}")
        if stale >= cfg.early_stop_patience:
            break
    for k, v in best_state.items():
        params[k].data = v.copy()
    model.set_trainable(())
    return best_state, history


# pretext pretraining ----------------------------------------------------------------

@dataclass
class PretextConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_epochs: float = 1
    epochs: int = 15
    batch_size: int = 32
    label_smoothing: float = 0.1
    seed: int = 0


def pretext_pretrain(model: MoEModel, slices: Sequence[Dataset], cfg: PretextConfig,
                     progress: Callable[[str], None] | None = None) -> dict:
    """Supervised pretext training, one source slice per expert.

    Each expert gets a throwaway head; the best-validation expert weights are
    kept and the heads are dropped.  Returns per-expert validation accuracy.
    """
    if len(slices) != len(model.experts):
        raise ValueError(f"{len(model.experts)} experts but {len(slices)} source slices")
    report = {"val_acc": [], "best_epoch": [], "heads": []}
    for i, (expert, ds) in enumerate(zip(model.experts, slices)):
        train, val = ds.train, ds.val
        if len(train) == 0 or len(val) == 0:
            raise ValueError(f"source slice {i} is empty")
        c = ds.n_classes
        head = ClassifierHead(model.cfg, np.random.Generator(np.random.PCG64((cfg.seed, 7919, i))), n_classes=c)
        params = {f"expert.{n}": p for n, p in expert.named_parameters()}
        params.update({f"head.{n}": p for n, p in head.named_parameters()})
        for p in params.values():
            p.requires_grad = True
        opt = AdamW(params, cfg.weight_decay)
        names = list(params)
        steps = math.ceil(len(train) / cfg.batch_size)
        best = (-1.0, float("inf"))
        best_state = {k: p.data.copy() for k, p in params.items()}
        best_epoch = -1
        for epoch in range(cfg.epochs):
            order = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, i, epoch)))).permutation(len(train))
            for s in range(steps):
                rows = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                lr = lr_schedule(epoch + s / steps, cfg.epochs, cfg.lr, cfg.warmup_epochs)
                logits = classify(head, expert_forward(expert, train.specs[rows])[1])
                loss = smoothed_cross_entropy(logits, train.labels[rows], cfg.label_smoothing, c)
                T.backward(loss)
                opt.step(names, lambda _: lr)
                opt.zero_grad(names)
            acc, vloss = _single_expert_eval(expert, head, val, cfg.label_smoothing)
            if (vloss, -acc) < (best[1], -best[0]):
                best = (acc, vloss)
                best_state = {k: p.data.copy() for k, p in params.items()}
                best_epoch = epoch
            if progress:
                progress(f"pretext expert {i} epoch {epoch}: val loss {vloss:.4f} acc {acc:.3f}")
        for k, p in params.items():
            p.data = best_state[k]
            p.requires_grad = False
            p.grad = None
        report["val_acc"].append(best[0])
        report["best_epoch"].append(best_epoch)
        report["heads"].append(head)
    return report


def _single_expert_eval(expert, head, data: LabeledSet, eps: float, batch: int = 128) -> tuple[float, float]:
    correct, total = 0, 0.0
    with T.no_grad():
        for i in range(0, len(data), batch):
            sl = slice(i, i + batch)
            logits = classify(head, expert_forward(expert, data.specs[sl])[1])
            total += float(smoothed_cross_entropy(logits, data.labels[sl], eps, head.n_classes).data) * len(logits.data)
            correct += int((logits.data.argmax(1) == data.labels[sl]).sum())
    return correct / len(data), total / len(data)


def expert_accuracy(model: MoEModel, i: int, head: ClassifierHead, data: LabeledSet) -> float:
    return _single_expert_eval(model.experts[i], head, data, 0.0)[0]
