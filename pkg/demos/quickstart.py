"""End-to-end walk-through at toy scale (about a minute on one core).

Builds the three source slices and the shifted target, pretext-trains a
small three-expert model, then adapts it under each regime and prints
test metrics.  Everything is seeded, so rerunning prints the same numbers.

    python3 demos/quickstart.py
"""
import tempfile
from dataclasses import replace

from promptmoe import synth
from promptmoe.backbone import ModelConfig
from promptmoe.harness import run_cell
from promptmoe.model import MoEModel, save_checkpoint
from promptmoe.training import FROZEN, PFT, PretextConfig, Regime, TrainConfig, pretext_pretrain

cfg = ModelConfig(d_model=32, n_layers=4, n_heads=4, router_hidden=32, head_hidden=64)

slices = [synth.build_dataset(s) for s in synth.default_source_specs(per_class_count=100)]
model = MoEModel(cfg, seed=0)
rep = pretext_pretrain(model, slices, PretextConfig(epochs=10, lr=1e-3), progress=print)
print("pretext source-val accuracy per expert:", [round(a, 3) for a in rep["val_acc"]])

ckpt = tempfile.mkdtemp() + "/pretext"
save_checkpoint(model, ckpt)

target = synth.build_dataset(synth.default_target_spec(per_class_count=150))
train = synth.cap_per_class(target.train, 100)
tc = TrainConfig(max_epochs=10, warmup_epochs=2, router_warmup_epochs=2)
print(f"\ntarget: {len(train)} train / {len(target.val)} val / {len(target.test)} test records")
for regime in (FROZEN, PFT, Regime("rfprompt", 8)):
    cell = run_cell(ckpt, target, regime, train, replace(tc, seed=0), "N", 100)
    m = cell.metrics
    print(f"{regime.label:<13} acc {m.accuracy:.3f}  macro-F1 {m.macro_f1:.3f}  "
          f"trainable {m.trainable_params:,} of {m.total_params:,}")
