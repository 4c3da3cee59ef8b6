"""Print exact parameter counts for the three adaptation regimes at full size.

    python3 demos/param_accounting.py
"""
from promptmoe.backbone import ModelConfig, count_embedder_params, count_expert_params, count_layer_params
from promptmoe.harness import format_param_table, report_params
from promptmoe.model import MoEModel
from promptmoe.training import FROZEN, PFT, RFPROMPT

cfg = ModelConfig(n_classes=7)
print(f"per layer    {count_layer_params(cfg):>10,}")
print(f"embedder     {count_embedder_params(cfg):>10,}")
print(f"per expert   {count_expert_params(cfg):>10,}")
print()

model = MoEModel(cfg, seed=0)
print(format_param_table([report_params(model, r) for r in (FROZEN, PFT, RFPROMPT)]))
