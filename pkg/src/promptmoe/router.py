"""Soft top-k routing over experts, weighted fusion, and the MLP classifier head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import ModelConfig, Module, trunc_normal
from .tensor import Tensor


class Router(Module):
    """d -> hidden -> n_experts perceptron with a GELU in between."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, k: int | None = None) -> None:
        super().__init__()
        d, h, e = cfg.d_model, cfg.router_hidden, cfg.n_experts
        self.k = cfg.top_k if k is None else k
        self.n_experts = e
        self.params["fc1.weight"] = T.parameter(trunc_normal(rng, (d, h), cfg.init_std))
        self.params["fc1.bias"] = T.parameter(np.zeros(h))
        self.params["fc2.weight"] = T.parameter(trunc_normal(rng, (h, e), cfg.init_std))
        self.params["fc2.bias"] = T.parameter(np.zeros(e))

    def logits(self, x: Tensor) -> Tensor:
        p = self.params
        return T.linear(T.gelu(T.linear(x, p["fc1.weight"], p["fc1.bias"])), p["fc2.weight"], p["fc2.bias"])


class ClassifierHead(Module):
    """logits = W2 GELU(LN(W1 z + b1)) + b2."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, n_classes: int | None = None) -> None:
        super().__init__()
        d, h = cfg.d_model, cfg.head_hidden
        c = cfg.n_classes if n_classes is None else n_classes
        self.eps = cfg.ln_eps
        self.n_classes = c
        self.params["fc1.weight"] = T.parameter(trunc_normal(rng, (d, h), cfg.init_std))
        self.params["fc1.bias"] = T.parameter(np.zeros(h))
        self.params["ln.weight"] = T.parameter(np.ones(h))
        self.params["ln.bias"] = T.parameter(np.zeros(h))
        self.params["fc2.weight"] = T.parameter(trunc_normal(rng, (h, c), cfg.init_std))
        self.params["fc2.bias"] = T.parameter(np.zeros(c))


@dataclass
class RoutingDecision:
    probs: Tensor      # (B, E) full softmax
    selected: np.ndarray  # (B, k) expert indices, best first
    weights: Tensor    # (B, E) renormalized over the selected experts, zero elsewhere

    @property
    def k(self) -> int:
        return self.selected.shape[1]

    def rows_for(self, expert: int) -> np.ndarray:
        return np.flatnonzero((self.selected == expert).any(axis=1))


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Top-k per row, descending; ties go to the lower expert index."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def route_logits(logits: Tensor, k: int) -> RoutingDecision:
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits.reshape(1, -1)
    probs = T.softmax_rows(logits)
    sel = top_k_indices(probs.data, k)
    mask = np.zeros(probs.shape, dtype=probs.data.dtype)
    np.put_along_axis(mask, sel, 1.0, axis=-1)
    kept = probs * mask
    weights = kept / kept.sum(axis=-1, keepdims=True)
    return RoutingDecision(probs, sel, weights)


def route(router: Router, shared: Tensor) -> RoutingDecision:
    return route_logits(router.logits(shared), router.k)


def fuse(decision: RoutingDecision, expert_cls: dict[int, Tensor] | list) -> Tensor:
    """z = sum over selected experts of w_i * cls_i.

    ``expert_cls[i]`` is either a full (B, d) tensor or a ``(rows, cls)`` pair
    holding CLS rows only for the samples that selected expert ``i``.
    """
    if not isinstance(expert_cls, dict):
        expert_cls = dict(enumerate(expert_cls))
    b = decision.selected.shape[0]
    z = None
    for e in np.unique(decision.selected):
        e = int(e)
        rows = decision.rows_for(e)
        if e not in expert_cls or expert_cls[e] is None:
            raise KeyError(f"expert {e} was selected but has no embedding")
        item = expert_cls[e]
        if isinstance(item, tuple):
            have, cls = item
            if not np.array_equal(np.asarray(have), rows):
                raise ValueError(f"expert {e} embeddings cover the wrong samples")
        else:
            cls = T.take_rows(item, rows) if len(rows) != b else item
        w = T.take_rows(decision.weights, rows)[:, e:e + 1]
        part = cls * w
        if len(rows) != b:
            part = T.scatter_rows(part, rows, b)
        z = part if z is None else z + part
    return z


def classify(head: ClassifierHead, z: Tensor) -> Tensor:
    p = head.params
    h = T.linear(z, p["fc1.weight"], p["fc1.bias"])
    h = T.gelu(T.layernorm(h, p["ln.weight"], p["ln.bias"], head.eps))
    return T.linear(h, p["fc2.weight"], p["fc2.bias"])


def count_router_params(cfg: ModelConfig) -> int:
    d, h, e = cfg.d_model, cfg.router_hidden, cfg.n_experts
    return (d * h + h) + (h * e + e)


def count_head_params(cfg: ModelConfig, n_classes: int | None = None) -> int:
    d, h = cfg.d_model, cfg.head_hidden
    c = cfg.n_classes if n_classes is None else n_classes
    return (d * h + h) + 2 * h + (h * c + c)


def count_router_head_params(router: Router, head: ClassifierHead) -> tuple[int, int]:
    return router.num_params(), head.num_params()
