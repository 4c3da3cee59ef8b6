"""Routed mixture of spectrogram experts with optional deep prompts.

Parameter names are stable and double as checkpoint keys::

    expert.{i}.embed.proj.weight      expert.{i}.layer.{l}.attn.q.weight
    router.fc1.weight                 head.fc2.bias
    prompts.expert.{i}.layer.{l}
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .backbone import ExpertEncoder, ModelConfig, embed_patches, expert_forward, final_cls, run_layers
from .prompts import PromptBank, init_prompt_bank
from .router import ClassifierHead, RoutingDecision, Router, classify, fuse, route
from .tensor import Tensor


@dataclass
class ForwardResult:
    logits: Tensor
    z: Tensor
    decision: RoutingDecision


class MoEModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, with_prompts: bool = False,
                 prompt_seed: int | None = None) -> None:
        self.cfg = cfg
        ss = np.random.SeedSequence(seed)
        kids = ss.spawn(cfg.n_experts + 2)
        self.experts = [ExpertEncoder(cfg, np.random.Generator(np.random.PCG64(kids[i])), i)
                        for i in range(cfg.n_experts)]
        self.router = Router(cfg, np.random.Generator(np.random.PCG64(kids[-2])))
        self.head = ClassifierHead(cfg, np.random.Generator(np.random.PCG64(kids[-1])))
        self.prompts: PromptBank | None = None
        if with_prompts:
            self.add_prompts(cfg.prompt_len, cfg.prompt_sigma, seed if prompt_seed is None else prompt_seed)

    # parameters -------------------------------------------------------------
    def add_prompts(self, m: int, sigma: float | None = None, seed: int = 0) -> PromptBank:
        sigma = self.cfg.prompt_sigma if sigma is None else sigma
        self.prompts = init_prompt_bank(m, self.cfg.d_model, self.cfg.n_layers, self.cfg.n_experts,
                                        sigma, seed)
        self.cfg = replace(self.cfg, prompt_len=m, prompt_sigma=sigma)
        return self.prompts

    def reset_head(self, seed: int, n_classes: int | None = None) -> None:
        c = self.cfg.n_classes if n_classes is None else n_classes
        self.cfg = replace(self.cfg, n_classes=c)
        self.head = ClassifierHead(self.cfg, np.random.Generator(np.random.PCG64(seed)))

    def reset_router(self, seed: int) -> None:
        self.router = Router(self.cfg, np.random.Generator(np.random.PCG64(seed)))

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for e in self.experts:
            for n, p in e.named_parameters(f"expert.{e.expert_id}."):
                out[n] = p
        for n, p in self.router.named_parameters("router."):
            out[n] = p
        for n, p in self.head.named_parameters("head."):
            out[n] = p
        if self.prompts is not None:
            for n, p in self.prompts.named_parameters():
                out[n] = p
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def set_trainable(self, names) -> None:
        names = set(names)
        for n, p in self.named_parameters().items():
            p.requires_grad = n in names
            if n not in names:
                p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters().items())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for n, arr in state.items():
            if n in params:
                if params[n].shape != arr.shape:
                    raise ValueError(f"{n}: shape {arr.shape} vs {params[n].shape}")
                params[n].data = np.array(arr, dtype=params[n].data.dtype, copy=True)

    # forward ------------------------------------------------------------------
    def routing_input(self, specs: np.ndarray, expert_cls: list[Tensor] | None = None) -> Tensor:
        mode = self.cfg.routing_input
        if mode == "final_cls_mean":
            if expert_cls is None:
                expert_cls = [expert_forward(e, specs, self._prompts_for(i))[1]
                              for i, e in enumerate(self.experts)]
            z = expert_cls[0]
            for c in expert_cls[1:]:
                z = z + c
            return z * (1.0 / len(expert_cls))
        tokens = embed_patches(specs, self.experts[0].embedder)
        if mode == "embed_cls":
            return final_cls(tokens)
        return tokens.mean(axis=1)

    def _prompts_for(self, i: int):
        return None if self.prompts is None else self.prompts.for_expert(i)

    def forward(self, specs: np.ndarray, use_prompts: bool = True, cache=None) -> ForwardResult:
        """Full routed forward for a (B, H, W) spectrogram batch.

        ``cache`` optionally supplies precomputed expert outputs, see
        :class:`FrozenPrefixCache`.
        """
        specs = np.asarray(specs)
        if specs.ndim == 2:
            specs = specs[None]
        b = specs.shape[0]
        all_cls = None
        if self.cfg.routing_input == "final_cls_mean":
            all_cls = [self.expert_cls(i, specs, np.arange(b), use_prompts, cache) for i in range(len(self.experts))]
            decision = route(self.router, self.routing_input(specs, all_cls))
        else:
            shared = cache.shared(specs) if cache is not None else self.routing_input(specs)
            decision = route(self.router, shared)
        cls = {}
        for e in np.unique(decision.selected):
            e = int(e)
            rows = decision.rows_for(e)
            if all_cls is not None:
                cls[e] = (rows, T.take_rows(all_cls[e], rows))
            else:
                cls[e] = (rows, self.expert_cls(e, specs, rows, use_prompts, cache))
        z = fuse(decision, cls)
        return ForwardResult(classify(self.head, z), z, decision)

    def expert_cls(self, e: int, specs: np.ndarray, rows: np.ndarray, use_prompts: bool = True,
                   cache=None) -> Tensor:
        prompts = self._prompts_for(e) if use_prompts else None
        if cache is not None:
            return cache.expert_cls(self, e, rows, prompts)
        return expert_forward(self.experts[e], specs[rows], prompts)[1]

    def __call__(self, specs: np.ndarray, **kw) -> Tensor:
        return self.forward(specs, **kw).logits

    def predict(self, specs: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """(logits, z_final) for a batch, without recording gradients."""
        logits, zs = [], []
        with T.no_grad():
            for i in range(0, len(specs), batch_size):
                r = self.forward(specs[i:i + batch_size])
                logits.append(r.logits.data)
                zs.append(r.z.data)
        if not logits:
            return (np.zeros((0, self.cfg.n_classes), np.float32), np.zeros((0, self.cfg.d_model), np.float32))
        return np.concatenate(logits), np.concatenate(zs)


class FrozenPrefixCache:
    """Expert activations that cannot change during a training run.

    Holds, for a fixed dataset, the routing input and each expert's token
    sequence after block ``start - 1``.  Blocks ``start..`` are run live, so
    the cache is valid whenever everything before ``start`` is frozen and
    carries no prompts.  ``start == n_layers`` caches complete CLS vectors.
    """

    def __init__(self, model: MoEModel, specs: np.ndarray, start: int, batch_size: int = 64) -> None:
        self.start = start
        self.n = len(specs)
        self.tokens: list[np.ndarray] = []
        shared = []
        with T.no_grad():
            if model.cfg.routing_input != "final_cls_mean":
                for i in range(0, self.n, batch_size):
                    shared.append(model.routing_input(specs[i:i + batch_size]).data)
            for e in model.experts:
                chunks = []
                for i in range(0, self.n, batch_size):
                    x = embed_patches(specs[i:i + batch_size], e.embedder)
                    chunks.append(run_layers(e, x, None, 0, start).data)
                self.tokens.append(np.concatenate(chunks) if chunks else None)
        self._shared = np.concatenate(shared) if shared else None
        self.rows: np.ndarray | None = None

    def select(self, rows: np.ndarray) -> "FrozenPrefixCache":
        """View restricted to dataset rows ``rows`` (the current batch)."""
        view = object.__new__(FrozenPrefixCache)
        view.__dict__.update(self.__dict__)
        view.rows = np.asarray(rows)
        return view

    def shared(self, specs) -> Tensor:
        return T.tensor(self._shared[self.rows])

    def expert_cls(self, model: MoEModel, e: int, rows: np.ndarray, prompts) -> Tensor:
        x = T.tensor(self.tokens[e][self.rows[rows]])
        expert = model.experts[e]
        x = run_layers(expert, x, prompts, self.start, expert.cfg.n_layers)
        if expert.cfg.final_norm:
            x = T.layernorm(x, expert.params["norm.weight"], expert.params["norm.bias"], expert.cfg.ln_eps)
        return final_cls(x)


# checksums & checkpoints ------------------------------------------------------------

def checksum(params: dict, prefix: str | tuple[str, ...] = "") -> str:
    """SHA-256 over names and raw bytes of parameters whose names start with ``prefix``."""
    h = hashlib.sha256()
    for n in sorted(params):
        if n.startswith(prefix):
            arr = params[n].data if isinstance(params[n], Tensor) else params[n]
            h.update(n.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_checkpoint(model: MoEModel, path: str | os.PathLike, meta: dict | None = None,
                    state: dict | None = None) -> None:
    """Write ``<path>.json`` (header + tensor index) and ``<path>.bin`` (little-endian f32)."""
    path = os.fspath(path)
    state = model.state_dict() if state is None else state
    index, offset = [], 0
    with open(path + ".bin", "wb") as fh:
        for n, arr in state.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            index.append({"name": n, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
            fh.write(buf)
            offset += len(buf)
    header = {"format": "promptmoe-checkpoint/1", "config": model.cfg.to_dict(),
              "prompt_len": model.prompts.length if model.prompts is not None else 0,
              "prompt_sigma": model.prompts.sigma if model.prompts is not None else None,
              "meta": meta or {}, "tensors": index}
    with open(path + ".json", "w") as fh:
        json.dump(header, fh, indent=1, default=_jsonable)


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = os.fspath(path)
    if path.endswith(".json") or path.endswith(".bin"):
        path = path[:-5] if path.endswith(".json") else path[:-4]
    with open(path + ".json") as fh:
        header = json.load(fh)
    raw = np.fromfile(path + ".bin", dtype="<f4")
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in header["tensors"]:
        start = e["offset"] // 4
        n = e["nbytes"] // 4
        state[e["name"]] = raw[start:start + n].reshape(e["shape"]).astype(np.float32)
    return header, state


def load_checkpoint(path: str | os.PathLike) -> tuple[MoEModel, dict]:
    header, state = read_checkpoint(path)
    cfg = ModelConfig(**header["config"])
    model = MoEModel(cfg, seed=0)
    if header.get("prompt_len"):
        model.add_prompts(header["prompt_len"], header.get("prompt_sigma"))
    model.load_state_dict(state)
    return model, header
