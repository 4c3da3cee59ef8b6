"""Spectrogram transformer experts.

A spectrogram is tiled into non-overlapping square patches.  Each patch is
flattened row-major and projected to ``d``, a CLS token is prepended and
learned absolute positions are added.  ``n_layers`` pre-norm blocks follow:

    x = x + MHSA(LN(x))
    x = x + FFN(LN(x))        FFN = fc2(GELU(fc1(.)))

Prompt tokens, when given, are prepended before every block and stripped
right after it, so every block boundary sees ``n_patches + 1`` rows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

EXPERT_NAMES = ("LTE", "WiFi", "5G")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    patch_size: int = 16
    d_model: int = 128
    n_layers: int = 12
    n_heads: int = 4
    ffn_mult: int = 4
    n_experts: int = 3
    router_hidden: int = 128
    top_k: int = 2
    head_hidden: int = 256
    n_classes: int = 5
    prompt_len: int = 16
    prompt_sigma: float = 0.02
    ln_eps: float = 1e-5
    init_std: float = 0.02
    final_norm: bool = False
    routing_input: str = "embed_mean"  # "embed_mean" | "embed_cls" | "final_cls_mean"

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not tile a {self.image_size} grid")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("top_k must be in [1, n_experts]")
        if self.routing_input not in ("embed_mean", "embed_cls", "final_cls_mean"):
            raise ValueError(f"unknown routing input {self.routing_input!r}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def pft_layers(self) -> tuple[int, ...]:
        """Blocks unfrozen by partial fine-tuning: the final two."""
        return tuple(range(max(0, self.n_layers - 2), self.n_layers))

    def to_dict(self) -> dict:
        return asdict(self)


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std^2) truncated to +-2 std by redrawing."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return (x * std).astype(np.float32)


class Module:
    """Minimal parameter container: ``params`` plus named children."""

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.children: dict[str, Module] = {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


class PatchEmbedder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.params["proj.weight"] = T.parameter(trunc_normal(rng, (cfg.patch_dim, d), cfg.init_std))
        self.params["proj.bias"] = T.parameter(np.zeros(d))
        self.params["cls_token"] = T.parameter(np.zeros(d))
        self.params["pos_embed"] = T.parameter(
            (rng.standard_normal((cfg.n_tokens, d)) * cfg.init_std).astype(np.float32))


class TransformerLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        d, h = cfg.d_model, cfg.ffn_mult * cfg.d_model
        self.cfg = cfg
        for n in ("q", "k", "v", "o"):
            self.params[f"attn.{n}.weight"] = T.parameter(trunc_normal(rng, (d, d), cfg.init_std))
            self.params[f"attn.{n}.bias"] = T.parameter(np.zeros(d))
        self.params["ln1.weight"] = T.parameter(np.ones(d))
        self.params["ln1.bias"] = T.parameter(np.zeros(d))
        self.params["ln2.weight"] = T.parameter(np.ones(d))
        self.params["ln2.bias"] = T.parameter(np.zeros(d))
        self.params["ffn.fc1.weight"] = T.parameter(trunc_normal(rng, (d, h), cfg.init_std))
        self.params["ffn.fc1.bias"] = T.parameter(np.zeros(h))
        self.params["ffn.fc2.weight"] = T.parameter(trunc_normal(rng, (h, d), cfg.init_std))
        self.params["ffn.fc2.bias"] = T.parameter(np.zeros(d))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


class ExpertEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, expert_id: int = 0) -> None:
        super().__init__()
        self.cfg = cfg
        self.expert_id = expert_id
        self.embedder = PatchEmbedder(cfg, rng)
        self.layers = [TransformerLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.children["embed"] = self.embedder
        for i, layer in enumerate(self.layers):
            self.children[f"layer.{i}"] = layer
        if cfg.final_norm:
            self.params["norm.weight"] = T.parameter(np.ones(cfg.d_model))
            self.params["norm.bias"] = T.parameter(np.zeros(cfg.d_model))


# forward pieces ---------------------------------------------------------------

def patchify(specs: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W) -> (B, n_patches, patch*patch), patches in raster order, pixels row-major."""
    specs = np.asarray(specs, dtype=T.default_dtype())
    if specs.ndim == 2:
        specs = specs[None]
    b, h, w = specs.shape
    x = specs.reshape(b, h // patch, patch, w // patch, patch)
    return x.transpose(0, 1, 3, 2, 4).reshape(b, (h // patch) * (w // patch), patch * patch)


def embed_patches(specs: np.ndarray, emb: PatchEmbedder) -> Tensor:
    """Spectrogram batch -> (B, n_patches + 1, d) token tensor."""
    cfg = emb.cfg
    specs = np.asarray(specs)
    if specs.shape[-2:] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} spectrograms, got {specs.shape}")
    patches = T.tensor(patchify(specs, cfg.patch_size))
    tok = T.linear(patches, emb.params["proj.weight"], emb.params["proj.bias"])
    b = patches.shape[0]
    cls = T.add(T.tensor(np.zeros((b, 1, cfg.d_model))), emb.params["cls_token"])
    return T.concat_rows(cls, tok) + emb.params["pos_embed"]


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    if k.shape[-2] != v.shape[-2] or q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    dk = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = T.matmul(q, T.transpose(k, axes)) * (1.0 / math.sqrt(dk))
    return T.matmul(T.softmax_rows(scores), v)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dk)


def mhsa(layer: TransformerLayer, x: Tensor) -> Tensor:
    h = layer.cfg.n_heads
    q = _split_heads(T.linear(x, layer["attn.q.weight"], layer["attn.q.bias"]), h)
    k = _split_heads(T.linear(x, layer["attn.k.weight"], layer["attn.k.bias"]), h)
    v = _split_heads(T.linear(x, layer["attn.v.weight"], layer["attn.v.bias"]), h)
    return T.linear(_merge_heads(attention(q, k, v)), layer["attn.o.weight"], layer["attn.o.bias"])


def layer_forward(layer: TransformerLayer, x: Tensor) -> Tensor:
    """One pre-norm block on a (B, S, d) sequence; S is arbitrary."""
    cfg = layer.cfg
    if x.shape[-1] != cfg.d_model:
        raise ValueError(f"layer expects d={cfg.d_model}, got {x.shape[-1]}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    x = x + mhsa(layer, T.layernorm(x, layer["ln1.weight"], layer["ln1.bias"], cfg.ln_eps))
    hdn = T.gelu(T.linear(T.layernorm(x, layer["ln2.weight"], layer["ln2.bias"], cfg.ln_eps),
                          layer["ffn.fc1.weight"], layer["ffn.fc1.bias"]))
    x = x + T.linear(hdn, layer["ffn.fc2.weight"], layer["ffn.fc2.bias"])
    return x.reshape(*x.shape[1:]) if squeeze else x


def run_layers(expert: ExpertEncoder, tokens: Tensor, prompts: Sequence[Tensor] | None = None,
               start: int = 0, stop: int | None = None, trace: list | None = None) -> Tensor:
    """Apply blocks ``start..stop-1`` with optional per-layer prompt injection.

    ``prompts`` is indexed by absolute layer number.  ``trace``, when given,
    collects the post-strip row count of every block.
    """
    from .prompts import inject, strip

    stop = expert.cfg.n_layers if stop is None else stop
    x = tokens
    for li in range(start, stop):
        if prompts is not None:
            m = prompts[li].shape[-2]
            x = strip(layer_forward(expert.layers[li], inject(prompts[li], x)), m)
        else:
            x = layer_forward(expert.layers[li], x)
        if trace is not None:
            trace.append(x.shape[-2])
    return x


def expert_forward(expert: ExpertEncoder, specs: np.ndarray, prompts: Sequence[Tensor] | None = None,
                   trace: list | None = None) -> tuple[Tensor, Tensor]:
    """Returns the final (B, n_tokens, d) sequence and its CLS rows (B, d)."""
    cfg = expert.cfg
    if prompts is not None:
        if len(prompts) != cfg.n_layers:
            raise ValueError(f"need {cfg.n_layers} prompt entries, got {len(prompts)}")
        if len({p.shape for p in prompts}) != 1:
            raise ValueError("all layers need prompts of identical shape")
    x = run_layers(expert, embed_patches(specs, expert.embedder), prompts, trace=trace)
    if cfg.final_norm:
        x = T.layernorm(x, expert.params["norm.weight"], expert.params["norm.bias"], cfg.ln_eps)
    return x, final_cls(x)


def final_cls(x: Tensor) -> Tensor:
    return T.slice_rows(x, 0, 1).reshape(x.shape[0], x.shape[-1])


def count_layer_params(cfg: ModelConfig) -> int:
    d, h = cfg.d_model, cfg.ffn_mult * cfg.d_model
    return 4 * (d * d + d) + (d * h + h) + (h * d + d) + 2 * 2 * d


def count_embedder_params(cfg: ModelConfig) -> int:
    d = cfg.d_model
    return cfg.patch_dim * d + d + d + cfg.n_tokens * d


def count_expert_params(expert: ExpertEncoder | ModelConfig) -> int:
    """Exact parameter count; enumerates stored tensors when given an expert."""
    if isinstance(expert, ExpertEncoder):
        return expert.num_params()
    cfg = expert
    extra = 2 * cfg.d_model if cfg.final_norm else 0
    return cfg.n_layers * count_layer_params(cfg) + count_embedder_params(cfg) + extra
