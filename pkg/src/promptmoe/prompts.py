"""Per-expert, per-layer learnable prompt tokens.

Each expert ``i`` and block ``l`` owns an ``M x d`` matrix drawn from
N(0, sigma^2).  Before block ``l`` the matrix is stacked on top of the
token sequence; after the block the first ``M`` output rows are dropped.
Prompts never get positional embeddings.  They steer the frozen block only
by acting as extra keys and values in self-attention.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class PromptBank:
    def __init__(self, prompts: list[list[Tensor]], sigma: float) -> None:
        shapes = {p.shape for row in prompts for p in row}
        if len(shapes) != 1:
            raise ValueError(f"prompt matrices must share one shape, got {shapes}")
        self.prompts = prompts
        self.sigma = sigma

    @property
    def n_experts(self) -> int:
        return len(self.prompts)

    @property
    def n_layers(self) -> int:
        return len(self.prompts[0])

    @property
    def length(self) -> int:
        return self.prompts[0][0].shape[0]

    @property
    def dim(self) -> int:
        return self.prompts[0][0].shape[1]

    def for_expert(self, i: int) -> list[Tensor]:
        return self.prompts[i]

    def named_parameters(self, prefix: str = "prompts."):
        for i, row in enumerate(self.prompts):
            for l, p in enumerate(row):
                yield f"{prefix}expert.{i}.layer.{l}", p

    def num_params(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def init_prompt_bank(m: int, d: int, n_layers: int, n_experts: int, sigma: float = 0.02,
                     seed: int = 0) -> PromptBank:
    if min(m, d, n_layers, n_experts) < 1:
        raise ValueError("prompt bank dimensions must all be >= 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    raw = rng.standard_normal((n_experts, n_layers, m, d)) * sigma
    prompts = [[T.parameter(raw[i, l]) for l in range(n_layers)] for i in range(n_experts)]
    return PromptBank(prompts, sigma)


def inject(prompts_l: Tensor | None, tokens: Tensor) -> Tensor:
    """Stack prompt rows above ``tokens``; a (M, d) prompt is shared across the batch."""
    if prompts_l is None or prompts_l.shape[-2] == 0:
        return tokens
    if prompts_l.shape[-1] != tokens.shape[-1]:
        raise ValueError(f"prompt dim {prompts_l.shape[-1]} != token dim {tokens.shape[-1]}")
    if prompts_l.ndim < tokens.ndim:
        lead = tokens.shape[:-2]
        prompts_l = T.add(T.tensor(np.zeros(lead + prompts_l.shape)), prompts_l)
    return T.concat_rows(prompts_l, tokens)


def strip(aug_out: Tensor, m: int) -> Tensor:
    """Drop the first ``m`` rows."""
    rows = aug_out.shape[-2]
    if m == 0:
        return aug_out
    if m >= rows:
        raise ValueError(f"cannot strip {m} rows from a {rows}-row sequence")
    return T.slice_rows(aug_out, m, rows)


def attention_scores_to_prompts(query_row: np.ndarray, prompt_keys: np.ndarray) -> np.ndarray:
    """Pre-softmax scores q . k_p / sqrt(d_k) of one query toward each prompt key.

    ``query_row`` is ``(..., d_k)`` and ``prompt_keys`` is ``(..., M, d_k)``.
    """
    q = np.asarray(query_row, dtype=np.float64)
    k = np.asarray(prompt_keys, dtype=np.float64)
    return np.einsum("...d,...md->...m", q, k) / math.sqrt(q.shape[-1])


def layer_prompt_scores(layer, tokens: np.ndarray, prompts_l: np.ndarray, ln_eps: float = 1e-5
                        ) -> np.ndarray:
    """Scores of every token toward every prompt token, per head, inside one block.

    Returns ``(n_heads, S, M)`` for a single unbatched ``(S, d)`` sequence,
    computed on the normalized augmented sequence exactly as the block does.
    """
    cfg = layer.cfg
    with T.no_grad():
        aug = inject(T.tensor(prompts_l), T.tensor(tokens)[None] if tokens.ndim == 2 else T.tensor(tokens))
        h = T.layernorm(aug, layer["ln1.weight"], layer["ln1.bias"], ln_eps).data[0]
    m = prompts_l.shape[0]
    q = h @ layer["attn.q.weight"].data + layer["attn.q.bias"].data
    k = h[:m] @ layer["attn.k.weight"].data + layer["attn.k.bias"].data
    dk = cfg.head_dim
    out = []
    for hd in range(cfg.n_heads):
        sl = slice(hd * dk, (hd + 1) * dk)
        out.append(attention_scores_to_prompts(q[m:, sl], k[:, sl]))
    return np.stack(out)


def count_prompt_params(bank: PromptBank | None = None, *, m: int | None = None, d: int = 128,
                        n_layers: int = 12, n_experts: int = 3) -> int:
    """Enumerated count for a bank, or the closed form n_experts * n_layers * m * d."""
    if bank is not None:
        return bank.num_params()
    if m is None:
        raise ValueError("give a bank or a prompt length")
    return n_experts * n_layers * m * d
