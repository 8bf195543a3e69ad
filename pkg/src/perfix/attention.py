"""Multi-head self-attention with optional key/value prefixes.

Prefix rows are scaled by ``scale`` and concatenated in front of the
projected keys and values along the sequence axis, so the softmax runs over
``prefix_len + seq_len`` positions.  :func:`decomposed_attention` evaluates
the same operation as a per-head convex mixture

    out_head = (1 - lam) * attention(q, K_z, V_z) + lam * attention(q, P_k, P_v)

where ``lam`` is the softmax mass each query assigns to the prefix positions.
The two routes agree exactly; tests exploit that as an algebraic oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InputError

Prefixes = tuple[torch.Tensor, torch.Tensor]


@dataclass
class AttentionState:
    """Projection weights of one self-attention layer.

    Weight matrices are stored input-major, i.e. ``q = z @ w_q + b_q``, with
    embed_dim rows split into ``num_heads`` column groups of size
    ``embed_dim // num_heads``.
    """

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    b_q: torch.Tensor | None = None
    b_k: torch.Tensor | None = None
    b_v: torch.Tensor | None = None
    b_o: torch.Tensor | None = None
    num_heads: int = 1

    @property
    def embed_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class DecomposedAttentionOutput:
    """Prefix attention split into its aggregated and personalized terms.

    ``aggregated_part`` / ``personalized_part`` are per-head tensors of shape
    ``[..., heads, seq, head_dim]``; ``lambda_per_token`` has shape
    ``[..., heads, seq]`` and lies in [0, 1].  ``output`` is the merged,
    output-projected result and equals :func:`attention_forward` on the same
    arguments.
    """

    output: torch.Tensor
    lambda_per_token: torch.Tensor
    aggregated_part: torch.Tensor
    personalized_part: torch.Tensor

    def recombined_heads(self) -> torch.Tensor:
        lam = self.lambda_per_token.unsqueeze(-1)
        return (1.0 - lam) * self.aggregated_part + lam * self.personalized_part


def _split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    # [..., n, d] -> [..., heads, n, d_h]
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, num_heads, d // num_heads)
    return x.transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    # [..., heads, n, d_h] -> [..., n, d]
    x = x.transpose(-3, -2)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def _project(z: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None) -> torch.Tensor:
    out = z @ w
    if b is not None:
        out = out + b
    return out


def _check_prefixes(attn: AttentionState, prefixes: Prefixes | None) -> Prefixes | None:
    if prefixes is None:
        return None
    p_k, p_v = prefixes
    if p_k.shape[-1] != attn.embed_dim or p_v.shape[-1] != attn.embed_dim:
        raise InputError(
            f"prefix dim {p_k.shape[-1]} does not match embed dim {attn.embed_dim}"
        )
    if p_k.shape != p_v.shape:
        raise InputError("P_k and P_v must share a shape")
    if p_k.shape[-2] == 0:
        return None
    return p_k, p_v


def attention_forward(
    attn: AttentionState,
    z: torch.Tensor,
    prefixes: Prefixes | None = None,
    scale: float = 1.0,
) -> torch.Tensor:
    """Prefix-augmented scaled-dot-product attention; output shape equals input shape."""
    prefixes = _check_prefixes(attn, prefixes)
    q = _split_heads(_project(z, attn.w_q, attn.b_q), attn.num_heads)
    k = _split_heads(_project(z, attn.w_k, attn.b_k), attn.num_heads)
    v = _split_heads(_project(z, attn.w_v, attn.b_v), attn.num_heads)
    if prefixes is not None:
        p_k, p_v = prefixes
        pk = _split_heads(scale * p_k, attn.num_heads)
        pv = _split_heads(scale * p_v, attn.num_heads)
        if pk.dim() < k.dim():  # shared prefixes against batched tokens
            shape = k.shape[:-3] + pk.shape
            pk = pk.expand(shape)
            pv = pv.expand(shape)
        k = torch.cat([pk, k], dim=-2)
        v = torch.cat([pv, v], dim=-2)
    logits = q @ k.transpose(-2, -1) / (attn.head_dim**0.5)
    weights = torch.softmax(logits, dim=-1)
    out = _merge_heads(weights @ v)
    return _project(out, attn.w_o, attn.b_o)


def decomposed_attention(
    attn: AttentionState,
    z: torch.Tensor,
    prefixes: Prefixes | None = None,
    scale: float = 1.0,
) -> DecomposedAttentionOutput:
    """Evaluate prefix attention as a lambda-weighted mixture of two attentions.

    lambda is the ratio of summed exponentiated prefix logits to the total over
    all (prefix + token) positions, per query token and head; it is 0 when no
    prefixes are given.
    """
    prefixes = _check_prefixes(attn, prefixes)
    q = _split_heads(_project(z, attn.w_q, attn.b_q), attn.num_heads)
    k_z = _split_heads(_project(z, attn.w_k, attn.b_k), attn.num_heads)
    v_z = _split_heads(_project(z, attn.w_v, attn.b_v), attn.num_heads)
    inv_sqrt = 1.0 / (attn.head_dim**0.5)

    logits_z = q @ k_z.transpose(-2, -1) * inv_sqrt
    aggregated = torch.softmax(logits_z, dim=-1) @ v_z

    if prefixes is None:
        lam = torch.zeros(q.shape[:-1], dtype=z.dtype)
        personalized = torch.zeros_like(aggregated)
        output = _project(_merge_heads(aggregated), attn.w_o, attn.b_o)
        return DecomposedAttentionOutput(output, lam, aggregated, personalized)

    p_k, p_v = prefixes
    pk = _split_heads(scale * p_k, attn.num_heads)
    pv = _split_heads(scale * p_v, attn.num_heads)
    logits_p = q @ pk.transpose(-2, -1) * inv_sqrt

    # shared max keeps both exponential sums on one scale
    m = torch.maximum(
        logits_z.amax(dim=-1, keepdim=True), logits_p.amax(dim=-1, keepdim=True)
    )
    sum_p = torch.exp(logits_p - m).sum(dim=-1)
    sum_z = torch.exp(logits_z - m).sum(dim=-1)
    lam = sum_p / (sum_p + sum_z)

    personalized = (torch.softmax(logits_p, dim=-1) @ pv).expand_as(aggregated)
    lam = lam.expand(aggregated.shape[:-1])
    head_out = (1.0 - lam.unsqueeze(-1)) * aggregated + lam.unsqueeze(-1) * personalized
    output = _project(_merge_heads(head_out), attn.w_o, attn.b_o)
    return DecomposedAttentionOutput(output, lam, aggregated, personalized)
