"""Configurable Vision Transformer with tagged float64 parameters.

Every parameter of a built model carries exactly one :class:`LayerTag`; the
attention layers run through :func:`perfix.attention.attention_forward`, so
plugin prefixes reuse the same code path whether they are free parameters or
generated per token by an adapter.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from .attention import AttentionState, attention_forward
from .errors import ConfigurationError, InputError, SelectorError
from .params import LayerTag, ParameterSet

PRESETS = {
    # embed_dim, depth, num_heads, mlp_ratio
    "vit-tiny": (192, 12, 3, 4.0),
    "vit-small": (384, 12, 6, 4.0),
    "vit-base": (768, 12, 12, 4.0),
    "desk-tiny": (32, 2, 2, 2.0),
}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    mlp_ratio: float = 4.0
    num_classes: int = 100
    head_layers: int = 2
    preset: str | None = None

    def __post_init__(self):
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ConfigurationError(
                    f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}"
                )
            embed, depth, heads, ratio = PRESETS[self.preset]
            object.__setattr__(self, "embed_dim", embed)
            object.__setattr__(self, "depth", depth)
            object.__setattr__(self, "num_heads", heads)
            object.__setattr__(self, "mlp_ratio", ratio)
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.head_layers not in (1, 2):
            raise ConfigurationError("head_layers must be 1 (linear) or 2 (norm + linear)")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1  # [CLS] + patches

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass
class Batch:
    """Float images in [0, 1], shape [batch, 3, H, W], with integer class labels."""

    images: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        self.images = torch.as_tensor(self.images, dtype=torch.float64)
        self.labels = torch.as_tensor(self.labels, dtype=torch.int64)
        if self.images.dim() != 4:
            raise InputError(f"images must be [batch, 3, H, W], got {tuple(self.images.shape)}")
        if self.labels.dim() != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise InputError("labels must be one integer per image")

    def __len__(self) -> int:
        return self.images.shape[0]


def trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> None:
    """Fill with a normal(0, std) truncated at +/- 2 std, via inverse CDF."""
    lo = 0.5 * (1.0 + math.erf(-2.0 / math.sqrt(2.0)))
    hi = 0.5 * (1.0 + math.erf(2.0 / math.sqrt(2.0)))
    u = torch.empty_like(tensor).uniform_(lo, hi, generator=generator)
    tensor.copy_(std * math.sqrt(2.0) * torch.erfinv(2.0 * u - 1.0))


class SelfAttention(nn.Module):
    """Input-major projection matrices so q = z @ w_q + b_q."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        for name in ("w_q", "w_k", "w_v", "w_o"):
            setattr(self, name, nn.Parameter(torch.empty(dim, dim, dtype=torch.float64)))
        for name in ("b_q", "b_k", "b_v", "b_o"):
            setattr(self, name, nn.Parameter(torch.zeros(dim, dtype=torch.float64)))

    def state(self) -> AttentionState:
        return AttentionState(
            w_q=self.w_q, w_k=self.w_k, w_v=self.w_v, w_o=self.w_o,
            b_q=self.b_q, b_k=self.b_k, b_v=self.b_v, b_o=self.b_o,
            num_heads=self.num_heads,
        )

    def forward(self, z, prefixes=None, scale=1.0):
        return attention_forward(self.state(), z, prefixes=prefixes, scale=scale)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, dim, dtype=torch.float64)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim, dtype=torch.float64)
        self.attn = SelfAttention(cfg.embed_dim, cfg.num_heads)
        self.norm2 = nn.LayerNorm(cfg.embed_dim, dtype=torch.float64)
        self.mlp = Mlp(cfg.embed_dim, cfg.mlp_hidden)


class VisionTransformer(nn.Module):
    """Pre-norm ViT over non-overlapping patches with a [CLS] readout."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d, dtype=torch.float64))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.seq_len, d, dtype=torch.float64))
        self.patch_embed = nn.Linear(cfg.patch_dim, d, dtype=torch.float64)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d, dtype=torch.float64)
        self.head = nn.Linear(d, cfg.num_classes, dtype=torch.float64)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, c, h, w = images.shape
        p = self.cfg.patch_size
        x = images.reshape(b, c, h // p, p, w // p, p)
        x = x.permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, self.cfg.num_patches, c * p * p)

    def forward_images(self, images: torch.Tensor, plugins: Sequence = ()) -> torch.Tensor:
        cfg = self.cfg
        if images.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise InputError(
                f"expected images [*, 3, {cfg.image_size}, {cfg.image_size}], "
                f"got {tuple(images.shape)}"
            )
        x = self.patch_embed(self.patchify(images))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for plugin in plugins:
            prompt = plugin.prompt_tokens()
            if prompt is not None and prompt.shape[0] > 0:
                rows = prompt.unsqueeze(0).expand(x.shape[0], -1, -1)
                x = torch.cat([x[:, :1], rows, x[:, 1:]], dim=1)
        for i, block in enumerate(self.blocks):
            h = block.norm1(x)
            prefixes, scale = None, 1.0
            for plugin in plugins:
                got = plugin.block_prefixes(i, h)
                if got is not None:
                    prefixes, scale = got
            x = x + block.attn(h, prefixes=prefixes, scale=scale)
            m = block.mlp(block.norm2(x))
            for plugin in plugins:
                delta = plugin.mlp_delta(i, m)
                if delta is not None:
                    m = m + delta
            x = x + m
        return self.head(self.norm(x)[:, 0])


def build_vit(config: ModelConfig, seed: int) -> VisionTransformer:
    """Deterministically initialized model: trunc-normal(0.02) weights, zero
    biases and embeddings, unit LayerNorm gains."""
    model = VisionTransformer(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            parts = name.split(".")
            if name in ("cls_token", "pos_embed"):
                p.zero_()
            elif len(parts) >= 2 and parts[-2].startswith("norm"):
                p.fill_(1.0) if parts[-1] == "weight" else p.zero_()
            elif parts[-1] in ("bias", "b_q", "b_k", "b_v", "b_o"):
                p.zero_()
            else:
                trunc_normal_(p, 0.02, gen)
    return model


def _tag_of(name: str, head_layers: int) -> LayerTag:
    if name.startswith("plugin."):
        return LayerTag.plugin
    if name in ("cls_token", "pos_embed"):
        return LayerTag.position_embedding
    if name.startswith("patch_embed."):
        return LayerTag.patch_embedding
    if name.startswith("head."):
        return LayerTag.classification_head
    if name.startswith("norm."):
        return LayerTag.classification_head if head_layers >= 2 else LayerTag.layernorm
    if ".norm1." in name or ".norm2." in name:
        return LayerTag.layernorm
    if ".attn." in name:
        return LayerTag.attention
    if ".mlp." in name:
        return LayerTag.mlp
    raise SelectorError(f"cannot tag parameter {name!r}")


def named_tagged_parameters(
    model: VisionTransformer, plugins: Sequence = ()
) -> "OrderedDict[str, tuple[nn.Parameter, LayerTag]]":
    """Stable id -> (parameter, tag) map over the model and attached plugins."""
    out: "OrderedDict[str, tuple[nn.Parameter, LayerTag]]" = OrderedDict()
    for name, p in model.named_parameters():
        out[name] = (p, _tag_of(name, model.cfg.head_layers))
    for plugin in plugins:
        for name, p in plugin.named_parameters():
            pid = f"plugin.{plugin.spec.kind}.{name}"
            if pid in out:
                raise SelectorError(f"duplicate parameter id {pid!r}")
            out[pid] = (p, LayerTag.plugin)
    return out


def parameter_set(model: VisionTransformer, plugins: Sequence = ()) -> ParameterSet:
    ps = ParameterSet()
    for pid, (p, tag) in named_tagged_parameters(model, plugins).items():
        ps.set(pid, p.detach(), tag)
    return ps


def load_parameter_set(
    model: VisionTransformer,
    ps: ParameterSet,
    plugins: Sequence = (),
    ids: Iterable[str] | None = None,
) -> None:
    """Copy values from ``ps`` into the live parameters (all of ``ps`` by default)."""
    table = named_tagged_parameters(model, plugins)
    with torch.no_grad():
        for pid in ps.ids() if ids is None else ids:
            if pid not in table:
                raise SelectorError(f"unknown parameter id {pid!r}")
            target = table[pid][0]
            value = ps.value(pid)
            if tuple(target.shape) != tuple(value.shape):
                raise InputError(f"shape mismatch loading {pid!r}")
            target.copy_(value)


def head_parameter_ids(model: VisionTransformer, layers: int | None = None) -> list[str]:
    """Ids of the trailing classification layers: linear only (1) or norm + linear (2)."""
    layers = model.cfg.head_layers if layers is None else layers
    ids = ["head.weight", "head.bias"]
    if layers >= 2:
        ids = ["norm.weight", "norm.bias"] + ids
    return ids


def forward(model: VisionTransformer, batch: Batch, plugins=None) -> torch.Tensor:
    """Logits [batch, num_classes]; plugins may be one plugin state or a sequence."""
    return model.forward_images(batch.images, _as_plugin_tuple(plugins))


def _as_plugin_tuple(plugins) -> tuple:
    if plugins is None:
        return ()
    if isinstance(plugins, (list, tuple)):
        return tuple(plugins)
    return (plugins,)


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log softmax probability of the true class."""
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if labels.numel() == 0:
        raise InputError("empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise InputError(
            f"label out of range [0, {logits.shape[-1]}): {labels.min()}..{labels.max()}"
        )
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, labels.unsqueeze(-1)).mean()


def gradients(
    model: VisionTransformer,
    batch: Batch,
    plugins=None,
    param_selector: Iterable[str] | None = None,
) -> ParameterSet:
    """Reverse-mode gradients of the batch loss w.r.t. the selected parameters.

    Parameters outside the selector get no entry; parameters that do not
    influence the loss get an explicit zero entry.
    """
    plugin_tuple = _as_plugin_tuple(plugins)
    table = named_tagged_parameters(model, plugin_tuple)
    if param_selector is None:
        selected = list(table)
    else:
        selected = list(param_selector)
        for pid in selected:
            if pid not in table:
                raise SelectorError(f"unknown parameter id {pid!r}")
    logits = model.forward_images(batch.images, plugin_tuple)
    loss = cross_entropy_loss(logits, batch.labels)
    tensors = [table[pid][0] for pid in selected]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = ParameterSet()
    for pid, g in zip(selected, grads):
        p, tag = table[pid]
        out.set(pid, torch.zeros_like(p) if g is None else g, tag)
    return out


def _resolve_selector(table, selector):
    if selector is None:
        return list(table)
    items = list(selector)
    if not items:
        return []
    if all(isinstance(s, LayerTag) for s in items):
        wanted = set(items)
        return [pid for pid, (_, tag) in table.items() if tag in wanted]
    if all(isinstance(s, str) for s in items):
        for pid in items:
            if pid not in table:
                raise SelectorError(f"unknown parameter id {pid!r}")
        return items
    raise SelectorError("selector must be all LayerTags or all parameter ids")


def count_parameters(
    model: VisionTransformer, plugins=None, selector: Iterable | None = None
) -> int:
    """Exact element count over the selected tags or ids (everything by default)."""
    table = named_tagged_parameters(model, _as_plugin_tuple(plugins))
    return sum(table[pid][0].numel() for pid in _resolve_selector(table, selector))


def flops_breakdown(cfg: ModelConfig, plugin_spec=None) -> dict[str, int]:
    """Analytic forward-pass FLOPs for one image, 2 per multiply-add.

    Only matmul work is counted; the result splits into a patch-embedding
    term, a per-block term (times depth), and a head term so that doubling
    the depth exactly doubles the block share.
    """
    n = cfg.seq_len
    prefix_len = 0
    adapter_macs = 0
    kind = getattr(plugin_spec, "kind", None)
    if kind == "prompt":
        n += plugin_spec.prompt_len
    elif kind == "vanilla_prefix":
        prefix_len = plugin_spec.prefix_len
    elif kind == "adapter_prefix":
        prefix_len = n
        adapter_macs = n * (cfg.embed_dim * plugin_spec.hidden_dim
                            + plugin_spec.hidden_dim * 2 * cfg.embed_dim)
    elif kind == "mlp_adapter":
        adapter_macs = n * 2 * cfg.embed_dim * plugin_spec.hidden_dim

    d = cfg.embed_dim
    patch = cfg.num_patches * cfg.patch_dim * d
    qkv = 3 * n * d * d
    scores = n * (n + prefix_len) * d
    attend = n * (n + prefix_len) * d
    proj = n * d * d
    mlp = 2 * n * d * cfg.mlp_hidden
    block = qkv + scores + attend + proj + mlp + adapter_macs
    head = d * cfg.num_classes
    return {"patch": 2 * patch, "per_block": 2 * block, "head": 2 * head}


def count_flops(model: VisionTransformer, plugins=None, input_shape=None) -> int:
    plugin_tuple = _as_plugin_tuple(plugins)
    spec = plugin_tuple[0].spec if plugin_tuple else None
    parts = flops_breakdown(model.cfg, spec)
    return parts["patch"] + model.cfg.depth * parts["per_block"] + parts["head"]
