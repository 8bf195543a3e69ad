"""Parameter-efficient plugin families attachable to a Vision Transformer.

Four kinds are supported:

* ``vanilla_prefix`` -- free key/value rows concatenated into every
  attention layer,
* ``adapter_prefix`` -- a per-block down/Tanh/up adapter that generates
  per-token prefixes from the block input (the FedPerfix design),
* ``prompt`` -- learnable tokens inserted after [CLS] at the input,
* ``mlp_adapter`` -- bottleneck residual around each MLP, zero-initialized
  up-projection so attaching is an exact identity.

Plugin parameters all carry :data:`LayerTag.plugin` and live under ids
prefixed ``plugin.``, disjoint from base-model ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, UsageError
from .model import ModelConfig, VisionTransformer, trunc_normal_

KINDS = ("vanilla_prefix", "adapter_prefix", "prompt", "mlp_adapter")


@dataclass(frozen=True)
class PluginSpec:
    kind: str
    prefix_len: int = 8
    hidden_dim: int = 256
    scale: float = 1.5
    init: str = "random"
    prompt_len: int = 8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown plugin kind {self.kind!r}")
        if self.init not in ("zero", "random"):
            raise ConfigurationError("init must be 'zero' or 'random'")
        if self.hidden_dim < 1:
            raise ConfigurationError("hidden_dim must be >= 1")
        if self.prefix_len < 0 or self.prompt_len < 0:
            raise ConfigurationError("prefix_len and prompt_len must be >= 0")
        if self.scale < 0:
            raise ConfigurationError("scale must be >= 0")


class PluginState(nn.Module):
    """Base class: hooks consulted by the model forward, all no-ops here."""

    def __init__(self, spec: PluginSpec, config: ModelConfig):
        super().__init__()
        self.spec = spec
        self.config = config

    def prompt_tokens(self):
        return None

    def block_prefixes(self, block_index: int, hidden: torch.Tensor):
        return None

    def mlp_delta(self, block_index: int, mlp_out: torch.Tensor):
        return None


class _PrefixBlock(nn.Module):
    def __init__(self, prefix_len: int, dim: int):
        super().__init__()
        self.p_k = nn.Parameter(torch.zeros(prefix_len, dim, dtype=torch.float64))
        self.p_v = nn.Parameter(torch.zeros(prefix_len, dim, dtype=torch.float64))


class VanillaPrefixState(PluginState):
    def __init__(self, spec: PluginSpec, config: ModelConfig):
        super().__init__(spec, config)
        self.blocks = nn.ModuleList(
            _PrefixBlock(spec.prefix_len, config.embed_dim) for _ in range(config.depth)
        )

    def block_prefixes(self, block_index, hidden):
        if self.spec.prefix_len == 0:
            return None
        blk = self.blocks[block_index]
        return (blk.p_k, blk.p_v), self.spec.scale


class _AdapterBlock(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w_down = nn.Parameter(torch.zeros(dim, hidden, dtype=torch.float64))
        self.w_up = nn.Parameter(torch.zeros(hidden, 2 * dim, dtype=torch.float64))


class AdapterPrefixState(PluginState):
    """Generates per-token prefixes: split(tanh(Z @ W_down) @ W_up, 2)."""

    def __init__(self, spec: PluginSpec, config: ModelConfig):
        super().__init__(spec, config)
        self.blocks = nn.ModuleList(
            _AdapterBlock(config.embed_dim, spec.hidden_dim) for _ in range(config.depth)
        )

    def block_prefixes(self, block_index, hidden):
        p_k, p_v = compute_prefixes(self.blocks[block_index], hidden)
        return (p_k, p_v), self.spec.scale


class PromptState(PluginState):
    def __init__(self, spec: PluginSpec, config: ModelConfig):
        super().__init__(spec, config)
        self.tokens = nn.Parameter(
            torch.zeros(spec.prompt_len, config.embed_dim, dtype=torch.float64)
        )

    def prompt_tokens(self):
        return self.tokens


class _BottleneckBlock(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.down = nn.Linear(dim, hidden, dtype=torch.float64)
        self.up = nn.Linear(hidden, dim, dtype=torch.float64)


class MlpAdapterState(PluginState):
    """Residual bottleneck after each MLP; up-projection starts at zero."""

    def __init__(self, spec: PluginSpec, config: ModelConfig):
        super().__init__(spec, config)
        self.blocks = nn.ModuleList(
            _BottleneckBlock(config.embed_dim, spec.hidden_dim) for _ in range(config.depth)
        )

    def mlp_delta(self, block_index, mlp_out):
        blk = self.blocks[block_index]
        return blk.up(torch.nn.functional.gelu(blk.down(mlp_out)))


def compute_prefixes(
    adapter_block: _AdapterBlock, z: torch.Tensor, scale: float = 1.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Adapter-generated prefixes for one block; each output row matches a token."""
    out = torch.tanh(z @ adapter_block.w_down) @ adapter_block.w_up
    p_k, p_v = out.chunk(2, dim=-1)
    if scale != 1.0:
        p_k, p_v = scale * p_k, scale * p_v
    return p_k, p_v


_STATE_CLASSES = {
    "vanilla_prefix": VanillaPrefixState,
    "adapter_prefix": AdapterPrefixState,
    "prompt": PromptState,
    "mlp_adapter": MlpAdapterState,
}


def init_plugin(spec: PluginSpec, config: ModelConfig, seed: int) -> PluginState:
    """Build a plugin state; zero init leaves every tensor at zero, random init
    draws trunc-normal(0.02) except up-projections of mlp_adapter, which stay
    zero so attachment is an identity."""
    state = _STATE_CLASSES[spec.kind](spec, config)
    with torch.no_grad():
        for _, p in state.named_parameters():
            p.zero_()
        if spec.init == "random":
            gen = torch.Generator().manual_seed(seed)
            for name, p in state.named_parameters():
                if spec.kind == "mlp_adapter" and ".up." in name:
                    continue
                if name.endswith(".bias"):
                    continue
                trunc_normal_(p, 0.02, gen)
    return state


class PluggedModel:
    """A model bundled with its attached plugin states (one per kind)."""

    def __init__(self, model: VisionTransformer):
        self.model = model
        self.states: dict[str, PluginState] = {}

    @property
    def plugins(self) -> tuple[PluginState, ...]:
        return tuple(self.states.values())

    def forward_images(self, images: torch.Tensor) -> torch.Tensor:
        return self.model.forward_images(images, self.plugins)


def attach(model: VisionTransformer | PluggedModel, state: PluginState) -> PluggedModel:
    plugged = model if isinstance(model, PluggedModel) else PluggedModel(model)
    kind = state.spec.kind
    if kind in plugged.states:
        raise UsageError(f"a {kind!r} plugin is already attached")
    if state.config.embed_dim != plugged.model.cfg.embed_dim or (
        state.config.depth != plugged.model.cfg.depth
    ):
        raise ConfigurationError("plugin was built for a different model configuration")
    plugged.states[kind] = state
    return plugged


def detach(plugged: PluggedModel, kind: str | None = None):
    """Remove one plugin (or the only one); returns (model, state)."""
    if kind is None:
        if len(plugged.states) != 1:
            raise UsageError("detach needs an explicit kind when several are attached")
        kind = next(iter(plugged.states))
    if kind not in plugged.states:
        raise UsageError(f"no {kind!r} plugin attached")
    return plugged.model, plugged.states.pop(kind)


def default_spec(kind: str, **overrides) -> PluginSpec:
    return PluginSpec(kind=kind, **overrides)


def plugin_for_strategy(name: str) -> str | None:
    """Plugin kind a strategy requires, or None."""
    return {
        "vanilla_prefix": "vanilla_prefix",
        "fedperfix": "adapter_prefix",
        "prompt_local": "prompt",
        "mlp_adapter_local": "mlp_adapter",
    }.get(name)
