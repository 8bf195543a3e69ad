"""Personalization strategies: parameter partitions and local update rules.

A strategy declares which parameter ids are aggregated (global), which stay
on the client (local), and which are frozen during federated training
(FedBABU's head).  The update rules operate in place on client-owned module
copies, so distinct clients can run concurrently.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, DataError
from .model import (
    Batch,
    VisionTransformer,
    cross_entropy_loss,
    head_parameter_ids,
    named_tagged_parameters,
)
from .params import LayerTag
from .plugins import PluginSpec, plugin_for_strategy

STRATEGY_NAMES = (
    "fedavg",
    "local",
    "layer_type_local",
    "fedrep",
    "fedbn_ln",
    "fedbabu",
    "apfl",
    "per_fedavg",
    "vanilla_attention",
    "vanilla_prefix",
    "fedperfix",
    "prompt_local",
    "mlp_adapter_local",
)


@dataclass(frozen=True)
class Hyperparameters:
    lr: float = 0.01
    local_epochs: int = 10
    batch_size: int = 64
    apfl_alpha: float = 0.25
    apfl_adaptive: bool = False
    perfedavg_beta: float = 0.001
    babu_finetune_steps: int = 1
    fedrep_alternate: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.local_epochs < 0:
            raise ConfigurationError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 <= self.apfl_alpha <= 1.0:
            raise ConfigurationError("apfl_alpha must lie in [0, 1]")


@dataclass(frozen=True)
class Strategy:
    name: str
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    local_tags: tuple[LayerTag, ...] = ()
    include_head: bool = False
    plugin: PluginSpec | None = None


def make_strategy(
    name: str,
    hyper: Hyperparameters | None = None,
    local_tags: tuple[LayerTag, ...] = (),
    include_head: bool = False,
    plugin: PluginSpec | None = None,
) -> Strategy:
    """Normalize a strategy description; plugin strategies get a default spec."""
    if name not in STRATEGY_NAMES:
        raise ConfigurationError(f"unknown strategy {name!r}; choose from {STRATEGY_NAMES}")
    kind = plugin_for_strategy(name)
    if kind is not None:
        if plugin is None:
            plugin = PluginSpec(kind=kind)
        elif plugin.kind != kind:
            raise ConfigurationError(f"strategy {name!r} needs a {kind!r} plugin")
    elif plugin is not None:
        raise ConfigurationError(f"strategy {name!r} does not take a plugin")
    if name != "layer_type_local" and (local_tags or include_head):
        raise ConfigurationError("local_tags/include_head apply to layer_type_local only")
    return Strategy(
        name=name,
        hyper=hyper or Hyperparameters(),
        local_tags=tuple(local_tags),
        include_head=include_head,
        plugin=plugin,
    )


@dataclass(frozen=True)
class Partition:
    global_ids: tuple[str, ...]
    local_ids: tuple[str, ...]
    frozen_ids: tuple[str, ...] = ()

    def all_ids(self) -> tuple[str, ...]:
        return self.global_ids + self.local_ids + self.frozen_ids


def partition(strategy: Strategy, model: VisionTransformer, plugins=()) -> Partition:
    """Disjoint cover of every parameter id (base + plugins) for this strategy."""
    table = named_tagged_parameters(model, plugins)
    all_ids = list(table)
    plugin_ids = [pid for pid in all_ids if pid.startswith("plugin.")]
    kind = plugin_for_strategy(strategy.name)
    if kind is not None and not any(
        pid.startswith(f"plugin.{kind}.") for pid in plugin_ids
    ):
        raise ConfigurationError(f"strategy {strategy.name!r} needs an attached {kind!r} plugin")

    def by_tag(*tags):
        wanted = set(tags)
        return [pid for pid in all_ids if table[pid][1] in wanted]

    local: list[str] = []
    frozen: list[str] = []
    name = strategy.name
    if name == "local":
        local = all_ids
    elif name in ("fedavg", "apfl", "per_fedavg"):
        local = []
    elif name == "layer_type_local":
        chosen = set(by_tag(*strategy.local_tags)) if strategy.local_tags else set()
        if strategy.include_head:
            chosen.update(head_parameter_ids(model))
        local = [pid for pid in all_ids if pid in chosen]
    elif name == "fedrep":
        local = head_parameter_ids(model, 1)
    elif name == "fedbabu":
        frozen = head_parameter_ids(model, 1)
    elif name == "fedbn_ln":
        chosen = set(by_tag(LayerTag.layernorm)) | {"norm.weight", "norm.bias"}
        local = [pid for pid in all_ids if pid in chosen]
    elif name == "vanilla_attention":
        chosen = set(by_tag(LayerTag.attention)) | set(head_parameter_ids(model))
        local = [pid for pid in all_ids if pid in chosen]
    else:  # plugin-backed personalization
        chosen = set(plugin_ids) | set(head_parameter_ids(model))
        local = [pid for pid in all_ids if pid in chosen]

    local_set, frozen_set = set(local), set(frozen)
    global_ids = [pid for pid in all_ids if pid not in local_set and pid not in frozen_set]
    return Partition(tuple(global_ids), tuple(local), tuple(frozen))


@dataclass
class TrainStats:
    losses: list[float]
    steps: int


def _shard_batches(shard, batch_size: int, rng: np.random.Generator):
    if len(shard) == 0:
        raise DataError("empty shard")
    order = rng.permutation(len(shard))
    for start in range(0, len(order), batch_size):
        sel = order[start : start + batch_size]
        yield Batch(
            torch.from_numpy(np.ascontiguousarray(shard.images[sel])),
            torch.from_numpy(np.ascontiguousarray(shard.labels[sel])),
        )


def _grads(model, plugins, batch, tensors):
    logits = model.forward_images(batch.images, tuple(plugins))
    loss = cross_entropy_loss(logits, batch.labels)
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return loss.item(), grads


def _apply_sgd(tensors, grads, lr: float) -> None:
    with torch.no_grad():
        for p, g in zip(tensors, grads):
            if g is not None:
                p.add_(g, alpha=-lr)


def local_update(
    strategy: Strategy,
    model: VisionTransformer,
    plugins,
    shard,
    hyper: Hyperparameters | None = None,
    rng: np.random.Generator | None = None,
) -> TrainStats:
    """Mini-batch SGD for ``local_epochs`` epochs; FedBABU never touches the head."""
    hyper = hyper or strategy.hyper
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(shard) == 0:
        raise DataError("empty shard")
    part = partition(strategy, model, plugins)
    table = named_tagged_parameters(model, plugins)
    trainable = [pid for pid in table if pid not in set(part.frozen_ids)]

    phases = [trainable]
    if strategy.name == "fedrep" and hyper.fedrep_alternate:
        head = head_parameter_ids(model, 1)
        body = [pid for pid in trainable if pid not in set(head)]
        phases = [head, body]

    losses, steps = [], 0
    for _ in range(hyper.local_epochs):
        for ids in phases:
            tensors = [table[pid][0] for pid in ids]
            epoch_losses = []
            for batch in _shard_batches(shard, hyper.batch_size, rng):
                loss, grads = _grads(model, plugins, batch, tensors)
                _apply_sgd(tensors, grads, hyper.lr)
                epoch_losses.append(loss)
                steps += 1
            losses.append(float(np.mean(epoch_losses)))
    return TrainStats(losses, steps)


def apfl_mixture_step(personal, grads_personal, grads_global, alpha: float, lr: float) -> None:
    """One mixed step: v <- v - lr * (alpha * grad_v + (1 - alpha) * grad_w)."""
    with torch.no_grad():
        for v, gp, gg in zip(personal, grads_personal, grads_global):
            gp = torch.zeros_like(v) if gp is None else gp
            gg = torch.zeros_like(v) if gg is None else gg
            v.add_(alpha * gp + (1.0 - alpha) * gg, alpha=-lr)


def apfl_update(
    global_model: VisionTransformer,
    personal_model: VisionTransformer,
    shard,
    hyper: Hyperparameters,
    rng: np.random.Generator,
    alpha: float | None = None,
) -> tuple[float, TrainStats]:
    """Train the received model by SGD and the personalized shadow by the
    mixed gradient, both gradients taken at their own parameters on the same
    batch.  Returns the (possibly adapted) mixture coefficient."""
    alpha = hyper.apfl_alpha if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError("apfl alpha must lie in [0, 1]")
    table_g = named_tagged_parameters(global_model)
    table_p = named_tagged_parameters(personal_model)
    if list(table_g) != list(table_p):
        raise ConfigurationError("APFL models must share an architecture")
    tensors_g = [table_g[pid][0] for pid in table_g]
    tensors_p = [table_p[pid][0] for pid in table_p]
    mixed_model = copy.deepcopy(global_model) if hyper.apfl_adaptive else None

    losses, steps = [], 0
    for _ in range(hyper.local_epochs):
        epoch_losses = []
        for batch in _shard_batches(shard, hyper.batch_size, rng):
            loss_g, grads_g = _grads(global_model, (), batch, tensors_g)
            _, grads_p = _grads(personal_model, (), batch, tensors_p)
            if mixed_model is not None:
                alpha = _adapt_alpha(
                    mixed_model, batch, tensors_p, tensors_g, alpha, hyper.lr
                )
            _apply_sgd(tensors_g, grads_g, hyper.lr)
            apfl_mixture_step(tensors_p, grads_p, grads_g, alpha, hyper.lr)
            epoch_losses.append(loss_g)
            steps += 1
        losses.append(float(np.mean(epoch_losses)))
    return alpha, TrainStats(losses, steps)


def _adapt_alpha(mixed_model, batch, tensors_p, tensors_g, alpha, lr) -> float:
    """alpha gradient: <v - w, grad f(alpha v + (1 - alpha) w)>, then clip."""
    table_m = named_tagged_parameters(mixed_model)
    tensors_m = [table_m[pid][0] for pid in table_m]
    with torch.no_grad():
        for m, v, w in zip(tensors_m, tensors_p, tensors_g):
            m.copy_(alpha * v + (1.0 - alpha) * w)
    _, grads_m = _grads(mixed_model, (), batch, tensors_m)
    dot = 0.0
    with torch.no_grad():
        for gm, v, w in zip(grads_m, tensors_p, tensors_g):
            if gm is not None:
                dot += float(((v - w) * gm).sum())
    return float(np.clip(alpha - lr * dot, 0.0, 1.0))


def per_fedavg_update(
    model: VisionTransformer,
    plugins,
    shard,
    hyper: Hyperparameters,
    rng: np.random.Generator,
) -> TrainStats:
    """First-order meta steps: inner SGD on one batch, outer step with the
    gradient taken at the adapted point on a second, disjoint batch."""
    table = named_tagged_parameters(model, plugins)
    tensors = [table[pid][0] for pid in table]
    losses, steps = [], 0
    for _ in range(hyper.local_epochs):
        batches = list(_shard_batches(shard, hyper.batch_size, rng))
        if len(batches) < 2:
            raise DataError("per-fedavg needs at least two disjoint batches per epoch")
        epoch_losses = []
        for b1, b2 in zip(batches[0::2], batches[1::2]):
            origin = [p.detach().clone() for p in tensors]
            loss1, grads1 = _grads(model, plugins, b1, tensors)
            _apply_sgd(tensors, grads1, hyper.lr)
            _, grads2 = _grads(model, plugins, b2, tensors)
            with torch.no_grad():
                for p, o, g in zip(tensors, origin, grads2):
                    p.copy_(o if g is None else o - hyper.perfedavg_beta * g)
            epoch_losses.append(loss1)
            steps += 1
        losses.append(float(np.mean(epoch_losses)))
    return TrainStats(losses, steps)


def pre_eval(
    strategy: Strategy,
    model: VisionTransformer,
    plugins,
    shard,
    hyper: Hyperparameters | None = None,
    rng: np.random.Generator | None = None,
) -> None:
    """FedBABU fine-tunes the classification head for a few steps; everything
    else evaluates as received."""
    if strategy.name != "fedbabu":
        return
    hyper = hyper or strategy.hyper
    rng = rng if rng is not None else np.random.default_rng(0)
    table = named_tagged_parameters(model, plugins)
    tensors = [table[pid][0] for pid in head_parameter_ids(model, 1)]
    done = 0
    while done < hyper.babu_finetune_steps:
        for batch in _shard_batches(shard, hyper.batch_size, rng):
            _, grads = _grads(model, plugins, batch, tensors)
            _apply_sgd(tensors, grads, hyper.lr)
            done += 1
            if done >= hyper.babu_finetune_steps:
                break
