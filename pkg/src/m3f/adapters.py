"""Low-rank adaptation of 2D weights plus stage-dependent freeze policies.

An adapter on weight W (stored [in, out]) contributes (alpha/r) * x @ A^T @ B^T
with A [r, in] and B [out, r]; B starts at zero so attaching is the identity.
Merging folds (alpha/r) * (B @ A)^T into W and removes the adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor, UsageError


class ConfigurationError(ValueError):
    pass


DEFAULT_RANK = 16  # ablation-chosen default


def default_targets(model) -> list[str]:
    """Decoder attention query/value projections plus the projector matrices."""
    targets = []
    for i in range(model.dec_cfg.layers):
        targets += [f"decoder.block{i}.attn.wq", f"decoder.block{i}.attn.wv"]
    targets += ["projector.w1", "projector.w2"]
    return targets


@dataclass
class LowRankAdapter:
    target: str
    rank: int
    alpha: float
    a: Tensor  # [rank, in]
    b: Tensor  # [out, rank]

    def param_count(self) -> int:
        return self.a.data.size + self.b.data.size


def attach(model, targets: Optional[list[str]] = None, rank: int = DEFAULT_RANK,
           alpha: Optional[float] = None) -> dict[str, LowRankAdapter]:
    """Register zero-initialized adapters; base forward output is unchanged."""
    if rank <= 0:
        raise ConfigurationError(f"adapter rank must be positive, got {rank}")
    if model.adapters:
        raise UsageError("adapters already attached; merge or restore first")
    if alpha is None:
        alpha = 2.0 * rank
    targets = default_targets(model) if targets is None else list(targets)
    for t in targets:
        if t not in model.params:
            raise ConfigurationError(f"adapter target {t!r} is not a model parameter")
        if model.params[t].data.ndim != 2:
            raise ConfigurationError(f"adapter target {t!r} is not a 2D weight")
    for t in targets:
        d_in, d_out = model.params[t].shape
        a = model.params.add(f"adapter.{t}.a", (rank, d_in), init="uniform_fan", fan_in=d_in)
        b = model.params.add(f"adapter.{t}.b", (d_out, rank), init="zeros")
        model.adapters[t] = LowRankAdapter(t, rank, alpha, a, b)
    return model.adapters


def merge(model):
    """Fold every adapter into its base weight and remove it.

    Post-merge forward outputs match the adapted model within 1e-5 absolute.
    """
    if not model.adapters:
        raise UsageError("no adapters attached (already merged?)")
    for t, ad in list(model.adapters.items()):
        w = model.params[t]
        delta = (ad.alpha / ad.rank) * (ad.b.data @ ad.a.data)
        w.data = w.data + delta.T.astype(w.data.dtype)
        model.params.remove(f"adapter.{t}.a")
        model.params.remove(f"adapter.{t}.b")
    model.adapters.clear()


@dataclass
class FreezePolicy:
    """Predicate over parameter names that selects the trainable set."""

    stage: int
    trainable: Callable[[str], bool]
    description: str = ""
    target_modalities: tuple = field(default_factory=tuple)


def stage_policy(stage: int, target_modalities=()) -> FreezePolicy:
    """Stage freeze rules: 1 trains everything; 2-3 freeze the base decoder;
    4 trains only adapters plus the target task's encoders."""
    mods = tuple(target_modalities)
    if stage == 1:
        return FreezePolicy(1, lambda n: True, "full-model")
    if stage in (2, 3):
        return FreezePolicy(
            stage,
            lambda n: not n.startswith("decoder."),
            "adapters+encoders+specials+projector",
        )
    if stage == 4:
        prefixes = tuple(f"encoders.{m}." for m in mods)
        return FreezePolicy(
            4,
            lambda n: n.startswith("adapter.") or n.startswith(prefixes),
            f"adapters+{'/'.join(mods) or 'no'}-encoder",
            mods,
        )
    raise ConfigurationError(f"unknown stage {stage}")


def apply_policy(model, policy: FreezePolicy):
    """Set requires_grad per the policy so frozen weights get no gradient at all."""
    for name, t in model.params.items():
        t.requires_grad = policy.trainable(name)
        t.grad = None


def trainable_params(model, policy: FreezePolicy) -> list[str]:
    return [name for name in model.params.names() if policy.trainable(name)]


def trainable_fraction(model, policy: FreezePolicy) -> float:
    total = model.params.total_count()
    train = sum(model.params[n].data.size for n in trainable_params(model, policy))
    return train / total
