"""Low-rank adapters for the decoder's linear maps.

An adapted map computes ``W x + b + (alpha / r) * B (A x)`` with ``W`` and
``b`` frozen. ``B`` starts at zero, so a fresh adapter leaves the base model
untouched.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConfigError, ShapeError

DEFAULT_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj", "fc1", "fc2")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: Tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be at least 1, got {self.rank}")
        unknown = set(self.targets) - set(DEFAULT_TARGETS)
        if unknown:
            raise ConfigError(f"unknown LoRA targets: {sorted(unknown)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraLinear(nn.Module):
    """A frozen ``nn.Linear`` plus a trainable rank-``r`` update."""

    def __init__(self, base: nn.Linear, rank: int = 8, alpha: float = 16.0):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"LoRA rank must be at least 1, got {rank}")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        dtype = base.weight.dtype
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features, dtype=dtype))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dtype))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        base.weight.requires_grad_(False)
        if base.bias is not None:
            base.bias.requires_grad_(False)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return adapted_apply(x, self.base.weight, self, self.base.bias)

    def merged_weight(self) -> torch.Tensor:
        return merge(self, self.base.weight)


def _check(weight: torch.Tensor, adapter: LoraLinear) -> None:
    out_f, in_f = weight.shape
    if adapter.lora_a.shape != (adapter.rank, in_f) or adapter.lora_b.shape != (out_f, adapter.rank):
        raise ShapeError(
            f"adapter shapes {tuple(adapter.lora_a.shape)}, {tuple(adapter.lora_b.shape)} "
            f"do not fit a {out_f}x{in_f} weight"
        )


def adapted_apply(
    x: torch.Tensor, weight: torch.Tensor, adapter: LoraLinear, bias: Optional[torch.Tensor] = None
) -> torch.Tensor:
    _check(weight, adapter)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != {weight.shape[1]}")
    return F.linear(x, weight, bias) + adapter.scale * F.linear(F.linear(x, adapter.lora_a), adapter.lora_b)


def merge(adapter: LoraLinear, weight: torch.Tensor) -> torch.Tensor:
    _check(weight, adapter)
    return weight + adapter.scale * (adapter.lora_b @ adapter.lora_a)


def inject_lora(module: nn.Module, cfg: LoraConfig) -> List[str]:
    """Wrap every ``nn.Linear`` named in ``cfg.targets`` below ``module``; returns wrapped paths."""
    wrapped = []
    for name, child in list(module.named_modules()):
        for attr, sub in list(child.named_children()):
            if attr in cfg.targets and isinstance(sub, nn.Linear):
                setattr(child, attr, LoraLinear(sub, cfg.rank, cfg.alpha))
                wrapped.append(f"{name}.{attr}" if name else attr)
    if not wrapped:
        raise ConfigError("no LoRA target found")
    return wrapped


def freeze_except_adapters(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        p.requires_grad_(".lora_" in f".{name}")


def merge_lora(module: nn.Module) -> int:
    """Fold every adapter below ``module`` into a plain ``nn.Linear``; returns how many."""
    count = 0
    for child in list(module.modules()):
        for attr, sub in list(child.named_children()):
            if isinstance(sub, LoraLinear):
                base = sub.base
                merged = nn.Linear(base.in_features, base.out_features, bias=base.bias is not None)
                merged = merged.to(base.weight.dtype)
                with torch.no_grad():
                    merged.weight.copy_(sub.merged_weight())
                    if base.bias is not None:
                        merged.bias.copy_(base.bias)
                setattr(child, attr, merged)
                count += 1
    return count
