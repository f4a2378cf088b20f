"""Multi-scale differential perception.

Per tapped encoder layer, the two images' token features are gated against
each other and projected into a difference map, the difference map is
refined by self-attention and fused back into each image stream through
cross-attention, and the refined streams of all layers are combined with
learned per-layer channel scores.

Feature maps are ``(..., T, d)`` tensors; any leading batch dimensions are
carried through unchanged.
"""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (
    AttentionBlock,
    ConfigError,
    FeedForwardBlock,
    ShapeError,
    check_finite,
    check_same_shape,
    init_linear,
)


@dataclass
class MdpConfig:
    channels: int = 64
    attention_heads: int = 4
    mlp_hidden: int = 128
    tapped_layers: Tuple[int, ...] = (3, 4, 5, 6)
    # one parameter set reused for every tapped layer
    shared: bool = True

    def __post_init__(self):
        self.tapped_layers = tuple(self.tapped_layers)
        if self.channels < 1 or self.attention_heads < 1:
            raise ConfigError("channels and attention_heads must be positive")
        if self.channels % self.attention_heads:
            raise ConfigError(
                f"channels ({self.channels}) not divisible by heads ({self.attention_heads})"
            )
        if len(self.tapped_layers) < 2:
            raise ConfigError("at least two tapped layers are required")
        if any(b <= a for a, b in zip(self.tapped_layers, self.tapped_layers[1:])):
            raise ConfigError(f"tapped_layers must be strictly increasing: {self.tapped_layers}")


class GatedDifference(NamedTuple):
    delta: torch.Tensor
    lambda1: torch.Tensor
    lambda2: torch.Tensor
    hat1: torch.Tensor
    hat2: torch.Tensor

    @property
    def difference_slice(self) -> torch.Tensor:
        return self.hat1 - self.hat2


@dataclass
class DiffState:
    """Everything one tapped layer produces on its way to the layer score."""

    delta: torch.Tensor
    delta_sa: torch.Tensor
    delta_ca: torch.Tensor
    refined_1: torch.Tensor
    refined_2: torch.Tensor
    gate: GatedDifference = field(repr=False, default=None)


class GateParams(nn.Module):
    """Bias-free gate projection ``w_m`` (d x 2d) and difference projection ``w_p`` (d x 3d)."""

    def __init__(self, d: int):
        super().__init__()
        self.w_m = nn.Parameter(torch.empty(d, 2 * d))
        self.w_p = nn.Parameter(torch.empty(d, 3 * d))
        nn.init.xavier_uniform_(self.w_m)
        nn.init.xavier_uniform_(self.w_p)


def gated_difference(f1: torch.Tensor, f2: torch.Tensor, p: GateParams) -> GatedDifference:
    check_same_shape(f1, f2)
    d = f1.shape[-1]
    if p.w_m.shape != (d, 2 * d) or p.w_p.shape != (d, 3 * d):
        raise ShapeError(
            f"gate parameters {tuple(p.w_m.shape)}, {tuple(p.w_p.shape)} do not match d={d}"
        )
    check_finite(f1, f2)
    lam1 = torch.sigmoid(torch.cat([f1, f2], dim=-1) @ p.w_m.T)
    lam2 = torch.sigmoid(torch.cat([f2, f1], dim=-1) @ p.w_m.T)
    hat1 = f1 * lam1
    hat2 = f2 * lam2
    delta = torch.cat([hat1, hat2, hat1 - hat2], dim=-1) @ p.w_p.T
    return GatedDifference(delta, lam1, lam2, hat1, hat2)


def self_attend_diff(delta: torch.Tensor, sa: AttentionBlock) -> torch.Tensor:
    return sa(delta)


def cross_fuse_diff(
    delta_sa: torch.Tensor,
    f1: torch.Tensor,
    f2: torch.Tensor,
    ca: AttentionBlock,
    ff: FeedForwardBlock,
) -> torch.Tensor:
    """Difference queries attend over ``[f1 | f2 | delta_sa]`` (3T keys), then a feed-forward map."""
    check_same_shape(delta_sa, f1, f2)
    context = torch.cat([f1, f2, delta_sa], dim=-2)
    return ff(ca(delta_sa, context))


def refine_features(
    f1: torch.Tensor, f2: torch.Tensor, delta_ca: torch.Tensor, ca: AttentionBlock
) -> Tuple[torch.Tensor, torch.Tensor]:
    check_same_shape(f1, f2, delta_ca)
    r1 = ca(f1, torch.cat([f1, delta_ca], dim=-2))
    r2 = ca(f2, torch.cat([f2, delta_ca], dim=-2))
    return r1, r2


class ScoreMLP(nn.Module):
    """3d -> hidden -> d; the output layer starts at zero so every score starts at 0.5."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(3 * d, hidden)
        self.fc2 = nn.Linear(hidden, d)
        init_linear(self.fc1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, pooled):
        return self.fc2(F.gelu(self.fc1(pooled)))


def layer_score(
    refined_1: torch.Tensor, refined_2: torch.Tensor, delta: torch.Tensor, mlp: ScoreMLP
) -> torch.Tensor:
    """Per-channel fusion weight in [0, 1] for one layer, shape ``(..., d)``."""
    check_same_shape(refined_1, refined_2, delta)
    pooled = torch.cat([refined_1, refined_2, delta], dim=-1).mean(dim=-2)
    return torch.sigmoid(mlp(pooled))


def integrate_multiscale(
    states: Sequence[DiffState], scores: Sequence[torch.Tensor]
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Score-weighted sum of the refined maps over layers (no normalisation across layers)."""
    if len(states) < 2 or len(states) != len(scores):
        raise ShapeError("need at least two layers with one score each")
    shape = states[0].refined_1.shape
    out1 = torch.zeros_like(states[0].refined_1)
    out2 = torch.zeros_like(states[0].refined_2)
    for st, sc in zip(states, scores):
        if st.refined_1.shape != shape or st.refined_2.shape != shape:
            raise ShapeError("inconsistent feature shapes across layers")
        if sc.shape[-1] != shape[-1]:
            raise ShapeError("score width does not match channel count")
        w = sc.unsqueeze(-2)
        out1 = out1 + w * st.refined_1
        out2 = out2 + w * st.refined_2
    return out1, out2


class DiffBlock(nn.Module):
    """Parameters for the per-layer differencing and fusion chain."""

    def __init__(self, d: int, heads: int, hidden: int):
        super().__init__()
        self.gate = GateParams(d)
        self.sa = AttentionBlock(d, heads)
        self.ca = AttentionBlock(d, heads, cross=True)
        self.ca_ff = FeedForwardBlock(d, hidden)
        self.refine = AttentionBlock(d, heads, cross=True)

    def forward(self, f1, f2) -> DiffState:
        g = gated_difference(f1, f2, self.gate)
        delta_sa = self_attend_diff(g.delta, self.sa)
        delta_ca = cross_fuse_diff(delta_sa, f1, f2, self.ca, self.ca_ff)
        r1, r2 = refine_features(f1, f2, delta_ca, self.refine)
        return DiffState(g.delta, delta_sa, delta_ca, r1, r2, gate=g)


class MultiScaleDiffPerception(nn.Module):
    def __init__(self, cfg: MdpConfig):
        super().__init__()
        self.cfg = cfg
        n = 1 if cfg.shared else len(cfg.tapped_layers)
        d, h, hid = cfg.channels, cfg.attention_heads, cfg.mlp_hidden
        self.blocks = nn.ModuleList(DiffBlock(d, h, hid) for _ in range(n))
        self.scorers = nn.ModuleList(ScoreMLP(d, hid) for _ in range(n))

    def block(self, i: int) -> DiffBlock:
        return self.blocks[0 if self.cfg.shared else i]

    def scorer(self, i: int) -> ScoreMLP:
        return self.scorers[0 if self.cfg.shared else i]

    def forward(self, pyramid_1, pyramid_2, return_states: bool = False):
        return mdp_forward(pyramid_1, pyramid_2, self, return_states=return_states)


def mdp_forward(
    pyramid_1: Sequence[torch.Tensor],
    pyramid_2: Sequence[torch.Tensor],
    mdp: MultiScaleDiffPerception,
    return_states: bool = False,
):
    """Refined pair ``(F1', F2')``; with ``return_states`` also the per-layer states and scores."""
    if len(pyramid_1) != len(pyramid_2):
        raise ShapeError("pyramids are not aligned layer-for-layer")
    if len(pyramid_1) != len(mdp.cfg.tapped_layers):
        raise ShapeError(
            f"expected {len(mdp.cfg.tapped_layers)} layers, got {len(pyramid_1)}"
        )
    states: List[DiffState] = []
    scores: List[torch.Tensor] = []
    for i, (f1, f2) in enumerate(zip(pyramid_1, pyramid_2)):
        st = mdp.block(i)(f1, f2)
        states.append(st)
        scores.append(layer_score(st.refined_1, st.refined_2, st.delta, mdp.scorer(i)))
    out = integrate_multiscale(states, scores)
    if return_states:
        return out, states, scores
    return out
