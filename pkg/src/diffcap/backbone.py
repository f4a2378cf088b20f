"""Toy difference-captioning model.

A patch encoder taps several of its layers for each image, the MDP module
(or, when disabled, the encoder's penultimate layer) produces one feature map
per image, a two-layer projector lifts those into the decoder width, and a
causal token decoder generates the caption after the image tokens and the
question.

Decoder input layout::

    [img1 x T][sep][img2 x T][question ...][bos][answer ...][eos]

The ``<img1>``/``<img2>`` ids only mark positions; their embeddings are
replaced by the projected image features.
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data.tokenizer import BOS, EOS, IMG1, IMG2, PAD, SEP
from .layers import ConfigError, ShapeError, TransformerLayer, init_linear, multi_head_attention
from .mdp import MdpConfig, MultiScaleDiffPerception

ROLE_PAD, ROLE_IMG1, ROLE_SEP, ROLE_IMG2, ROLE_QUESTION, ROLE_ANSWER = range(6)
ROLE_NAMES = ("pad", "image-1", "separator", "image-2", "question", "answer")


class SequenceOverflowError(ValueError):
    """The assembled decoder input would exceed the configured maximum length."""


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    layers: int = 6
    channels: int = 64
    heads: int = 4
    mlp_hidden: int = 128
    tapped_layers: Tuple[int, ...] = (3, 4, 5, 6)

    def __post_init__(self):
        object.__setattr__(self, "tapped_layers", tuple(self.tapped_layers))
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.channels % self.heads:
            raise ConfigError(f"channels ({self.channels}) not divisible by heads ({self.heads})")
        taps = self.tapped_layers
        if not taps or any(t < 1 or t > self.layers for t in taps):
            raise ConfigError(f"tapped layers {taps} outside 1..{self.layers}")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError(f"tapped layers must be strictly increasing: {taps}")
        if self.layers < 2:
            raise ConfigError("the encoder needs at least two layers")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 64
    layers: int = 4
    channels: int = 128
    heads: int = 4
    ff_hidden: int = 256
    max_len: int = 256

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("empty vocabulary")
        if self.channels % self.heads:
            raise ConfigError(f"channels ({self.channels}) not divisible by heads ({self.heads})")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    mdp_enabled: bool = True
    mdp_heads: int = 4
    mdp_hidden: int = 128
    mdp_shared: bool = True

    def mdp_config(self) -> MdpConfig:
        return MdpConfig(
            channels=self.encoder.channels,
            attention_heads=self.mdp_heads,
            mlp_hidden=self.mdp_hidden,
            tapped_layers=self.encoder.tapped_layers,
            shared=self.mdp_shared,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["tapped_layers"] = list(self.encoder.tapped_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        dec = DecoderConfig(**d.pop("decoder", {}))
        return cls(encoder=enc, decoder=dec, **d)


def image_tensor(image) -> torch.Tensor:
    """uint8 ``(H, W, 3)`` array (or a batch of them) -> float ``(..., 3, H, W)`` in [0, 1]."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ShapeError(f"expected uint8 pixels, got {arr.dtype}")
    t = torch.from_numpy(arr.astype(np.float32) / 255.0)
    return t.movedim(-1, -3).contiguous()


class PatchEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = nn.Linear(3 * p * p, cfg.channels)
        init_linear(self.patch_embed)
        self.pos = nn.Parameter(torch.randn(cfg.tokens, cfg.channels) * 0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.channels, cfg.heads, cfg.mlp_hidden) for _ in range(cfg.layers)
        )

    def patches(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` -> ``(B, T, 3*p*p)`` in row-major patch order."""
        cfg = self.cfg
        if images.shape[-3:] != (3, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected images of shape (3, {cfg.image_size}, {cfg.image_size}), "
                f"got {tuple(images.shape[-3:])}"
            )
        return F.unfold(images, cfg.patch_size, stride=cfg.patch_size).transpose(1, 2)

    def forward(self, images: torch.Tensor) -> Tuple[List[torch.Tensor], torch.Tensor]:
        """Tapped maps (in tap order) and the penultimate layer's map, each ``(B, T, d)``."""
        x = self.patch_embed(self.patches(images)) + self.pos
        taps, penultimate = [], None
        for i, layer in enumerate(self.layers, start=1):
            x = layer(x)
            if i in self.cfg.tapped_layers:
                taps.append(x)
            if i == self.cfg.layers - 1:
                penultimate = x
        return taps, penultimate


def encode(images: torch.Tensor, encoder: PatchEncoder) -> List[torch.Tensor]:
    return encoder(images)[0]


class Projector(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)
        init_linear(self.fc1)
        init_linear(self.fc2)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != self.in_dim:
            raise ShapeError(f"projector expects width {self.in_dim}, got {f.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(f)))


KvCache = List[Tuple[torch.Tensor, torch.Tensor]]


class TokenDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.channels)
        nn.init.normal_(self.embed.weight, std=0.02)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, cfg.channels) * 0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.channels, cfg.heads, cfg.ff_hidden) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.channels)
        self.lm_head = nn.Linear(cfg.channels, cfg.vocab_size)
        init_linear(self.lm_head)

    def forward(self, x: torch.Tensor, cache: Optional[KvCache] = None):
        """Causal pass over input embeddings ``x`` (positions not yet added).

        With ``cache`` (one (keys, values) pair per layer from an earlier
        call) ``x`` continues that sequence. Returns logits and the extended
        cache.
        """
        start = 0 if not cache else cache[0][0].shape[-2]
        n = x.shape[-2]
        if start + n > self.cfg.max_len:
            raise SequenceOverflowError(
                f"sequence length {start + n} exceeds max_len {self.cfg.max_len}"
            )
        x = x + self.pos[start:start + n]
        qpos = torch.arange(start, start + n).unsqueeze(1)
        mask = torch.arange(start + n).unsqueeze(0) <= qpos
        new_cache = []
        for i, layer in enumerate(self.layers):
            mha = layer.attn.attn
            h = layer.attn.norm_q(x)
            k, v = mha.k_proj(h), mha.v_proj(h)
            if cache:
                k = torch.cat([cache[i][0], k], dim=-2)
                v = torch.cat([cache[i][1], v], dim=-2)
            new_cache.append((k, v))
            x = x + mha.o_proj(multi_head_attention(mha.q_proj(h), k, v, mha.heads, mask))
            x = layer.ff(x)
        return self.lm_head(self.norm(x)), new_cache


@dataclass
class DecoderBatch:
    """Right-padded decoder inputs for a batch of pairs.

    ``loss_mask[b, s]`` is true where ``ids[b, s]`` is an answer token to be
    predicted from position ``s - 1``.
    """

    ids: torch.Tensor
    roles: torch.Tensor
    loss_mask: torch.Tensor
    tokens_per_image: int

    @property
    def lengths(self) -> torch.Tensor:
        return (self.roles != ROLE_PAD).sum(dim=1)


def layout(tokens_per_image: int, question: Sequence[int], answer: Optional[Sequence[int]] = None):
    """Ids and role tags for one pair; ``answer=None`` gives the generation prefix ending in bos."""
    t = tokens_per_image
    ids = [IMG1] * t + [SEP] + [IMG2] * t + list(question) + [BOS]
    roles = [ROLE_IMG1] * t + [ROLE_SEP] + [ROLE_IMG2] * t + [ROLE_QUESTION] * len(question)
    roles.append(ROLE_ANSWER)
    if answer is not None:
        ids += list(answer) + [EOS]
        roles += [ROLE_ANSWER] * (len(answer) + 1)
    return ids, roles


def prefix_length(tokens_per_image: int, question_length: int) -> int:
    """Positions before the answer segment."""
    return 2 * tokens_per_image + 1 + question_length


def assemble_batch(
    tokens_per_image: int,
    questions: Sequence[Sequence[int]],
    answers: Sequence[Sequence[int]],
    max_len: int,
) -> DecoderBatch:
    rows = [layout(tokens_per_image, q, a) for q, a in zip(questions, answers)]
    longest = max(len(ids) for ids, _ in rows)
    if longest > max_len:
        raise SequenceOverflowError(f"assembled sequence of {longest} tokens exceeds max_len {max_len}")
    b = len(rows)
    ids = torch.full((b, longest), PAD, dtype=torch.long)
    roles = torch.full((b, longest), ROLE_PAD, dtype=torch.long)
    for i, (r_ids, r_roles) in enumerate(rows):
        ids[i, :len(r_ids)] = torch.tensor(r_ids)
        roles[i, :len(r_roles)] = torch.tensor(r_roles)
    loss_mask = (roles == ROLE_ANSWER) & (ids != BOS)
    return DecoderBatch(ids, roles, loss_mask, tokens_per_image)


def assemble_embeddings(
    f1p: torch.Tensor, f2p: torch.Tensor, ids: torch.Tensor, embed: nn.Embedding
) -> torch.Tensor:
    """Token embeddings with both image segments replaced by projected features."""
    if f1p.shape != f2p.shape:
        raise ShapeError("projected maps differ in shape")
    t = f1p.shape[-2]
    if f1p.shape[-1] != embed.embedding_dim:
        raise ShapeError(f"projected width {f1p.shape[-1]} != decoder width {embed.embedding_dim}")
    if ids.shape[-1] < 2 * t + 1:
        raise ShapeError("id sequence shorter than the image segments")
    sep = embed(ids[:, t:t + 1])
    rest = embed(ids[:, 2 * t + 1:])
    return torch.cat([f1p, sep, f2p, rest], dim=1)


class DiffCaptioner(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PatchEncoder(cfg.encoder)
        self.mdp = MultiScaleDiffPerception(cfg.mdp_config()) if cfg.mdp_enabled else None
        self.projector = Projector(cfg.encoder.channels, cfg.decoder.channels)
        self.decoder = TokenDecoder(cfg.decoder)

    def parameter_groups(self) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
        """Parameters by group name; adapter weights go to ``lora`` wherever they sit."""
        groups = {"encoder": [], "mdp": [], "projector": [], "decoder": [], "lora": []}
        for name, p in self.named_parameters():
            if ".lora_" in name:
                groups["lora"].append((name, p))
            else:
                groups[name.split(".", 1)[0]].append((name, p))
        return groups

    def image_features(self, images_a: torch.Tensor, images_b: torch.Tensor):
        """Projected ``(B, T, D)`` maps for both images."""
        both = torch.cat([images_a, images_b], dim=0)
        taps, penultimate = self.encoder(both)
        b = images_a.shape[0]
        if self.mdp is not None:
            f1, f2 = self.mdp([t[:b] for t in taps], [t[b:] for t in taps])
        else:
            f1, f2 = penultimate[:b], penultimate[b:]
        return self.projector(f1), self.projector(f2)

    def forward(self, images_a, images_b, batch: DecoderBatch) -> torch.Tensor:
        f1p, f2p = self.image_features(images_a, images_b)
        x = assemble_embeddings(f1p, f2p, batch.ids, self.decoder.embed)
        return self.decoder(x)[0]

    def loss(self, images_a, images_b, batch: DecoderBatch) -> torch.Tensor:
        logits = self(images_a, images_b, batch)
        return masked_loss(logits, batch)

    @torch.no_grad()
    def generate(
        self,
        images_a: torch.Tensor,
        images_b: torch.Tensor,
        question: Sequence[int],
        strategy: str = "greedy",
        beam: int = 1,
        max_new: int = 64,
    ) -> List[List[int]]:
        """Answer ids (without bos/eos) for each pair in the batch."""
        f1p, f2p = self.image_features(images_a, images_b)
        ids, _ = layout(f1p.shape[-2], question)
        ids = torch.tensor(ids).expand(f1p.shape[0], -1)
        prefix = assemble_embeddings(f1p, f2p, ids, self.decoder.embed)
        room = self.cfg.decoder.max_len - prefix.shape[1]
        if room < 1:
            raise SequenceOverflowError("no room left for the answer after the prefix")
        max_new = min(max_new, room)
        stepper = CachedStepper(self.decoder)
        if strategy == "greedy":
            return generate_greedy(stepper, prefix, max_new)
        if strategy == "beam":
            return [generate_beam(stepper, prefix[i:i + 1], beam, max_new) for i in range(len(prefix))]
        raise ConfigError(f"unknown decoding strategy {strategy!r}")


def masked_loss(logits: torch.Tensor, batch: DecoderBatch) -> torch.Tensor:
    """Mean next-token cross-entropy over answer targets only."""
    mask = batch.loss_mask[:, 1:]
    pred = logits[:, :-1][mask]
    return F.cross_entropy(pred, batch.ids[:, 1:][mask])


# ---------------------------------------------------------------- generation


class CachedStepper:
    """Adapter giving ``generate_*`` a prefill/step interface over a decoder."""

    def __init__(self, decoder: TokenDecoder):
        self.decoder = decoder

    def prefill(self, embeds: torch.Tensor):
        logits, cache = self.decoder(embeds)
        return logits[:, -1], cache

    def step(self, tokens: torch.Tensor, cache):
        logits, cache = self.decoder(self.decoder.embed(tokens).unsqueeze(1), cache)
        return logits[:, -1], cache

    @staticmethod
    def reorder(cache, index: torch.Tensor):
        return [(k[index], v[index]) for k, v in cache]


def generate_greedy(stepper, prefix: torch.Tensor, max_new: int) -> List[List[int]]:
    """Argmax decoding for a batch of equal-length prefix embeddings; eos is not returned."""
    logits, cache = stepper.prefill(prefix)
    b = prefix.shape[0]
    out = [[] for _ in range(b)]
    done = torch.zeros(b, dtype=torch.bool)
    for step in range(max_new):
        tok = logits.log_softmax(-1).argmax(-1)
        for i in range(b):
            if not done[i] and tok[i] != EOS:
                out[i].append(int(tok[i]))
        done |= tok == EOS
        if done.all() or step == max_new - 1:
            break
        logits, cache = stepper.step(tok, cache)
    return out


def generate_beam(stepper, prefix: torch.Tensor, beam: int, max_new: int) -> List[int]:
    """Beam search for one prefix ``(1, S, D)``.

    Hypotheses are ranked by summed log-probability while searching and by
    the per-token mean (eos included) once finished.
    """
    if beam < 1:
        raise ConfigError("beam width must be at least 1")
    logits, cache = stepper.prefill(prefix)
    hyps: List[List[int]] = [[]]
    scores = torch.zeros(1, dtype=torch.float64)
    finished: List[Tuple[float, List[int]]] = []
    for step in range(max_new):
        logp = logits.log_softmax(-1).double() + scores.unsqueeze(1)
        vocab = logp.shape[-1]
        flat = logp.reshape(-1)
        top = torch.topk(flat, min(2 * beam, flat.numel()))
        live = []
        for s, idx in zip(top.values.tolist(), top.indices.tolist()):
            src, tok = divmod(idx, vocab)
            if tok == EOS:
                finished.append((s / (len(hyps[src]) + 1), hyps[src]))
            else:
                live.append((src, tok, s))
                if len(live) == beam:
                    break
        if len(finished) >= beam or not live:
            hyps = []
            break
        hyps = [hyps[src] + [tok] for src, tok, _ in live]
        scores = torch.tensor([s for _, _, s in live], dtype=torch.float64)
        if step == max_new - 1:
            break
        cache = stepper.reorder(cache, torch.tensor([src for src, _, _ in live]))
        logits, cache = stepper.step(torch.tensor([tok for _, tok, _ in live]), cache)
    # hypotheses cut off by the length limit compete with the finished ones
    finished += [(s / max(len(h), 1), h) for s, h in zip(scores.tolist(), hyps)]
    best = max(range(len(finished)), key=lambda i: (finished[i][0], -i))
    return finished[best][1]
