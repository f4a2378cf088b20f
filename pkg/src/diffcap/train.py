"""One-stage fine-tuning, evaluation and the with/without-MDP ablation."""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .backbone import DiffCaptioner, ModelConfig, assemble_batch, image_tensor
from .checkpoint import Checkpoint, load_into, read_checkpoint, save_checkpoint
from .data.corpus import ingest_manifest, load_png
from .data.generate import ChangePair
from .data.qa import QUESTION_TEMPLATES, to_qa
from .data.tokenizer import Vocabulary
from .layers import ConfigError
from .lora import LoraConfig, freeze_except_adapters, inject_lora
from .metrics import METRICS, MetricReport, evaluate_corpus

log = logging.getLogger("diffcap.train")

DETERMINISTIC_ENV = "DIFFCAP_DETERMINISTIC"


class TrainingError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)


def deterministic_from_env() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") == "1"


def lr_schedule(step: int, total: int, warmup_frac: float, peak: float) -> float:
    """Linear warmup from 0 to ``peak``, then a half cosine down to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warmup = int(warmup_frac * total)
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / (total - warmup)
    return peak * (1 + math.cos(math.pi * progress)) / 2


@dataclass
class TrainConfig:
    data_dir: Optional[str] = None
    out_dir: str = "runs/train"
    seed: int = 0
    # ``steps`` wins over ``epochs`` when set
    steps: Optional[int] = None
    epochs: float = 1.0
    batch_size: int = 16
    grad_accum: int = 1
    lr: float = 1e-3
    encoder_lr: Optional[float] = None
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    grad_clip: Optional[float] = 1.0
    mdp_enabled: bool = True
    lora_enabled: bool = False
    lora: LoraConfig = field(default_factory=LoraConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    question_template: int = 0
    init_checkpoint: Optional[str] = None
    deterministic: bool = False
    max_new_tokens: int = 48
    log_every: int = 10

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if isinstance(self.lora, dict):
            self.lora = LoraConfig(**self.lora)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.lr <= 0 or (self.encoder_lr is not None and self.encoder_lr <= 0):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("batch_size and grad_accum must be positive")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be positive")
        if not 0 <= self.question_template < len(QUESTION_TEMPLATES):
            raise ConfigError(f"unknown question template {self.question_template}")

    @property
    def encoder_rate(self) -> float:
        return self.encoder_lr if self.encoder_lr is not None else self.lr / 5

    def model_config(self, vocab_size: int) -> ModelConfig:
        dec = replace(self.model.decoder, vocab_size=vocab_size)
        return replace(self.model, decoder=dec, mdp_enabled=self.mdp_enabled)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["lora"]["targets"] = list(self.lora.targets)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e


@dataclass
class RunRecord:
    config: dict
    seed: int
    loss_trace: List[float]
    lr_trace: List[Tuple[float, float]]
    checkpoint: Optional[str]
    wall_time: float
    parameter_counts: Dict[str, int]
    report: Optional[dict] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------- data


def load_pairs(data_dir, split: Optional[str] = None) -> List[ChangePair]:
    records = ingest_manifest(data_dir).records
    return [r for r in records if split is None or r.split == split]


def build_vocabulary(train_pairs: Sequence[ChangePair]) -> Vocabulary:
    texts = [c for p in train_pairs for c in p.captions]
    return Vocabulary.build(texts + list(QUESTION_TEMPLATES))


def _image(img, root) -> np.ndarray:
    if isinstance(img, np.ndarray):
        return img
    if root is None:
        raise TrainingError(f"image {img!r} is a path but no data directory was given")
    return load_png(Path(root) / img)


class QaDataset:
    """Pairs expanded into one question/answer sample per caption."""

    def __init__(self, pairs: Sequence[ChangePair], vocab: Vocabulary, template: int = 0, root=None):
        self.pairs = list(pairs)
        self.images_a = np.stack([_image(p.image_a, root) for p in self.pairs])
        self.images_b = np.stack([_image(p.image_b, root) for p in self.pairs])
        self.question = vocab.encode(QUESTION_TEMPLATES[template])
        self.samples: List[Tuple[int, List[int]]] = []
        for i, p in enumerate(self.pairs):
            for qa in to_qa(p, template):
                self.samples.append((i, vocab.encode(qa.answer)))

    def __len__(self):
        return len(self.samples)

    def images(self, pair_idx: Sequence[int]):
        idx = list(pair_idx)
        return image_tensor(self.images_a[idx]), image_tensor(self.images_b[idx])

    def batch(self, sample_idx: Sequence[int], tokens_per_image: int, max_len: int):
        chosen = [self.samples[i] for i in sample_idx]
        ima, imb = self.images([p for p, _ in chosen])
        dec = assemble_batch(tokens_per_image, [self.question] * len(chosen), [a for _, a in chosen], max_len)
        return ima, imb, dec


def _sample_stream(n: int, seed: int) -> Iterator[int]:
    gen = torch.Generator().manual_seed(seed)
    while True:
        yield from torch.randperm(n, generator=gen).tolist()


# ---------------------------------------------------------------- model set-up


def build_model(cfg: TrainConfig, vocab_size: int, init: Optional[Checkpoint] = None) -> DiffCaptioner:
    torch.manual_seed(cfg.seed)
    model = DiffCaptioner(cfg.model_config(vocab_size))
    if init is not None:
        load_into(model, init)
    if cfg.lora_enabled:
        inject_lora(model.decoder.layers, cfg.lora)
        freeze_except_adapters(model.decoder)
    return model


def parameter_counts(model: DiffCaptioner) -> Dict[str, int]:
    return {g: sum(p.numel() for _, p in ps) for g, ps in model.parameter_groups().items()}


def make_optimizer(model: DiffCaptioner, cfg: TrainConfig) -> torch.optim.AdamW:
    enc = [p for p in model.encoder.parameters() if p.requires_grad]
    enc_ids = {id(p) for p in model.encoder.parameters()}
    rest = [p for p in model.parameters() if p.requires_grad and id(p) not in enc_ids]
    groups = [
        {"params": enc, "lr": 0.0, "peak": cfg.encoder_rate, "name": "encoder"},
        {"params": rest, "lr": 0.0, "peak": cfg.lr, "name": "rest"},
    ]
    return torch.optim.AdamW(groups, betas=cfg.betas, weight_decay=cfg.weight_decay)


def _dump_batch(out_dir: Path, step: int, dataset: QaDataset, idx, loss) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"nonfinite_step{step}.json"
    samples = [dataset.samples[i] for i in idx]
    path.write_text(json.dumps({
        "step": step,
        "loss": repr(float(loss)),
        "pair_ids": [dataset.pairs[p].id for p, _ in samples],
        "answers": [a for _, a in samples],
    }, indent=2))
    return path


# ---------------------------------------------------------------- training


def train(
    cfg: TrainConfig,
    pairs: Optional[Sequence[ChangePair]] = None,
    save: bool = True,
) -> Tuple[RunRecord, DiffCaptioner, Vocabulary]:
    """Fine-tune on the training pairs (the ``train`` split of ``cfg.data_dir`` by default)."""
    if cfg.deterministic or deterministic_from_env():
        set_deterministic(True)
    start = time.perf_counter()
    if pairs is None:
        if cfg.data_dir is None:
            raise ConfigError("no training data: set data_dir or pass pairs")
        pairs = load_pairs(cfg.data_dir, "train")
    if not pairs:
        raise TrainingError("training split is empty")
    init = read_checkpoint(cfg.init_checkpoint) if cfg.init_checkpoint else None
    vocab = Vocabulary.from_list(init.vocabulary) if init else build_vocabulary(pairs)
    data = QaDataset(pairs, vocab, cfg.question_template, cfg.data_dir)
    model = build_model(cfg, len(vocab), init)
    model.train()
    opt = make_optimizer(model, cfg)
    tpi = model.cfg.encoder.tokens
    max_len = model.cfg.decoder.max_len
    per_step = cfg.batch_size * cfg.grad_accum
    total = cfg.steps or max(1, math.ceil(cfg.epochs * len(data) / per_step))
    stream = _sample_stream(len(data), cfg.seed + 1)
    trainable = [p for p in model.parameters() if p.requires_grad]
    out_dir = Path(cfg.out_dir)
    losses: List[float] = []
    lrs: List[Tuple[float, float]] = []
    log.info("train_start", extra={"fields": {"steps": total, "samples": len(data),
                                              "parameters": parameter_counts(model)}})
    for step in range(total):
        for g in opt.param_groups:
            g["lr"] = lr_schedule(step, total, cfg.warmup_frac, g["peak"])
        opt.zero_grad(set_to_none=True)
        step_loss = 0.0
        for _ in range(cfg.grad_accum):
            idx = [next(stream) for _ in range(cfg.batch_size)]
            ima, imb, dec = data.batch(idx, tpi, max_len)
            loss = model.loss(ima, imb, dec)
            if not torch.isfinite(loss):
                dump = _dump_batch(out_dir, step, data, idx, loss)
                raise TrainingError(f"non-finite loss {float(loss)} at step {step}; batch dumped to {dump}")
            (loss / cfg.grad_accum).backward()
            step_loss += loss.item() / cfg.grad_accum
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
        opt.step()
        losses.append(step_loss)
        lrs.append(tuple(g["lr"] for g in opt.param_groups))
        if cfg.log_every and (step % cfg.log_every == 0 or step == total - 1):
            log.info("step", extra={"fields": {"step": step, "loss": step_loss, "lr": lrs[-1][1]}})
    model.eval()
    ckpt_path = None
    if save:
        ckpt_path = str(save_checkpoint(out_dir / "model.ckpt", model, cfg.to_dict(), cfg.seed,
                                        vocab.to_list(), {"steps": total}))
        (out_dir / "loss_trace.json").write_text(json.dumps(losses) + "\n")
    record = RunRecord(cfg.to_dict(), cfg.seed, losses, lrs, ckpt_path,
                       time.perf_counter() - start, parameter_counts(model))
    if save:
        (out_dir / "run.json").write_text(record.to_json())
    log.info("train_end", extra={"fields": {"final_loss": losses[-1], "checkpoint": ckpt_path}})
    return record, model, vocab


def load_model(path) -> Tuple[DiffCaptioner, Vocabulary, TrainConfig]:
    ckpt = read_checkpoint(path)
    cfg = TrainConfig.from_dict(ckpt.config)
    if cfg.lora_enabled and not ckpt.tensors["lora"]:
        raise EvaluationError("checkpoint/config mismatch: config enables LoRA but the checkpoint has no adapters")
    vocab = Vocabulary.from_list(ckpt.vocabulary)
    torch.manual_seed(cfg.seed)
    model = DiffCaptioner(cfg.model_config(len(vocab)))
    if cfg.lora_enabled:
        inject_lora(model.decoder.layers, cfg.lora)
    load_into(model, ckpt)
    model.eval()
    return model, vocab, cfg


# ---------------------------------------------------------------- evaluation


def generate_captions(
    model: DiffCaptioner,
    vocab: Vocabulary,
    data: QaDataset,
    strategy: str = "greedy",
    beam: int = 3,
    max_new: int = 48,
    batch_size: int = 64,
) -> List[str]:
    """One caption per pair of ``data``."""
    model.eval()
    out = []
    for s in range(0, len(data.pairs), batch_size):
        idx = range(s, min(s + batch_size, len(data.pairs)))
        ima, imb = data.images(idx)
        ids = model.generate(ima, imb, data.question, strategy, beam, max_new)
        out.extend(vocab.decode(seq) for seq in ids)
    return out


def evaluate(
    checkpoint,
    data_dir=None,
    split: str = "test",
    strategy: str = "greedy",
    beam: int = 3,
    out_dir=None,
    pairs: Optional[Sequence[ChangePair]] = None,
    metrics: Sequence[str] = METRICS,
) -> Tuple[MetricReport, List[dict]]:
    """Caption every pair of ``split``, score against its captions and persist the report."""
    model, vocab, cfg = load_model(checkpoint)
    if pairs is None:
        if data_dir is None:
            raise ConfigError("no evaluation data: set data_dir or pass pairs")
        pairs = load_pairs(data_dir, split)
    if not pairs:
        raise EvaluationError(f"split {split!r} is empty")
    data = QaDataset(pairs, vocab, cfg.question_template, data_dir)
    captions = generate_captions(model, vocab, data, strategy, beam, cfg.max_new_tokens)
    results = [{"id": p.id, "caption": c} for p, c in zip(pairs, captions)]
    report = evaluate_corpus([(p.id, c, p.captions) for p, c in zip(pairs, captions)], metrics)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(json.dumps(results, indent=2) + "\n")
        refs = [{"id": p.id, "captions": list(p.captions)} for p in pairs]
        (out / "references.json").write_text(json.dumps(refs, indent=2) + "\n")
        full = {"config": cfg.to_dict(), "checkpoint": str(checkpoint), "split": split,
                "strategy": strategy, "beam": beam if strategy == "beam" else None,
                "report": report.to_dict(scale=100)}
        (out / "report.json").write_text(json.dumps(full, sort_keys=True, indent=2) + "\n")
    return report, results


def caption_pair(model: DiffCaptioner, vocab: Vocabulary, cfg: TrainConfig, image_a, image_b,
                 strategy: str = "greedy", beam: int = 3) -> str:
    question = vocab.encode(QUESTION_TEMPLATES[cfg.question_template])
    ima = image_tensor(np.asarray(image_a)[None])
    imb = image_tensor(np.asarray(image_b)[None])
    ids = model.generate(ima, imb, question, strategy, beam, cfg.max_new_tokens)[0]
    return vocab.decode(ids)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationResult:
    rows: List[dict]
    means: Dict[str, Dict[str, float]]
    deltas: Dict[str, float]
    parameter_counts: Dict[str, int]
    mdp_group_size: int
    trend_holds: bool

    def table(self) -> str:
        head = "| arm | seed | " + " | ".join(METRICS) + " |"
        lines = [head, "|" + "---|" * (len(METRICS) + 2)]
        for r in self.rows:
            lines.append(f"| {r['arm']} | {r['seed']} | "
                         + " | ".join(f"{100 * r[m]:.2f}" for m in METRICS) + " |")
        for arm, m in self.means.items():
            lines.append(f"| {arm} | mean | " + " | ".join(f"{100 * m[k]:.2f}" for k in METRICS) + " |")
        lines.append("| delta | mean | " + " | ".join(f"{100 * self.deltas[k]:+.2f}" for k in METRICS) + " |")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return asdict(self)


ARMS = ("with_mdp", "without_mdp")


def ablate(base: TrainConfig, seeds: Sequence[int], data_dir=None, out_dir=None,
           split: str = "test") -> AblationResult:
    """Train and evaluate both arms for every seed on one corpus and one test split."""
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    data_dir = data_dir or base.data_dir
    out = Path(out_dir or base.out_dir)
    train_pairs = load_pairs(data_dir, "train")
    test_pairs = load_pairs(data_dir, split)
    rows, counts = [], {}
    for arm in ARMS:
        for seed in seeds:
            cfg = replace(base, seed=seed, mdp_enabled=arm == "with_mdp", data_dir=str(data_dir),
                          out_dir=str(out / f"{arm}_seed{seed}"))
            record, _, _ = train(cfg, train_pairs)
            report, _ = evaluate(record.checkpoint, data_dir, split, out_dir=cfg.out_dir, pairs=test_pairs)
            counts[arm] = sum(record.parameter_counts.values())
            row = {"arm": arm, "seed": seed}
            row.update({m: report.scores[m] for m in METRICS})
            rows.append(row)
            log.info("ablation_run", extra={"fields": row})
    means = {arm: {m: float(np.mean([r[m] for r in rows if r["arm"] == arm])) for m in METRICS}
             for arm in ARMS}
    deltas = {m: means["with_mdp"][m] - means["without_mdp"][m] for m in METRICS}
    result = AblationResult(rows, means, deltas, counts, counts["with_mdp"] - counts["without_mdp"],
                            means["with_mdp"]["ciderD"] >= means["without_mdp"]["ciderD"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n")
    (out / "ablation.md").write_text(result.table())
    return result
