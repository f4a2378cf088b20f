"""``diffcap`` command line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures. Log
events go to stderr as one JSON object per line. Every subcommand that has
an output location writes ``run_manifest.json`` there, recording the
arguments, input file digests, library versions and seed.
"""

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from .data import ALL_TYPES, ChangeType, build_corpus, ingest_manifest
from .data.corpus import MANIFEST, load_png
from .metrics import METRICS, evaluate_file

log = logging.getLogger("diffcap.cli")
RUN_MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        event = {"event": record.getMessage(), "level": record.levelname.lower(), "logger": record.name}
        event.update(getattr(record, "fields", {}))
        return json.dumps(event, sort_keys=True, default=str)


def setup_logging(level: str = "info") -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("diffcap")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _digest(path) -> Optional[str]:
    p = Path(path)
    if not p.is_file():
        return None
    return hashlib.sha256(p.read_bytes()).hexdigest()


def write_run_manifest(out_dir, args: argparse.Namespace, inputs: List = (), config: Optional[dict] = None,
                       seed: Optional[int] = None) -> Path:
    from .train import deterministic_from_env

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": seed,
        "deterministic": deterministic_from_env(),
        "inputs": {str(p): _digest(p) for p in inputs if p},
        "config": config,
        "versions": {
            "diffcap": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }
    path = out / RUN_MANIFEST
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2, default=str) + "\n")
    return path


# ---------------------------------------------------------------- subcommands


def _parse_types(text: Optional[str]):
    if not text:
        return ALL_TYPES
    try:
        return tuple(ChangeType(t.strip()) for t in text.split(","))
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_generate_data(args) -> int:
    pairs = build_corpus(args.out, args.pairs, seed=args.seed, types=_parse_types(args.types),
                         distractors=args.distractors, n_captions=args.captions, workers=args.workers)
    stats = ingest_manifest(args.out).stats
    write_run_manifest(args.out, args, seed=args.seed)
    log.info("generated", extra={"fields": {"pairs": len(pairs), "out": args.out, "stats": stats.to_dict()}})
    return 0


def cmd_validate_data(args) -> int:
    res = ingest_manifest(args.manifest, check_images=args.check_images, strict=False)
    summary = {"stats": res.stats.to_dict(), "errors": res.errors}
    print(json.dumps(summary, sort_keys=True, indent=2))
    if args.out:
        write_run_manifest(args.out, args, inputs=[_manifest_file(args.manifest)])
        (Path(args.out) / "stats.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    if res.errors:
        for e in res.errors:
            log.error("invalid_record", extra={"fields": {"detail": e}})
        return 2
    return 0


def _manifest_file(path) -> Path:
    p = Path(path)
    return p / MANIFEST if p.is_dir() else p


def _train_config(args):
    from .train import TrainConfig

    cfg = TrainConfig.from_json(args.config)
    overrides = {}
    if args.data:
        overrides["data_dir"] = args.data
    if args.out:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None):
        overrides["steps"] = args.steps
    d = cfg.to_dict()
    d.update(overrides)
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    from .train import train

    cfg = _train_config(args)
    write_run_manifest(cfg.out_dir, args, inputs=[args.config, cfg.init_checkpoint,
                                                  cfg.data_dir and _manifest_file(cfg.data_dir)],
                       config=cfg.to_dict(), seed=cfg.seed)
    record, _, _ = train(cfg)
    print(json.dumps({"checkpoint": record.checkpoint, "final_loss": record.loss_trace[-1],
                      "steps": len(record.loss_trace)}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    if args.ckpt:
        if args.results or args.references:
            raise UsageError("--ckpt cannot be combined with --results/--references")
        if not args.data:
            raise UsageError("--ckpt requires --data")
        from .train import evaluate

        out = args.out or str(Path(args.ckpt).parent / f"eval_{args.split}")
        write_run_manifest(out, args, inputs=[args.ckpt, _manifest_file(args.data)])
        report, _ = evaluate(args.ckpt, args.data, args.split, args.strategy, args.beam, out)
        print(report.to_json(scale=100), end="")
        return 0
    if not (args.results and args.references):
        raise UsageError("either --ckpt or both --results and --references are required")
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = evaluate_file(args.results, args.references, metrics)
    text = report.to_json(scale=100)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_run_manifest(out.parent, args, inputs=[args.results, args.references])
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    from .train import ablate

    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"--seeds must be a comma-separated list of integers: {e}") from e
    if not seeds:
        raise UsageError("--seeds is empty")
    cfg = _train_config(args)
    write_run_manifest(cfg.out_dir, args, inputs=[args.config, cfg.data_dir and _manifest_file(cfg.data_dir)],
                       config=cfg.to_dict(), seed=seeds[0])
    result = ablate(cfg, seeds)
    print(result.table(), end="")
    return 0


def cmd_caption(args) -> int:
    from .train import caption_pair, load_model

    model, vocab, cfg = load_model(args.ckpt)
    text = caption_pair(model, vocab, cfg, load_png(args.image_a), load_png(args.image_b),
                        args.strategy, args.beam)
    if args.out:
        write_run_manifest(args.out, args, inputs=[args.ckpt, args.image_a, args.image_b], seed=cfg.seed)
        (Path(args.out) / "caption.json").write_text(json.dumps({"caption": text}) + "\n")
    print(text)
    return 0


def cmd_merge_lora(args) -> int:
    from .checkpoint import read_checkpoint, save_checkpoint
    from .lora import merge_lora
    from .train import TrainConfig, load_model

    model, vocab, cfg = load_model(args.ckpt)
    if not cfg.lora_enabled:
        raise UsageError("checkpoint has no LoRA adapters to merge")
    merged = merge_lora(model.decoder)
    d = cfg.to_dict()
    d["lora_enabled"] = False
    meta = dict(read_checkpoint(args.ckpt).meta, merged_from=str(args.ckpt), merged_adapters=merged)
    save_checkpoint(args.out, model, TrainConfig.from_dict(d).to_dict(), cfg.seed, vocab.to_list(), meta)
    write_run_manifest(Path(args.out).parent, args, inputs=[args.ckpt], seed=cfg.seed)
    log.info("merged", extra={"fields": {"adapters": merged, "out": args.out}})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> Parser:
    p = Parser(prog="diffcap", description="Image difference captioning toolkit.")
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", parser_class=Parser, metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("generate-data", help="generate a synthetic change-pair corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--types", help="comma-separated change types (default: all)")
    g.add_argument("--distractors", action="store_true", help="add viewpoint/illumination jitter")
    g.add_argument("--captions", type=int, default=1, help="captions per pair")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_generate_data)

    v = sub.add_parser("validate-data", help="validate a manifest and print statistics")
    v.add_argument("--manifest", required=True, help="manifest file or corpus directory")
    v.add_argument("--check-images", action="store_true")
    v.add_argument("--out")
    v.set_defaults(func=cmd_validate_data)

    for name, fn, text in (("train", cmd_train, "fine-tune a model"),
                           ("ablate", cmd_ablate, "with/without-MDP comparison")):
        t = sub.add_parser(name, help=text)
        t.add_argument("--config", required=True)
        t.add_argument("--data", help="corpus directory (overrides data_dir)")
        t.add_argument("--out", help="output directory (overrides out_dir)")
        t.add_argument("--seed", type=int, help="overrides the config seed")
        t.add_argument("--steps", type=int, help="overrides the step budget")
        if name == "ablate":
            t.add_argument("--seeds", required=True, help="comma-separated seeds, e.g. 1,2,3")
        t.set_defaults(func=fn)

    e = sub.add_parser("evaluate", help="score captions or evaluate a checkpoint")
    e.add_argument("--results")
    e.add_argument("--references")
    e.add_argument("--metrics", default=",".join(METRICS))
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--strategy", default="greedy", choices=["greedy", "beam"])
    e.add_argument("--beam", type=int, default=3)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("caption", help="caption one image pair")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--image-a", required=True)
    c.add_argument("--image-b", required=True)
    c.add_argument("--strategy", default="greedy", choices=["greedy", "beam"])
    c.add_argument("--beam", type=int, default=3)
    c.add_argument("--out")
    c.set_defaults(func=cmd_caption)

    m = sub.add_parser("merge-lora", help="fold LoRA adapters into the decoder weights")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge_lora)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    from .train import deterministic_from_env, set_deterministic

    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    if deterministic_from_env():
        set_deterministic(True)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"diffcap {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.error("failed", extra={"fields": {"command": args.command, "error": f"{type(e).__name__}: {e}"}})
        return 2


if __name__ == "__main__":
    sys.exit(main())
