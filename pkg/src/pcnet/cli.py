"""Command line: ``pcnet {train,eval,infer,decompose,gen-data}``.

Exit status is 0 on success, 2 for invalid input or configuration and 3 for
numeric failures during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np
from PIL import Image

from .config import RunConfig, home_dir
from .cues import ChatCompletionsClient, CueCache, decompose_many
from .data import dataset_proposals, generate_dataset, load_dataset, load_dataset_proposals, save_dataset
from .errors import ConfigError, DegenerateInputError, InvalidInputError, InvalidTemplateError, NumericError
from .export import export_mask, export_stage
from .metrics import peak_point
from .proposals import filter_proposals, load_proposals
from .train import Trainer, evaluate, infer, load_state, save_state, training_data

logger = logging.getLogger("pcnet")


def _default_out(*parts: str) -> str:
    return os.path.join(home_dir(), *parts)


def cmd_train(args) -> int:
    cfg = RunConfig.from_json(args.config)
    if args.data:
        cfg.data_dir = args.data
    if cfg.log_every == 0:
        cfg.log_every = 50
    dataset, props = training_data(cfg)
    trainer = Trainer(cfg, dataset, props)
    out = args.out or _default_out("runs", os.path.splitext(os.path.basename(args.config))[0], "model.pcnt")
    trainer.run()
    save_state(out, trainer.state)
    with open(out + ".log.jsonl", "w", encoding="utf-8") as fh:
        for entry in trainer.state.log:
            fh.write(json.dumps(entry) + "\n")
    print(json.dumps({"checkpoint": out, "steps": trainer.state.step,
                      "final": trainer.state.log[-1] if trainer.state.log else None}))
    return 0


def _resolve_split(name: str, cfg: RunConfig):
    """``train`` regenerates the checkpoint's training split; anything else is a split directory."""
    if name == "train":
        return training_data(cfg)
    root = name if os.path.isdir(name) else os.path.join(home_dir(), "splits", name)
    if not os.path.isdir(root):
        raise InvalidInputError(f"no split directory {name!r} (looked in {root})")
    dataset = load_dataset(root)
    props = load_dataset_proposals(root, dataset, cfg.p, cfg.area_min, cfg.iou_dedupe)
    if props is None:
        props = dataset_proposals(dataset, cfg.n_distractors, cfg.data_seed, cfg.distractor_kinds,
                                  cfg.area_min, cfg.iou_dedupe, cfg.p)
    return dataset, props


def cmd_eval(args) -> int:
    state = load_state(args.ckpt)
    dataset, props = _resolve_split(args.split, state.cfg)
    report = evaluate(state.model, dataset, props, b=state.cfg.b, split=args.split)
    if not args.per_sample:
        report.pop("per_sample")
    text = json.dumps(report, indent=1)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text)
    return 0


def cmd_infer(args) -> int:
    state = load_state(args.ckpt)
    model = state.model
    image = np.asarray(Image.open(args.image).convert("RGB"))
    proposals = None
    if args.proposals:
        _, masks = load_proposals(args.proposals)
        cfg = state.cfg
        proposals = filter_proposals(masks, cfg.area_min, cfg.iou_dedupe, cfg.p, shape=image.shape[:2])
    result = infer(model, image, args.text, proposals, negatives=args.negative or ())
    out_dir = args.out or _default_out("infer")
    size = (image.shape[0], image.shape[1])
    files = []
    for n, r in enumerate(result["responses"]):
        png, side = export_stage(out_dir, n, r, peak_point(r, size))
        files += [png, side]
    summary = {"peak_row": result["peak"].row, "peak_col": result["peak"].col,
               "degenerate": result["peak"].degenerate, "files": files}
    if result["mask"] is not None:
        mask_path = os.path.join(out_dir, "mask.png")
        export_mask(mask_path, result["mask"])
        summary["mask"] = mask_path
    print(json.dumps(summary, indent=1))
    return 0


def cmd_decompose(args) -> int:
    with open(args.inp, encoding="utf-8") as fh:
        texts = [line.strip() for line in fh if line.strip()]
    client = cache = None
    if args.backend == "llm":
        client = ChatCompletionsClient.from_env()
        cache = CueCache(args.cache or _default_out("cue_cache.jsonl"))
    results = decompose_many(texts, args.backend, args.k, client, cache)
    with open(args.out, "w", encoding="utf-8") as fh:
        for cues in results:
            fh.write(json.dumps({"text": cues.source_text, "cues": cues.phrases, "source": cues.provenance}) + "\n")
    print(json.dumps({"written": len(results), "out": args.out}))
    return 0


def cmd_gen_data(args) -> int:
    dataset = generate_dataset(args.n, args.size, args.seed)
    props = dataset_proposals(dataset, seed=args.seed, area_min=args.area_min, p=args.p)
    save_dataset(dataset, args.out, props)
    print(json.dumps({"samples": len(dataset), "out": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcnet", description="Train, evaluate and run the referring-segmentation model.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="split directory (overrides data_dir in the config)")
    p.add_argument("--out", help="checkpoint path (default under $PCNET_HOME/runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report for a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", required=True, help="'train', a split directory, or a name under $PCNET_HOME/splits")
    p.add_argument("--out", help="also write the report JSON here")
    p.add_argument("--per-sample", action="store_true", help="include per-sample records")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="stage response maps, peak and optional mask for one image and text")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--proposals", help="proposal JSON file for mask selection")
    p.add_argument("--negative", action="append", help="negative text for the conditional cues (repeatable)")
    p.add_argument("--out", help="output directory (default $PCNET_HOME/infer)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("decompose", help="decompose referring texts into K cue phrases")
    p.add_argument("--in", dest="inp", required=True, help="text file, one expression per line")
    p.add_argument("--out", required=True, help="JSONL output")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--backend", choices=("llm", "rules"), default="rules")
    p.add_argument("--cache", help="LLM reply cache (default $PCNET_HOME/cue_cache.jsonl)")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("gen-data", help="write a synthetic split with proposals")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--area-min", type=int, default=40)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, InvalidTemplateError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
