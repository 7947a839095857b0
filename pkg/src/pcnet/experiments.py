"""The scripted runs behind the acceptance suite: overfit and loss ablation."""
from __future__ import annotations

import copy
import time

import numpy as np

from .config import RunConfig
from .data import dataset_proposals, generate_dataset
from .train import Trainer, evaluate, fresh_state, init_state, training_data

# Warm-started toy encoders, a learning rate suited to 64-wide layers, and a
# short main run: the classification loss plateaus within ~100 steps here.
OVERFIT = dict(preset="toy", n_samples=32, pretrain_samples=2048, pretrain_steps=1500,
               lr=5e-4, max_steps=500)

ABLATION = dict(preset="toy", n_samples=256, pretrain_samples=2048, pretrain_steps=1500,
                lr=5e-4, epochs=15)
ARMS = {
    "cls": dict(use_ras=False, use_iad=False),
    "cls+ras": dict(use_ras=True, use_iad=False),
    "cls+ras+iad": dict(use_ras=True, use_iad=True),
}
HELD_OUT = 128


def overfit_run(seed: int = 0, **overrides) -> dict:
    """Train on the 32-sample split and report train-set metrics and wall time."""
    cfg = RunConfig(**{**OVERFIT, "seed": seed, **overrides})
    start = time.perf_counter()
    dataset, props = training_data(cfg)
    trainer = Trainer(cfg, dataset, props)
    trainer.run()
    report = evaluate(trainer.state.model, dataset, props, b=cfg.b, split="train")
    report.pop("per_sample")
    report["seconds"] = time.perf_counter() - start
    report["steps"] = trainer.state.step
    report["log"] = trainer.state.log
    return report


def held_out_split(seed: int, cfg: RunConfig, n: int = HELD_OUT):
    data_seed = 5000 + seed
    dataset = generate_dataset(n, cfg.image_size, data_seed)
    props = dataset_proposals(dataset, cfg.n_distractors, data_seed, cfg.distractor_kinds,
                              cfg.area_min, cfg.iou_dedupe, cfg.p)
    return dataset, props


def ablation_run(seed: int, arms: dict[str, dict] = ARMS, **overrides) -> dict[str, dict]:
    """Held-out reports for each loss arm from one shared warm start.

    Every arm uses the same training split, seed, CRM initialization and
    pretrained encoders; only the loss terms differ.
    """
    base = RunConfig(**{**ABLATION, "seed": seed, "data_seed": 100 + seed, **overrides})
    dataset, props = training_data(base)
    start = fresh_state(base, dataset)
    encoder_weights = copy.deepcopy(start.model.encoders.state_dict())
    vocab = start.model.encoders.vocab
    eval_ds, eval_props = held_out_split(seed, base)
    out = {}
    for name, flags in arms.items():
        cfg = RunConfig(**{**base.to_dict(), **flags})
        state = init_state(cfg, vocab)
        state.model.encoders.load_state_dict(encoder_weights)
        trainer = Trainer(cfg, dataset, props, state=state)
        trainer.run()
        report = evaluate(trainer.state.model, eval_ds, eval_props, b=cfg.b, split="held-out")
        report.pop("per_sample")
        out[name] = report
    return out


def summarize_ablation(runs: dict[int, dict[str, dict]]) -> dict:
    """Criterion quantities over seeds: RaS wins, IaD separation, stage ambiguity trend."""
    ras_wins = sum(r["cls+ras"]["pointm"] > r["cls"]["pointm"] for r in runs.values())
    separation = {s: (r["cls"]["separation"], r["cls+ras+iad"]["separation"]) for s, r in runs.items()}
    amb = np.array([[st["mean_ambiguity"] for st in r["cls+ras"]["per_stage"]] for r in runs.values()])
    return {"ras_wins": int(ras_wins), "n_seeds": len(runs), "separation": separation,
            "stage_ambiguity": amb.mean(axis=0).tolist()}
