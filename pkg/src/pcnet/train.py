"""Training loop, evaluation and inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint
from .config import RunConfig
from .data import (
    Batch, GroundingSample, all_texts, dataset_proposals, generate_dataset, load_dataset,
    load_dataset_proposals, make_batches, same_image_pairs,
)
from .encoding import Vocabulary, images_to_tensor
from .errors import ConfigError, InvalidInputError, NumericError
from .losses import alignment_scores, ambiguity, cls_loss
from .metrics import (
    EvalRecord, miou_oiou, oracle_eval, peak_point, point_hit, pointm, select_index,
)
from .model import PCNet, batch_objective, pair_layout, proposal_tensors
from .proposals import ProposalSet, binary_iou, upsample

logger = logging.getLogger(__name__)

DTYPES = {"float64": torch.float64, "float32": torch.float32}


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    if total <= 0:
        return base
    return base * max(0.0, 1.0 - step / total) ** power


def build_model(cfg: RunConfig, vocab: Vocabulary) -> PCNet:
    if cfg.n_stages > cfg.k:
        logger.warning("n_stages=%d exceeds k=%d; cues are reused cyclically", cfg.n_stages, cfg.k)
    return PCNet(cfg.encoder, vocab, cfg.n_stages, cfg.k, cfg.share_stages, DTYPES[cfg.dtype],
                 similarity=cfg.similarity, score_bias=cfg.score_bias)


@dataclass
class TrainState:
    cfg: RunConfig
    model: PCNet
    optimizer: torch.optim.Optimizer
    step: int = 0
    steps_per_epoch: int = 1
    log: list[dict] = field(default_factory=list)

    @property
    def epoch(self) -> int:
        """Epoch of the next step. Batch order and augmentation are pure functions of
        (seed, epoch, step), so the step counter is the whole rng state."""
        return self.step // self.steps_per_epoch

    @property
    def params(self) -> list[tuple[str, torch.nn.Parameter]]:
        return [(n, p) for n, p in self.model.named_parameters() if p.requires_grad]


def init_state(cfg: RunConfig, vocab: Vocabulary) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = build_model(cfg, vocab)
    if cfg.freeze_encoders:
        for p in model.encoders.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, foreach=False)
    return TrainState(cfg, model, opt)


def pretraining_corpus(cfg: RunConfig) -> list[GroundingSample]:
    """Synthetic split for the encoder warm start; its seed is disjoint from ``data_seed``."""
    if cfg.pretrain_samples == 0:
        return []
    return generate_dataset(cfg.pretrain_samples, cfg.image_size, cfg.pretrain_seed)


def pretrain_encoders(model: PCNet, corpus: Sequence[GroundingSample], cfg: RunConfig) -> list[float]:
    """Image-text matching on the raw encoder grid, before any CRM stage.

    The score of an (image, text) pair is the best cell's cosine with the
    global text embedding, scaled and offset as in the main classification
    loss. This plays the part of a pretrained vision-language encoder: word
    and pixel statistics shared across many images align colours and shapes
    with their words, which 32 images alone cannot do. Returns the loss curve.
    """
    if not corpus or cfg.pretrain_steps == 0:
        return []
    enc = model.encoders
    dtype = model.dtype
    frozen = [p for p in enc.parameters() if not p.requires_grad]
    for p in frozen:  # a frozen-encoder run freezes the warm-started weights
        p.requires_grad_(True)
    images = images_to_tensor([s.image for s in corpus], dtype)
    bias = torch.nn.Parameter(torch.tensor(cfg.score_bias, dtype=dtype))
    opt = torch.optim.AdamW(list(enc.parameters()) + [bias], lr=cfg.pretrain_lr,
                            weight_decay=cfg.weight_decay, foreach=False)
    per_epoch = len(corpus) // cfg.b
    curve = []
    for step in range(cfg.pretrain_steps):
        epoch, offset = divmod(step, per_epoch)
        if offset == 0:
            batches = list(make_batches(corpus, cfg.b, 0, cfg.pretrain_seed, epoch))
        batch = batches[offset]
        v = enc.encode_images(images[torch.as_tensor(batch.sample_idx)])
        q = enc.encode_texts([corpus[i].texts[t] for i, t in zip(batch.sample_idx, batch.text_idx)])
        v = v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        scores = torch.einsum("ihwc,tc->ithw", v, q).amax(dim=(-2, -1))
        loss = cls_loss(cfg.score_scale * scores + bias)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite pretraining loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        for group in opt.param_groups:
            group["lr"] = poly_lr(cfg.pretrain_lr, step, cfg.pretrain_steps, cfg.poly_power)
        opt.step()
        curve.append(loss.item())
    for p in frozen:
        p.requires_grad_(False)
    return curve


def fresh_state(cfg: RunConfig, dataset: Sequence[GroundingSample]) -> TrainState:
    """Initial state for a run: vocabulary, seeded model, optional encoder warm start."""
    corpus = pretraining_corpus(cfg)
    state = init_state(cfg, Vocabulary.build(all_texts(dataset) + all_texts(corpus)))
    curve = pretrain_encoders(state.model, corpus, cfg)
    if curve:
        logger.info("encoder pretraining: %d steps, loss %.4f -> %.4f", len(curve), curve[0], curve[-1])
    return state


class Trainer:
    """Owns the dataset tensors and advances a :class:`TrainState` one batch at a time."""

    def __init__(self, cfg: RunConfig, dataset: Sequence[GroundingSample],
                 proposals: Sequence[ProposalSet] | None = None, state: TrainState | None = None):
        if len(dataset) < cfg.b:
            raise InvalidInputError(f"dataset has {len(dataset)} samples, batch needs {cfg.b}")
        self.cfg = cfg
        self.dataset = list(dataset)
        if proposals is None:
            proposals = dataset_proposals(self.dataset, cfg.n_distractors, cfg.data_seed,
                                          cfg.distractor_kinds, cfg.area_min, cfg.iou_dedupe, cfg.p)
        self.proposals = list(proposals)
        self.state = fresh_state(cfg, self.dataset) if state is None else state
        self.state.steps_per_epoch = len(self.dataset) // cfg.b
        dtype = DTYPES[cfg.dtype]
        self.images = images_to_tensor([s.image for s in self.dataset], dtype)
        self.masks, self.valid = proposal_tensors(self.proposals, dtype)
        self.steps_per_epoch = len(self.dataset) // cfg.b
        self.total_steps = cfg.max_steps or cfg.epochs * self.steps_per_epoch
        self._epoch_cache: tuple[int, list[Batch]] | None = None

    def batch_at(self, step: int) -> Batch:
        epoch, offset = divmod(step, self.steps_per_epoch)
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            batches = list(make_batches(self.dataset, self.cfg.b, self.cfg.n_d, self.cfg.seed, epoch))
            self._epoch_cache = (epoch, batches)
        return self._epoch_cache[1][offset]

    def shifts_at(self, step: int, b: int) -> list[tuple[int, int]]:
        """Per-image (dy, dx) translations for a step; all zero when augmentation is off."""
        m = self.cfg.augment_shift
        if m == 0:
            return [(0, 0)] * b
        rng = np.random.default_rng([self.cfg.seed, 7919, step])
        return [tuple(int(v) for v in rng.integers(-m, m + 1, size=2)) for _ in range(b)]

    def losses(self, batch: Batch, frozen=None, shifts: Sequence[tuple[int, int]] | None = None):
        """Objective for one batch; ``shifts`` translates each image and its proposals together."""
        model = self.state.model
        b = batch.size
        texts = [self.dataset[i].texts[t] for i, t in zip(batch.sample_idx, batch.text_idx)]
        partners, anchors = [], []
        for a, (i, ps) in enumerate(zip(batch.sample_idx, batch.iad_partners)):
            for t in ps:
                partners.append((a, len(texts)))
                anchors.append(a)
                texts.append(self.dataset[i].texts[t])
        idx = torch.as_tensor(batch.sample_idx, dtype=torch.long)
        images, masks = self.images[idx], self.masks[idx]
        if shifts is not None and any(s != (0, 0) for s in shifts):
            images = torch.stack([torch.roll(im, s, dims=(-2, -1)) for im, s in zip(images, shifts)])
            masks = torch.stack([torch.roll(mk, s, dims=(-2, -1)) for mk, s in zip(masks, shifts)])
        visual0 = model.encode_images(images)
        q0, cue_emb = model.embed_texts(texts)
        img, txt, neg = pair_layout(b, partners)
        states = model.run_pairs(visual0, q0, cue_emb, img, txt, neg)
        return batch_objective(states, b, anchors, masks, self.valid[idx],
                               (self.cfg.image_size, self.cfg.image_size),
                               self.cfg.use_ras, self.cfg.use_iad and self.cfg.n_d > 0, frozen,
                               self.cfg.cls_pooling, self.cfg.score_scale, model.score_bias)

    def train_step(self) -> dict:
        st = self.state
        batch = self.batch_at(st.step)
        breakdown, _ = self.losses(batch, shifts=self.shifts_at(st.step, batch.size))
        if not torch.isfinite(breakdown.total):
            raise NumericError(f"non-finite loss at step {st.step}")
        st.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        lr = poly_lr(self.cfg.lr, st.step, self.total_steps, self.cfg.poly_power)
        for group in st.optimizer.param_groups:
            group["lr"] = lr
        st.optimizer.step()
        entry = breakdown.as_log(st.step)
        st.log.append(entry)
        st.step += 1
        if self.cfg.log_every and st.step % self.cfg.log_every == 0:
            logger.info("%s", entry)
        return entry

    def run(self, until: int | None = None, callback: Callable[[dict], None] | None = None) -> TrainState:
        stop = self.total_steps if until is None else min(until, self.total_steps)
        self.state.model.train()
        while self.state.step < stop:
            entry = self.train_step()
            if callback is not None:
                callback(entry)
        return self.state


def training_data(cfg: RunConfig) -> tuple[list[GroundingSample], list[ProposalSet]]:
    """The split named by the config: ``data_dir`` if set, else a generated synthetic split.

    Saved splits use their own proposal files when present; otherwise proposals
    are synthesized from the ground-truth masks like the generated split.
    """
    if cfg.data_dir:
        dataset = load_dataset(cfg.data_dir)
        props = load_dataset_proposals(cfg.data_dir, dataset, cfg.p, cfg.area_min, cfg.iou_dedupe)
    else:
        dataset = generate_dataset(cfg.n_samples, cfg.image_size, cfg.data_seed)
        props = None
    if props is None:
        props = dataset_proposals(dataset, cfg.n_distractors, cfg.data_seed, cfg.distractor_kinds,
                                  cfg.area_min, cfg.iou_dedupe, cfg.p)
    return dataset, props


def train(cfg: RunConfig, dataset: Sequence[GroundingSample],
          proposals: Sequence[ProposalSet] | None = None) -> TrainState:
    return Trainer(cfg, dataset, proposals).run()


# --- checkpoints ----------------------------------------------------------

def save_state(path, state: TrainState) -> None:
    arrays = {f"model/{n}": p.detach().cpu().numpy() for n, p in state.model.named_parameters()}
    name_of = {id(p): n for n, p in state.model.named_parameters()}
    for p, s in state.optimizer.state.items():
        n = name_of[id(p)]
        for key, val in s.items():
            arrays[f"optim/{n}/{key}"] = np.asarray(torch.as_tensor(val).detach().cpu().numpy(), dtype=np.float64)
    arrays["train/step"] = np.array([state.step], dtype=np.float64)
    meta = {
        "config": state.cfg.to_dict(),
        "vocab": state.model.encoders.vocab.words[1:],
        "cue_table": state.model.cue_table,
        "step": state.step,
        "epoch": state.epoch,
    }
    checkpoint.save(path, arrays, meta)


def load_state(path, cfg: RunConfig | None = None) -> TrainState:
    arrays, meta = checkpoint.load(path)
    if cfg is None:
        if "config" not in meta:
            raise ConfigError("checkpoint has no config sidecar")
        cfg = RunConfig.from_dict(meta["config"])
    vocab = Vocabulary(meta.get("vocab", []))
    state = init_state(cfg, vocab)
    model = state.model
    dtype = DTYPES[cfg.dtype]
    with torch.no_grad():
        for n, p in model.named_parameters():
            key = f"model/{n}"
            if key not in arrays:
                raise ConfigError(f"checkpoint lacks parameter {n}")
            if tuple(arrays[key].shape) != tuple(p.shape):
                raise ConfigError(f"shape mismatch for {n}: {arrays[key].shape} vs {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arrays[key], dtype=dtype))
    params = dict(model.named_parameters())
    for n, p in params.items():
        prefix = f"optim/{n}/"
        entries = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        if entries:
            state.optimizer.state[p] = {
                k: torch.as_tensor(v, dtype=torch.float32 if k == "step" else dtype).reshape(
                    () if k == "step" else p.shape)
                for k, v in entries.items()
            }
    state.step = int(arrays.get("train/step", np.zeros(1))[0])
    model.cue_table.update(meta.get("cue_table", {}))
    return state


# --- evaluation -------------------------------------------------------------

@torch.no_grad()
def stage_responses(model: PCNet, images: torch.Tensor, texts: Sequence[str],
                    pairs: Sequence[tuple[int, int, Sequence[int]]], chunk: int = 256) -> torch.Tensor:
    """Response maps (n_pairs, N, h, w) for (image, text, negative texts) triples."""
    q0, cue_emb = model.embed_texts(texts)
    out = []
    for start in range(0, len(pairs), chunk):
        part = pairs[start:start + chunk]
        img_ids = sorted({p[0] for p in part})
        local = {g: k for k, g in enumerate(img_ids)}
        visual0 = model.encode_images(images[torch.as_tensor(img_ids)])
        states = model.run_pairs(visual0, q0, cue_emb, [local[p[0]] for p in part],
                                 [p[1] for p in part], [list(p[2]) for p in part])
        out.append(torch.stack([s.response for s in states], dim=1))
    return torch.cat(out)


def eval_negatives(dataset: Sequence[GroundingSample], i: int, b: int) -> list[int]:
    """Flat text indices for the first text of the next b-1 images (cyclic)."""
    offsets = np.cumsum([0] + [len(s.texts) for s in dataset])
    n = len(dataset)
    return [int(offsets[(i + k) % n]) for k in range(1, min(b, n))]


def evaluate(model: PCNet, dataset: Sequence[GroundingSample],
             proposals: Sequence[ProposalSet] | None, b: int = 8, split: str = "eval") -> dict:
    """Final-stage PointM/mIoU/oIoU/Oracle plus per-stage PointM, mIoU and mean ambiguity."""
    if not dataset:
        raise InvalidInputError("empty split")
    size = model.enc_cfg.image_size
    for s in dataset:
        if s.image.shape[:2] != (size, size):
            raise ConfigError(f"image {s.image_id} is {s.image.shape[:2]}, model expects {size}x{size}")
    model.eval()
    texts = all_texts(dataset)
    offsets = np.cumsum([0] + [len(s.texts) for s in dataset])
    triples = [(i, int(offsets[i]) + t, eval_negatives(dataset, i, b))
               for i, s in enumerate(dataset) for t in range(len(s.texts))]
    images = images_to_tensor([s.image for s in dataset], model.dtype)
    resp = stage_responses(model, images, texts, triples)
    n_stages = resp.shape[1]

    have_masks = proposals is not None and all(ps.n_valid for ps in proposals)
    stage_hits = [[] for _ in range(n_stages)]
    stage_preds = [[] for _ in range(n_stages)]
    stage_amb = [[] for _ in range(n_stages)]
    choice = {}
    records, gts = [], []
    for k, (i, flat_t, _) in enumerate(triples):
        t = flat_t - int(offsets[i])
        gt = dataset[i].gt_masks[t]
        gts.append(gt)
        for n in range(n_stages):
            stage_hits[n].append(point_hit(peak_point(resp[k, n], (size, size)), gt))
        pred, iou, oracle = None, 0.0, 0.0
        if have_masks:
            ps = proposals[i]
            masks = ps.as_tensor(resp.dtype)
            for n in range(n_stages):
                idx = select_index(resp[k, n], ps)
                stage_preds[n].append(ps.masks[idx])
                up = upsample(resp[k, n], ps.shape)
                al = alignment_scores(up, masks, torch.as_tensor(ps.valid))
                stage_amb[n].append(float(ambiguity(up, al.fg_mask, al.bg_mask)))
            choice[(i, t)] = idx
            pred = stage_preds[-1][-1]
            iou, oracle = binary_iou(pred, gt), oracle_eval(ps, gt)
        peak = peak_point(resp[k, -1], (size, size))
        records.append(EvalRecord(f"{dataset[i].image_id}:{t}", (peak.row, peak.col),
                                  point_hit(peak, gt), pred, iou, oracle))

    report = {"split": split, "n": len(records), "pointm": pointm(records)}
    if have_masks:
        report["miou"], report["oiou"] = miou_oiou(stage_preds[-1], gts)
        report["oracle_miou"] = float(np.mean([r.oracle_iou for r in records]))
    else:
        report["miou"] = report["oiou"] = report["oracle_miou"] = None
    report["per_stage"] = []
    for n in range(n_stages):
        entry = {"stage": n, "pointm": float(np.mean(stage_hits[n]))}
        if have_masks:
            entry["miou"] = miou_oiou(stage_preds[n], gts)[0]
            entry["mean_ambiguity"] = float(np.mean(stage_amb[n]))
        report["per_stage"].append(entry)
    pairs = same_image_pairs(dataset)
    if have_masks and pairs:
        report["separation"] = float(np.mean([choice[(i, a)] != choice[(i, d)] for i, a, d in pairs]))
    else:
        report["separation"] = None
    report["per_sample"] = [
        {"id": r.sample_id, "peak": list(r.peak), "hit": bool(r.point_hit), "iou": r.iou,
         "oracle_iou": r.oracle_iou} for r in records
    ]
    return report


@torch.no_grad()
def infer(model: PCNet, image, text: str, proposals: ProposalSet | None = None,
          negatives: Sequence[str] = ()) -> dict:
    """All stage maps for one (image, text), the final peak, and the selected mask if proposals are given."""
    model.eval()
    texts = [text, *negatives]
    images = images_to_tensor([image], model.dtype)
    resp = stage_responses(model, images, texts, [(0, 0, list(range(1, len(texts))))])[0]
    size = model.enc_cfg.image_size
    peak = peak_point(resp[-1], (size, size))
    out = {"responses": [resp[n].numpy() for n in range(resp.shape[0])], "peak": peak, "mask": None}
    if proposals is not None and proposals.n_valid:
        out["mask"] = proposals.masks[select_index(resp[-1], proposals)].copy()
    return out
