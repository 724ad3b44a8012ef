"""Decoder-only fine-tuning on a few-shot collection."""

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .arrayio import atomic_write_bytes
from .data import (ImageSlice, LabelMask, labels_to_native, mask_to_model_grid,
                   resize_bilinear, resize_nearest, to_model_input)
from .decoder import DecoderConfig, decode, init_decoder, save_bundle
from .encoder import cache_get_or_encode
from .metrics import evaluate_label_maps
from .prompting import build_prompt_set, embedding_grid_labels

log = logging.getLogger(__name__)


class DivergedError(RuntimeError):
    pass


def iteration_budget(n_shots):
    """50 / 80 / 100 iterations at 5 / 20 / 50 shots, linear in between,
    then one extra per shot up to 200."""
    if n_shots <= 5:
        return 50
    if n_shots <= 20:
        return int(round(50 + (n_shots - 5) * 30 / 15))
    if n_shots <= 50:
        return int(round(80 + (n_shots - 20) * 20 / 30))
    return min(100 + (n_shots - 50), 200)


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.5
    intensity_scale: tuple = (0.9, 1.1)
    intensity_shift: tuple = (-0.1, 0.1)
    contrast_gamma: tuple = (0.8, 1.25)
    noise_sigma: tuple = (0.0, 0.05)
    crop_scale: tuple = (0.7, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    max_iterations: int = None  # None -> iteration_budget(N_L)
    batch_size: int = 1
    iteration_mode: str = "epoch"  # or "batch"
    augment: bool = False
    augmentation: AugmentConfig = AugmentConfig()
    rng_seed: int = 0
    decoder_seed: int = 0

    def validate(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iteration_mode not in ("epoch", "batch"):
            raise ValueError("iteration_mode must be 'epoch' or 'batch'")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        return self


# ---------------------------------------------------------------- augmentation

def flip(img: ImageSlice, mask: LabelMask, axis):
    return (ImageSlice(np.flip(img.pixels, axis).copy(), img.spacing, img.provenance),
            LabelMask(np.flip(mask.labels, axis).copy(), mask.label_set))


def augment(img: ImageSlice, mask: LabelMask, rng, config: AugmentConfig = AugmentConfig()):
    """Random intensity and spatial transforms, each with ``config.probability``.

    Spatial transforms act on image and mask alike (nearest for the mask).
    """
    if img.pixels.shape != mask.labels.shape:
        raise ValueError("image and mask shapes differ")
    p = config.probability
    x = img.pixels.astype(np.float64)
    y = mask.labels
    if rng.random() < p:
        x = x * rng.uniform(*config.intensity_scale)
    if rng.random() < p:
        x = x + rng.uniform(*config.intensity_shift)
    if rng.random() < p:
        x = np.clip(x, 0, 1) ** rng.uniform(*config.contrast_gamma)
    if rng.random() < p:
        x = x + rng.normal(0, rng.uniform(*config.noise_sigma), size=x.shape)
    if rng.random() < p:
        axis = int(rng.integers(2))
        x, y = np.flip(x, axis), np.flip(y, axis)
    if rng.random() < p:
        h, w = x.shape
        s = rng.uniform(*config.crop_scale)
        ch, cw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        r0, c0 = int(rng.integers(h - ch + 1)), int(rng.integers(w - cw + 1))
        x = resize_bilinear(x[r0:r0 + ch, c0:c0 + cw], (h, w))
        y = resize_nearest(y[r0:r0 + ch, c0:c0 + cw], (h, w))
    x = np.clip(x, 0.0, 1.0)
    return (ImageSlice(x, img.spacing, img.provenance),
            LabelMask(np.ascontiguousarray(y), mask.label_set))


# ---------------------------------------------------------------- loss

def segmentation_loss(logits, target, label_set, smooth=1.0, check=True):
    """Mean over labels of binary cross-entropy on the (fg, bg) logit pair
    plus soft Dice on the foreground probability.

    ``logits`` (B, C, 2, H, W) or (C, 2, H, W); ``target`` integer labels
    (B, H, W) or (H, W). Averaged over the batch. ``check=False`` skips the
    label-range validation for targets already checked by the caller.
    """
    if logits.ndim == 4:
        logits, target = logits[None], target[None]
    target = torch.as_tensor(target)
    if check:
        allowed = torch.tensor([0, *label_set], dtype=target.dtype)
        if not torch.isin(target, allowed).all():
            bad = sorted(set(torch.unique(target).tolist()) - set(allowed.tolist()))
            raise ValueError(f"ground truth holds labels outside label_set: {bad}")
    total = 0.0
    for ci, l in enumerate(label_set):
        t = (target == l).to(logits.dtype)
        # two-way log-softmax: log p_fg = logsigmoid(fg - bg), log p_bg = log p_fg - (fg - bg)
        margin = logits[:, ci, 0] - logits[:, ci, 1]
        log_fg = F.logsigmoid(margin)
        ce = -(log_fg - (1 - t) * margin).mean(dim=(1, 2))
        prob = log_fg.exp()
        inter = (prob * t).sum(dim=(1, 2))
        dice = 1 - (2 * inter + smooth) / (prob.sum(dim=(1, 2)) + t.sum(dim=(1, 2)) + smooth)
        total = total + ce + dice
    return (total / len(label_set)).mean()


def loss(pred, gt: LabelMask):
    """Loss of a :class:`SegmentationPrediction` against a native-resolution mask."""
    logits = torch.as_tensor(pred.logits, dtype=torch.float64)
    size = logits.shape[-2:]
    target = torch.as_tensor(resize_nearest(gt.labels, tuple(size)).astype(np.int64))
    return float(segmentation_loss(logits, target, pred.label_set))


# ---------------------------------------------------------------- Adam

@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    loss_history: list = field(default_factory=list)

    @classmethod
    def create(cls, params):
        params = {k: torch.as_tensor(v).detach().clone() for k, v in params.items()}
        return cls(params, {k: torch.zeros_like(v) for k, v in params.items()},
                   {k: torch.zeros_like(v) for k, v in params.items()})


def adam_step(state: TrainState, grads, config: TrainConfig) -> TrainState:
    """One bias-corrected Adam update; returns a new state."""
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.eps
    t = state.step + 1
    params, m_new, v_new = {}, {}, {}
    for k, p in state.params.items():
        g = torch.as_tensor(grads[k], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not torch.isfinite(g).all():
            raise DivergedError("diverged")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        params[k] = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
        m_new[k], v_new[k] = m, v
    return TrainState(params, m_new, v_new, t, list(state.loss_history))


# ---------------------------------------------------------------- training

@dataclass
class FinetuneResult:
    decoder: object
    loss_history: list
    provenance: dict


def _embed_batch(collection, backend, cache):
    feats = [cache_get_or_encode(cache, backend, to_model_input(img)).features
             for img, _ in collection]
    return torch.from_numpy(np.stack(feats))


def _targets(collection):
    return torch.from_numpy(np.stack([mask_to_model_grid(m) for _, m in collection]).astype(np.int64))


def finetune(collection, prompts, backend, cache=None, config: TrainConfig = TrainConfig(),
             decoder_config: DecoderConfig = None, decoder=None) -> FinetuneResult:
    """Train only the mask decoder on ``collection`` using ``prompts``.

    One iteration is a full pass over the collection (``iteration_mode="epoch"``)
    or a single batch (``"batch"``); gradients are averaged per iteration and
    applied with one Adam step.
    """
    config.validate()
    collection = list(collection)
    label_set = prompts.label_set
    if prompts.encoder_identity and prompts.encoder_identity != backend.identity:
        raise ValueError("prompt set was built with a different encoder")
    if decoder is None:
        decoder_config = decoder_config or DecoderConfig(num_labels=len(label_set))
        decoder = init_decoder(decoder_config, config.decoder_seed)
    n_iter = config.max_iterations
    if n_iter is None:
        n_iter = iteration_budget(len(collection))

    enc_hash = backend.parameter_hash()
    prompt_bytes = prompts.to_bytes()
    prompt_tensor = torch.from_numpy(prompts.embeddings.copy())
    rng = np.random.default_rng(config.rng_seed)

    if not config.augment:
        feats_all, targets_all = _embed_batch(collection, backend, cache), _targets(collection)

    names = [n for n, _ in decoder.named_parameters()]
    state = TrainState.create({n: p.detach() for n, p in decoder.named_parameters()})
    n = len(collection)
    bs = config.batch_size
    batches = [list(range(i, min(i + bs, n))) for i in range(0, n, bs)]
    history = []
    decoder.train()
    for it in range(n_iter):
        if config.iteration_mode == "epoch":
            todo = batches
        else:
            todo = [batches[it % len(batches)]]
        weight = 1.0 / sum(len(b) for b in todo)
        if config.augment:
            aug = [augment(img, m, rng, config.augmentation) for img, m in collection]
            feats_all, targets_all = _embed_batch(aug, backend, cache), _targets(aug)
        for p in decoder.parameters():
            p.grad = None
        total = 0.0
        for idx in todo:
            logits = decoder(feats_all[idx], prompt_tensor)
            batch_loss = segmentation_loss(logits, targets_all[idx], label_set, check=it == 0) * len(idx) * weight
            batch_loss.backward()
            total += float(batch_loss.detach())
        if not math.isfinite(total):
            raise DivergedError(f"loss became non-finite at iteration {it}")
        history.append(total)
        grads = {k: p.grad if p.grad is not None else torch.zeros_like(p)
                 for k, p in zip(names, decoder.parameters())}
        state = adam_step(state, grads, config)
        with torch.no_grad():
            for k, p in zip(names, decoder.parameters()):
                p.copy_(state.params[k])
        log.debug("iteration %d loss %.6f", it, total)
    decoder.eval()

    if backend.parameter_hash() != enc_hash or prompts.to_bytes() != prompt_bytes:
        raise RuntimeError("encoder or prompt set changed during fine-tuning")
    provenance = {
        "n_shots": n,
        "iterations": n_iter,
        "iteration_mode": config.iteration_mode,
        "augmented": bool(config.augment),
        "train_config": _jsonable(asdict(config)),
        "decoder_config": asdict(decoder.config),
        "encoder_identity": backend.identity,
        "encoder_hash": enc_hash,
        "prompt_set_sha256": hashlib.sha256(prompt_bytes).hexdigest(),
        "fewshot_slices": [img.slice_id for img, _ in collection],
    }
    return FinetuneResult(decoder, history, provenance)


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=list))


def loss_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss"])
    for i, v in enumerate(history):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


def write_run_dir(out_dir, result: FinetuneResult, prompts, config: TrainConfig):
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_bytes(os.path.join(out_dir, "config.json"),
                       json.dumps(_jsonable(asdict(config)), indent=2, sort_keys=True).encode())
    atomic_write_bytes(os.path.join(out_dir, "loss.csv"), loss_csv(result.loss_history).encode())
    save_bundle(os.path.join(out_dir, "bundle"), result.decoder, prompts,
                config.decoder_seed, result.provenance)
    atomic_write_bytes(os.path.join(out_dir, "provenance.json"),
                       json.dumps(result.provenance, indent=2, sort_keys=True).encode())


# ---------------------------------------------------------------- evaluation

def predict(decoder, prompts, img: ImageSlice, backend, cache=None):
    """Label map at the slice's native resolution."""
    mi = to_model_input(img)
    z = cache_get_or_encode(cache, backend, mi)
    pred = decode(z, prompts, decoder)
    return labels_to_native(pred.label_map, mi.scale_meta)


def evaluate(decoder, prompts, test_set, backend, cache=None, names=None):
    pairs = []
    for img, mask in test_set:
        pred = predict(decoder, prompts, img, backend, cache)
        pairs.append((img.slice_id, pred, mask.labels, img.spacing))
    return evaluate_label_maps(pairs, prompts.label_set, names)


def fewshot_candidates(collection, rule="majority"):
    """Slices whose embedding-grid mask holds every label."""
    out = []
    for img, mask in collection:
        g = embedding_grid_labels(mask, rule)
        if all(np.any(g == l) for l in mask.label_set):
            out.append((img, mask))
    return out


@dataclass
class SweepRow:
    n_shots: int
    iou_mean: float
    iou_std: float
    assd_mean: float
    assd_std: float
    iterations: int
    report: object = None


def nshot_sweep(train_pool, test_set, sizes, backend, cache=None,
                config: TrainConfig = TrainConfig(), decoder_config=None, selection_seed=0):
    """Fine-tune and evaluate for each few-shot size.

    Few-shot sets are nested prefixes of one seeded permutation of the
    candidate pool, and every size starts from the same decoder seed.
    """
    pool = fewshot_candidates(train_pool)
    sizes = sorted(int(s) for s in sizes)
    if sizes and sizes[-1] > len(pool):
        raise ValueError(f"requested {sizes[-1]} shots but only {len(pool)} usable slices")
    order = np.random.default_rng(selection_seed).permutation(len(pool))
    rows = []
    for n in sizes:
        subset = [pool[i] for i in order[:n]]
        prompts = build_prompt_set(subset, backend, cache)
        cfg = config if config.max_iterations is not None else \
            replace(config, max_iterations=iteration_budget(n))
        res = finetune(subset, prompts, backend, cache, cfg, decoder_config)
        report = evaluate(res.decoder, prompts, test_set, backend, cache)
        ious = [r["IoU"] for r in report.per_slice]
        assds = [r["ASSD"] for r in report.per_slice if r["ASSD"] is not None]
        rows.append(SweepRow(n, float(np.mean(ious)), float(np.std(ious)),
                             float(np.mean(assds)) if assds else float("nan"),
                             float(np.std(assds)) if assds else float("nan"),
                             cfg.max_iterations, report))
        log.info("n=%d IoU %.2f ASSD %.3f", n, rows[-1].iou_mean, rows[-1].assd_mean)
    return rows


def sweep_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "iou_mean", "iou_std", "assd_mean", "assd_std"])
    for r in rows:
        w.writerow([r.n_shots, repr(r.iou_mean), repr(r.iou_std), repr(r.assd_mean), repr(r.assd_std)])
    return buf.getvalue()
