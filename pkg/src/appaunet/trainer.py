"""Supervised and semi-supervised adversarial training loops, plus evaluation.

Each semi-supervised step draws one minibatch made of a labeled and an
unlabeled sub-batch, runs the segmentor once, then

1. updates the discriminator on real pairs ``(x, y)`` of the labeled part and
   predicted pairs ``(x, S(x))`` of the whole batch, plus the class term on
   the labeled part;
2. updates the segmentor on the segmentation loss of the labeled part plus
   ``c`` times the adversarial term over the whole batch.

The discriminator update never touches segmentor parameters and vice versa.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from . import checkpoint as ckpt
from .data import Sample, _largest_remainder, _strata, to_tensors
from .discriminator import Discriminator, predict_class, prob_predicted
from .losses import (
    PROB_CLAMP,
    LossConfig,
    discriminator_unsup_loss,
    get_loss,
    segmentor_adv_loss,
    side_output_loss,
)
from .metrics import MetricReport, binarize, classification_metrics, segmentation_report, SEG_FIELDS
from .segmentor import Segmentor, SegmentorOutput

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr_segmentor: float = 1e-5
    lr_discriminator: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    labeled_fraction: float = 0.10
    loss: str = "KLTV"
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    sup_weight: float = 1.0          # class term vs real/predicted terms in the discriminator loss
    seed: int = 0
    threshold: float = 0.5
    eval_every: int = 1
    restore_best: bool = True
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    classify_with: str = "prediction"  # mask paired with the image when classifying

    def __post_init__(self):
        get_loss(self.loss)
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if self.lr_segmentor < 0 or self.lr_discriminator < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs nonnegative")
        if self.classify_with not in ("prediction", "ground_truth"):
            raise ValueError(f"classify_with must be 'prediction' or 'ground_truth', got {self.classify_with!r}")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    trace: list = field(default_factory=list)      # (epoch, step, term, value)
    history: dict = field(default_factory=dict)    # term -> per-epoch mean
    best_score: Optional[tuple] = None
    best_epoch: int = -1
    best_segmentor: Optional[dict] = None
    best_discriminator: Optional[dict] = None
    labeled: list = field(default_factory=list)
    rng_state: Optional[dict] = None
    sampler_state: Optional[dict] = None

    def epoch_mean(self, term: str) -> list:
        return self.history.get(term, [])


# --------------------------------------------------------------------------
# batching


def steps_per_epoch(m: int, b: int) -> int:
    """``floor(m / b)`` steps, at least one when there are fewer samples than a batch."""
    return max(1, m // b)


class _Cycle:
    """Endless reshuffled pass over a set of indices."""

    def __init__(self, indices):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def take(self, k: int, rng: np.random.Generator) -> np.ndarray:
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order = rng.permutation(self.indices)
                self.pos = 0
            n = min(k - len(out), len(self.order) - self.pos)
            out.extend(self.order[self.pos : self.pos + n].tolist())
            self.pos += n
        return np.asarray(out, dtype=np.int64)

    def state(self):
        return dict(order=self.order.tolist(), pos=self.pos)

    def restore(self, st):
        self.order = np.asarray(st["order"], dtype=np.int64)
        self.pos = st["pos"]


def sub_batch_sizes(n_labeled: int, n_unlabeled: int, batch_size: int) -> tuple:
    m = n_labeled + n_unlabeled
    b = min(batch_size, m)
    if n_unlabeled == 0:
        return b, 0
    nl = min(b, max(1, int(round(b * n_labeled / m))))
    return nl, b - nl


def select_labeled_subset(samples: Sequence[Sample], fraction: float, seed: int = 0) -> tuple:
    """Deterministic class-stratified choice of ``floor(fraction * len(samples))`` labeled samples.

    Only samples that carry a mask can be chosen. Returns ``(labeled, unlabeled)``
    sorted index lists.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    candidates = [i for i, s in enumerate(samples) if s.mask is not None]
    k = min(int(math.floor(fraction * len(samples) + 1e-9)), len(candidates))
    if k == 0:
        raise ValueError(f"labeled fraction {fraction} of {len(samples)} samples selects nothing")
    groups = _strata([samples[i] for i in candidates])
    keys = list(groups)
    alloc = _largest_remainder(k, [len(groups[g]) for g in keys])
    rng = np.random.default_rng(seed)
    labeled = []
    for g, n in zip(keys, alloc):
        members = [candidates[i] for i in groups[g]]
        labeled.extend(int(i) for i in rng.permutation(members)[:n])
    labeled.sort()
    chosen = set(labeled)
    return labeled, [i for i in range(len(samples)) if i not in chosen]


@dataclass
class Batch:
    x: Tensor            # all images of the step, labeled first
    y: Tensor            # masks of the labeled part
    z: Tensor            # classes of the labeled part, -1 where unknown
    n_labeled: int


# --------------------------------------------------------------------------
# single updates


def segmentation_loss(y: Tensor, out: SegmentorOutput, cfg: TrainConfig, deep_supervision: bool) -> Tensor:
    if deep_supervision:
        return side_output_loss(y, out.sides, cfg.loss_cfg, cfg.loss)
    return get_loss(cfg.loss)(y, out.final, cfg.loss_cfg)


def masked_class_loss(probs: Tensor, labels: Tensor) -> Tensor:
    """Class negative log-likelihood averaged over rows with ``labels >= 0``.

    Rows labeled -1 are multiplied out, so they receive exactly zero gradient.
    """
    keep = (labels >= 0).to(probs.dtype)
    n = keep.sum()
    if n == 0:
        return probs.new_zeros(())
    safe = labels.clamp(min=0)
    p = probs.gather(1, safe[:, None]).squeeze(1).clamp(PROB_CLAMP, 1.0)
    return -(torch.log(p) * keep).sum() / n


def discriminator_objective(discriminator: Discriminator, batch: Batch, pred: Tensor, sup_weight: float = 1.0) -> dict:
    """Discriminator loss terms (to be minimized) for one batch and fixed predictions."""
    nl = batch.n_labeled
    x = torch.cat([batch.x[:nl], batch.x])
    masks = torch.cat([batch.y, pred.detach()])
    probs = discriminator(x, masks).probs
    p_fake = probs[:, -1]
    unsup = discriminator_unsup_loss(p_fake[:nl], p_fake[nl:])
    # a single real class means every real pair belongs to it
    z = batch.z if discriminator.cfg.n_real_classes > 1 else torch.zeros_like(batch.z)
    sup = masked_class_loss(probs[:nl], z)
    return dict(d_sup=sup, d_unsup=unsup, d_total=sup_weight * sup + unsup)


def discriminator_step(discriminator, optimizer, batch: Batch, pred: Tensor, cfg: TrainConfig) -> dict:
    terms = discriminator_objective(discriminator, batch, pred, cfg.sup_weight)
    optimizer.zero_grad(set_to_none=True)
    terms["d_total"].backward()
    optimizer.step()
    return terms


def segmentor_step(segmentor, discriminator, optimizer, batch: Batch, out: SegmentorOutput, cfg: TrainConfig) -> dict:
    nl = batch.n_labeled
    labeled = SegmentorOutput(out.final[:nl], tuple(s[:nl] for s in out.sides))
    seg = segmentation_loss(batch.y, labeled, cfg, segmentor.cfg.deep_supervision)
    terms = dict(seg=seg)
    total = seg
    c = cfg.loss_cfg.c
    if discriminator is not None and c > 0:
        flags = [p.requires_grad for p in discriminator.parameters()]
        for p in discriminator.parameters():
            p.requires_grad_(False)
        try:
            adv = segmentor_adv_loss(prob_predicted(discriminator(batch.x, out.final)))
        finally:
            for p, f in zip(discriminator.parameters(), flags):
                p.requires_grad_(f)
        terms["adv"] = adv
        total = seg + c * adv
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return terms


# --------------------------------------------------------------------------
# loops


def _adam(params, lr, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def _check_finite(terms: dict, epoch: int, step: int) -> None:
    for name, v in terms.items():
        if not math.isfinite(v):
            raise TrainingDivergence(f"non-finite {name} loss ({v}) at epoch {epoch + 1}, step {step + 1}")


def _score(report: MetricReport, multitask: bool) -> tuple:
    # multi-task: summed Dice and accuracy, Dice breaks ties
    if multitask and report.accuracy is not None:
        return (report.ds + report.accuracy, report.ds)
    return (report.ds,)


def _fit(segmentor, discriminator, train, cfg: TrainConfig, val, labeled, resume, on_epoch) -> TrainState:
    # dropout draws from torch's global generator: seed it from the config, on a fork
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return _fit_loop(segmentor, discriminator, train, cfg, val, labeled, resume, on_epoch)


def _fit_loop(
    segmentor: Segmentor,
    discriminator: Optional[Discriminator],
    train: Sequence[Sample],
    cfg: TrainConfig,
    val: Optional[Sequence[Sample]],
    labeled: list,
    resume,
    on_epoch,
) -> TrainState:
    if not train:
        raise ValueError("empty training set")
    X, Y, Z = to_tensors(train)
    chosen = set(labeled)
    unlabeled = [i for i in range(len(train)) if i not in chosen]
    nl, nu = sub_batch_sizes(len(labeled), len(unlabeled), cfg.batch_size)
    lab_cycle, unl_cycle = _Cycle(labeled), _Cycle(unlabeled)
    rng = np.random.default_rng(cfg.seed)

    opt_s = _adam(segmentor.parameters(), cfg.lr_segmentor, cfg)
    opt_d = _adam(discriminator.parameters(), cfg.lr_discriminator, cfg) if discriminator is not None else None

    state = TrainState(labeled=list(labeled))
    if resume is not None:
        state = _load_training(resume, segmentor, discriminator, opt_s, opt_d)
        rng.bit_generator.state = state.rng_state
        lab_cycle.restore(state.sampler_state["labeled"])
        unl_cycle.restore(state.sampler_state["unlabeled"])

    dev = next(segmentor.parameters()).device
    steps = steps_per_epoch(len(train), cfg.batch_size)
    for epoch in range(state.epoch, cfg.epochs):
        segmentor.train()
        if discriminator is not None:
            discriminator.train()
        sums: dict = {}
        for step in range(steps):
            il = lab_cycle.take(nl, rng)
            iu = unl_cycle.take(nu, rng)
            idx = torch.from_numpy(np.concatenate([il, iu]))
            il_t = torch.from_numpy(il)
            batch = Batch(X[idx].to(dev), Y[il_t].to(dev), Z[il_t].to(dev), nl)
            out = segmentor(batch.x)
            values = {}
            if discriminator is not None:
                d_terms = discriminator_step(discriminator, opt_d, batch, out.final, cfg)
                values.update({k: float(v.detach()) for k, v in d_terms.items() if k != "d_total"})
            s_terms = segmentor_step(segmentor, discriminator, opt_s, batch, out, cfg)
            values.update({k: float(v.detach()) for k, v in s_terms.items()})
            _check_finite(values, epoch, step)
            for k, v in values.items():
                state.trace.append((epoch + 1, state.step + 1, k, v))
                sums[k] = sums.get(k, 0.0) + v
            state.step += 1
        for k, v in sums.items():
            state.history.setdefault(k, []).append(v / steps)
        state.epoch = epoch + 1

        if val and cfg.eval_every and state.epoch % cfg.eval_every == 0:
            report = evaluate(segmentor, val, discriminator, cfg.threshold, classify_with=cfg.classify_with)
            score = _score(report, discriminator is not None)
            state.history.setdefault("val_ds", []).append(report.ds)
            if report.accuracy is not None:
                state.history.setdefault("val_acc", []).append(report.accuracy)
            if state.best_score is None or score > state.best_score:
                state.best_score = score
                state.best_epoch = state.epoch
                state.best_segmentor = copy.deepcopy(segmentor.state_dict())
                if discriminator is not None:
                    state.best_discriminator = copy.deepcopy(discriminator.state_dict())
        state.rng_state = rng.bit_generator.state
        state.sampler_state = dict(labeled=lab_cycle.state(), unlabeled=unl_cycle.state())
        if cfg.checkpoint_every and cfg.checkpoint_dir and state.epoch % cfg.checkpoint_every == 0:
            save_training(cfg.checkpoint_dir, segmentor, discriminator, opt_s, opt_d, state)
        # a callback returning True ends training after this epoch
        if on_epoch is not None and on_epoch(state):
            break

    if cfg.restore_best and state.best_segmentor is not None:
        segmentor.load_state_dict(state.best_segmentor)
        if discriminator is not None and state.best_discriminator is not None:
            discriminator.load_state_dict(state.best_discriminator)
    return state


def train_supervised(
    segmentor: Segmentor,
    train: Sequence[Sample],
    cfg: TrainConfig,
    val: Optional[Sequence[Sample]] = None,
    resume=None,
    on_epoch: Optional[Callable] = None,
) -> TrainState:
    """Segmentation-only training on fully annotated samples."""
    if not train:
        raise ValueError("empty training set")
    if any(s.mask is None for s in train):
        raise ValueError("supervised training needs a mask for every sample")
    return _fit(segmentor, None, train, cfg, val, list(range(len(train))), resume, on_epoch)


def train_semisupervised(
    segmentor: Segmentor,
    discriminator: Discriminator,
    train: Sequence[Sample],
    cfg: TrainConfig,
    val: Optional[Sequence[Sample]] = None,
    resume=None,
    on_epoch: Optional[Callable] = None,
) -> TrainState:
    """Adversarial multi-task training where only ``cfg.labeled_fraction`` of samples keep annotations."""
    if not train:
        raise ValueError("empty training set")
    if not any(s.mask is not None for s in train):
        raise ValueError("semi-supervised training needs at least one labeled sample")
    labeled, _ = select_labeled_subset(train, cfg.labeled_fraction, cfg.seed)
    return _fit(segmentor, discriminator, train, cfg, val, labeled, resume, on_epoch)


# --------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(segmentor: Segmentor, samples: Sequence[Sample], batch_size: int = 32) -> np.ndarray:
    """Final probability maps, shape (N, m, m), computed in evaluation mode."""
    was_training = segmentor.training
    segmentor.eval()
    try:
        dev = next(segmentor.parameters()).device
        images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))[:, None]
        out = [segmentor(images[i : i + batch_size].to(dev)).final.cpu() for i in range(0, len(images), batch_size)]
        return torch.cat(out)[:, 0].numpy()
    finally:
        segmentor.train(was_training)


@torch.no_grad()
def classify(discriminator: Discriminator, samples: Sequence[Sample], masks: np.ndarray, batch_size: int = 32) -> np.ndarray:
    was_training = discriminator.training
    discriminator.eval()
    try:
        images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))[:, None]
        mk = torch.from_numpy(np.asarray(masks, dtype=np.float32))[:, None]
        dev = next(discriminator.parameters()).device
        out = [
            predict_class(discriminator(images[i : i + batch_size].to(dev), mk[i : i + batch_size].to(dev))).cpu()
            for i in range(0, len(images), batch_size)
        ]
        return torch.cat(out).numpy()
    finally:
        discriminator.train(was_training)


def evaluate(
    segmentor: Segmentor,
    samples: Sequence[Sample],
    discriminator: Optional[Discriminator] = None,
    threshold: float = 0.5,
    classify_with: str = "prediction",
) -> MetricReport:
    """Per-sample segmentation metrics averaged over the split, plus classification when a discriminator is given."""
    if not samples:
        raise ValueError("empty evaluation split")
    if any(s.mask is None for s in samples):
        raise ValueError("evaluation samples need ground-truth masks")
    probs = predict(segmentor, samples)
    rows = [segmentation_report(s.mask, binarize(p, threshold)) for s, p in zip(samples, probs)]
    report = MetricReport(**{k: float(np.mean([r[k] for r in rows])) for k in SEG_FIELDS}, n_samples=len(samples))
    if discriminator is not None and all(s.class_label is not None for s in samples):
        masks = probs if classify_with == "prediction" else np.stack([s.mask for s in samples])
        pred = classify(discriminator, samples, masks)
        truth = [s.class_label for s in samples]
        cm = classification_metrics(pred, truth, discriminator.cfg.n_real_classes)
        report.accuracy = cm["accuracy"]
        report.class_precision = cm["precision"]
        report.class_recall = cm["recall"]
        report.class_f1 = cm["f1"]
        counts = np.bincount(truth, minlength=discriminator.cfg.n_real_classes)
        report.extra["majority_baseline"] = float(counts.max() / counts.sum())
    return report


# --------------------------------------------------------------------------
# resumable training checkpoints


def save_training(directory, segmentor, discriminator, opt_s, opt_d, state: TrainState) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ckpt.save_model(segmentor, directory / "segmentor_last.npz")
    ckpt.save_model(segmentor, directory / f"segmentor_epoch{state.epoch:04d}.npz")
    if discriminator is not None:
        ckpt.save_model(discriminator, directory / "discriminator_last.npz")
    payload = dict(
        state=state.__dict__,
        opt_s=opt_s.state_dict(),
        opt_d=None if opt_d is None else opt_d.state_dict(),
        torch_rng=torch.get_rng_state(),
    )
    torch.save(payload, directory / "trainer_state.pt")
    return directory


def _load_training(directory, segmentor, discriminator, opt_s, opt_d) -> TrainState:
    directory = Path(directory)
    payload = torch.load(directory / "trainer_state.pt", weights_only=False)
    ckpt.load_weights(segmentor, directory / "segmentor_last.npz")
    if discriminator is not None:
        ckpt.load_weights(discriminator, directory / "discriminator_last.npz")
        opt_d.load_state_dict(payload["opt_d"])
    opt_s.load_state_dict(payload["opt_s"])
    torch.set_rng_state(payload["torch_rng"])
    return TrainState(**payload["state"])
