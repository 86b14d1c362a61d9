"""Intra-domain knowledge transfer: self-training on the split target domain.

The synthetic source is gone by construction: the training entry point only
accepts target-domain sample sets. Confident samples keep their frozen
pseudo-labels; unconfident ones are used unlabeled by MixMatch or FixMatch.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .manifest import DatasetManifest
from .nnkit import (Batch, ModelState, MomentumSgd, augment_strong,
                    augment_weak, configure_torch, derive_seed, rng)
from .splitter import SplitPartition
from .uda import TrainReport

METHODS = ("mixmatch", "fixmatch")


@dataclass
class SemiConfig:
    method: str = "mixmatch"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    sharpen_T: float = 0.5
    mixup_alpha: float = 0.75
    k_augment: int = 2
    unlabeled_weight: float = 1.0
    ramp_fraction: float = 1 / 3
    fixmatch_tau: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown SemiSL method {self.method!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.sharpen_T <= 0 or self.mixup_alpha <= 0:
            raise ValueError("lr, sharpen_T, mixup_alpha must be > 0")
        if self.k_augment < 1:
            raise ValueError("k_augment must be >= 1")
        if self.unlabeled_weight < 0:
            raise ValueError("unlabeled_weight must be >= 0")
        if not 0.0 < self.fixmatch_tau <= 1.0:
            raise ValueError("fixmatch_tau must lie in (0, 1]")


@dataclass
class LabeledSet:
    images: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass
class UnlabeledSet:
    images: np.ndarray
    provenance: dict = field(default_factory=dict)


def build_semisl_inputs(target: DatasetManifest, partition: SplitPartition):
    """Resolve a split into (LabeledSet with pseudo-labels, UnlabeledSet)."""
    table = partition.table
    if table is None:
        raise ValueError("partition has no pseudo-label table")
    conf_records = [r for r in target.records
                    if r.sample_id in partition.confident_ids]
    unconf_records = [r for r in target.records
                      if r.sample_id in partition.unconfident_ids]
    labeled = LabeledSet(
        images=target.images(conf_records),
        labels=np.array([table.entries[r.sample_id][0]
                         for r in conf_records], dtype=np.int64),
        provenance={"domain_tag": target.domain_tag,
                    "role": "confident-target", **target.provenance})
    unlabeled = UnlabeledSet(
        images=(target.images(unconf_records) if unconf_records
                else np.zeros((0,) + target.image_shape)),
        provenance={"domain_tag": target.domain_tag,
                    "role": "unconfident-target", **target.provenance})
    return labeled, unlabeled


def sharpen(p: np.ndarray, T: float) -> np.ndarray:
    """Raise probabilities to 1/T and renormalize (rows)."""
    p = np.asarray(p, dtype=np.float64)
    sums = p.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValueError("input rows must sum to 1")
    if T <= 0:
        raise ValueError("T must be > 0")
    q = p ** (1.0 / T)
    return q / q.sum(axis=-1, keepdims=True)


def mixup(x1, y1, x2, y2, lambda_raw: float):
    """Convex combination biased toward the first argument (lambda >= 0.5)."""
    x1, x2 = np.asarray(x1), np.asarray(x2)
    y1, y2 = np.asarray(y1), np.asarray(y2)
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ValueError("mixup inputs must have matching shapes")
    if not 0.0 <= lambda_raw <= 1.0:
        raise ValueError("lambda_raw must lie in [0, 1]")
    lam = max(lambda_raw, 1.0 - lambda_raw)
    return lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2


def _one_hot(labels, n):
    out = np.zeros((len(labels), n), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _soft_ce(logits, targets):
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def mixmatch_targets(model: ModelState, unlabeled_batch: Batch,
                     config: SemiConfig, seed: int) -> np.ndarray:
    """Guess labels for an unlabeled batch: average predictions over
    k_augment weak views, then sharpen. Detached from the graph."""
    model.net.eval()
    probs = []
    with torch.no_grad():
        for k in range(config.k_augment):
            view = augment_weak(unlabeled_batch, derive_seed(seed, "guess", k))
            _, logits = model.net(view.to_tensor(),
                                  head=model.head_names[0])
            probs.append(torch.softmax(logits, dim=1).numpy())
    return sharpen(np.mean(probs, axis=0), config.sharpen_T)


def mixmatch_step(model: ModelState, labeled_batch: Batch,
                  unlabeled_batch: Batch | None, config: SemiConfig,
                  lambda_u: float, seed: int, guessed=None):
    """MixMatch loss for one step: soft cross-entropy on the mixed labeled
    group plus lambda_u times L2 consistency on the mixed unlabeled group.

    `guessed` lets the caller freeze the (normally detached) label guesses.
    Returns (total_loss, components).
    """
    head = model.head_names[0]
    nrng = rng("mixmatch", seed)
    lx = augment_weak(labeled_batch, derive_seed(seed, "lab"))
    x_parts = [lx.images]
    y_parts = [_one_hot(labeled_batch.labels, model.category_count)]
    n_lab = labeled_batch.size

    if unlabeled_batch is not None and unlabeled_batch.size > 0:
        if guessed is None:
            guessed = mixmatch_targets(model, unlabeled_batch, config, seed)
        for k in range(config.k_augment):
            view = augment_weak(unlabeled_batch, derive_seed(seed, "guess", k))
            x_parts.append(view.images)
            y_parts.append(guessed)
    x_all = np.concatenate(x_parts)
    y_all = np.concatenate(y_parts)

    lam_raw = float(nrng.beta(config.mixup_alpha, config.mixup_alpha))
    perm = nrng.permutation(len(x_all))
    x_mixed, y_mixed = mixup(x_all, y_all, x_all[perm], y_all[perm], lam_raw)

    model.net.train()
    _, logits = model.net(Batch(images=x_mixed).to_tensor(), head=head)
    y_t = torch.from_numpy(y_mixed)
    loss_x = _soft_ce(logits[:n_lab], y_t[:n_lab])
    if len(x_all) > n_lab:
        probs_u = torch.softmax(logits[n_lab:], dim=1)
        loss_u = torch.mean((probs_u - y_t[n_lab:]) ** 2)
    else:
        loss_u = torch.zeros((), dtype=torch.float64)
    total = loss_x + lambda_u * loss_u
    return total, {"sup": float(loss_x.detach()),
                   "unsup": float(loss_u.detach()), "lambda_u": lambda_u}


def fixmatch_targets(model: ModelState, unlabeled_batch: Batch,
                     config: SemiConfig, seed: int):
    """Pseudo-labels and confidence mask from the weak view, detached."""
    model.net.eval()
    weak = augment_weak(unlabeled_batch, derive_seed(seed, "weak"))
    with torch.no_grad():
        _, logits = model.net(weak.to_tensor(), head=model.head_names[0])
        probs = torch.softmax(logits, dim=1).numpy()
    pseudo = probs.argmax(axis=1)
    mask = probs.max(axis=1) >= config.fixmatch_tau
    return pseudo, mask


def fixmatch_step(model: ModelState, labeled_batch: Batch,
                  unlabeled_batch: Batch | None, config: SemiConfig,
                  lambda_u: float, seed: int, targets=None):
    """FixMatch loss for one step: supervised cross-entropy on the weak
    labeled view plus lambda_u times the confidence-masked cross-entropy of
    strong unlabeled views against weak-view pseudo-labels.

    `targets` lets the caller freeze the (pseudo_labels, mask) pair.
    Returns (total_loss, components).
    """
    head = model.head_names[0]
    model.net.train()
    lx = augment_weak(labeled_batch, derive_seed(seed, "lab"))
    _, logits_x = model.net(lx.to_tensor(), head=head)
    loss_x = F.cross_entropy(logits_x, torch.from_numpy(labeled_batch.labels))

    retained = 0
    if unlabeled_batch is not None and unlabeled_batch.size > 0:
        if targets is None:
            targets = fixmatch_targets(model, unlabeled_batch, config, seed)
        pseudo, mask = targets
        model.net.train()
        strong = augment_strong(unlabeled_batch, derive_seed(seed, "strong"))
        _, logits_u = model.net(strong.to_tensor(), head=head)
        ce_u = F.cross_entropy(logits_u, torch.from_numpy(
            np.asarray(pseudo, dtype=np.int64)), reduction="none")
        mask_t = torch.from_numpy(np.asarray(mask, dtype=np.float64))
        loss_u = (ce_u * mask_t).mean()
        retained = int(mask_t.sum())
    else:
        loss_u = torch.zeros((), dtype=torch.float64)
    total = loss_x + lambda_u * loss_u
    return total, {"sup": float(loss_x.detach()),
                   "unsup": float(loss_u.detach()), "lambda_u": lambda_u,
                   "retained": retained}


def _balanced_labeled_batch(labeled: LabeledSet, batch_size, brng):
    categories = sorted(set(labeled.labels.tolist()))
    by_cat = {c: np.flatnonzero(labeled.labels == c) for c in categories}
    idx = []
    for _ in range(batch_size):
        c = categories[brng.integers(0, len(categories))]
        pool = by_cat[c]
        idx.append(int(pool[brng.integers(0, len(pool))]))
    idx = np.array(idx)
    return Batch(images=labeled.images[idx], labels=labeled.labels[idx])


def train_semisl(init: ModelState, labeled: LabeledSet,
                 unlabeled: UnlabeledSet, config: SemiConfig):
    """Self-train on the target domain starting from the stage-2 model.

    Only target-domain sample sets are accepted; the synthetic source is not
    reachable from this entry point.
    """
    configure_torch()
    if len(labeled.images) == 0:
        raise ValueError("labeled (confident) side must be non-empty")
    if labeled.labels.max() >= init.category_count:
        raise ValueError("pseudo-labels exceed the model's category count")
    start = time.monotonic()

    model = ModelState(net=copy.deepcopy(init.net),
                       category_count=init.category_count,
                       image_shape=init.image_shape,
                       rng_seed=init.rng_seed,
                       architecture_id=init.architecture_id,
                       stage_tag="stage3")
    opt = MomentumSgd(model.net.parameters(), config.lr, config.momentum,
                      config.weight_decay)

    n_unlab = len(unlabeled.images)
    steps_per_epoch = max(1, math.ceil(max(n_unlab, len(labeled.images)) /
                                       config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    ramp_steps = max(1, int(config.ramp_fraction * total_steps))

    step_fn = mixmatch_step if config.method == "mixmatch" else fixmatch_step
    losses = {"sup": [], "unsup": []}
    global_step = 0
    for epoch in range(config.epochs):
        if n_unlab:
            unlab_order = rng("semisl-unlab", config.seed,
                              epoch).permutation(n_unlab)
        epoch_sup, epoch_unsup = [], []
        for step in range(steps_per_epoch):
            brng = rng("semisl-lab", config.seed, epoch, step)
            lb = _balanced_labeled_batch(labeled, config.batch_size, brng)
            ub = None
            if n_unlab:
                lo = (step * config.batch_size) % n_unlab
                idx = unlab_order[lo:lo + config.batch_size]
                if len(idx):
                    ub = Batch(images=unlabeled.images[idx])
            lambda_u = config.unlabeled_weight * min(
                1.0, (global_step + 1) / ramp_steps)
            total, comps = step_fn(
                model, lb, ub, config, lambda_u,
                derive_seed(config.seed, "step", epoch, step))
            opt.zero_grad()
            total.backward()
            opt.step()
            epoch_sup.append(comps["sup"])
            epoch_unsup.append(comps["unsup"])
            global_step += 1
        losses["sup"].append(float(np.mean(epoch_sup)))
        losses["unsup"].append(float(np.mean(epoch_unsup)))

    model.assert_finite()
    report = TrainReport(
        losses=losses, epochs=config.epochs, stage_tag="stage3",
        config=asdict(config),
        wall_clock_s=time.monotonic() - start,
        input_provenance=[labeled.provenance, unlabeled.provenance])
    return model, report
