"""Inter-domain knowledge transfer: train on labeled synthetic data plus
unlabeled target data.

Trainers are registered by id so external methods can plug in; shipped ones
are source_only (baseline), dann (gradient-reversal adversarial alignment),
and mcd (two-head maximum classifier discrepancy).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .manifest import DatasetManifest
from .nnkit import (Batch, ModelState, MomentumSgd, augment_weak, build_model,
                    configure_torch, derive_seed, rng, softmax)


@dataclass
class UdaConfig:
    trainer_id: str = "dann"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dann_gamma: float = 10.0
    mcd_inner_steps: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.mcd_inner_steps < 1:
            raise ValueError("mcd_inner_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainReport:
    losses: dict[str, list[float]]
    epochs: int
    stage_tag: str
    config: dict
    final_target_accuracy: float | None = None
    wall_clock_s: float = 0.0
    input_provenance: list = field(default_factory=list)

    def to_dict(self) -> dict:
        # wall clock is reported separately; it must not leak into
        # byte-compared artifacts
        return {"losses": self.losses, "epochs": self.epochs,
                "stage_tag": self.stage_tag, "config": self.config,
                "final_target_accuracy": self.final_target_accuracy,
                "input_provenance": self.input_provenance}

    def write(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class GradReverseFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lam * grad_output, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity on forward; scales the gradient by -lam on backward."""
    return GradReverseFn.apply(x, lam)


def dann_lambda(p: float, gamma: float = 10.0) -> float:
    """Reversal coefficient schedule over training progress p in [0, 1]."""
    return 2.0 / (1.0 + math.exp(-gamma * p)) - 1.0


class DomainDiscriminator(nn.Module):
    def __init__(self, feature_dim=128, hidden=64):
        super().__init__()
        # GELU keeps the discriminator smooth for finite-difference checks
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden), nn.GELU(),
            nn.Linear(hidden, 1))

    def forward(self, feats):
        return self.net(feats).squeeze(-1)


def discrepancy(p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between two softmax outputs."""
    return torch.mean(torch.abs(p1 - p2))


def predict_probs(model: ModelState, images: np.ndarray,
                  batch_size: int = 256) -> np.ndarray:
    """Head-averaged softmax probabilities, eval mode."""
    model.net.eval()
    chunks = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = Batch(images=images[i:i + batch_size]).to_tensor()
            feats = model.net.features(x)
            probs = [torch.softmax(model.net.heads[h](feats), dim=1)
                     for h in model.net.heads]
            chunks.append(torch.stack(probs).mean(dim=0).numpy())
    return np.concatenate(chunks)


def accuracy(model: ModelState, images: np.ndarray,
             labels: np.ndarray) -> float:
    preds = predict_probs(model, images).argmax(axis=1)
    return float(np.mean(preds == labels))


def _epoch_batches(n, batch_size, seed, epoch, role):
    perm = rng("batch-order", seed, epoch, role).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_pair(source: DatasetManifest, target: DatasetManifest):
    if source.category_names != target.category_names:
        raise ValueError("source/target category lists differ: "
                         f"{source.category_names} vs {target.category_names}")


def _target_accuracy(model, target):
    if target is not None and target.has_labels():
        return accuracy(model, target.images(), target.labels())
    return None


def train_source_only(source: DatasetManifest, config: UdaConfig,
                      target: DatasetManifest | None = None):
    """Cross-entropy on the labeled source only; the no-adaptation baseline.

    A target manifest, when given, is used purely for end-of-run reporting.
    """
    configure_torch()
    if not source.has_labels():
        raise ValueError("source manifest must be fully labeled")
    start = time.monotonic()
    model = build_model(source.category_count, source.image_shape,
                        derive_seed(config.seed, "source-only"))
    opt = MomentumSgd(model.net.parameters(), config.lr, config.momentum,
                      config.weight_decay)
    images, labels = source.images(), source.labels()

    losses = {"ce": []}
    for epoch in range(config.epochs):
        model.net.train()
        epoch_ce = []
        for b, idx in enumerate(_epoch_batches(len(images), config.batch_size,
                                               config.seed, epoch, "src")):
            batch = augment_weak(
                Batch(images=images[idx], labels=labels[idx]),
                derive_seed(config.seed, "aug", epoch, b))
            x = batch.to_tensor()
            y = torch.from_numpy(batch.labels)
            _, logits = model.net(x)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_ce.append(float(loss.detach()))
        losses["ce"].append(float(np.mean(epoch_ce)))

    model.assert_finite()
    model.stage_tag = "stage2"
    report = TrainReport(
        losses=losses, epochs=config.epochs, stage_tag="stage2",
        config=asdict(config),
        final_target_accuracy=_target_accuracy(model, target),
        wall_clock_s=time.monotonic() - start,
        input_provenance=[source.provenance])
    return model, report


def train_dann(source: DatasetManifest, target: DatasetManifest,
               config: UdaConfig):
    """Adversarial alignment of source and target features.

    The classifier minimizes source cross-entropy; a domain discriminator is
    trained with binary cross-entropy on features passed through a gradient
    reversal whose coefficient follows dann_lambda over training progress.
    Target labels, if present in the manifest, never reach the loss.
    """
    configure_torch()
    if not source.has_labels():
        raise ValueError("source manifest must be fully labeled")
    _check_pair(source, target)
    start = time.monotonic()
    model = build_model(source.category_count, source.image_shape,
                        derive_seed(config.seed, "dann"))
    disc = DomainDiscriminator().double()
    dgen = torch.Generator().manual_seed(derive_seed(config.seed, "dann-disc"))
    with torch.no_grad():
        for p in disc.parameters():
            p.uniform_(-0.05, 0.05, generator=dgen)
    opt = MomentumSgd(list(model.net.parameters()) + list(disc.parameters()),
                      config.lr, config.momentum, config.weight_decay)

    src_images, src_labels = source.images(), source.labels()
    tgt_images = target.images()

    steps_per_epoch = math.ceil(len(src_images) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    global_step = 0

    losses = {"ce": [], "domain": []}
    for epoch in range(config.epochs):
        model.net.train()
        disc.train()
        src_batches = _epoch_batches(len(src_images), config.batch_size,
                                     config.seed, epoch, "src")
        tgt_batches = _epoch_batches(len(tgt_images), config.batch_size,
                                     config.seed, epoch, "tgt")
        epoch_ce, epoch_dom = [], []
        for b, sidx in enumerate(src_batches):
            tidx = tgt_batches[b % len(tgt_batches)]
            lam = dann_lambda(global_step / max(total_steps - 1, 1),
                              config.dann_gamma)
            sb = augment_weak(Batch(images=src_images[sidx],
                                    labels=src_labels[sidx]),
                              derive_seed(config.seed, "aug-s", epoch, b))
            tb = augment_weak(Batch(images=tgt_images[tidx]),
                              derive_seed(config.seed, "aug-t", epoch, b))
            xs, xt = sb.to_tensor(), tb.to_tensor()
            ys = torch.from_numpy(sb.labels)

            feats_s, logits_s = model.net(xs)
            feats_t = model.net.features(xt)
            ce = F.cross_entropy(logits_s, ys)

            feats_all = torch.cat([feats_s, feats_t], dim=0)
            dom_target = torch.cat([
                torch.zeros(len(sidx), dtype=torch.float64),
                torch.ones(len(tidx), dtype=torch.float64)])
            dom_logits = disc(grad_reverse(feats_all, lam))
            dom = F.binary_cross_entropy_with_logits(dom_logits, dom_target)

            opt.zero_grad()
            (ce + dom).backward()
            opt.step()
            epoch_ce.append(float(ce.detach()))
            epoch_dom.append(float(dom.detach()))
            global_step += 1
        losses["ce"].append(float(np.mean(epoch_ce)))
        losses["domain"].append(float(np.mean(epoch_dom)))

    model.assert_finite()
    model.stage_tag = "stage2"
    report = TrainReport(
        losses=losses, epochs=config.epochs, stage_tag="stage2",
        config=asdict(config),
        final_target_accuracy=_target_accuracy(model, target),
        wall_clock_s=time.monotonic() - start,
        input_provenance=[source.provenance, target.provenance])
    return model, report


def train_mcd(source: DatasetManifest, target: DatasetManifest,
              config: UdaConfig):
    """Maximum classifier discrepancy with two heads.

    Per step: (A) source cross-entropy on both heads, all parameters;
    (B) heads maximize target discrepancy while keeping source accuracy,
    extractor frozen; (C) extractor minimizes target discrepancy for
    mcd_inner_steps, heads frozen. Prediction averages the two heads.
    """
    configure_torch()
    if not source.has_labels():
        raise ValueError("source manifest must be fully labeled")
    _check_pair(source, target)
    start = time.monotonic()
    model = build_model(source.category_count, source.image_shape,
                        derive_seed(config.seed, "mcd"),
                        head_names=("h1", "h2"))
    if len(model.head_names) < 2:
        raise ValueError("mcd needs a model with two classifier heads")
    opt_all = MomentumSgd(model.net.parameters(), config.lr, config.momentum,
                          config.weight_decay)
    opt_heads = MomentumSgd(model.net.heads.parameters(), config.lr,
                            config.momentum, config.weight_decay)
    opt_extractor = MomentumSgd(model.net.extractor.parameters(), config.lr,
                                config.momentum, config.weight_decay)

    src_images, src_labels = source.images(), source.labels()
    tgt_images = target.images()

    def src_ce(xs, ys):
        feats = model.net.features(xs)
        return (F.cross_entropy(model.net.heads["h1"](feats), ys) +
                F.cross_entropy(model.net.heads["h2"](feats), ys))

    def tgt_disc(xt):
        feats = model.net.features(xt)
        p1 = torch.softmax(model.net.heads["h1"](feats), dim=1)
        p2 = torch.softmax(model.net.heads["h2"](feats), dim=1)
        return discrepancy(p1, p2)

    losses = {"ce": [], "discrepancy": []}
    for epoch in range(config.epochs):
        model.net.train()
        src_batches = _epoch_batches(len(src_images), config.batch_size,
                                     config.seed, epoch, "src")
        tgt_batches = _epoch_batches(len(tgt_images), config.batch_size,
                                     config.seed, epoch, "tgt")
        epoch_ce, epoch_disc = [], []
        for b, sidx in enumerate(src_batches):
            tidx = tgt_batches[b % len(tgt_batches)]
            sb = augment_weak(Batch(images=src_images[sidx],
                                    labels=src_labels[sidx]),
                              derive_seed(config.seed, "aug-s", epoch, b))
            tb = augment_weak(Batch(images=tgt_images[tidx]),
                              derive_seed(config.seed, "aug-t", epoch, b))
            xs, xt = sb.to_tensor(), tb.to_tensor()
            ys = torch.from_numpy(sb.labels)

            # phase A
            loss_a = src_ce(xs, ys)
            opt_all.zero_grad()
            loss_a.backward()
            opt_all.step()

            # phase B: heads only
            loss_b = src_ce(xs, ys) - tgt_disc(xt)
            opt_heads.zero_grad()
            opt_extractor.zero_grad()
            loss_b.backward()
            opt_heads.step()

            # phase C: extractor only
            for _ in range(config.mcd_inner_steps):
                loss_c = tgt_disc(xt)
                opt_extractor.zero_grad()
                opt_heads.zero_grad()
                loss_c.backward()
                opt_extractor.step()

            epoch_ce.append(float(loss_a.detach()) / 2.0)
            epoch_disc.append(float(loss_c.detach()))
        losses["ce"].append(float(np.mean(epoch_ce)))
        losses["discrepancy"].append(float(np.mean(epoch_disc)))

    model.assert_finite()
    model.stage_tag = "stage2"
    report = TrainReport(
        losses=losses, epochs=config.epochs, stage_tag="stage2",
        config=asdict(config),
        final_target_accuracy=_target_accuracy(model, target),
        wall_clock_s=time.monotonic() - start,
        input_provenance=[source.provenance, target.provenance])
    return model, report


_TRAINERS = {}


def register_trainer(trainer_id: str, implementation) -> None:
    if trainer_id in _TRAINERS:
        raise ValueError(f"trainer id already registered: {trainer_id!r}")
    _TRAINERS[trainer_id] = implementation


def get_trainer(trainer_id: str):
    try:
        return _TRAINERS[trainer_id]
    except KeyError:
        raise KeyError(f"unknown trainer {trainer_id!r}; registered: "
                       f"{sorted(_TRAINERS)}") from None


def registered_trainers() -> list[str]:
    return sorted(_TRAINERS)


def run_uda(trainer_id: str, source: DatasetManifest,
            target: DatasetManifest | None, config: UdaConfig):
    trainer = get_trainer(trainer_id)
    if trainer_id == "source_only":
        return trainer(source, config, target)
    return trainer(source, target, config)


register_trainer("source_only", train_source_only)
register_trainer("dann", train_dann)
register_trainer("mcd", train_mcd)
