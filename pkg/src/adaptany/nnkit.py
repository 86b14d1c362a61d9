"""Differentiable-model substrate shared by all trainers.

A small convolutional extractor with named linear heads, momentum SGD,
seeded augmentations, and a finite-difference gradient checker. Everything
runs in float64 on CPU with single-threaded torch so repeated runs are
bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .seeding import derive_seed, rng

FEATURE_DIM = 128
DEFAULT_ARCHITECTURE = "conv3_gelu_gap128"

_torch_configured = False


def configure_torch() -> None:
    global _torch_configured
    if _torch_configured:
        return
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    _torch_configured = True


class NonFiniteError(RuntimeError):
    """A loss, gradient, or parameter became NaN/Inf."""


@dataclass
class Batch:
    """Images as (N, H, W, C) float64 in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray | None = None
    domain_flags: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError("images must be a non-empty (N, H, W, C) array")
        n = self.images.shape[0]
        if self.labels is not None and len(self.labels) != n:
            raise ValueError("labels length mismatch")
        if self.domain_flags is not None and len(self.domain_flags) != n:
            raise ValueError("domain_flags length mismatch")

    @property
    def size(self) -> int:
        return self.images.shape[0]

    def to_tensor(self) -> torch.Tensor:
        # NHWC float64 -> NCHW
        return torch.from_numpy(
            np.ascontiguousarray(self.images.transpose(0, 3, 1, 2)))


class ClassifierNet(nn.Module):
    def __init__(self, category_count, head_names=("main",)):
        super().__init__()
        # GroupNorm keeps train and eval forward identical (no batch
        # coupling, no running stats), which the determinism contracts need.
        # GELU and AvgPool instead of ReLU and MaxPool: kinks and max
        # near-ties make finite differences diverge from autograd, which
        # breaks the gradient-check contract; both replacements are smooth.
        self.extractor = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.GroupNorm(4, 16), nn.GELU(),
            nn.AvgPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.GroupNorm(8, 32), nn.GELU(),
            nn.AvgPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.GroupNorm(8, 64), nn.GELU(),
            nn.AdaptiveAvgPool2d((2, 2)),
            nn.Flatten(),
            nn.Linear(256, FEATURE_DIM), nn.GELU(),
        )
        self.heads = nn.ModuleDict({
            name: nn.Linear(FEATURE_DIM, category_count)
            for name in head_names})

    def features(self, x):
        return self.extractor(x)

    def forward(self, x, head="main"):
        feats = self.extractor(x)
        return feats, self.heads[head](feats)


@dataclass
class ModelState:
    net: ClassifierNet
    category_count: int
    image_shape: tuple[int, int, int]
    rng_seed: int
    architecture_id: str = DEFAULT_ARCHITECTURE
    stage_tag: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def head_names(self) -> list[str]:
        return list(self.net.heads.keys())

    def assert_finite(self) -> None:
        for name, p in self.net.state_dict().items():
            if p.is_floating_point() and not torch.isfinite(p).all():
                raise NonFiniteError(f"non-finite parameter tensor: {name}")


def build_model(category_count, image_shape, seed,
                head_names=("main",)) -> ModelState:
    configure_torch()
    if category_count < 2:
        raise ValueError("need at least 2 categories")
    gen = torch.Generator().manual_seed(derive_seed("model-init", seed))
    net = ClassifierNet(category_count, head_names).double()
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, a=5 ** 0.5, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-0.05, 0.05, generator=gen)
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return ModelState(net=net, category_count=category_count,
                      image_shape=tuple(image_shape), rng_seed=seed)


def forward(model: ModelState, batch: Batch, head: str = "main"):
    """Eval-mode forward pass; returns (features, logits) as numpy arrays."""
    if head not in model.net.heads:
        raise KeyError(f"unknown head {head!r}; have {model.head_names}")
    if batch.images.shape[1:] != model.image_shape:
        raise ValueError(f"batch shape {batch.images.shape[1:]} != model "
                         f"shape {model.image_shape}")
    model.net.eval()
    with torch.no_grad():
        feats, logits = model.net(batch.to_tensor(), head=head)
    return feats.numpy(), logits.numpy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sgd_step(theta, grad, velocity=None, lr=0.01, momentum=0.0,
             weight_decay=0.0):
    """One momentum-SGD update on flat vectors; returns (theta', velocity')."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape:
        raise ValueError("grads not shape-compatible with parameters")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient; step rejected")
    if velocity is None:
        velocity = np.zeros_like(theta)
    velocity = momentum * velocity + grad + weight_decay * theta
    new_theta = theta - lr * velocity
    if not np.all(np.isfinite(new_theta)):
        raise NonFiniteError("non-finite parameters after step")
    return new_theta, velocity


class MomentumSgd:
    """Momentum SGD over torch parameters, same update rule as sgd_step."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        if lr <= 0:
            raise ValueError("lr must be > 0")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if not torch.isfinite(p.grad).all():
                raise NonFiniteError("non-finite gradient; step rejected")
            v.mul_(self.momentum).add_(p.grad).add_(p, alpha=self.weight_decay)
            p.add_(v, alpha=-self.lr)
            if not torch.isfinite(p).all():
                raise NonFiniteError("non-finite parameters after step")


def grad_check(loss_fn, module: nn.Module, probe_count=20, epsilon=1e-4,
               seed=0, fd_loss_fn=None) -> float:
    """Max relative error between autograd and central finite differences.

    loss_fn is a zero-argument closure evaluating a scalar torch loss from
    the module's current parameters. fd_loss_fn, when given, is the function
    the finite differences are taken of; this supports losses whose backward
    pass intentionally differs from the forward value, such as gradient
    reversal, where the backward of loss_fn matches the true derivative of a
    different surrogate objective.
    """
    configure_torch()
    if fd_loss_fn is None:
        fd_loss_fn = loss_fn
    params = [p for p in module.parameters() if p.requires_grad]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteError("loss is not finite at the checked point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat_grad = np.concatenate([
        (torch.zeros_like(p) if g is None else g).detach().numpy().ravel()
        for p, g in zip(params, grads)])

    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    coords = rng("grad-check", seed).choice(total, size=min(probe_count, total),
                                            replace=False)

    def perturb(coord, delta):
        pi = int(np.searchsorted(offsets, coord, side="right") - 1)
        local = int(coord - offsets[pi])
        with torch.no_grad():
            params[pi].view(-1)[local] += delta

    max_rel = 0.0
    for coord in coords:
        coord = int(coord)
        perturb(coord, +epsilon)
        with torch.no_grad():
            lp = float(fd_loss_fn())
        perturb(coord, -2 * epsilon)
        with torch.no_grad():
            lm = float(fd_loss_fn())
        perturb(coord, +epsilon)
        fd = (lp - lm) / (2 * epsilon)
        a = flat_grad[coord]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        max_rel = max(max_rel, rel)
    return max_rel


def _shift2d(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = img[ys_src, xs_src]
    return out


def augment_weak(batch: Batch, seed: int) -> Batch:
    """Random horizontal flip plus <=2px translation, per sample."""
    arng = rng("augment-weak", seed)
    out = np.empty_like(batch.images)
    for i in range(batch.size):
        img = batch.images[i]
        if arng.random() < 0.5:
            img = img[:, ::-1, :]
        dy, dx = arng.integers(-2, 3, size=2)
        out[i] = _shift2d(img, int(dy), int(dx))
    return Batch(images=out, labels=batch.labels,
                 domain_flags=batch.domain_flags)


def augment_strong(batch: Batch, seed: int) -> Batch:
    """Weak policy plus color jitter, random erase, heavier translation."""
    weak = augment_weak(batch, seed)
    arng = rng("augment-strong", seed)
    out = np.empty_like(weak.images)
    h, w = weak.images.shape[1:3]
    for i in range(weak.size):
        img = weak.images[i].copy()
        dy, dx = arng.integers(-4, 5, size=2)
        img = _shift2d(img, int(dy), int(dx))
        scale = arng.uniform(0.6, 1.4, size=3)
        offset = arng.uniform(-0.15, 0.15, size=3)
        img = img * scale[None, None, :] + offset[None, None, :]
        eh = int(arng.integers(h // 8, h // 2 + 1))
        ew = int(arng.integers(w // 8, w // 2 + 1))
        ey = int(arng.integers(0, h - eh + 1))
        ex = int(arng.integers(0, w - ew + 1))
        img[ey:ey + eh, ex:ex + ew, :] = 0.5
        out[i] = np.clip(img, 0.0, 1.0)
    return Batch(images=out, labels=weak.labels,
                 domain_flags=weak.domain_flags)


def save_checkpoint(model: ModelState, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "architecture_id": model.architecture_id,
        "category_count": model.category_count,
        "image_shape": list(model.image_shape),
        "rng_seed": model.rng_seed,
        "stage_tag": model.stage_tag,
        "head_names": model.head_names,
        "extra": model.extra,
    }
    (out_dir / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")
    np.save(out_dir / "extractor.npy", _state_vector(model.net.extractor))
    for name, head in model.net.heads.items():
        np.save(out_dir / f"head_{name}.npy", _state_vector(head))
    return out_dir


def load_checkpoint(ckpt_dir) -> ModelState:
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / "meta.json").read_text())
    if meta["architecture_id"] != DEFAULT_ARCHITECTURE:
        raise ValueError(f"unknown architecture {meta['architecture_id']!r}")
    model = build_model(meta["category_count"], tuple(meta["image_shape"]),
                        meta["rng_seed"], head_names=tuple(meta["head_names"]))
    model.stage_tag = meta["stage_tag"]
    model.extra = meta.get("extra", {})
    _load_state_vector(model.net.extractor,
                       np.load(ckpt_dir / "extractor.npy"))
    for name, head in model.net.heads.items():
        _load_state_vector(head, np.load(ckpt_dir / f"head_{name}.npy"))
    return model


def _state_vector(module: nn.Module) -> np.ndarray:
    parts = [t.detach().cpu().numpy().astype(np.float64).ravel()
             for t in module.state_dict().values()]
    return np.concatenate(parts) if parts else np.zeros(0)


def _load_state_vector(module: nn.Module, vec: np.ndarray) -> None:
    state = module.state_dict()
    expected = sum(t.numel() for t in state.values())
    if vec.size != expected:
        raise ValueError(f"checkpoint vector length {vec.size} != "
                         f"registry size {expected}")
    offset = 0
    with torch.no_grad():
        for t in state.values():
            n = t.numel()
            chunk = vec[offset:offset + n].reshape(tuple(t.shape))
            t.copy_(torch.from_numpy(chunk).to(t.dtype))
            offset += n
