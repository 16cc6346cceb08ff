"""Training losses (cross-entropy + Lovász-Softmax), occupancy metrics
(IoU / mIoU), and the AdamW optimizer with warmup + cosine schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError


def _flat_logits(logits) -> ad.Tensor:
    t = ad._coerce(logits)
    if len(t.shape) == 4:
        X, Y, Z, C = t.shape
        t = ad.reshape(t, (X * Y * Z, C))
    if len(t.shape) != 2:
        raise ContractError("logits must be (V, C) or (X, Y, Z, C)")
    return t


def cross_entropy(logits, labels, ignore_label=None) -> ad.Tensor:
    """Mean negative log softmax probability of the true class.

    Voxels whose label equals ignore_label are dropped from the mean.
    """
    t = _flat_logits(logits)
    labels = np.asarray(labels).reshape(-1)
    n, c = t.shape
    if labels.shape[0] != n:
        raise ContractError("label count does not match logits")
    keep = np.ones(n, dtype=bool) if ignore_label is None else labels != ignore_label
    if not keep.any():
        raise ContractError("all voxels ignored in cross_entropy")
    onehot = np.zeros((n, c))
    onehot[np.arange(n)[keep], labels[keep]] = 1.0
    nll = ad.sub(ad.logsumexp(t), ad.sum_(ad.mul(t, ad.constant(onehot)),
                                          axis=-1, keepdims=True))
    masked = ad.mul(nll, ad.constant(keep.astype(np.float64).reshape(n, 1)))
    return ad.scale(ad.sum_(masked), 1.0 / float(keep.sum()))


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss along a
    descending-error ordering of the ground-truth indicator."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_softmax(probs, labels) -> ad.Tensor:
    """Lovász-Softmax over classes present in the labels.

    probs rows must sum to 1 (softmax output); the sort permutation is
    treated as constant, which is the loss's usual piecewise-linear
    gradient away from ties.
    """
    t = _flat_logits(probs)
    labels = np.asarray(labels).reshape(-1)
    present = np.unique(labels)
    losses = []
    for c in present:
        fg = (labels == c).astype(np.float64).reshape(-1, 1)
        p_c = ad.slice_(t, (slice(None), slice(int(c), int(c) + 1)))
        # e = fg when negative prob rises, (1 - p) on positives, p on negatives
        e = ad.add(ad.constant(fg), ad.mul(p_c, ad.constant(1.0 - 2.0 * fg)))
        order = np.argsort(-e.array.reshape(-1), kind="stable")
        grad = lovasz_grad(fg.reshape(-1)[order]).reshape(-1, 1)
        losses.append(ad.sum_(ad.mul(ad.gather_rows(e, order), ad.constant(grad))))
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    return ad.scale(total, 1.0 / len(losses))


def total_loss(logits, labels, ignore_label=None) -> ad.Tensor:
    """CE + Lovász with unit weights."""
    ce = cross_entropy(logits, labels, ignore_label)
    lov = lovasz_softmax(ad.softmax(_flat_logits(logits)), labels)
    return ad.add(ce, lov)


# ---------------------------------------------------------------------------
# metrics

def iou(pred_labels, gt_labels) -> float:
    """Occupied-vs-empty IoU: TP / (TP + FP + FN) after binarizing at
    label != 0.  1.0 when both grids are entirely empty."""
    p = np.asarray(pred_labels).reshape(-1) != 0
    g = np.asarray(gt_labels).reshape(-1) != 0
    if p.shape != g.shape:
        raise ContractError("shape mismatch")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


def per_class_iou(pred_labels, gt_labels, num_classes: int) -> dict:
    """IoU per semantic class 1..C-1; classes absent from both grids map
    to None."""
    p = np.asarray(pred_labels).reshape(-1)
    g = np.asarray(gt_labels).reshape(-1)
    if p.shape != g.shape:
        raise ContractError("shape mismatch")
    out = {}
    for c in range(1, num_classes):
        tp = int(np.sum((p == c) & (g == c)))
        fp = int(np.sum((p == c) & (g != c)))
        fn = int(np.sum((p != c) & (g == c)))
        out[c] = None if tp + fp + fn == 0 else tp / (tp + fp + fn)
    return out


def miou(pred_labels, gt_labels, num_classes: int, strict: bool = False) -> float:
    """Mean IoU over semantic classes present in gt or pred.

    strict=True averages over the full class set instead, scoring absent
    classes as 0 — closer to fixed-class-list benchmark protocol.
    """
    per = per_class_iou(pred_labels, gt_labels, num_classes)
    if strict:
        vals = [0.0 if v is None else v for v in per.values()]
        return float(np.mean(vals)) if vals else 1.0
    vals = [v for v in per.values() if v is not None]
    return float(np.mean(vals)) if vals else 1.0


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimConfig:
    lr: float = 2e-4            # peak learning rate
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_iters: int = 500
    total_iters: int = 10000
    lr_min: float = 1e-6


@dataclass
class OptimState:
    config: OptimConfig
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_at(step: int, config: OptimConfig) -> float:
    """Linear 0 -> lr over warmup_iters, then cosine decay to lr_min at
    total_iters; continuous at the warmup boundary."""
    if step < 0:
        raise ContractError("step must be nonnegative")
    if config.warmup_iters > 0 and step < config.warmup_iters:
        return config.lr * step / config.warmup_iters
    span = max(config.total_iters - config.warmup_iters, 1)
    frac = min(step - config.warmup_iters, span) / span
    return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + np.cos(np.pi * frac))


def adamw_step(params: dict, grads: dict, state: OptimState,
               lr_override: float | None = None) -> dict:
    """One decoupled-weight-decay Adam update, in place.

    The step counter increments first, so the first call uses the
    schedule value at step 1.
    """
    state.step += 1
    cfg = state.config
    lr = lr_at(state.step, cfg) if lr_override is None else lr_override
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient shape mismatch for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p)
    return params
