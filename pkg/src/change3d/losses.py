"""Task losses: cross-entropy, soft dice, and the similarity-loss family for
semantic change consistency.

Per-task composition (all unweighted sums):
  binary change        ce + dice
  semantic change      ce + dice over all three heads, plus similarity loss
  damage assessment    ce + dice over both heads
  captioning           ce only (PAD positions excluded)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from change3d import tensor as T
from change3d.captioner import PAD
from change3d.tensor import Tensor

log = logging.getLogger(__name__)

SIM_VARIANTS = ("l1", "l2", "contrastive", "angular", "cosine")
_NORM_FLOOR = 1e-12


@dataclass
class LossConfig:
    sim_variant: str = "cosine"
    contrastive_margin: float = 0.5
    dice_eps: float = 1.0

    def __post_init__(self):
        if self.sim_variant not in SIM_VARIANTS:
            raise ValueError(f"sim_variant must be one of {SIM_VARIANTS}")
        if not 0.0 < self.contrastive_margin <= 1.0:
            raise ValueError("contrastive_margin must lie in (0, 1]")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be positive")


def cross_entropy(logits: Tensor, target: np.ndarray,
                  ignore_index: int | None = None) -> Tensor:
    """Mean NLL of the target class.  Class axis is 1 for (N, C, ...) maps and
    -1 for (B, L, V) caption logits."""
    target = np.asarray(target)
    class_axis = 1 if logits.ndim == target.ndim + 1 and \
        logits.shape[0] == target.shape[0] and \
        logits.shape[2:] == target.shape[1:] else -1
    return T.cross_entropy(logits, target, class_axis=class_axis,
                           ignore_index=ignore_index)


def one_hot(labels: np.ndarray, num_classes: int, class_axis: int = 1,
            dtype=np.float32) -> np.ndarray:
    eye = np.eye(num_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, class_axis)


def dice(probs: Tensor, target_onehot: np.ndarray, eps: float = 1.0) -> Tensor:
    """Soft dice: 1 - mean_c (2*sum(p_c*g_c)+eps) / (sum(p_c)+sum(g_c)+eps).

    ``probs`` must be softmax outputs with the class axis at 1 for batched
    (N, C, H, W) input or 0 for (C, H, W); sums aggregate over batch+pixels.
    """
    target_onehot = np.asarray(target_onehot)
    if probs.shape != target_onehot.shape:
        raise ValueError(f"probs {probs.shape} vs one-hot target "
                         f"{target_onehot.shape}")
    class_axis = 0 if probs.ndim == 3 else 1
    sums = probs.data.sum(axis=class_axis)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError("dice expects normalized probabilities "
                         "(class sums deviate from 1 by more than 1e-4)")
    reduce_axes = tuple(ax for ax in range(probs.ndim) if ax != class_axis)
    inter = T.sum_(T.mul(probs, Tensor(target_onehot, dtype=probs.dtype)), reduce_axes)
    gsum = Tensor(target_onehot.sum(axis=reduce_axes), dtype=probs.dtype)
    denom = T.add(T.sum_(probs, reduce_axes), gsum)
    per_class = T.div(T.add(T.mul(inter, 2.0), eps), T.add(denom, eps))
    return T.sub(1.0, T.mean(per_class))


def _channel_stats(s1: Tensor, s2: Tensor):
    """Per-pixel channel dot product and clamped norms; channel axis is -3."""
    ch_axis = s1.ndim - 3
    dot = T.sum_(T.mul(s1, s2), ch_axis)
    n1 = T.sqrt(T.clamp_min(T.sum_(T.mul(s1, s1), ch_axis), _NORM_FLOOR))
    n2 = T.sqrt(T.clamp_min(T.sum_(T.mul(s2, s2), ch_axis), _NORM_FLOOR))
    return dot, n1, n2, ch_axis


def _cosine(s1: Tensor, s2: Tensor) -> Tensor:
    dot, n1, n2, _ = _channel_stats(s1, s2)
    denom = T.clamp_min(T.mul(n1, n2), _NORM_FLOOR)
    if float(np.min(n1.data * n2.data)) <= _NORM_FLOOR:
        log.warning("similarity loss: zero-norm feature vector, cosine treated as 0")
    return T.div(dot, denom)


def similarity_loss(s1: Tensor, s2: Tensor, change: np.ndarray,
                    cfg: LossConfig) -> Tensor:
    """Consistency loss between the two semantic heads' pre-classifier
    features: pull them together on unchanged pixels, apart on changed ones.

    ``change`` is the ground-truth binary map broadcast over pixels (shape
    equal to the features minus the channel axis).
    """
    if s1.shape != s2.shape:
        raise ValueError(f"feature shape mismatch: {s1.shape} vs {s2.shape}")
    c = np.asarray(change).astype(s1.dtype)
    expect = s1.shape[:-3] + s1.shape[-2:]
    if c.shape != expect:
        raise ValueError(f"change map shape {c.shape}, expected {expect}")
    cc = Tensor(c, dtype=s1.dtype)
    inv = Tensor((1.0 - c), dtype=s1.dtype)

    variant = cfg.sim_variant
    if variant == "cosine":
        cos = _cosine(s1, s2)
        return T.mean(T.add(T.mul(inv, T.sub(1.0, cos)), T.mul(cc, T.relu(cos))))
    if variant == "angular":
        # cosine form evaluated on angle similarity 1 - arccos(cos)/pi
        cos = _cosine(s1, s2)
        theta = T.mul(T.arccos(cos), 1.0 / np.pi)
        sim = T.sub(1.0, theta)
        return T.mean(T.add(T.mul(inv, theta), T.mul(cc, T.relu(sim))))
    if variant in ("l1", "l2"):
        ch_axis = s1.ndim - 3
        d = T.sub(s1, s2)
        if variant == "l1":
            dist = T.mean(T.abs_(d), ch_axis)
        else:
            dist = T.sqrt(T.clamp_min(T.mean(T.mul(d, d), ch_axis), _NORM_FLOOR))
        # corpus hinge at zero: unchanged-pixel distance should not exceed
        # changed-pixel distance
        return T.relu(T.sub(T.mean(T.mul(inv, dist)), T.mean(T.mul(cc, dist))))
    # contrastive on unit-normalized features
    dot, n1, n2, _ = _channel_stats(s1, s2)
    cos = T.div(dot, T.clamp_min(T.mul(n1, n2), _NORM_FLOOR))
    dsq = T.clamp_min(T.sub(2.0, T.mul(cos, 2.0)), 0.0)  # |u1-u2|^2 = 2-2cos
    dist = T.sqrt(T.clamp_min(dsq, _NORM_FLOOR))
    hinge = T.relu(T.sub(cfg.contrastive_margin, dist))
    return T.mean(T.add(T.mul(inv, dsq), T.mul(cc, T.mul(hinge, hinge))))


def _seg_terms(logits: Tensor, labels: np.ndarray, eps: float):
    n_cls = logits.shape[1]
    ce = cross_entropy(logits, labels)
    probs = T.softmax(logits, axis=1)
    dc = dice(probs, one_hot(labels, n_cls, class_axis=1, dtype=logits.data.dtype), eps)
    return ce, dc


def task_loss(task: str, outputs: dict, labels: dict,
              cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Total loss plus per-term values for logging/verification."""
    terms: dict[str, Tensor] = {}
    if task == "bcd":
        ce, dc = _seg_terms(outputs["binary"], labels["binary"], cfg.dice_eps)
        terms["ce_binary"], terms["dice_binary"] = ce, dc
    elif task == "scd":
        for name in ("binary", "sem1", "sem2"):
            ce, dc = _seg_terms(outputs[name], labels[name], cfg.dice_eps)
            terms[f"ce_{name}"], terms[f"dice_{name}"] = ce, dc
        terms["sim"] = similarity_loss(outputs["feat1"], outputs["feat2"],
                                       labels["binary"], cfg)
    elif task == "bda":
        for name in ("loc", "damage"):
            ce, dc = _seg_terms(outputs[name], labels[name], cfg.dice_eps)
            terms[f"ce_{name}"], terms[f"dice_{name}"] = ce, dc
    elif task == "cc":
        terms["ce_caption"] = cross_entropy(outputs["caption_logits"],
                                            labels["caption_ids"],
                                            ignore_index=PAD)
    else:
        raise ValueError(f"unknown task {task!r}")

    total = None
    for t in terms.values():
        total = t if total is None else T.add(total, t)
    return total, {k: float(v.data) for k, v in terms.items()}
