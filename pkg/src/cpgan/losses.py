"""Loss terms of the consistent-perception objective.

Class indices for the 3-way discriminator: 0 = original-orientation
prediction, 1 = prediction of the rotated input, 2 = ground-truth mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cpgan import tensor as T
from cpgan.tensor import ShapeError, Tensor

ORIG, ROT, REAL = 0, 1, 2
CLAMP_EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class LossBundle:
    l_seg: float = 0.0
    l_rot: float = 0.0
    l_adv: float = 0.0
    l_disc_sup: float = 0.0
    l_disc_unsup: float = 0.0
    lambda_rot: float = 0.1
    lambda_adv: float = 0.1

    @property
    def generator_total(self) -> float:
        return self.l_seg + self.lambda_rot * self.l_rot + self.lambda_adv * self.l_adv

    @property
    def discriminator_total(self) -> float:
        return self.l_disc_sup + self.l_disc_unsup


def _check_shapes(a: Tensor, b, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def rotation_loss(pred_rot: Tensor, pred_orig: Tensor) -> Tensor:
    """Mean squared disagreement between S(R(x)) and R(S(x))."""
    _check_shapes(pred_rot, pred_orig, "rotation_loss")
    return T.mean(T.square(T.sub(pred_rot, T.rotate180(pred_orig))))


def _gt_tensor(gt, like: Tensor) -> Tensor:
    g = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=like.dtype))
    vals = g.data
    if not np.all((vals == 0) | (vals == 1)):
        raise ValueError("ground truth must be binary (values in {0, 1})")
    return g


def seg_loss(pred: Tensor, gt) -> Tensor:
    """Pixelwise binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    g = _gt_tensor(gt, pred)
    _check_shapes(pred, g, "seg_loss")
    p = T.clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pos = T.mul(g, T.log(p))
    neg = T.mul(T.sub(1.0, g), T.log(T.sub(1.0, p)))
    return T.mul(T.mean(T.add(pos, neg)), -1.0)


def soft_dice_loss(pred: Tensor, gt, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - (2 sum(p g) + s) / (sum p + sum g + s)`` over the whole tensor."""
    g = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    _check_shapes(pred, g, "soft_dice_loss")
    inter = T.sum(T.mul(pred, g))
    denom = T.add(T.add(T.sum(pred), T.sum(g)), smooth)
    num = T.add(T.mul(inter, 2.0), smooth)
    return T.sub(1.0, T.mul(num, _reciprocal(denom)))


def _reciprocal(t: Tensor) -> Tensor:
    d = t.data
    return T._result(1.0 / d, (t,), lambda g: (-g / (d * d),), "reciprocal")


def supervised_seg_loss(pred: Tensor, gt, mode: str = "ce+dice") -> Tensor:
    if mode == "ce":
        return seg_loss(pred, gt)
    if mode == "dice":
        return soft_dice_loss(pred, gt)
    if mode == "ce+dice":
        return T.add(seg_loss(pred, gt), soft_dice_loss(pred, gt))
    raise ValueError(f"unknown segmentation loss mode {mode!r}")


def _pick(logp: Tensor, cls: int) -> Tensor:
    """Column ``cls`` of an N x K matrix as an N x 1 tensor."""
    k = logp.shape[1]
    sel = np.zeros((k, 1), dtype=logp.dtype)
    sel[cls, 0] = 1.0
    return T.matmul(logp, Tensor(sel))


def _log1m_exp(logp: Tensor) -> Tensor:
    """log(1 - exp(logp)) computed from the other classes' mass."""
    p = logp.data
    q = -np.expm1(p)
    q = np.maximum(q, np.finfo(p.dtype).tiny)

    def backward(g):
        return (-g * np.exp(p) / q,)

    return T._result(np.log(q), (logp,), backward, "log1m_exp")


def disc_sup_loss(logits_orig: Tensor | None, logits_rot: Tensor | None) -> Tensor:
    """Cross-entropy of labeled predictions over classes {orig, rot} only."""
    terms = []
    for logits, cls in ((logits_orig, ORIG), (logits_rot, ROT)):
        if logits is None or logits.shape[0] == 0:
            continue
        two = T.matmul(logits, Tensor(np.eye(3, 2, dtype=logits.dtype)))
        terms.append(_pick(T.log_softmax(two, axis=1), cls))
    if not terms:
        raise ValueError("disc_sup_loss needs at least one labeled prediction")
    return T.mul(T.mean(T.concat(terms, axis=0)), -1.0)


def disc_unsup_loss(logits_pred: Tensor, logits_gt: Tensor | None) -> Tensor:
    """``-E log(1 - p_real(pred)) - E log p_real(gt)``."""
    logp = T.log_softmax(logits_pred, axis=1)
    fake = T.mul(T.mean(_log1m_exp(_pick(logp, REAL))), -1.0)
    if logits_gt is None or logits_gt.shape[0] == 0:
        return fake
    real = T.mul(T.mean(_pick(T.log_softmax(logits_gt, axis=1), REAL)), -1.0)
    return T.add(fake, real)


def disc_loss(logits_orig: Tensor, logits_rot: Tensor, logits_gt: Tensor | None,
              labeled_orig: Tensor | None = None, labeled_rot: Tensor | None = None,
              require_sup: bool = True) -> tuple[Tensor | None, Tensor]:
    """Return ``(sup, unsup)``.

    ``logits_orig``/``logits_rot`` cover every prediction in the batch; the
    supervised term uses ``labeled_orig``/``labeled_rot`` (defaulting to all
    predictions) and needs ground truth to be present.
    """
    sup = None
    if require_sup:
        if logits_gt is None or logits_gt.shape[0] == 0:
            raise ValueError("supervised discriminator term requested without ground-truth masks")
        lo = logits_orig if labeled_orig is None else labeled_orig
        lr = logits_rot if labeled_rot is None else labeled_rot
        sup = disc_sup_loss(lo, lr)
    preds = T.concat([logits_orig, logits_rot], axis=0)
    unsup = disc_unsup_loss(preds, logits_gt)
    return sup, unsup


def adv_loss(logits_pred: Tensor) -> Tensor:
    """``-mean log p(real)`` for predicted masks."""
    return T.mul(T.mean(_pick(T.log_softmax(logits_pred, axis=1), REAL)), -1.0)
