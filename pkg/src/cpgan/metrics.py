"""Confusion-count segmentation metrics and k-fold splitting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

METRIC_NAMES = ("dic", "jac", "acc", "sen", "spe")
TABLE_COLUMNS = ("Dic", "Jac", "Acc", "Sen", "Spe")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricsReport:
    dic: float
    jac: float
    acc: float
    sen: float
    spe: float
    per_sample: list[dict] = field(default_factory=list)
    pooled: dict | None = None

    def row(self) -> list[float]:
        return [self.dic, self.jac, self.acc, self.sen, self.spe]

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(pred, gt, threshold: float = 0.5) -> Confusion:
    """Pixel counts with ``pred >= threshold`` taken as positive."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion: shape mismatch {pred.shape} vs {gt.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("confusion: ground truth must be binary")
    p = pred >= threshold
    g = gt == 1
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return Confusion(tp, fp, tn, fn)


def _ratio(num: int, den: int, errors: int) -> float:
    # empty denominator: perfect if nothing went wrong, else zero
    if den == 0:
        return 1.0 if errors == 0 else 0.0
    return num / den


def compute_metrics(c: Confusion) -> dict[str, float]:
    return {
        "dic": _ratio(2 * c.tp, 2 * c.tp + c.fn + c.fp, c.fn + c.fp),
        "jac": _ratio(c.tp, c.tp + c.fn + c.fp, c.fn + c.fp),
        "acc": _ratio(c.tp + c.tn, c.total, c.fp + c.fn),
        "sen": _ratio(c.tp, c.tp + c.fn, c.fn),
        "spe": _ratio(c.tn, c.tn + c.fp, c.fp),
    }


def evaluate(preds, gts, ids=None, threshold: float = 0.5) -> MetricsReport:
    """Per-sample metrics, aggregated as their mean; pooled counts reported alongside."""
    preds = list(preds)
    gts = list(gts)
    if len(preds) != len(gts):
        raise ValueError("evaluate: prediction and ground-truth counts differ")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]
    per = []
    pooled = Confusion(0, 0, 0, 0)
    for sid, p, g in zip(ids, preds, gts):
        c = confusion(p, g, threshold)
        pooled = pooled + c
        per.append({"id": sid, **asdict(c), **compute_metrics(c)})
    if per:
        agg = {m: float(np.mean([r[m] for r in per])) for m in METRIC_NAMES}
    else:
        agg = {m: float("nan") for m in METRIC_NAMES}
    pooled_d = {**asdict(pooled), **compute_metrics(pooled)}
    return MetricsReport(**agg, per_sample=per, pooled=pooled_d)


def kfold_split(n: int, k: int = 4, seed: int = 0) -> list[np.ndarray]:
    """Shuffle 0..n-1 and cut it into k folds whose sizes differ by at most one."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"kfold_split: need n >= k, got n={n}, k={k}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]
