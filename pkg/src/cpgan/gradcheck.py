"""Central finite-difference checks for every differentiable op and loss.

Each registered check builds a scalar function of a few float64 tensors. The
analytic gradient from :meth:`Tensor.backward` is compared with central
differences on (a sample of) the input coordinates using the norm-relative
error ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from cpgan import losses as L
from cpgan import scm
from cpgan import tensor as T
from cpgan.tensor import Tensor, no_grad

STEP = 1e-4
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    passed: bool
    n_coords: int


def _project(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce a tensor output to a scalar with fixed random weights."""
    if out.size == 1:
        return T.reshape(out, ())
    w = Tensor(rng.normal(size=out.shape))
    return T.sum(T.mul(out, w))


def check_gradient(fn: Callable[..., Tensor], inputs: list[np.ndarray], *, step: float = STEP,
                   tol: float = TOLERANCE, max_coords: int | None = 60, seed: int = 0,
                   name: str = "") -> CheckResult:
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    rng = np.random.default_rng(seed)
    coords = [(k, j) for k, x in enumerate(inputs) for j in range(x.size)]
    if max_coords is not None and len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def value(arrays):
        with no_grad():
            return fn(*[Tensor(a) for a in arrays]).item()

    a_vals, n_vals = [], []
    for k, j in coords:
        plus = [x.copy() for x in inputs]
        minus = [x.copy() for x in inputs]
        plus[k].flat[j] += step
        minus[k].flat[j] -= step
        n_vals.append((value(plus) - value(minus)) / (2 * step))
        a_vals.append(analytic[k].flat[j])
    a = np.asarray(a_vals)
    n = np.asarray(n_vals)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    err = 0.0 if scale < 1e-12 else float(np.linalg.norm(a - n) / scale)
    return CheckResult(name, err, err <= tol, len(coords))


# ---------------------------------------------------------------------------
# registry


REGISTRY: dict[str, Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]] = {}


def register(name: str):
    def deco(f):
        REGISTRY[name] = f
        return f

    return deco


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


@register("conv2d")
def _conv(rng):
    def f(x, w, b):
        return _project(T.conv2d(x, w, b, stride=1, pad=1), np.random.default_rng(1))

    return f, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)]


@register("conv2d_stride2")
def _conv_s2(rng):
    def f(x, w, b):
        return _project(T.conv2d(x, w, b, stride=2, pad=1), np.random.default_rng(2))

    return f, [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]


@register("conv2d_1x1")
def _conv_1x1(rng):
    def f(x, w, b):
        return _project(T.conv2d(x, w, b), np.random.default_rng(3))

    return f, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 1, 1)), rng.normal(size=2)]


@register("matmul")
def _matmul(rng):
    return (lambda a, b: _project(T.matmul(a, b), np.random.default_rng(4))), [rng.normal(size=(3, 4)),
                                                                              rng.normal(size=(4, 2))]


@register("softmax")
def _softmax(rng):
    return (lambda x: _project(T.softmax(x, axis=-1), np.random.default_rng(5))), [rng.normal(size=(3, 5))]


@register("softmax_axis0")
def _softmax0(rng):
    return (lambda x: _project(T.softmax(x, axis=0), np.random.default_rng(6))), [rng.normal(size=(4, 3))]


@register("log_softmax")
def _log_softmax(rng):
    return (lambda x: _project(T.log_softmax(x, axis=1), np.random.default_rng(7))), [rng.normal(size=(3, 3))]


@register("upsample")
def _upsample(rng):
    return (lambda x: _project(T.upsample(x, 2), np.random.default_rng(8))), [rng.normal(size=(1, 2, 3, 4))]


@register("relu")
def _relu(rng):
    return (lambda x: _project(T.relu(x), np.random.default_rng(9))), [_away_from_zero(rng, (3, 4))]


@register("leaky_relu")
def _leaky(rng):
    return (lambda x: _project(T.leaky_relu(x, 0.2), np.random.default_rng(10))), [_away_from_zero(rng, (3, 4))]


@register("sigmoid")
def _sigmoid(rng):
    return (lambda x: _project(T.sigmoid(x), np.random.default_rng(11))), [rng.normal(size=(3, 4))]


@register("add")
def _add(rng):
    return (lambda a, b: _project(T.add(a, b), np.random.default_rng(12))), [rng.normal(size=(2, 3)),
                                                                           rng.normal(size=(2, 3))]


@register("sub")
def _sub(rng):
    return (lambda a, b: _project(T.sub(a, b), np.random.default_rng(13))), [rng.normal(size=(2, 3)),
                                                                           rng.normal(size=(2, 3))]


@register("mul")
def _mul(rng):
    return (lambda a, b: _project(T.mul(a, b), np.random.default_rng(14))), [rng.normal(size=(2, 3)),
                                                                           rng.normal(size=(2, 3))]


@register("square")
def _square(rng):
    return (lambda x: _project(T.square(x), np.random.default_rng(15))), [rng.normal(size=(3, 3))]


@register("mean")
def _mean(rng):
    return (lambda x: _project(T.mean(x, axis=(2, 3)), np.random.default_rng(16))), [rng.normal(size=(2, 3, 2, 2))]


@register("log")
def _log(rng):
    return (lambda x: _project(T.log(x), np.random.default_rng(17))), [rng.uniform(0.5, 2.0, size=(3, 3))]


@register("rotate180")
def _rot(rng):
    return (lambda x: _project(T.rotate180(x), np.random.default_rng(18))), [rng.normal(size=(1, 2, 3, 4))]


@register("transpose_reshape")
def _tr(rng):
    def f(x):
        y = T.transpose(T.reshape(x, (2, 3, 4)), (0, 2, 1))
        return _project(y, np.random.default_rng(19))

    return f, [rng.normal(size=(2, 12))]


@register("group_norm")
def _gn(rng):
    def f(x, g, b):
        return _project(T.group_norm(x, g, b, groups=2), np.random.default_rng(21))

    return f, [rng.normal(size=(2, 4, 3, 3)), rng.normal(size=4), rng.normal(size=4)]


@register("clip")
def _clip(rng):
    x = rng.uniform(-1.0, 2.0, size=(3, 4))
    x = np.where(np.abs(x) < 0.05, 0.1, x)
    x = np.where(np.abs(x - 1.0) < 0.05, 0.9, x)
    return (lambda t: _project(T.clip(t, 0.0, 1.0), np.random.default_rng(22))), [x]


@register("concat_take")
def _concat_take(rng):
    def f(a, b):
        c = T.concat([a, b], axis=0)
        return _project(T.take(c, [3, 0, 0, 2]), np.random.default_rng(23))

    return f, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]


@register("scm_forward")
def _scm(rng):
    def f(E, D, wb, wf, wp, wd):
        z3 = Tensor(np.zeros(3))
        p = scm.ScmParams(wb, wf, wp, wd, z3, z3, z3, z3)
        return _project(scm.scm_forward(E, D, p), np.random.default_rng(20))

    return f, [rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(1, 2, 2, 2)),
               0.5 * rng.normal(size=(3, 3, 1, 1)), 0.5 * rng.normal(size=(3, 3, 1, 1)),
               rng.normal(size=(3, 3, 1, 1)), rng.normal(size=(3, 2, 1, 1))]


def _probs(rng, shape):
    return rng.uniform(0.05, 0.95, size=shape)


@register("loss_rotation")
def _l_rot(rng):
    return (lambda a, b: L.rotation_loss(a, b)), [_probs(rng, (2, 1, 8, 8)), _probs(rng, (2, 1, 8, 8))]


@register("loss_seg_ce")
def _l_seg(rng):
    gt = (rng.uniform(size=(2, 1, 8, 8)) > 0.6).astype(np.float64)
    return (lambda p: L.seg_loss(p, Tensor(gt))), [_probs(rng, (2, 1, 8, 8))]


@register("loss_soft_dice")
def _l_dice(rng):
    gt = (rng.uniform(size=(2, 1, 8, 8)) > 0.6).astype(np.float64)
    return (lambda p: L.soft_dice_loss(p, Tensor(gt))), [_probs(rng, (2, 1, 8, 8))]


@register("loss_disc_sup")
def _l_dsup(rng):
    return (lambda a, b: L.disc_sup_loss(a, b)), [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]


@register("loss_disc_unsup")
def _l_dunsup(rng):
    return (lambda a, b: L.disc_unsup_loss(a, b)), [rng.normal(size=(4, 3)), rng.normal(size=(2, 3))]


@register("loss_adv")
def _l_adv(rng):
    return (lambda a: L.adv_loss(a)), [rng.normal(size=(4, 3))]


@register("composed_generator_loss")
def _composed(rng):
    """S-side objective through a tiny segmentation net and a tiny discriminator on 8x8 masks."""
    from cpgan.networks import Discriminator, SegNet, disc_forward

    seg = SegNet(np.random.default_rng(30), widths=(2, 3), scm=True, dtype=np.float64, norm_groups=0)
    disc = Discriminator(np.random.default_rng(31), widths=(2, 2), use_assistant=False, dtype=np.float64)
    for p in disc.params.values():
        p.requires_grad = False
    gt = (rng.uniform(size=(2, 1, 8, 8)) > 0.7).astype(np.float64)
    names = ["enc0.conv1.w", "skip0.proj_B", "skip1.proj_P", "head.w"]
    base = dict(seg.params)

    def f(image, *ws):
        params = dict(base)
        params.update(zip(names, ws))
        seg.params = params
        both = T.concat([image, T.rotate180(image)], axis=0)
        out = seg(both)
        po = T.take(out, [0, 1])
        pr = T.take(out, [2, 3])
        total = T.add(L.supervised_seg_loss(po, Tensor(gt)), T.mul(L.rotation_loss(pr, po), 0.1))
        return T.add(total, T.mul(L.adv_loss(disc_forward(po, disc)), 0.1))

    return f, [rng.uniform(size=(2, 1, 8, 8))] + [seg.params[n].data.copy() for n in names]


@register("composed_discriminator_loss")
def _composed_d(rng):
    from cpgan.networks import Assistant, Discriminator, disc_forward

    disc = Discriminator(np.random.default_rng(32), widths=(2, 3), use_assistant=True, dtype=np.float64)
    asst = Assistant(np.random.default_rng(33), widths=(2, 3), dtype=np.float64)
    asst.freeze()
    names = ["trunk0.w", "trunk1.b", "head.w1", "head.w2", "head.b"]
    base = dict(disc.params)
    preds = _probs(rng, (4, 1, 8, 8))
    gts = (rng.uniform(size=(2, 1, 8, 8)) > 0.6).astype(np.float64)

    def f(*ws):
        params = dict(base)
        params.update(zip(names, ws))
        disc.params = params
        logits = disc_forward(Tensor(np.concatenate([preds, gts])), disc, asst)
        lo, lr_, lg = T.take(logits, [0, 1]), T.take(logits, [2, 3]), T.take(logits, [4, 5])
        sup, unsup = L.disc_loss(lo, lr_, lg)
        return T.add(sup, unsup)

    return f, [disc.params[n].data.copy() for n in names]


def run_all(seed: int = 0, registry: dict | None = None, tol: float = TOLERANCE) -> list[CheckResult]:
    registry = REGISTRY if registry is None else registry
    results = []
    for i, (name, build) in enumerate(registry.items()):
        rng = np.random.default_rng([seed, i])
        fn, inputs = build(rng)
        res = check_gradient(fn, inputs, tol=tol, seed=seed + i, name=name)
        results.append(res)
    return results
