"""Consistent-perception adversarial training.

One step = one discriminator update followed by one segmentation update.
Every image in a batch is paired with its 180-degree rotation; predictions of
both orientations feed the rotation-consistency term and the discriminator,
while only original-orientation predictions feed the adversarial term.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from cpgan import losses as L
from cpgan import metrics as M
from cpgan import tensor as T
from cpgan.data import Sample, hide_masks
from cpgan.networks import (
    Assistant,
    NetworkParams,
    SegNet,
    assistant_logit,
    disc_forward,
    init_params,
)
from cpgan.tensor import Adam, Tensor, no_grad

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("l_seg", "l_rot", "l_adv", "l_disc_sup", "l_disc_unsup")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    """A loss term became NaN/Inf; carries the term name and batch ids."""

    def __init__(self, term: str, detail: str):
        super().__init__(f"non-finite {term}: {detail}")
        self.term = term


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 0.001
    label_rate: float = 1.0
    seed: int = 0
    lambda_rot: float = 0.1
    lambda_adv: float = 0.1
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    assistant_enabled: bool = True
    scm_enabled: bool = True
    seg_loss: str = "ce+dice"
    assistant_epochs: int = 3
    warmup_epochs: int = 2

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.batch_size < 2 and self.label_rate < 1.0:
            raise ConfigError("batch_size must be >= 2 when unlabeled data is mixed in")
        if not 0.0 < self.label_rate <= 1.0:
            raise ConfigError(f"label_rate must lie in (0, 1], got {self.label_rate}")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.lambda_rot < 0 or self.lambda_adv < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.plateau_patience < 1 or not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_patience must be >= 1 and plateau_factor in (0, 1)")
        if self.seg_loss not in ("ce", "dice", "ce+dice"):
            raise ConfigError(f"seg_loss must be one of ce, dice, ce+dice; got {self.seg_loss!r}")
        if self.assistant_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("assistant_epochs and warmup_epochs must be >= 0")

    # -- flat ``key = value`` files ----------------------------------------
    def dumps(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}\n")
        return "".join(out)

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
            values[key] = _parse_value(key, val, types[key], source, lineno)
        missing = [k for k in types if k not in values]
        if missing:
            raise ConfigError(f"{source}: missing config key {missing[0]!r}"
                              + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.loads(Path(path).read_text(), str(path))


def _parse_value(key, val, typ, source, lineno):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"{source}:{lineno}: bad value {val!r} for {key} ({typ})") from None


# ---------------------------------------------------------------------------
# data plumbing


def apply_label_rate(dataset: list[Sample], rate: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Split into (labeled, unlabeled) by a seeded prefix of one permutation.

    Using a prefix makes the labeled sets nested across rates for a fixed
    seed. Unlabeled samples keep their masks for evaluation but are flagged
    so training never reads them.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"label rate must lie in (0, 1], got {rate}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_lab = min(n, max(1, int(round(rate * n)))) if n else 0
    lab_idx = sorted(perm[:n_lab])
    unl_idx = sorted(perm[n_lab:])
    labeled = [dataset[i] for i in lab_idx]
    unlabeled = hide_masks([dataset[i] for i in unl_idx])
    return labeled, unlabeled


def make_batches(labeled: list[Sample], unlabeled: list[Sample], cfg: TrainConfig, epoch: int = 0):
    """Yield lists of samples, each mixing labeled and unlabeled data.

    Both pools are shuffled and cut into the same number of near-equal
    chunks; the largest labeled chunks pair with the smallest unlabeled ones.
    """
    if not labeled:
        raise ValueError("make_batches needs at least one labeled sample")
    rng = np.random.default_rng([cfg.seed, epoch, 7])
    lab = [labeled[i] for i in rng.permutation(len(labeled))]
    unl = [unlabeled[i] for i in rng.permutation(len(unlabeled))]
    n_batches = math.ceil((len(lab) + len(unl)) / cfg.batch_size)
    lab_chunks = _chunks(lab, n_batches)
    unl_chunks = _chunks(unl, n_batches)[::-1]
    for a, b in zip(lab_chunks, unl_chunks):
        yield a + b


def _chunks(items: list, n: int) -> list[list]:
    q, r = divmod(len(items), n)
    out, pos = [], 0
    for i in range(n):
        k = q + (1 if i < r else 0)
        out.append(items[pos : pos + k])
        pos += k
    return out


def _stack(samples: list[Sample], dtype=np.float32) -> np.ndarray:
    return np.stack([s.image for s in samples])[:, None].astype(dtype)


def _stack_masks(samples: list[Sample], dtype=np.float32) -> np.ndarray:
    return np.stack([s.mask for s in samples])[:, None].astype(dtype)


def _rot(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a[..., ::-1, ::-1])


# ---------------------------------------------------------------------------
# steps


@dataclass
class Optimizers:
    seg: Adam
    disc: Adam

    def set_lr(self, lr: float) -> None:
        self.seg.lr = lr
        self.disc.lr = lr


def make_optimizers(nets: NetworkParams, lr: float) -> Optimizers:
    return Optimizers(Adam(nets.seg.params, lr), Adam(nets.disc.params, lr))


def _checked(term: str, fn, *args):
    try:
        out = fn(*args)
    except FloatingPointError as exc:
        raise NonFiniteLossError(term, str(exc)) from exc
    if not np.isfinite(out.data).all():
        raise NonFiniteLossError(term, f"value {out.data}")
    return out


def predict(net: SegNet, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, len(images), chunk):
            outs.append(net(Tensor(images[i : i + chunk])).data)
    return np.concatenate(outs) if outs else np.zeros((0,) + images.shape[1:], dtype=images.dtype)


def train_step(batch: list[Sample], nets: NetworkParams, opt: Optimizers, cfg: TrainConfig) -> dict[str, float]:
    """One discriminator update, then one segmentation update."""
    seg, disc, asst = nets.seg, nets.disc, nets.assistant
    if asst is not None and not asst.frozen:
        raise RuntimeError("assistant must be pretrained and frozen before adversarial training")
    n = len(batch)
    lab = [i for i, s in enumerate(batch) if s.labeled]
    images = _stack(batch)
    both = np.concatenate([images, _rot(images)])
    gt = _stack_masks([batch[i] for i in lab]) if lab else None
    gt_both = np.concatenate([gt, _rot(gt)]) if lab else None
    stats = dict.fromkeys(LOSS_COLUMNS, 0.0)

    # S is not touched by the D update, so one recorded forward serves both updates
    seg.set_trainable(True)
    disc.set_trainable(False)
    out = seg(Tensor(both))
    preds = out.data

    # discriminator update on detached predictions
    disc.set_trainable(True)
    disc_in = preds if gt_both is None else np.concatenate([preds, gt_both])
    logits = disc_forward(Tensor(disc_in), disc, asst)
    lo = T.take(logits, range(n))
    lr_ = T.take(logits, range(n, 2 * n))
    lg = T.take(logits, range(2 * n, logits.shape[0])) if lab else None
    unsup = _checked("l_disc_unsup", L.disc_unsup_loss, T.concat([lo, lr_], axis=0), lg)
    d_total = unsup
    if lab:
        sup = _checked("l_disc_sup", L.disc_sup_loss, T.take(lo, lab), T.take(lr_, lab))
        d_total = T.add(sup, unsup)
        stats["l_disc_sup"] = sup.item()
    stats["l_disc_unsup"] = unsup.item()
    opt.disc.zero_grad()
    d_total.backward()
    opt.disc.step()
    disc.set_trainable(False)

    # segmentation update; D and A are constants here
    p_orig = T.take(out, range(n))
    p_rot = T.take(out, range(n, 2 * n))
    l_rot = _checked("l_rot", L.rotation_loss, p_rot, p_orig)
    total = T.mul(l_rot, cfg.lambda_rot)
    stats["l_rot"] = l_rot.item()
    if lab:
        lab_both = list(lab) + [n + i for i in lab]
        l_seg = _checked("l_seg", L.supervised_seg_loss, T.take(out, lab_both), Tensor(gt_both), cfg.seg_loss)
        total = T.add(total, l_seg)
        stats["l_seg"] = l_seg.item()
    if cfg.lambda_adv > 0:
        l_adv = _checked("l_adv", L.adv_loss, disc_forward(p_orig, disc, asst))
        total = T.add(total, T.mul(l_adv, cfg.lambda_adv))
        stats["l_adv"] = l_adv.item()
    if not np.isfinite(total.data).all():
        raise NonFiniteLossError("generator_total", f"value {total.data}")
    opt.seg.zero_grad()
    total.backward()
    opt.seg.step()
    stats["generator_total"] = total.item()
    return stats


def disc_accuracy(nets: NetworkParams, samples: list[Sample], preds_orig: np.ndarray | None = None) -> float:
    """3-way argmax accuracy on (prediction, rotated-input prediction, ground truth) triples."""
    samples = [s for s in samples if s.mask is not None]
    if not samples:
        return float("nan")
    images = _stack(samples)
    p_orig = predict(nets.seg, images) if preds_orig is None else preds_orig
    p_rot = predict(nets.seg, _rot(images))
    gts = _stack_masks(samples)
    correct = 0
    with no_grad():
        for cls, arr in ((L.ORIG, p_orig), (L.ROT, p_rot), (L.REAL, gts)):
            logits = disc_forward(Tensor(arr), nets.disc, nets.assistant).data
            correct += int(np.count_nonzero(logits.argmax(axis=1) == cls))
    return correct / (3 * len(samples))


def evaluate(net: SegNet, samples: list[Sample]) -> tuple[M.MetricsReport, np.ndarray]:
    samples = [s for s in samples if s.mask is not None]
    if not samples:
        return M.evaluate([], []), np.zeros((0,))
    preds = predict(net, _stack(samples))
    report = M.evaluate([p[0] for p in preds], [s.mask for s in samples], [s.id for s in samples])
    return report, preds


# ---------------------------------------------------------------------------
# assistant pretraining


def pretrain_assistant(labeled: list[Sample], epochs: int, seed: int, cfg: TrainConfig | None = None,
                       assistant: Assistant | None = None, return_accuracy: bool = False):
    """Train the assistant as a real/fake mask classifier, then freeze it.

    Fakes are outputs of a briefly trained (Dice-only) segmentation net.
    One fifth of the samples is held out to measure accuracy.
    """
    if not labeled:
        raise ValueError("pretrain_assistant needs at least one labeled sample")
    cfg = cfg or TrainConfig()
    if assistant is None:
        assistant = init_params(seed, scm=cfg.scm_enabled).assistant
    if epochs == 0:
        assistant.freeze()
        return (assistant, float("nan")) if return_accuracy else assistant

    rng = np.random.default_rng([seed, 101])
    warm = SegNet(np.random.default_rng([seed, 102]), scm=cfg.scm_enabled)
    wopt = Adam(warm.params, cfg.lr)
    warm_cfg = TrainConfig(batch_size=cfg.batch_size, seed=seed)
    for ep in range(cfg.warmup_epochs):
        for batch in make_batches(labeled, [], warm_cfg, epoch=1000 + ep):
            x = Tensor(_stack(batch))
            loss = L.soft_dice_loss(warm(x), Tensor(_stack_masks(batch)))
            wopt.zero_grad()
            loss.backward()
            wopt.step()

    fakes = predict(warm, _stack(labeled))
    reals = _stack_masks(labeled)
    n = len(labeled)
    perm = rng.permutation(n)
    n_hold = n // 5 if n >= 5 else 0
    hold, train = perm[:n_hold], perm[n_hold:]

    x_train = np.concatenate([reals[train], fakes[train]])
    y_train = np.concatenate([np.ones(len(train)), np.zeros(len(train))]).astype(np.float32)[:, None]
    params = dict(assistant.params, pre_w=assistant.pre_w, pre_b=assistant.pre_b)
    for p in params.values():
        p.requires_grad = True
    opt = Adam(params, cfg.lr)
    bs = max(2, cfg.batch_size)
    for ep in range(epochs):
        order = np.random.default_rng([seed, 103, ep]).permutation(len(x_train))
        for i in range(0, len(order), bs):
            idx = order[i : i + bs]
            logit = assistant_logit(Tensor(x_train[idx]), assistant)
            prob = T.sigmoid(logit)
            loss = L.seg_loss(prob, Tensor(y_train[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()

    acc = float("nan")
    if n_hold:
        x_hold = np.concatenate([reals[hold], fakes[hold]])
        y_hold = np.concatenate([np.ones(n_hold), np.zeros(n_hold)])
        with no_grad():
            logit = assistant_logit(Tensor(x_hold), assistant).data[:, 0]
        acc = float(np.mean((logit > 0) == (y_hold == 1)))
    assistant.pre_w.requires_grad = False
    assistant.pre_b.requires_grad = False
    assistant.freeze()
    log.info("assistant pretrained: held-out real/fake accuracy %.3f", acc)
    return (assistant, acc) if return_accuracy else assistant


# ---------------------------------------------------------------------------
# learning-rate schedule


class PlateauScheduler:
    """Multiply lr by ``factor`` once the metric has not improved for ``patience`` epochs."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.5, floor: float = 1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.floor = floor
        self.best = -math.inf
        self.bad = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad = 0
        return self.lr


def lr_plateau(history: list[float], cfg: TrainConfig, lr: float | None = None) -> float:
    """Replay a validation-Dice history through the plateau rule and return the resulting lr."""
    if not history:
        raise ValueError("lr_plateau needs a non-empty history")
    sched = PlateauScheduler(cfg.lr if lr is None else lr, cfg.plateau_patience, cfg.plateau_factor)
    for v in history:
        sched.step(v)
    return sched.lr


# ---------------------------------------------------------------------------
# experiment harness


@dataclass
class EpochStats:
    epoch: int
    l_seg: float
    l_rot: float
    l_adv: float
    l_disc_sup: float
    l_disc_unsup: float
    disc_acc: float
    dic: float
    jac: float
    acc: float
    sen: float
    spe: float
    lr: float


def _fmt(v) -> str:
    if isinstance(v, float):
        return str(np.float32(v)) if math.isfinite(v) else str(v)
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def metrics_csv_text(rows: list[tuple[str, M.MetricsReport]], key: str = "split") -> str:
    return _csv_text((key,) + M.TABLE_COLUMNS, [(name, *rep.row()) for name, rep in rows])


def run_experiment(cfg: TrainConfig, data: dict[str, list[Sample]], out_dir=None,
                   save_checkpoints: bool = True) -> dict:
    """Train per ``cfg`` on ``data['train']``, validating on ``data['val']`` each epoch.

    Returns a report dict; when ``out_dir`` is given also writes the run
    directory (config copy, losses.csv, epochs.csv, metrics.csv, report.json,
    checkpoints/).
    """
    cfg.validate()
    train = data["train"]
    val = data.get("val", [])
    test = data.get("test", [])
    labeled, unlabeled = apply_label_rate(train, cfg.label_rate, cfg.seed)

    nets = init_params(cfg.seed, scm=cfg.scm_enabled, assistant=cfg.assistant_enabled)
    asst_acc = None
    if nets.assistant is not None:
        _, asst_acc = pretrain_assistant(labeled, cfg.assistant_epochs, cfg.seed, cfg, nets.assistant,
                                         return_accuracy=True)
    asst_digest = nets.assistant.digest() if nets.assistant is not None else None

    opt = make_optimizers(nets, cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_patience, cfg.plateau_factor)
    init_report, _ = evaluate(nets.seg, val)

    loss_rows = []
    epochs: list[EpochStats] = []
    step = 0
    for ep in range(cfg.epochs):
        acc_terms = dict.fromkeys(LOSS_COLUMNS, 0.0)
        n_steps = 0
        for batch in make_batches(labeled, unlabeled, cfg, ep):
            s = train_step(batch, nets, opt, cfg)
            step += 1
            n_steps += 1
            loss_rows.append((step, *(s[k] for k in LOSS_COLUMNS)))
            for k in LOSS_COLUMNS:
                acc_terms[k] += s[k]
        if asst_digest is not None and nets.assistant.digest() != asst_digest:
            raise RuntimeError(f"assistant parameters changed during epoch {ep + 1}")
        rep, preds = evaluate(nets.seg, val)
        dacc = disc_accuracy(nets, val, preds)
        lr_now = opt.seg.lr
        stats = EpochStats(ep + 1, *(acc_terms[k] / max(n_steps, 1) for k in LOSS_COLUMNS), dacc, *rep.row(), lr_now)
        epochs.append(stats)
        log.info("epoch %d: seg %.4f rot %.4f adv %.4f dsup %.4f dunsup %.4f dacc %.3f val dice %.4f lr %.2g",
                 ep + 1, stats.l_seg, stats.l_rot, stats.l_adv, stats.l_disc_sup, stats.l_disc_unsup,
                 dacc, rep.dic, lr_now)
        opt.set_lr(sched.step(rep.dic))

    final_val = evaluate(nets.seg, val)[0] if cfg.epochs else init_report
    final_test = evaluate(nets.seg, test)[0]
    report = {
        "config": asdict(cfg),
        "n_labeled": len(labeled),
        "n_unlabeled": len(unlabeled),
        "assistant_holdout_accuracy": asst_acc if asst_acc is not None and math.isfinite(asst_acc) else None,
        "init_validation": init_report.to_dict(),
        "epochs": [asdict(e) for e in epochs],
        "final_validation": final_val.to_dict(),
        "final_test": final_test.to_dict(),
    }
    if out_dir is not None:
        write_run_dir(Path(out_dir), cfg, report, loss_rows, epochs, final_val, final_test,
                      nets if save_checkpoints else None)
    report["losses"] = loss_rows
    report["nets"] = nets
    return report


def write_run_dir(out: Path, cfg, report, loss_rows, epochs, final_val, final_test, nets=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    (out / "losses.csv").write_text(_csv_text(("step",) + LOSS_COLUMNS, loss_rows))
    ep_fields = [f.name for f in fields(EpochStats)]
    (out / "epochs.csv").write_text(_csv_text(ep_fields, [[getattr(e, f) for f in ep_fields] for e in epochs]))
    (out / "metrics.csv").write_text(metrics_csv_text([("val", final_val), ("test", final_test)]))
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True, default=_json_default) + "\n")
    if nets is not None:
        from cpgan.tensor import save_checkpoint

        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        save_checkpoint(ck / "final.ckpt", nets.named())


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)
