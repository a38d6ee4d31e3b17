"""Segmentation network, discriminator and assistant.

Parameters live in flat ``name -> Tensor`` dicts so that checkpoints,
optimisers and freezing all work on the same mapping. Checkpoint names carry
an ``S.``, ``D.`` or ``A.`` prefix.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from cpgan import scm as scm_mod
from cpgan import tensor as T
from cpgan.tensor import ShapeError, Tensor

SEG_WIDTHS = (16, 32, 64, 128)
DISC_WIDTHS = (16, 32, 64, 128)
NUM_CLASSES = 3  # N + 1 with N = 2
NORM_GROUPS = 4


def _conv_param(rng, cin, cout, k, dtype, gain=2.0):
    std = np.sqrt(gain / (cin * k * k))
    w = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return w, b


class Module:
    """Holds a flat parameter dict and a trainable flag."""

    params: dict[str, Tensor]

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data = state[k].astype(p.dtype)

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.data = p.data.astype(dtype)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()


class SegNet(Module):
    """U-net with one skip per encoder level, fused through the SCM when enabled."""

    def __init__(self, rng: np.random.Generator, widths=SEG_WIDTHS, scm: bool = True, in_channels: int = 1,
                 dtype=np.float32, norm_groups: int = NORM_GROUPS):
        self.widths = tuple(widths)
        self.scm_enabled = scm
        self.norm_groups = norm_groups
        if norm_groups and any(c % norm_groups for c in self.widths):
            raise ShapeError(f"widths {self.widths} not divisible into {norm_groups} norm groups")
        p: dict[str, Tensor] = {}
        cin = in_channels
        for k, c in enumerate(self.widths):
            p[f"enc{k}.conv1.w"], p[f"enc{k}.conv1.b"] = _conv_param(rng, cin, c, 3, dtype)
            p[f"enc{k}.conv2.w"], p[f"enc{k}.conv2.b"] = _conv_param(rng, c, c, 3, dtype)
            p[f"enc{k}.down.w"], p[f"enc{k}.down.b"] = _conv_param(rng, c, c, 3, dtype)
            cin = c
        cb = self.widths[-1]
        p["mid.conv1.w"], p["mid.conv1.b"] = _conv_param(rng, cb, cb, 3, dtype)
        p["mid.conv2.w"], p["mid.conv2.b"] = _conv_param(rng, cb, cb, 3, dtype)
        c_dec = cb
        for k in reversed(range(len(self.widths))):
            c = self.widths[k]
            skip = scm_mod.init_scm(rng, c, c_dec, dtype)
            if not scm:
                skip = {f: getattr(skip, f) for f in ("proj_D", "bias_D")}
                p.update({f"skip{k}.{f}": v for f, v in skip.items()})
            else:
                p.update(skip.named(f"skip{k}."))
            p[f"dec{k}.conv1.w"], p[f"dec{k}.conv1.b"] = _conv_param(rng, c, c, 3, dtype)
            p[f"dec{k}.conv2.w"], p[f"dec{k}.conv2.b"] = _conv_param(rng, c, c, 3, dtype)
            c_dec = c
        p["head.w"], p["head.b"] = _conv_param(rng, self.widths[0], 1, 1, dtype, gain=1.0)
        if norm_groups:
            for name in [k[:-2] for k in p if k.endswith(".w") and not k.startswith("head")]:
                c = p[f"{name}.w"].shape[0]
                p[f"{name}.gn_g"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
                p[f"{name}.gn_b"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.params = p

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "SegNet":
        """Rebuild a network whose architecture is implied by parameter names and shapes."""
        widths = []
        k = 0
        while f"enc{k}.conv1.w" in state:
            widths.append(state[f"enc{k}.conv1.w"].shape[0])
            k += 1
        if not widths:
            raise KeyError("no encoder parameters in state")
        scm = "skip0.proj_B" in state
        in_ch = state["enc0.conv1.w"].shape[1]
        groups = NORM_GROUPS if "enc0.conv1.gn_g" in state else 0
        net = cls(np.random.default_rng(0), widths=widths, scm=scm, in_channels=in_ch, norm_groups=groups)
        net.load_state(state)
        return net

    def _conv(self, x, name, stride=1, pad=1, act=True):
        y = T.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride, pad=pad)
        if act and self.norm_groups:
            y = T.group_norm(y, self.params[f"{name}.gn_g"], self.params[f"{name}.gn_b"], self.norm_groups)
        return T.relu(y) if act else y

    def forward(self, image: Tensor, attention_maps: list | None = None) -> Tensor:
        levels = len(self.widths)
        h, w = image.shape[-2:]
        div = 2**levels
        if image.ndim != 4 or h % div or w % div:
            raise ShapeError(f"seg_forward: spatial extents {h}x{w} must be divisible by {div}")
        skips = []
        x = image
        for k in range(levels):
            x = self._conv(x, f"enc{k}.conv1")
            x = self._conv(x, f"enc{k}.conv2")
            skips.append(x)
            x = self._conv(x, f"enc{k}.down", stride=2)
        x = self._conv(x, "mid.conv1")
        x = self._conv(x, "mid.conv2")
        for k in reversed(range(levels)):
            if self.scm_enabled:
                sp = scm_mod.ScmParams.from_dict(self.params, f"skip{k}.")
                if attention_maps is not None:
                    x, q = scm_mod.scm_forward(skips[k], x, sp, return_attention=True)
                    attention_maps.append(q)
                else:
                    x = scm_mod.scm_forward(skips[k], x, sp)
            else:
                x = T.add(skips[k], T.conv2d(T.upsample(x, 2), self.params[f"skip{k}.proj_D"],
                                             self.params[f"skip{k}.bias_D"]))
            x = self._conv(x, f"dec{k}.conv1")
            x = self._conv(x, f"dec{k}.conv2")
        return T.sigmoid(self._conv(x, "head", pad=0, act=False))

    __call__ = forward


class Trunk(Module):
    """Stride-2 conv stack with leaky-relu; globally pooled into a feature vector."""

    def __init__(self, rng: np.random.Generator, widths=DISC_WIDTHS, in_channels: int = 1, dtype=np.float32,
                 prefix: str = "trunk"):
        self.widths = tuple(widths)
        self.prefix = prefix
        self.params = {}
        cin = in_channels
        for k, c in enumerate(self.widths):
            w, b = _conv_param(rng, cin, c, 3, dtype, gain=2.0 / (1 + 0.2**2))
            self.params[f"{prefix}{k}.w"] = w
            self.params[f"{prefix}{k}.b"] = b
            cin = c

    def features(self, mask: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        params = self.params if params is None else params
        x = mask
        for k in range(len(self.widths)):
            x = T.leaky_relu(T.conv2d(x, params[f"{self.prefix}{k}.w"], params[f"{self.prefix}{k}.b"],
                                      stride=2, pad=1), 0.2)
        return T.mean(x, axis=(2, 3))


class Assistant(Trunk):
    """Discriminator-shaped trunk, pretrained as a real/fake mask classifier then frozen."""

    def __init__(self, rng: np.random.Generator, widths=DISC_WIDTHS, dtype=np.float32):
        super().__init__(rng, widths, dtype=dtype, prefix="trunk")
        self.frozen = False
        # binary head used only during pretraining
        self.pre_w = Tensor(np.zeros((widths[-1], 1), dtype=dtype), requires_grad=True)
        self.pre_b = Tensor(np.zeros((1, 1), dtype=dtype), requires_grad=True)

    def freeze(self) -> None:
        self.set_trainable(False)
        self.frozen = True

    def set_trainable(self, flag: bool) -> None:
        if flag and self.frozen:
            raise RuntimeError("assistant is frozen; it cannot be made trainable")
        super().set_trainable(flag)


class Discriminator(Trunk):
    """3-class discriminator whose head reads pooled features of itself and the assistant."""

    def __init__(self, rng: np.random.Generator, widths=DISC_WIDTHS, use_assistant: bool = True, dtype=np.float32):
        super().__init__(rng, widths, dtype=dtype, prefix="trunk")
        self.use_assistant = use_assistant
        feat = widths[-1]
        scale = np.sqrt(1.0 / (2 * feat))
        self.params["head.w2"] = Tensor(rng.normal(0.0, scale, size=(feat, NUM_CLASSES)).astype(dtype),
                                        requires_grad=True)
        if use_assistant:
            self.params["head.w1"] = Tensor(rng.normal(0.0, scale, size=(feat, NUM_CLASSES)).astype(dtype),
                                            requires_grad=True)
        self.params["head.b"] = Tensor(np.zeros((1, NUM_CLASSES), dtype=dtype), requires_grad=True)


def _affine(h: Tensor, w: Tensor) -> Tensor:
    return T.matmul(h, w)


def disc_forward(mask: Tensor, d: Discriminator, a: Assistant | None = None) -> Tensor:
    """Class logits ``h1 @ w1 + h2 @ w2 + b`` over pooled trunk features.

    ``h1`` comes from the frozen assistant (omitted when ``d`` was built without
    it), ``h2`` from the discriminator's own trunk.
    """
    h2 = d.features(mask)
    n = mask.shape[0]
    bias = T.matmul(Tensor(np.ones((n, 1), dtype=mask.dtype)), d.params["head.b"])
    logits = T.add(_affine(h2, d.params["head.w2"]), bias)
    if d.use_assistant:
        if a is None:
            raise ValueError("discriminator was built with an assistant but none was given")
        if not a.frozen:
            raise RuntimeError("assistant must be frozen before it joins the discriminator")
        h1 = a.features(mask)
        logits = T.add(logits, _affine(h1, d.params["head.w1"]))
    return logits


def assistant_logit(mask: Tensor, a: Assistant) -> Tensor:
    h = a.features(mask)
    n = mask.shape[0]
    return T.add(T.matmul(h, a.pre_w), T.matmul(Tensor(np.ones((n, 1), dtype=mask.dtype)), a.pre_b))


@dataclass
class NetworkParams:
    seg: SegNet
    disc: Discriminator
    assistant: Assistant | None
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        out = {f"S.{k}": v for k, v in self.seg.params.items()}
        out.update({f"D.{k}": v for k, v in self.disc.params.items()})
        if self.assistant is not None:
            out.update({f"A.{k}": v for k, v in self.assistant.params.items()})
        return out


def init_params(seed: int, scm: bool = True, assistant: bool = True, seg_widths=SEG_WIDTHS,
                disc_widths=DISC_WIDTHS, dtype=np.float32, norm_groups: int = NORM_GROUPS) -> NetworkParams:
    """Fan-in scaled normal weights, zero biases; identical per seed."""
    root = np.random.SeedSequence(seed)
    s_seq, d_seq, a_seq = root.spawn(3)
    seg = SegNet(np.random.default_rng(s_seq), seg_widths, scm=scm, dtype=dtype, norm_groups=norm_groups)
    disc = Discriminator(np.random.default_rng(d_seq), disc_widths, use_assistant=assistant, dtype=dtype)
    asst = Assistant(np.random.default_rng(a_seq), disc_widths, dtype=dtype) if assistant else None
    return NetworkParams(seg, disc, asst, seed)


def seg_forward(image: Tensor, net: SegNet) -> Tensor:
    return net.forward(image)
