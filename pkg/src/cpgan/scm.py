"""Similarity connection module: non-local attention on a U-net skip.

The encoder feature ``E`` (C_k channels, H_k x W_k) is projected by three 1x1
convolutions into ``B``, ``F`` and ``P``. Every position attends to every
other through ``softmax_j(B_i . F_j)`` and the attended ``P`` is summed with
the 2x-upsampled, channel-projected decoder feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cpgan import kernels
from cpgan import tensor as T
from cpgan.tensor import ShapeError, Tensor


@dataclass
class ScmParams:
    proj_B: Tensor
    proj_F: Tensor
    proj_P: Tensor
    proj_D: Tensor
    bias_B: Tensor
    bias_F: Tensor
    bias_P: Tensor
    bias_D: Tensor

    @classmethod
    def from_dict(cls, params: dict[str, Tensor], prefix: str) -> "ScmParams":
        return cls(**{f: params[f"{prefix}{f}"] for f in cls.__dataclass_fields__})

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}{f}": getattr(self, f) for f in self.__dataclass_fields__}


def init_scm(rng: np.random.Generator, c_skip: int, c_dec: int, dtype=np.float32) -> ScmParams:
    def w(cin, cout, gain):
        return Tensor(rng.normal(0.0, np.sqrt(gain / cin), size=(cout, cin, 1, 1)).astype(dtype), requires_grad=True)

    def b(cout):
        return Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    # B and F feed an unscaled dot product; unit fan-in gain keeps the logits moderate
    return ScmParams(
        proj_B=w(c_skip, c_skip, 1.0),
        proj_F=w(c_skip, c_skip, 1.0),
        proj_P=w(c_skip, c_skip, 2.0),
        proj_D=w(c_dec, c_skip, 2.0),
        bias_B=b(c_skip),
        bias_F=b(c_skip),
        bias_P=b(c_skip),
        bias_D=b(c_skip),
    )


def _positions(t: Tensor) -> Tensor:
    """NCHW -> N x (H*W) x C."""
    n, c, h, w = t.shape
    return T.transpose(T.reshape(t, (n, c, h * w)), (0, 2, 1))


def attention(B: Tensor, F: Tensor) -> Tensor:
    """Row-stochastic similarity map ``q[n, i, j] = softmax_j(B_i . F_j)``.

    Accepts NCHW feature maps or already-flattened N x I x C arrays.
    """
    if B.shape != F.shape:
        raise ShapeError(f"attention: B {B.shape} and F {F.shape} differ")
    if B.ndim == 4:
        B, F = _positions(B), _positions(F)
    elif B.ndim != 3:
        raise ShapeError(f"attention expects NCHW or NxIxC, got {B.shape}")
    logits = T.matmul(B, T.transpose(F, (0, 2, 1)))
    return T.softmax(logits, axis=-1)


def aggregate(q: Tensor, P: Tensor) -> Tensor:
    """E* = q @ P, returned in P's NCHW layout."""
    n, c, h, w = P.shape
    out = T.matmul(q, _positions(P))
    return T.reshape(T.transpose(out, (0, 2, 1)), (n, c, h, w))


CHUNK_ROWS = 1024


def _aggregate_chunked(B: np.ndarray, F: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Inference-only ``softmax(B F^T) P`` evaluated a block of rows at a time."""
    n, c, h, w = P.shape
    b = B.reshape(n, B.shape[1], h * w).transpose(0, 2, 1)
    f = F.reshape(n, F.shape[1], h * w)
    p = P.reshape(n, c, h * w).transpose(0, 2, 1)
    out = np.empty_like(p)
    for s in range(0, h * w, CHUNK_ROWS):
        q = kernels.softmax_lastaxis(np.matmul(b[:, s : s + CHUNK_ROWS], f))
        out[:, s : s + CHUNK_ROWS] = np.matmul(q, p)
    return out.transpose(0, 2, 1).reshape(n, c, h, w)


def scm_forward(E: Tensor, D: Tensor, params: ScmParams, return_attention: bool = False):
    """Fuse encoder skip ``E`` with the coarser decoder feature ``D``.

    ``D`` must sit one level below ``E`` (half its spatial extent). The output
    has ``E``'s shape.
    """
    if E.ndim != 4 or D.ndim != 4:
        raise ShapeError(f"scm_forward expects NCHW tensors, got {E.shape} and {D.shape}")
    if E.shape[0] != D.shape[0] or E.shape[2] != 2 * D.shape[2] or E.shape[3] != 2 * D.shape[3]:
        raise ShapeError(f"scm_forward: level mismatch, skip {E.shape} vs decoder {D.shape} (need 2:1 spatial ratio)")
    B = T.conv2d(E, params.proj_B, params.bias_B)
    F = T.conv2d(E, params.proj_F, params.bias_F)
    P = T.conv2d(E, params.proj_P, params.bias_P)
    n_pos = E.shape[2] * E.shape[3]
    if not T.grad_enabled() and not return_attention and n_pos > CHUNK_ROWS:
        e_star = Tensor(_aggregate_chunked(B.data, F.data, P.data))
    else:
        q = attention(B, F)
        e_star = aggregate(q, P)
    d_star = T.conv2d(T.upsample(D, 2), params.proj_D, params.bias_D)
    out = T.add(e_star, d_star)
    if return_attention:
        return out, q
    return out


def plain_skip(E: Tensor, D: Tensor, params: ScmParams) -> Tensor:
    """Additive skip without attention, used when the module is ablated."""
    if E.shape[2] != 2 * D.shape[2] or E.shape[3] != 2 * D.shape[3]:
        raise ShapeError(f"skip: level mismatch, skip {E.shape} vs decoder {D.shape}")
    return T.add(E, T.conv2d(T.upsample(D, 2), params.proj_D, params.bias_D))
