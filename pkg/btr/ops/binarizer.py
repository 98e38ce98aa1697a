"""Calibrated binarization of hidden states.

The binarization point sits right after an RMS (T5-style, no mean
subtraction) normalization: ``x = h / rms(h) * w``. Only the sign of ``x`` is
kept, plus one positive scale per token, ``rms(h)``. Recovery maps the signs
back to the pre-normalization space as ``sign * scale / w``.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from btr.errors import InvalidArgumentError, NumericDegenerateError
from btr.ops.bitvec import BitMatrix, BitVector, pack, unpack

DEFAULT_EPS = 1e-6


@dataclass(frozen=True)
class BinaryTokenRep:
    bits: BitVector
    scale: float

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise InvalidArgumentError(f"scale must be a positive finite number, got {self.scale}")


def check_norm_weights(w, dim: int | None = None) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise InvalidArgumentError(f"norm weights must be 1-D, got shape {w.shape}")
    if dim is not None and w.shape[0] != dim:
        raise InvalidArgumentError(f"expected {dim} norm weights, got {w.shape[0]}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise InvalidArgumentError("norm weights must all be strictly positive")
    return w


def normalize_rows(h, w, eps: float = DEFAULT_EPS) -> Tuple[np.ndarray, np.ndarray]:
    h = np.asarray(h, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if h.ndim != 2 or w.shape != (h.shape[1],):
        raise InvalidArgumentError(f"shape mismatch: hidden {h.shape}, weights {w.shape}")
    if not np.all(np.isfinite(h)):
        raise InvalidArgumentError("hidden states must be finite")
    mean_sq = np.mean(h * h, axis=1) if h.shape[1] else np.zeros(h.shape[0])
    if eps <= 0 and np.any(mean_sq == 0):
        raise NumericDegenerateError("all-zero hidden state cannot be normalized with eps=0")
    scale = np.sqrt(mean_sq + eps)
    return h / scale[:, None] * w[None, :], scale


def normalize(h, w, eps: float = DEFAULT_EPS) -> Tuple[np.ndarray, float]:
    x, scale = normalize_rows(np.asarray(h, dtype=np.float64)[None, :], w, eps)
    return x[0], float(scale[0])


def binarize_rows(h, w, eps: float = DEFAULT_EPS) -> Tuple[BitMatrix, np.ndarray]:
    x, scale = normalize_rows(h, w, eps)
    return BitMatrix.from_values(x), scale


def binarize(h, w, eps: float = DEFAULT_EPS) -> BinaryTokenRep:
    x, scale = normalize(h, w, eps)
    return BinaryTokenRep(bits=pack(x, x.shape[0]), scale=scale)


def recover_rows(bits: BitMatrix, scales, w) -> np.ndarray:
    w = check_norm_weights(w, bits.dim)
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (len(bits),):
        raise InvalidArgumentError(f"expected {len(bits)} scales, got shape {scales.shape}")
    return bits.unpack() * scales[:, None] / w[None, :]


def recover(rep: BinaryTokenRep, w) -> np.ndarray:
    w = check_norm_weights(w, rep.bits.dim)
    return unpack(rep.bits) * rep.scale / w


class StraightThroughSign(torch.autograd.Function):
    """sign() forward (strict > 0), tanh derivative backward."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return ste_binarize_forward(x)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return ste_binarize_backward(x, grad_output)


def ste_binarize_forward(x: torch.Tensor) -> torch.Tensor:
    return torch.where(x > 0, torch.ones_like(x), -torch.ones_like(x))


def ste_binarize_backward(x: torch.Tensor, upstream_grad: torch.Tensor) -> torch.Tensor:
    t = torch.tanh(x)
    return upstream_grad * (1.0 - t * t)


def ste_sign(x: torch.Tensor) -> torch.Tensor:
    return StraightThroughSign.apply(x)


def rms_normalize(h: torch.Tensor, w: torch.Tensor, eps: float = DEFAULT_EPS):
    """Torch counterpart of ``normalize_rows`` over the last axis; returns (x, scale)."""
    scale = torch.sqrt(h.pow(2).mean(dim=-1, keepdim=True) + eps)
    return h / scale * w, scale


def recovery_head(b: torch.Tensor, proj_weights: torch.Tensor, proj_bias: torch.Tensor) -> torch.Tensor:
    d = b.shape[-1]
    if proj_weights.shape != (d, d) or proj_bias.shape != (d,):
        raise InvalidArgumentError(
            f"projection must map {d} -> {d}, got weights {tuple(proj_weights.shape)} and bias {tuple(proj_bias.shape)}"
        )
    return F.linear(b, proj_weights, proj_bias)


def recovery_loss(projected: torch.Tensor, h_pre: torch.Tensor) -> torch.Tensor:
    if projected.shape != h_pre.shape:
        raise InvalidArgumentError(
            f"shape mismatch: projected {tuple(projected.shape)} vs hidden {tuple(h_pre.shape)}"
        )
    return (h_pre - projected).pow(2).mean()


class RecoveryHead(nn.Module):
    """Linear projection of binary codes back onto the pre-binarization states."""

    def __init__(self, d: int):
        super().__init__()
        self.proj = nn.Linear(d, d)

    def forward(self, b: torch.Tensor) -> torch.Tensor:
        return recovery_head(b, self.proj.weight, self.proj.bias)
