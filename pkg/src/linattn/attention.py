"""Two multi-head self-attention mechanisms behind one interface.

``softmax``: the classic softmax(Q K^T / sqrt(d)) V, which materializes an
L x L score matrix per head and is quadratic in sequence length.

``simple``: the softmax-free reordering scale * Q (K^T V).  Computing the
d x d summary K^T V first makes the whole head linear in L, with no L x L
buffer ever allocated.  The two associations are equal in exact arithmetic
when no softmax sits between them, which is exactly what removing the
softmax buys.

Padding is handled per kind: softmax masks padded key columns with a large
negative score bias; simple zeroes padded rows of K and V before the
summary product, so each padded token contributes nothing to K^T V.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF_SCORE = -1e9  # exp() underflows to exactly 0 in both f32 and f64


class ConfigError(ValueError):
    """A configuration contradicts itself or the parameter shapes."""


class AttentionKind(str, Enum):
    SOFTMAX = "softmax"
    SIMPLE = "simple"


class ScaleMode(str, Enum):
    INV_SQRT_D = "inv_sqrt_d"
    INV_SQRT_L = "inv_sqrt_l"
    NONE = "none"


DEFAULT_SCALE = {
    AttentionKind.SOFTMAX: ScaleMode.INV_SQRT_D,
    AttentionKind.SIMPLE: ScaleMode.INV_SQRT_L,
}


class MaskMode(str, Enum):
    NONE = "none"
    PAD = "pad"


@dataclass
class AttentionParams:
    """Projection weights/biases for q, k, v plus the optional output layer."""

    q_weight: Tensor
    k_weight: Tensor
    v_weight: Tensor
    q_bias: Tensor
    k_bias: Tensor
    v_bias: Tensor
    out_weight: Optional[Tensor] = None
    out_bias: Optional[Tensor] = None

    def __post_init__(self):
        if (self.out_weight is None) != (self.out_bias is None):
            raise ConfigError("out_weight and out_bias must both be present or both absent")

    @property
    def d_embed(self) -> int:
        return self.q_weight.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.q_weight.shape[1]


@dataclass
class AttentionConfig:
    kind: AttentionKind = AttentionKind.SIMPLE
    n_heads: int = 1
    scale: Optional[ScaleMode] = None  # None -> kind-specific default
    use_output_linear: bool = False
    mask_mode: MaskMode = MaskMode.NONE

    def effective_scale(self) -> ScaleMode:
        return self.scale if self.scale is not None else DEFAULT_SCALE[self.kind]


def scale_value(mode: ScaleMode, true_length: int, d: int) -> float:
    if mode == ScaleMode.INV_SQRT_D:
        return 1.0 / np.sqrt(d)
    if mode == ScaleMode.INV_SQRT_L:
        return 1.0 / np.sqrt(true_length)
    return 1.0


def project_qkv(x: Tensor, p: AttentionParams) -> Tuple[Tensor, Tensor, Tensor]:
    """Q = x q_weight + q_bias (bias broadcast over rows), likewise K and V."""
    if x.shape[1] != p.d_embed:
        raise T.ShapeError(f"input width {x.shape[1]} != projection input {p.d_embed}")
    q = T.add_bias(T.matmul(x, p.q_weight), p.q_bias)
    k = T.add_bias(T.matmul(x, p.k_weight), p.k_bias)
    v = T.add_bias(T.matmul(x, p.v_weight), p.v_bias)
    return q, k, v


def split_heads(m: Tensor, n_heads: int) -> List[Tensor]:
    """Column-slice [L, D_hid] into n_heads pieces of width D_hid/n_heads.

    Head h takes columns [h*d, (h+1)*d); slices are views, no copies.
    """
    width = m.shape[1]
    if width % n_heads != 0:
        raise ConfigError(f"hidden width {width} not divisible by {n_heads} heads")
    d = width // n_heads
    return [T.slice_cols(m, h * d, (h + 1) * d) for h in range(n_heads)]


def softmax_attention_head(qh: Tensor, kh: Tensor, vh: Tensor,
                           scale: float = 1.0,
                           pad_mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(scale * Qh Kh^T) Vh.  Materializes the L x L score matrix.

    The scale folds into Qh before the product ((s Q) K^T == s (Q K^T)),
    so no second L x L buffer is spent on it.
    """
    if scale != 1.0:
        qh = T.scale(qh, scale)
    scores = T.matmul(qh, T.transpose(kh))
    if pad_mask is not None:
        bias = np.where(np.asarray(pad_mask, dtype=bool), 0.0, NEG_INF_SCORE)
        scores = T.add_bias(scores, Tensor(bias.astype(qh.dtype)))
    return T.matmul(T.softmax_lastdim(scores), vh)


def simple_attention_head(qh: Tensor, kh: Tensor, vh: Tensor,
                          scale: float = 1.0,
                          pad_mask: Optional[np.ndarray] = None) -> Tensor:
    """scale * Qh (Kh^T Vh): the d x d summary first, then Qh against it.

    Never allocates an L x L buffer.  Padded rows of Kh and Vh are zeroed
    first so they drop out of the summary.
    """
    if pad_mask is not None:
        keep = np.asarray(pad_mask, dtype=bool).astype(qh.dtype)
        kh = T.scale_rows(kh, keep)
        vh = T.scale_rows(vh, keep)
    out = T.matmul(qh, T.matmul(T.transpose(kh), vh))
    if scale != 1.0:
        out = T.scale(out, scale)
    return out


def attention_forward(x: Tensor, p: AttentionParams, cfg: AttentionConfig,
                      pad_mask: Optional[np.ndarray] = None) -> Tensor:
    """Project -> split heads -> per-head attention -> concat -> optional
    output linear.  The residual add belongs to the caller's block, not here.
    """
    if cfg.use_output_linear and p.out_weight is None:
        raise ConfigError("use_output_linear=True but params carry no output layer")
    if not cfg.use_output_linear and p.d_hidden != p.d_embed:
        raise ConfigError(
            f"without the output linear layer, d_hidden ({p.d_hidden}) must equal "
            f"d_embed ({p.d_embed})")
    if cfg.mask_mode == MaskMode.NONE:
        pad_mask = None
    length = x.shape[0]
    true_length = int(np.asarray(pad_mask, dtype=bool).sum()) if pad_mask is not None else length
    d = p.d_hidden // cfg.n_heads
    s = scale_value(cfg.effective_scale(), true_length, d)

    q, k, v = project_qkv(x, p)
    head_fn = simple_attention_head if cfg.kind == AttentionKind.SIMPLE else softmax_attention_head
    outs = [head_fn(qh, kh, vh, s, pad_mask)
            for qh, kh, vh in zip(*(split_heads(m, cfg.n_heads) for m in (q, k, v)))]
    merged = outs[0] if len(outs) == 1 else T.concat_cols(outs)
    if cfg.use_output_linear:
        merged = T.add_bias(T.matmul(merged, p.out_weight), p.out_bias)
    return merged


def flop_count(kind: AttentionKind, length: int, d: int, n_heads: int) -> int:
    """Analytic multiply/add count of the attention core (projections excluded).

    Per head, counting one fused multiply-add as 2 flops:
      softmax: 2*L^2*d (Q K^T) + L^2 (scale) + 5*L^2 (softmax: max, sub,
               exp, sum, div per entry) + 2*L^2*d (scores V)
             = 4*L^2*d + 6*L^2
      simple:  2*L*d^2 (K^T V) + 2*L*d^2 (Q against it) + L*d (scale)
             = 4*L*d^2 + L*d      -- exactly linear in L
    """
    if length <= 0 or d <= 0 or n_heads <= 0:
        raise ValueError(f"flop_count needs positive arguments, got L={length}, d={d}, heads={n_heads}")
    if kind == AttentionKind.SIMPLE:
        per_head = 4 * length * d * d + length * d
    else:
        per_head = 4 * length * length * d + 6 * length * length
    return n_heads * per_head
