"""Transformer encoder assembly: embeddings, blocks, pooling, heads.

Four block variants share one code path:

  vanilla     softmax attention, output linear layer, standard residuals
  simple      linear attention, no output linear (needs d_hidden == d_embed)
  simple_res  simple plus the extra skip connection past each layer norm
  simple_resl simple_res plus the output linear layer

The block is post-norm: each sublayer computes LN(input + Drop(f(input))).
With the extra skip, the sublayer input is added again after its LN, so a
zero-weight simple_res block reduces to the closed form
LN(LN(x) + x) + LN(x) + x.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, AttentionKind, AttentionParams,
                        ConfigError, MaskMode, ScaleMode, attention_forward)
from .rng import Rng
from .tasks import CLS_ID
from .tensor import Tensor


class Variant(str, Enum):
    VANILLA = "vanilla"
    SIMPLE = "simple"
    SIMPLE_RES = "simple_res"
    SIMPLE_RESL = "simple_resl"


# variant -> (attention kind, extra skip connection, output linear layer)
VARIANT_TRAITS = {
    Variant.VANILLA: (AttentionKind.SOFTMAX, False, True),
    Variant.SIMPLE: (AttentionKind.SIMPLE, False, False),
    Variant.SIMPLE_RES: (AttentionKind.SIMPLE, True, False),
    Variant.SIMPLE_RESL: (AttentionKind.SIMPLE, True, True),
}


@dataclass
class ModelConfig:
    variant: Variant = Variant.SIMPLE_RES
    n_blocks: int = 2
    n_heads: int = 4
    d_embed: int = 64
    d_hidden: int = 64
    d_mlp: int = 128
    vocab_size: int = 32
    max_len: int = 128
    n_classes: int = 2
    dropout_p: float = 0.1
    activation: str = "gelu"
    pooling: str = "cls"
    pair_head: bool = False
    # extra skip lands after each sublayer's LN (default) or, as the
    # alternative reading of the block diagram, once after the second LN only
    extra_skip_per_sublayer: bool = True

    def __post_init__(self):
        self.variant = Variant(self.variant)
        kind, extra, linear = VARIANT_TRAITS[self.variant]
        if not linear and self.d_hidden != self.d_embed:
            raise ConfigError(
                f"variant {self.variant.value} has no output linear layer, so "
                f"d_hidden ({self.d_hidden}) must equal d_embed ({self.d_embed})")
        if self.d_hidden % self.n_heads != 0:
            raise ConfigError(f"d_hidden {self.d_hidden} not divisible by {self.n_heads} heads")
        if self.pooling != "cls":
            raise ConfigError(f"unsupported pooling {self.pooling!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2 (ids 0 and 1 are reserved)")

    @property
    def attention_kind(self) -> AttentionKind:
        return VARIANT_TRAITS[self.variant][0]

    @property
    def extra_skip(self) -> bool:
        return VARIANT_TRAITS[self.variant][1]

    @property
    def use_output_linear(self) -> bool:
        return VARIANT_TRAITS[self.variant][2]


@dataclass
class BlockParams:
    attn: AttentionParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class Model:
    """Parameter container plus the (mutable) attention kind it runs under.

    ``attention_kind`` and ``scale_mode`` start at the variant defaults and
    are what weight transfer flips; the tensors themselves never move.
    """

    cfg: ModelConfig
    tok_embed: Tensor
    pos_embed: Tensor
    blocks: List[BlockParams]
    head_weight: Tensor
    head_bias: Tensor
    pair_weight: Optional[Tensor] = None
    pair_bias: Optional[Tensor] = None
    attention_kind: AttentionKind = AttentionKind.SIMPLE
    scale_mode: Optional[ScaleMode] = None
    frozen: set = field(default_factory=set)

    @property
    def dtype(self):
        return self.tok_embed.dtype

    def named_parameters(self) -> Dict[str, Tensor]:
        """Canonical name -> tensor map, in deterministic order.

        The name schema is the compatibility contract for checkpoints:
        embed.{tok|pos}, block.{i}.attn.{q|k|v|out}.{weight|bias},
        block.{i}.ln{1|2}.{gamma|beta}, block.{i}.mlp.{0|1}.{weight|bias},
        head.{weight|bias}, pair.{weight|bias}.
        """
        named: Dict[str, Tensor] = {"embed.tok": self.tok_embed, "embed.pos": self.pos_embed}
        for i, bp in enumerate(self.blocks):
            pre = f"block.{i}"
            for key, w, b in (("q", bp.attn.q_weight, bp.attn.q_bias),
                              ("k", bp.attn.k_weight, bp.attn.k_bias),
                              ("v", bp.attn.v_weight, bp.attn.v_bias)):
                named[f"{pre}.attn.{key}.weight"] = w
                named[f"{pre}.attn.{key}.bias"] = b
            if bp.attn.out_weight is not None:
                named[f"{pre}.attn.out.weight"] = bp.attn.out_weight
                named[f"{pre}.attn.out.bias"] = bp.attn.out_bias
            named[f"{pre}.ln1.gamma"] = bp.ln1_gamma
            named[f"{pre}.ln1.beta"] = bp.ln1_beta
            named[f"{pre}.ln2.gamma"] = bp.ln2_gamma
            named[f"{pre}.ln2.beta"] = bp.ln2_beta
            named[f"{pre}.mlp.0.weight"] = bp.mlp_w1
            named[f"{pre}.mlp.0.bias"] = bp.mlp_b1
            named[f"{pre}.mlp.1.weight"] = bp.mlp_w2
            named[f"{pre}.mlp.1.bias"] = bp.mlp_b2
        named["head.weight"] = self.head_weight
        named["head.bias"] = self.head_bias
        if self.pair_weight is not None:
            named["pair.weight"] = self.pair_weight
            named["pair.bias"] = self.pair_bias
        return named

    def zero_grads(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    # forward passes ------------------------------------------------------

    def encode(self, ids, *, training: bool = False, rng: Optional[Rng] = None,
               pad_mask: Optional[np.ndarray] = None, prepend_cls: bool = True) -> Tensor:
        """Embed, run all blocks, return the hidden state at the CLS slot."""
        ids = np.asarray(ids, dtype=np.int64)
        if prepend_cls:
            ids = np.concatenate([[CLS_ID], ids])
            if pad_mask is not None:
                pad_mask = np.concatenate([[True], np.asarray(pad_mask, dtype=bool)])
        length = ids.shape[0]
        if length > self.cfg.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.cfg.max_len}")
        x = T.add(T.embedding_lookup(self.tok_embed, ids),
                  T.embedding_lookup(self.pos_embed, np.arange(length)))
        for bp in self.blocks:
            x = block_forward(x, bp, self.cfg, kind=self.attention_kind,
                              scale_mode=self.scale_mode, pad_mask=pad_mask,
                              training=training, rng=rng)
        return T.row_at(x, 0)

    def classify(self, ids, **kw) -> Tensor:
        """Logits over n_classes for one token sequence."""
        e = self.encode(ids, **kw)
        return _vec_dense(e, self.head_weight, self.head_bias)

    def classify_pair(self, ids_a, ids_b, *, training: bool = False,
                      rng: Optional[Rng] = None,
                      pad_mask_a: Optional[np.ndarray] = None,
                      pad_mask_b: Optional[np.ndarray] = None,
                      prepend_cls: bool = True) -> Tensor:
        """Two-sequence logits: shared encoder, then the combined features
        [e_a, e_b, e_a*e_b, e_a-e_b] through a relu interior layer."""
        if self.pair_weight is None:
            raise ConfigError("model was built without a pair head")
        e_a = self.encode(ids_a, training=training, rng=rng, pad_mask=pad_mask_a,
                          prepend_cls=prepend_cls)
        e_b = self.encode(ids_b, training=training, rng=rng, pad_mask=pad_mask_b,
                          prepend_cls=prepend_cls)
        feats = T.concat_vec([e_a, e_b, T.mul(e_a, e_b), T.sub(e_a, e_b)])
        h = T.relu(_vec_dense(feats, self.pair_weight, self.pair_bias))
        return _vec_dense(h, self.head_weight, self.head_bias)


def _vec_dense(v: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Dense layer on a rank-1 vector: v @ w + b."""
    row = T.reshape(v, (1, v.shape[0]))
    return T.reshape(T.add_bias(T.matmul(row, w), b), (w.shape[1],))


def block_forward(x: Tensor, bp: BlockParams, cfg: ModelConfig, *,
                  kind: Optional[AttentionKind] = None,
                  scale_mode: Optional[ScaleMode] = None,
                  pad_mask: Optional[np.ndarray] = None,
                  training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """One encoder block; see the module docstring for the residual layout."""
    kind = kind if kind is not None else cfg.attention_kind
    attn_cfg = AttentionConfig(kind=kind, n_heads=cfg.n_heads, scale=scale_mode,
                               use_output_linear=bp.attn.out_weight is not None,
                               mask_mode=MaskMode.PAD if pad_mask is not None else MaskMode.NONE)
    att = attention_forward(x, bp.attn, attn_cfg, pad_mask)
    att = T.dropout(att, cfg.dropout_p, training, rng)
    a = T.layer_norm(T.add(x, att), bp.ln1_gamma, bp.ln1_beta)
    if cfg.extra_skip and cfg.extra_skip_per_sublayer:
        a = T.add(a, x)

    h = T.add_bias(T.matmul(a, bp.mlp_w1), bp.mlp_b1)
    h = T.activation(h, cfg.activation)
    h = T.dropout(h, cfg.dropout_p, training, rng)
    m = T.add_bias(T.matmul(h, bp.mlp_w2), bp.mlp_b2)
    out = T.layer_norm(T.add(a, m), bp.ln2_gamma, bp.ln2_beta)
    if cfg.extra_skip:
        out = T.add(out, a if cfg.extra_skip_per_sublayer else x)
    return out


# parameter initialization --------------------------------------------------

def _uniform_fan_in(rng: Rng, shape, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(shape[0])
    data = ((rng.uniform(shape) * 2.0 - 1.0) * bound).astype(dtype)
    return Tensor(data, requires_grad=True)


def _zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_parameters(cfg: ModelConfig, rng: Rng, dtype=T.F32) -> Model:
    """Fresh model, fully determined by (cfg, rng.seed).

    Weights ~ uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero,
    layer norm at (1, 0), embeddings ~ normal(0, 0.02).
    """
    de, dh = cfg.d_embed, cfg.d_hidden
    tok = Tensor(rng.normal((cfg.vocab_size, de), std=0.02).astype(dtype), requires_grad=True)
    pos = Tensor(rng.normal((cfg.max_len, de), std=0.02).astype(dtype), requires_grad=True)
    blocks = []
    for _ in range(cfg.n_blocks):
        attn = AttentionParams(
            q_weight=_uniform_fan_in(rng, (de, dh), dtype),
            k_weight=_uniform_fan_in(rng, (de, dh), dtype),
            v_weight=_uniform_fan_in(rng, (de, dh), dtype),
            q_bias=_zeros_param((dh,), dtype),
            k_bias=_zeros_param((dh,), dtype),
            v_bias=_zeros_param((dh,), dtype),
            out_weight=_uniform_fan_in(rng, (dh, de), dtype) if cfg.use_output_linear else None,
            out_bias=_zeros_param((de,), dtype) if cfg.use_output_linear else None,
        )
        blocks.append(BlockParams(
            attn=attn,
            ln1_gamma=_ones_param((de,), dtype), ln1_beta=_zeros_param((de,), dtype),
            ln2_gamma=_ones_param((de,), dtype), ln2_beta=_zeros_param((de,), dtype),
            mlp_w1=_uniform_fan_in(rng, (de, cfg.d_mlp), dtype),
            mlp_b1=_zeros_param((cfg.d_mlp,), dtype),
            mlp_w2=_uniform_fan_in(rng, (cfg.d_mlp, de), dtype),
            mlp_b2=_zeros_param((de,), dtype),
        ))
    head_w = _uniform_fan_in(rng, (de, cfg.n_classes), dtype)
    head_b = _zeros_param((cfg.n_classes,), dtype)
    pair_w = _uniform_fan_in(rng, (4 * de, de), dtype) if cfg.pair_head else None
    pair_b = _zeros_param((de,), dtype) if cfg.pair_head else None
    return Model(cfg=cfg, tok_embed=tok, pos_embed=pos, blocks=blocks,
                 head_weight=head_w, head_bias=head_b,
                 pair_weight=pair_w, pair_bias=pair_b,
                 attention_kind=cfg.attention_kind,
                 scale_mode=None)


def parameter_count(cfg: ModelConfig) -> int:
    """Analytic tensor-entry count for a config; mirrors init_parameters."""
    de, dh = cfg.d_embed, cfg.d_hidden
    n = cfg.vocab_size * de + cfg.max_len * de
    per_block = 3 * (de * dh + dh) + 4 * de + de * cfg.d_mlp + cfg.d_mlp + cfg.d_mlp * de + de
    if cfg.use_output_linear:
        per_block += dh * de + de
    n += cfg.n_blocks * per_block
    n += de * cfg.n_classes + cfg.n_classes
    if cfg.pair_head:
        n += 4 * de * de + de
    return n


def count_parameters(model: Model) -> int:
    return sum(p.size for p in model.named_parameters().values())


def count_trainable(model: Model) -> int:
    return sum(p.size for p in model.named_parameters().values() if p.requires_grad)
