"""Linear-complexity attention laboratory.

A small, auditable stack for comparing softmax attention against its
softmax-free reordering Q (K^T V): a dense-tensor autodiff engine, both
attention mechanisms, an encoder model in four variants, an AdamW training
harness with synthetic long-sequence tasks, portable checkpoints that move
q-k-v weights between the two kinds, and a scaling benchmark.
"""

from .attention import (AttentionConfig, AttentionKind, AttentionParams,
                        MaskMode, ScaleMode, attention_forward, flop_count,
                        simple_attention_head, softmax_attention_head)
from .model import (Model, ModelConfig, Variant, block_forward,
                    count_parameters, count_trainable, init_parameters,
                    parameter_count)
from .optim import (OptimizerState, ScheduleConfig, adamw_step, evaluate,
                    lr_at_step, train)
from .rng import Rng
from .tensor import (F32, F64, AllocStats, ShapeError, Tensor, alloc_stats,
                     backward, finite_difference_gradient)
from .transfer import (FormatError, FreezeSet, ImportReport, Strictness,
                       convert_attention_kind, export_checkpoint, freeze,
                       import_checkpoint, load_checkpoint, save_checkpoint)

__version__ = "0.1.0"
