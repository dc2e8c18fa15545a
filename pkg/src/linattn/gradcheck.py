"""Whole-model gradient verification against central finite differences.

Builds a tiny float64 model, computes analytic gradients of a classification
loss via one backward pass, then re-derives the gradient of every parameter
tensor numerically and reports the worst relative disagreement per tensor.
"""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .model import Model, ModelConfig, init_parameters
from .rng import Rng
from .tensor import Tensor, finite_difference_gradient, gradient_rel_error


def _loss_fn(model: Model, ids, label: int, ids_b=None) -> Tensor:
    if ids_b is not None:
        logits = model.classify_pair(ids, ids_b)
    else:
        logits = model.classify(ids)
    return T.cross_entropy_mean(T.stack_rows([logits]), [label])


def model_gradcheck(cfg: ModelConfig, seed: int = 0, h: float = 1e-5,
                    length: int = 6, pair: bool = False) -> Dict[str, float]:
    """Relative error per parameter tensor, analytic vs finite differences."""
    model = init_parameters(cfg, Rng(seed), dtype=T.F64)
    data_rng = Rng(seed + 1)
    ids = data_rng.integers(2, cfg.vocab_size, (length,))
    ids_b = data_rng.integers(2, cfg.vocab_size, (length,)) if pair else None
    label = int(data_rng.integers(0, cfg.n_classes))

    loss = _loss_fn(model, ids, label, ids_b)
    T.backward(loss)

    errors: Dict[str, float] = {}
    for name, p in model.named_parameters().items():
        def f(t: Tensor, _p=p) -> Tensor:
            saved = _p.data
            _p.data = t.data
            try:
                return _loss_fn(model, ids, label, ids_b)
            finally:
                _p.data = saved

        numeric = finite_difference_gradient(f, Tensor(p.data.copy(), dtype=T.F64), h=h)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = gradient_rel_error(analytic, numeric.data)
    return errors


def run_model_gradcheck(cfg: ModelConfig, tolerance: float = 1e-4, seed: int = 0,
                        length: int = 6, pair: bool = False,
                        printer: Optional[callable] = print) -> bool:
    """Print per-tensor errors; True iff all are within tolerance."""
    errors = model_gradcheck(cfg, seed=seed, length=length, pair=pair)
    ok = True
    for name, err in errors.items():
        good = err <= tolerance
        ok = ok and good
        if printer:
            printer(f"{'PASS' if good else 'FAIL'}  {name:32s} rel_err={err:.3e}")
    if printer:
        printer(f"gradcheck {'passed' if ok else 'FAILED'} "
                f"({len(errors)} tensors, tolerance {tolerance:g})")
    return ok
