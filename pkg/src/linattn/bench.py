"""Complexity/memory benchmark, the attention-output spread diagnostic,
and CSV emission.

The benchmark times forward-only attention over a sweep of sequence
lengths and fits a log-log slope per attention kind: ~1 for the linear
mechanism, ~2 for softmax.  Peak allocation per sweep point comes from the
tensor engine's byte counter, so the L x L score matrix of the softmax
path is directly visible and the linear path's absence of it is assertable.
"""

from __future__ import annotations

import contextlib
import dataclasses
import math
import time
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - the timing contract degrades gracefully
    threadpool_limits = None

from . import tensor as T
from .attention import (AttentionConfig, AttentionKind, AttentionParams,
                        MaskMode, ScaleMode, attention_forward, flop_count,
                        project_qkv, scale_value, split_heads)
from .model import Model, block_forward
from .rng import Rng
from .tensor import Tensor, alloc_stats


@dataclass
class BenchRecord:
    kind: str
    length: int
    n_heads: int
    d: int
    repeats: int
    wall_ms: float       # median over repeats, first warmup run discarded
    peak_bytes: int
    flops: int
    status: str = "ok"   # "failed" when a sweep point ran out of memory


_EVICT_BUFFER: Optional[np.ndarray] = None


def _evict_caches(value: float) -> None:
    """Stream-write a buffer larger than any LLC so every timed iteration
    starts from the same cache-cold state; otherwise small sweep points run
    cache-hot and bend the fitted slope."""
    global _EVICT_BUFFER
    if _EVICT_BUFFER is None:
        _EVICT_BUFFER = np.empty(16 * 1024 * 1024, dtype=np.float32)  # 64 MB
    _EVICT_BUFFER.fill(value)


def _random_params(d_model: int, rng: Rng, dtype=T.F32) -> AttentionParams:
    def w():
        bound = 1.0 / math.sqrt(d_model)
        return Tensor(((rng.uniform((d_model, d_model)) * 2 - 1) * bound).astype(dtype))

    def b():
        return Tensor(np.zeros(d_model, dtype=dtype))

    return AttentionParams(q_weight=w(), k_weight=w(), v_weight=w(),
                           q_bias=b(), k_bias=b(), v_bias=b())


def bench_scaling(kinds: Sequence[AttentionKind], lengths: Sequence[int],
                  d: int = 64, n_heads: int = 1, repeats: int = 3,
                  rng: Optional[Rng] = None,
                  record_timing: bool = True) -> Tuple[List[BenchRecord], Dict[str, float]]:
    """Time attention_forward per kind per length; returns records and the
    fitted log-log wall-time slope per kind.

    The sweep must be ascending with at least 3 points.  Allocation stats
    reset per point: peak_bytes covers one forward pass's temporaries (for
    softmax that includes the L x L score matrix).  Out-of-memory points
    are marked failed and the sweep continues.

    Timing protocol: strictly single-threaded BLAS (multi-threaded
    small-matrix kernels bend the fitted slope), caches evicted before
    every timed pass, and repeats taken in rounds interleaved across the
    sweep so drifting machine state hits every length equally.
    """
    lengths = list(lengths)
    if len(lengths) < 3 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError(f"need an ascending sweep of >= 3 lengths, got {lengths}")
    if repeats < 3:
        raise ValueError("repeats must be >= 3 for a meaningful median")
    rng = rng or Rng(0)
    d_model = d * n_heads
    records: List[BenchRecord] = []
    single_thread = threadpool_limits(1) if threadpool_limits is not None \
        else contextlib.nullcontext()
    with single_thread:
        for ki, kind in enumerate(kinds):
            kind = AttentionKind(kind)
            cfg = AttentionConfig(kind=kind, n_heads=n_heads, use_output_linear=False,
                                  mask_mode=MaskMode.NONE)
            params = _random_params(d_model, rng.split(1000 + ki))
            inputs: Dict[int, Tensor] = {}
            peaks: Dict[int, int] = {}
            failed: set = set()
            for idx, length in enumerate(lengths):
                point_rng = rng.split(idx + 1)
                try:
                    inputs[length] = Tensor(
                        (point_rng.uniform((length, d_model)) * 2 - 1).astype(T.F32))
                    baseline = alloc_stats.current_bytes
                    alloc_stats.reset_peak()
                    out = attention_forward(inputs[length], params, cfg)  # warmup
                    del out
                    peaks[length] = alloc_stats.peak_bytes - baseline
                except MemoryError:
                    failed.add(length)
                    inputs.pop(length, None)
            times: Dict[int, List[float]] = {length: [] for length in lengths}
            for rep in range(repeats):
                for length in lengths:
                    if length in failed:
                        continue
                    try:
                        _evict_caches(float(rep + 1))
                        t0 = time.perf_counter()
                        out = attention_forward(inputs[length], params, cfg)
                        times[length].append((time.perf_counter() - t0) * 1e3)
                        del out
                    except MemoryError:
                        failed.add(length)
            for length in lengths:
                flops = flop_count(kind, length, d, n_heads)
                if length in failed:
                    records.append(BenchRecord(kind=kind.value, length=length,
                                               n_heads=n_heads, d=d, repeats=repeats,
                                               wall_ms=0.0, peak_bytes=0, flops=flops,
                                               status="failed"))
                else:
                    records.append(BenchRecord(
                        kind=kind.value, length=length, n_heads=n_heads, d=d,
                        repeats=repeats,
                        wall_ms=float(np.median(times[length])) if record_timing else 0.0,
                        peak_bytes=int(peaks[length]), flops=flops))
            inputs.clear()
    slopes = {k.value if isinstance(k, AttentionKind) else str(k):
              fit_loglog_slope([(r.length, r.wall_ms) for r in records
                                if r.kind == AttentionKind(k).value and r.status == "ok"])
              for k in kinds}
    return records, slopes


def fit_loglog_slope(points: Iterable[Tuple[int, float]]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    pts = [(x, y) for x, y in points if y > 0]
    if len(pts) < 2:
        return float("nan")
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    lx = lx - lx.mean()
    return float((lx * (ly - ly.mean())).sum() / (lx * lx).sum())


# ---------------------------------------------------------------------------
# attention-output spread diagnostic
# ---------------------------------------------------------------------------

def attention_std_diagnostic(model: Model, probe: Sequence) -> List[float]:
    """Per-block standard deviation of the raw attention product.

    For each block, the statistic pools every entry of every head of the
    pre-output-linear product over the whole probe batch (population std):
      simple kind:  scale * Qh (Kh^T Vh)
      softmax kind: (Qh Kh^T / sqrt(d)) Vh  -- softmax deliberately omitted
    The probe is a sequence of token-id arrays (already including CLS).
    """
    n_blocks = len(model.blocks)
    per_block_entries: List[List[np.ndarray]] = [[] for _ in range(n_blocks)]
    d = model.cfg.d_hidden // model.cfg.n_heads
    for ids in probe:
        ids = np.asarray(ids, dtype=np.int64)
        x = T.add(T.embedding_lookup(model.tok_embed, ids),
                  T.embedding_lookup(model.pos_embed, np.arange(ids.shape[0])))
        for bi, bp in enumerate(model.blocks):
            q, k, v = project_qkv(x, bp.attn)
            heads = zip(*(split_heads(m, model.cfg.n_heads) for m in (q, k, v)))
            for qh, kh, vh in heads:
                if model.attention_kind == AttentionKind.SIMPLE:
                    s = scale_value(model.scale_mode or ScaleMode.INV_SQRT_L, ids.shape[0], d)
                    prod = qh.data @ (kh.data.T @ vh.data) * s
                else:
                    prod = (qh.data @ kh.data.T / math.sqrt(d)) @ vh.data
                per_block_entries[bi].append(prod.reshape(-1))
            x = block_forward(x, bp, model.cfg, kind=model.attention_kind,
                              scale_mode=model.scale_mode, training=False)
    return [float(np.std(np.concatenate(chunks))) for chunks in per_block_entries]


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def _format_field(value) -> str:
    if isinstance(value, float) or isinstance(value, np.floating):
        return f"{float(value):.9g}"
    text = str(value)
    if any(c in text for c in ",\"\n"):
        text = '"' + text.replace('"', '""') + '"'
    return text


def emit_csv(rows: Sequence, path, columns: Optional[Sequence[str]] = None) -> None:
    """Write records (dataclasses or mappings) as CSV with a header row.

    Floats print with 9 significant digits; row order is preserved.
    """
    rows = list(rows)
    if columns is None:
        if rows and dataclasses.is_dataclass(rows[0]):
            columns = [f.name for f in dataclasses.fields(rows[0])]
        elif rows:
            columns = list(rows[0].keys())
        else:
            raise ValueError("empty row list needs explicit columns")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            get = (lambda c: getattr(row, c)) if dataclasses.is_dataclass(row) else row.__getitem__
            fh.write(",".join(_format_field(get(c)) for c in columns) + "\n")
