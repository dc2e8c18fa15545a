"""Portable named-tensor checkpoints and attention-kind transfer.

The STRN container (bit-exact layout, all integers little-endian):

    magic    4 bytes  b"STRN"
    version  u32      currently 1
    count    u32      number of entries
    entry*   repeated, in deterministic model order:
        name_len  u32
        name      UTF-8 bytes
        dtype     u8        0 = float32, 1 = float64
        rank      u8
        dims      u32 * rank
        data      raw little-endian values, prod(dims) * itemsize bytes

Because both attention kinds share projection shapes, a checkpoint written
by a model of one kind loads into the other unchanged; conversion is a
metadata flip (plus the kind's default scale mode), never a byte change.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from fnmatch import fnmatchcase
from typing import Dict, List, Tuple

import numpy as np

from .attention import AttentionKind, ConfigError
from .model import Model
from .tensor import ShapeError

MAGIC = b"STRN"
VERSION = 1

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Checkpoint bytes do not follow the STRN layout."""


class Strictness(str, Enum):
    STRICT = "strict"
    SUBSET = "subset"


@dataclass
class ImportReport:
    loaded: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)   # model params not filled
    ignored: List[str] = field(default_factory=list)   # checkpoint entries without a target

    @property
    def complete(self) -> bool:
        return not self.missing and not self.ignored


def export_checkpoint(model: Model) -> bytes:
    """Serialize all named parameters in their canonical order."""
    named = model.named_parameters()
    parts = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, p in named.items():
        raw = name.encode("utf-8")
        arr = p.data
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _DTYPE_CODE[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def parse_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    """Decode STRN bytes into name -> array; raises FormatError, touches nothing."""
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes at offset {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic: not an STRN checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported STRN version {version} (expected {VERSION})")
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPE:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _CODE_DTYPE[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
        if name in entries:
            raise FormatError(f"duplicate entry name {name!r}")
        entries[name] = arr
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last entry")
    return entries


def import_checkpoint(data: bytes, model: Model,
                      strictness: Strictness = Strictness.STRICT) -> ImportReport:
    """Load entries into the model's parameter buffers.

    STRICT requires an exact name-set match; SUBSET fills what it can and
    reports the rest.  The model is untouched unless every check passes.
    """
    strictness = Strictness(strictness)
    entries = parse_checkpoint(data)
    named = model.named_parameters()
    report = ImportReport(
        missing=sorted(set(named) - set(entries)),
        ignored=sorted(set(entries) - set(named)),
    )
    if strictness == Strictness.STRICT and (report.missing or report.ignored):
        raise FormatError(
            f"STRICT import mismatch: missing={report.missing} extra={report.ignored}")
    staged: List[Tuple[str, np.ndarray]] = []
    for name in named:
        if name not in entries:
            continue
        arr = entries[name]
        p = named[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise ShapeError(f"checkpoint entry {name!r} has shape {tuple(arr.shape)}, "
                             f"model expects {tuple(p.shape)}")
        if arr.dtype.newbyteorder("=") != p.dtype:
            raise FormatError(f"checkpoint entry {name!r} has dtype {arr.dtype.name}, "
                              f"model expects {p.dtype.name}")
        staged.append((name, arr))
    for name, arr in staged:
        named[name].data[...] = arr
        report.loaded.append(name)
    return report


def save_checkpoint(path, model: Model) -> None:
    with open(path, "wb") as fh:
        fh.write(export_checkpoint(model))


def load_checkpoint(path, model: Model, strictness: Strictness = Strictness.STRICT) -> ImportReport:
    with open(path, "rb") as fh:
        return import_checkpoint(fh.read(), model, strictness)


# ---------------------------------------------------------------------------
# attention-kind conversion and freezing
# ---------------------------------------------------------------------------

def convert_attention_kind(model: Model, new_kind: AttentionKind) -> Model:
    """Reinterpret the same parameter tensors under the other attention formula.

    Pure metadata: flips the kind and resets the scale mode to the new
    kind's default (1/sqrt(L) for simple, 1/sqrt(d) for softmax).  No
    parameter bytes change, so converting twice restores the original
    behavior bitwise.
    """
    new_kind = AttentionKind(new_kind)
    has_out = model.blocks[0].attn.out_weight is not None if model.blocks else True
    if not has_out and model.cfg.d_hidden != model.cfg.d_embed:
        raise ConfigError("conversion needs d_hidden == d_embed when the model has "
                          "no output linear layer")
    model.attention_kind = new_kind
    model.scale_mode = None  # None resolves to the kind's default at use
    return model


@dataclass
class FreezeSet:
    """Glob patterns over parameter names; {a,b} alternation is expanded."""

    patterns: List[str]


PRESET_FREEZES = {
    # the transfer experiment's set: all q-k-v projection weights and biases
    "qkv": ["block.*.attn.{q,k,v}.*"],
    "all": ["*"],
}


def _expand_braces(pattern: str) -> List[str]:
    lo = pattern.find("{")
    if lo == -1:
        return [pattern]
    hi = pattern.index("}", lo)
    out = []
    for alt in pattern[lo + 1:hi].split(","):
        out.extend(_expand_braces(pattern[:lo] + alt + pattern[hi + 1:]))
    return out


def resolve_freeze_patterns(spec: str) -> FreezeSet:
    """Comma-separated pattern list; names in PRESET_FREEZES expand first."""
    pats: List[str] = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        pats.extend(PRESET_FREEZES.get(token, [token]))
    return FreezeSet(pats)


def freeze(model: Model, fs: FreezeSet) -> List[str]:
    """Exclude matching parameters from optimization; returns matched names.

    Every pattern must match at least one parameter (catches typos).
    """
    named = model.named_parameters()
    matched: List[str] = []
    for pattern in fs.patterns:
        hits = [n for n in named for sub in _expand_braces(pattern) if fnmatchcase(n, sub)]
        if not hits:
            raise ValueError(f"freeze pattern {pattern!r} matches no parameters")
        matched.extend(h for h in hits if h not in matched)
    for name in matched:
        p = named[name]
        p.requires_grad = False
        p.zero_grad()
        model.frozen.add(name)
    return matched
