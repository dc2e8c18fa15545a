"""Desk-scale synthetic datasets: ListOps, majority classification, matching.

Token id conventions, shared by every generator and the model:
    0  CLS (reserved, prepended by batching / encode, never generated)
    1  PAD (reserved for right-padding)
    2+ content ids

Datasets serialize to a line-oriented text format, one example per line:
    label<TAB>tok tok tok ...
and for two-sequence matching examples:
    label<TAB>toks_a<TAB>toks_b
with tokens written as space-separated integer ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .rng import Rng

CLS_ID = 0
PAD_ID = 1
FIRST_CONTENT_ID = 2

ListOpsTree = Union[int, Tuple[str, list]]


@dataclass
class Example:
    tokens: List[int]
    label: int
    tokens_b: Optional[List[int]] = None
    true_length: int = field(default=0)

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("example has no tokens")
        if self.true_length == 0:
            self.true_length = len(self.tokens)


# ---------------------------------------------------------------------------
# ListOps
# ---------------------------------------------------------------------------

LISTOPS_OPERATORS = ("MAX", "MIN", "MED", "SM")

# 2..11 digits 0-9, 12..15 operators, 16 '(', 17 ')'
_DIGIT_BASE = FIRST_CONTENT_ID
_OP_BASE = _DIGIT_BASE + 10
_OPEN_ID = _OP_BASE + len(LISTOPS_OPERATORS)
_CLOSE_ID = _OPEN_ID + 1
LISTOPS_VOCAB_SIZE = _CLOSE_ID + 1


@dataclass
class ListOpsSpec:
    max_depth: int = 3
    max_args: int = 4
    max_length: int = 128
    operators: Tuple[str, ...] = LISTOPS_OPERATORS

    def __post_init__(self):
        if self.max_depth < 0 or self.max_args < 2 or self.max_length < 1:
            raise ValueError(f"ListOpsSpec bounds must be positive: {self}")
        unknown = set(self.operators) - set(LISTOPS_OPERATORS)
        if unknown:
            raise ValueError(f"unknown ListOps operators {sorted(unknown)}")


def eval_listops_oracle(tree: ListOpsTree) -> int:
    """Recursive reference evaluation; MED is the lower median, SM sum mod 10."""
    if isinstance(tree, int):
        if not 0 <= tree <= 9:
            raise ValueError(f"ListOps leaf {tree} is not a digit")
        return tree
    op, children = tree
    if not children:
        raise ValueError(f"operator {op} with no arguments")
    vals = [eval_listops_oracle(c) for c in children]
    if op == "MAX":
        return max(vals)
    if op == "MIN":
        return min(vals)
    if op == "MED":
        return sorted(vals)[(len(vals) - 1) // 2]
    if op == "SM":
        return sum(vals) % 10
    raise ValueError(f"unknown ListOps operator {op!r}")


def tree_to_tokens(tree: ListOpsTree) -> List[int]:
    if isinstance(tree, int):
        return [_DIGIT_BASE + tree]
    op, children = tree
    toks = [_OPEN_ID, _OP_BASE + LISTOPS_OPERATORS.index(op)]
    for c in children:
        toks.extend(tree_to_tokens(c))
    toks.append(_CLOSE_ID)
    return toks


def parse_listops(tokens: Sequence[int]) -> ListOpsTree:
    """Parse a token sequence back into a tree (independent of the generator)."""
    pos = 0

    def expr() -> ListOpsTree:
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError("truncated ListOps expression")
        t = tokens[pos]
        pos += 1
        if _DIGIT_BASE <= t < _DIGIT_BASE + 10:
            return t - _DIGIT_BASE
        if t != _OPEN_ID:
            raise ValueError(f"unexpected token id {t} at position {pos - 1}")
        if pos >= len(tokens) or not (_OP_BASE <= tokens[pos] < _OP_BASE + len(LISTOPS_OPERATORS)):
            raise ValueError(f"expected operator at position {pos}")
        op = LISTOPS_OPERATORS[tokens[pos] - _OP_BASE]
        pos += 1
        children = []
        while pos < len(tokens) and tokens[pos] != _CLOSE_ID:
            children.append(expr())
        if pos >= len(tokens):
            raise ValueError("missing closing bracket")
        pos += 1
        if not children:
            raise ValueError(f"operator {op} with no arguments")
        return (op, children)

    tree = expr()
    if pos != len(tokens):
        raise ValueError(f"trailing tokens after position {pos}")
    return tree


def _gen_tree(spec: ListOpsSpec, rng: Rng, depth: int) -> ListOpsTree:
    leaf_p = 1.0 if spec.max_depth == 0 else depth / spec.max_depth
    if depth >= spec.max_depth or rng.uniform() < leaf_p:
        return rng.integers(0, 10)
    op = spec.operators[rng.integers(0, len(spec.operators))]
    n_args = rng.integers(2, spec.max_args + 1)
    return (op, [_gen_tree(spec, rng, depth + 1) for _ in range(n_args)])


def gen_listops(spec: ListOpsSpec, n: int, rng: Rng) -> List[Example]:
    """Random prefix-notation trees, labeled by the evaluation oracle."""
    out = []
    for _ in range(n):
        for _attempt in range(1000):
            tree = _gen_tree(spec, rng, 0)
            tokens = tree_to_tokens(tree)
            if len(tokens) <= spec.max_length:
                break
        else:
            raise ValueError(f"no ListOps tree fits within max_length={spec.max_length}")
        out.append(Example(tokens=tokens, label=eval_listops_oracle(tree)))
    return out


# ---------------------------------------------------------------------------
# majority classification
# ---------------------------------------------------------------------------

def majority_group(token: int, vocab_size: int, n_classes: int) -> int:
    return (token - FIRST_CONTENT_ID) // (vocab_size // n_classes)


def gen_majority_classification(vocab_size: int, length: int, n_classes: int,
                                n: int, rng: Rng) -> List[Example]:
    """Uniform token streams labeled by the group holding a strict plurality.

    The content vocabulary splits contiguously into n_classes equal groups;
    draws whose group counts tie at the top are rejected and resampled.
    """
    if n_classes < 2 or length < 1 or vocab_size < n_classes or vocab_size % n_classes != 0:
        raise ValueError(
            f"majority task needs vocab_size divisible by n_classes >= 2 and length >= 1; "
            f"got vocab_size={vocab_size}, n_classes={n_classes}, length={length}")
    out = []
    for _ in range(n):
        while True:
            toks = rng.integers(FIRST_CONTENT_ID, FIRST_CONTENT_ID + vocab_size, (length,))
            counts = np.bincount(majority_group(toks, vocab_size, n_classes), minlength=n_classes)
            top = counts.max()
            if (counts == top).sum() == 1:
                break
        out.append(Example(tokens=toks.tolist(), label=int(counts.argmax())))
    return out


# ---------------------------------------------------------------------------
# matching pairs
# ---------------------------------------------------------------------------

def uniform_sequence_generator(vocab_size: int, length: int) -> Callable[[Rng], List[int]]:
    def gen(rng: Rng) -> List[int]:
        return rng.integers(FIRST_CONTENT_ID, FIRST_CONTENT_ID + vocab_size, (length,)).tolist()
    return gen


def gen_matching_pairs(base_generator: Callable[[Rng], List[int]],
                       corruption_rate: float, n: int, rng: Rng,
                       vocab_size: int = 8) -> List[Example]:
    """Balanced duplicate-detection pairs.

    Positives (label 1) pair a sequence with a copy that has at most
    corruption_rate of its tokens replaced; negatives (label 0) pair two
    independent samples.
    """
    if not (0.0 < corruption_rate < 1.0):
        raise ValueError(f"corruption_rate must be in (0, 1), got {corruption_rate}")
    out = []
    for i in range(n):
        a = base_generator(rng)
        if i % 2 == 0:
            b = list(a)
            max_flips = int(corruption_rate * len(a))
            for _ in range(rng.integers(0, max_flips + 1)):
                j = rng.integers(0, len(b))
                b[j] = rng.integers(FIRST_CONTENT_ID, FIRST_CONTENT_ID + vocab_size)
            label = 1
        else:
            b = base_generator(rng)
            label = 0
        out.append(Example(tokens=a, label=label, tokens_b=b))
    return out


# ---------------------------------------------------------------------------
# batching and serialization
# ---------------------------------------------------------------------------

def batch(examples: Sequence[Example], max_len: int,
          which: str = "tokens") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad to [n, max_len] with CLS prepended; mask is True on real tokens."""
    n = len(examples)
    ids = np.full((n, max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, max_len), dtype=bool)
    labels = np.empty(n, dtype=np.int64)
    for r, ex in enumerate(examples):
        toks = ex.tokens if which == "tokens" else ex.tokens_b
        if len(toks) > max_len - 1:
            raise ValueError(f"example of length {len(toks)} does not fit max_len {max_len} "
                             f"(one slot is reserved for CLS)")
        ids[r, 0] = CLS_ID
        ids[r, 1:1 + len(toks)] = toks
        mask[r, :1 + len(toks)] = True
        labels[r] = ex.label
    return ids, mask, labels


def unbatch(ids: np.ndarray, mask: np.ndarray) -> List[List[int]]:
    """Strip CLS and padding back off; inverse of batch for the token lists."""
    return [row[1:m.sum()].tolist() for row, m in zip(ids, mask)]


def save_dataset(path, examples: Sequence[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            cols = [str(ex.label), " ".join(map(str, ex.tokens))]
            if ex.tokens_b is not None:
                cols.append(" ".join(map(str, ex.tokens_b)))
            fh.write("\t".join(cols) + "\n")


def load_dataset(path) -> List[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise ValueError(f"{path}:{line_no}: expected 2 or 3 tab-separated columns")
            tokens = [int(t) for t in cols[1].split()]
            tokens_b = [int(t) for t in cols[2].split()] if len(cols) == 3 else None
            out.append(Example(tokens=tokens, label=int(cols[0]), tokens_b=tokens_b))
    return out
