"""MLM corruption and synthetic sequence tasks.

The tasks are built so that cross-token information is necessary and
sufficient: every token is uniform over the vocabulary on its own, but fully
determined by its neighbours.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

BERT_SPLIT = (0.8, 0.1, 0.1)
MASK_ONLY = (1.0, 0.0, 0.0)

TASK_KINDS = ("copy_shift_k", "mod_sum", "periodic")


def num_masked(length: int, rate: float) -> int:
    # guard against 0.15 * 100 == 15.000000000000002
    return int(math.ceil(rate * length - 1e-9))


def mlm_mask(tokens, rate: float, rng: np.random.Generator, vocab: int, mask_id: int | None = None,
             split: tuple[float, float, float] = BERT_SPLIT):
    """Select ``ceil(rate * len)`` positions and corrupt them.

    Each selected position becomes ``mask_id`` with probability ``split[0]``,
    a uniform random token in ``[0, vocab)`` with probability ``split[1]``, and
    stays unchanged otherwise. Returns ``(corrupted, positions, targets)`` with
    positions sorted ascending.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("mlm_mask needs a non-empty 1-D token sequence")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"mask rate must lie in [0, 1), got {rate}")
    if not math.isclose(sum(split), 1.0) or min(split) < 0:
        raise ValueError(f"corruption split must be a probability vector, got {split}")
    mask_id = vocab if mask_id is None else mask_id
    k = num_masked(tokens.size, rate)
    positions = np.sort(rng.choice(tokens.size, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    targets = tokens[positions].copy()
    corrupted = tokens.copy()
    if k:
        u = rng.random(k)
        random_tokens = rng.integers(0, vocab, size=k)
        to_mask = u < split[0]
        to_random = (u >= split[0]) & (u < split[0] + split[1])
        corrupted[positions[to_mask]] = mask_id
        corrupted[positions[to_random]] = random_tokens[to_random]
    return corrupted, positions.astype(np.int64), targets


def parse_task(kind: str) -> tuple[str, int]:
    m = re.fullmatch(r"copy_shift_(\d+)", kind)
    if m:
        return "copy_shift_k", int(m.group(1))
    if kind in ("mod_sum", "periodic"):
        return kind, 0
    raise ValueError(f"unknown task {kind!r}; expected copy_shift_<k>, mod_sum or periodic")


def generate_sequences(kind: str, n: int, vocab: int, rng: np.random.Generator, batch_size: int) -> np.ndarray:
    """``(batch_size, n)`` integer sequences of the named task."""
    if n < 4 or vocab < 4:
        raise ValueError("synthetic tasks need n >= 4 and vocab >= 4")
    family, k = parse_task(kind)
    seqs = np.empty((batch_size, n), dtype=np.int64)
    if family == "copy_shift_k":
        if not 1 <= k < n:
            raise ValueError(f"shift must satisfy 1 <= k < n, got k={k}")
        seqs[:, :k] = rng.integers(0, vocab, size=(batch_size, k))
        for i in range(k, n):
            seqs[:, i] = seqs[:, i - k]
    elif family == "mod_sum":
        seqs[:, :2] = rng.integers(0, vocab, size=(batch_size, 2))
        for i in range(2, n):
            seqs[:, i] = (seqs[:, i - 1] + seqs[:, i - 2]) % vocab
    else:
        for b in range(batch_size):
            period = int(rng.integers(2, n // 2 + 1))
            pattern = rng.integers(0, vocab, size=period)
            seqs[b] = np.resize(pattern, n)
    return seqs


@dataclass
class Batch:
    tokens: np.ndarray     # (batch, n) clean sequences
    inputs: np.ndarray     # (batch, n) corrupted sequences fed to the model
    positions: np.ndarray  # flat indices into batch * n
    targets: np.ndarray    # clean tokens at ``positions``


def synth_task_generate(kind: str, n: int, vocab: int, rng: np.random.Generator, batch_size: int = 32,
                        rate: float = 0.15, split: tuple[float, float, float] = BERT_SPLIT) -> Batch:
    """A batch of task sequences with an MLM corruption plan (mask id = ``vocab``)."""
    tokens = generate_sequences(kind, n, vocab, rng, batch_size)
    inputs = np.empty_like(tokens)
    positions, targets = [], []
    for b in range(batch_size):
        corrupted, pos, tgt = mlm_mask(tokens[b], rate, rng, vocab, vocab, split)
        inputs[b] = corrupted
        positions.append(pos + b * n)
        targets.append(tgt)
    return Batch(tokens, inputs, np.concatenate(positions), np.concatenate(targets))
