"""Denoising-objective noiser: span infilling plus token flips under one budget.

A corruption draws from a shared budget of ``ceil(mask_token_budget * n)``
maskable tokens: ``ceil(random_mask * n)`` of them are single-token flips,
the remainder is consumed by Poisson-length spans each replaced by a single
mask token.  Special tokens are never touched.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import xxhash

from .tokenizer import MASK_ID, NUM_SPECIALS, TokenSeq, Vocab


class CorruptorError(ValueError):
    pass


class BudgetInconsistent(CorruptorError):
    pass


class EmptyStream(CorruptorError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    """Knobs of the denoising objective.

    Defaults are the ablation winners: budget 0.20, random_mask 0.10,
    span-length lambda 3.5, token randomization off.
    """

    mask_token_budget: float = 0.20
    random_mask: float = 0.10
    poisson_lambda: float = 3.5
    randomize_tokens: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_token_budget <= 1.0:
            raise BudgetInconsistent(
                f"mask_token_budget must be in [0,1], got {self.mask_token_budget}")
        if not 0.0 <= self.random_mask <= self.mask_token_budget:
            raise BudgetInconsistent(
                f"random_mask ({self.random_mask}) must not exceed "
                f"mask_token_budget ({self.mask_token_budget})")
        if self.poisson_lambda <= 0:
            raise CorruptorError("poisson_lambda must be positive")


def paper_best() -> NoiseConfig:
    """The frozen winning-ablation configuration."""
    return NoiseConfig()


@dataclass
class CorruptedPair:
    source: list[int]
    target: list[int]
    mask_report: list[tuple[int, int, str]]  # (start, length, action)
    n_maskable: int

    @property
    def affected(self):
        return sum(length for _, length, _ in self.mask_report)


def per_sample_rng(global_seed: int, sample_index: int) -> np.random.Generator:
    """Independent per-sample stream so results don't depend on scheduling."""
    digest = xxhash.xxh64(f"{global_seed}:{sample_index}".encode()).intdigest()
    return np.random.default_rng(digest)


def corrupt(seq, cfg: NoiseConfig, rng: np.random.Generator,
            vocab: Vocab) -> CorruptedPair:
    """Corrupt a token sequence; deterministic given (seq, cfg, rng state).

    Report entries use positions in the original (target) sequence.  Spans
    must be contiguous runs of non-special tokens; each is replaced by one
    mask token, so the source is shorter than the target by
    ``sum(span_length - 1)``.
    """
    ids = list(seq.ids) if isinstance(seq, TokenSeq) else list(seq)
    maskable = [i for i, t in enumerate(ids) if not Vocab.is_special(t)]
    n = len(maskable)
    if n < 1:
        return CorruptedPair(source=list(ids), target=ids, mask_report=[],
                             n_maskable=0)

    budget = math.ceil(cfg.mask_token_budget * n)
    flips_n = min(math.ceil(cfg.random_mask * n), budget) if cfg.random_mask > 0 else 0
    infill_budget = budget - flips_n

    occupied = np.zeros(n, dtype=bool)
    spans: list[tuple[int, int]] = []  # (start in maskable space, length)
    remaining = infill_budget
    while remaining > 0:
        length = 0
        while length == 0:
            length = int(rng.poisson(cfg.poisson_lambda))
        length = min(length, remaining)
        while True:
            placed = False
            for _ in range(10 * n):
                start = int(rng.integers(0, n - length + 1))
                window = occupied[start:start + length]
                contiguous = maskable[start + length - 1] - maskable[start] == length - 1
                if not window.any() and contiguous:
                    placed = True
                    break
            if placed:
                break
            if length > 1:
                length -= 1  # rejection cap hit: shorten and retry
            else:
                free = np.flatnonzero(~occupied)
                start = int(rng.choice(free))
                placed = True
                break
        occupied[start:start + length] = True
        spans.append((start, length))
        remaining -= length

    uncovered = np.flatnonzero(~occupied)
    flip_positions = []
    if flips_n > 0:
        flip_positions = sorted(
            int(p) for p in rng.choice(uncovered, size=flips_n, replace=False))
    n_randomize = flips_n // 2 if cfg.randomize_tokens else 0
    randomized = set()
    if n_randomize:
        randomized = {int(p) for p in
                      rng.choice(np.array(flip_positions), size=n_randomize,
                                 replace=False)}

    # Assemble the source sequence and the report in original coordinates.
    replace_span: dict[int, int] = {}  # original start -> length
    for start, length in spans:
        replace_span[maskable[start]] = length
    flip_at: dict[int, str] = {}
    for p in flip_positions:
        flip_at[maskable[p]] = "randomize" if p in randomized else "flip"

    source: list[int] = []
    report: list[tuple[int, int, str]] = []
    pos = 0
    while pos < len(ids):
        if pos in replace_span:
            length = replace_span[pos]
            source.append(MASK_ID)
            report.append((pos, length, "infill"))
            pos += length
        elif pos in flip_at:
            action = flip_at[pos]
            if action == "randomize":
                source.append(int(rng.integers(NUM_SPECIALS, len(vocab))))
            else:
                source.append(MASK_ID)
            report.append((pos, 1, action))
            pos += 1
        else:
            source.append(ids[pos])
            pos += 1

    return CorruptedPair(source=source, target=ids,
                         mask_report=sorted(report), n_maskable=n)


@dataclass
class CorruptionStats:
    n_pairs: int
    affected_fraction_mean: float
    affected_fraction_sd: float
    span_length_histogram: dict[int, int] = field(default_factory=dict)
    action_counts: dict[str, int] = field(default_factory=dict)

    @property
    def mean_span_length(self):
        total = sum(self.span_length_histogram.values())
        if not total:
            return 0.0
        return sum(k * v for k, v in self.span_length_histogram.items()) / total


def corruption_stats(pairs) -> CorruptionStats:
    """Exact aggregation of mask reports over a stream of pairs."""
    fractions = []
    hist: Counter[int] = Counter()
    actions: Counter[str] = Counter()
    for pair in pairs:
        n = max(pair.n_maskable, 1)
        fractions.append(pair.affected / n)
        for _, length, action in pair.mask_report:
            actions[action] += 1
            if action == "infill":
                hist[length] += 1
    if not fractions:
        raise EmptyStream("no corrupted pairs to aggregate")
    arr = np.asarray(fractions, dtype=float)
    return CorruptionStats(
        n_pairs=len(fractions),
        affected_fraction_mean=float(arr.mean()),
        affected_fraction_sd=float(arr.std()),
        span_length_histogram=dict(sorted(hist.items())),
        action_counts=dict(actions),
    )
