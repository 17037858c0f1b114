"""Task and language mixture rates, seeded draws and MLM corruption.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence``; draws use ``Generator.random()`` doubles, whose stream
is fixed by numpy for a given seed on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .exceptions import ConfigurationError

DEFAULT_CAP = 2 ** 17
DEFAULT_ALPHA = 0.3
IGNORE_LABEL = -100


class SeededRng:
    """PCG64 stream that counts how many values it has handed out."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))
        self.position = 0

    def random(self, size=None):
        out = self.generator.random(size)
        self.position += 1 if size is None else int(np.prod(size))
        return out

    def integers(self, low, high=None, size=None):
        out = self.generator.integers(low, high, size)
        self.position += 1 if size is None else int(np.prod(size))
        return out

    def permutation(self, n):
        self.position += int(n)
        return self.generator.permutation(n)

    def child(self, key: int) -> "SeededRng":
        """An independent stream derived from ``(seed, key)``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return SeededRng(int(ss.generate_state(1, dtype=np.uint32)[0]))


@dataclass
class MultiTaskMixture:
    sizes: dict
    cap: int
    rates: dict
    exact: dict = field(default_factory=dict)

    @property
    def epoch_examples(self):
        """One pass over the capped mixture: sum of min(size, cap)."""
        return sum(min(n, self.cap) for n in self.sizes.values())

    def to_dict(self):
        return {"kind": "task", "sizes": dict(self.sizes), "cap": self.cap,
                "rates": dict(self.rates), "exact": {k: str(v) for k, v in self.exact.items()},
                "epoch_examples": self.epoch_examples}


@dataclass
class LanguageMixture:
    counts: dict
    alpha: float
    rates: dict

    def to_dict(self):
        return {"kind": "language", "counts": dict(self.counts), "alpha": self.alpha,
                "rates": dict(self.rates)}


def compute_task_rates(sizes: dict, cap: int = DEFAULT_CAP) -> MultiTaskMixture:
    """Sampling rate of each task proportional to its example count, capped at ``cap``."""
    if not sizes:
        raise ConfigurationError("compute_task_rates needs at least one task")
    if cap <= 0:
        raise ConfigurationError(f"cap must be positive, got {cap}")
    bad = {k: v for k, v in sizes.items() if v <= 0}
    if bad:
        raise ConfigurationError(f"task sizes must be positive: {bad}")
    capped = {k: min(int(v), int(cap)) for k, v in sizes.items()}
    total = sum(capped.values())
    exact = {k: Fraction(v, total) for k, v in capped.items()}
    return MultiTaskMixture(dict(sizes), int(cap), {k: float(f) for k, f in exact.items()}, exact)


def compute_language_rates(counts: dict, alpha: float = DEFAULT_ALPHA) -> LanguageMixture:
    """Exponentially smoothed language frequencies: q_i = p_i^alpha / sum_j p_j^alpha."""
    if not counts:
        raise ConfigurationError("compute_language_rates needs at least one language")
    bad = {k: v for k, v in counts.items() if v <= 0}
    if bad:
        raise ConfigurationError(f"language counts must be positive: {bad}")
    keys = sorted(counts)
    n = np.array([counts[k] for k in keys], dtype=np.float64)
    p = n / n.sum()
    w = p ** alpha
    q = w / w.sum()
    return LanguageMixture(dict(counts), float(alpha), {k: float(v) for k, v in zip(keys, q)})


def sample_source(rng: SeededRng, mixture) -> str:
    """Draw one task/language id; keys are taken in sorted order against a uniform double."""
    keys = sorted(mixture.rates)
    cdf = np.cumsum([mixture.rates[k] for k in keys])
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    return keys[min(idx, len(keys) - 1)]


@dataclass(frozen=True)
class MaskingPolicy:
    select_prob: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        if not 0.0 <= self.select_prob <= 1.0:
            raise ConfigurationError("select_prob must lie in [0, 1]")
        fracs = (self.mask_frac, self.random_frac, self.keep_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigurationError(f"mask/random/keep fractions must be >= 0 and sum to 1, got {fracs}")


def mask_tokens(ids, policy: MaskingPolicy, rng: SeededRng, special_positions=(),
                mask_id=3, vocab_size=None, special_ids=()):
    """Corrupt a token sequence for MLM.

    Each position outside ``special_positions`` is selected with
    ``select_prob``; a selected token becomes ``mask_id``, a random
    non-special id, or stays, in the policy's proportions. Returns
    ``(corrupted, labels)`` with ``labels`` set to the original id exactly
    at selected positions.
    """
    ids = np.asarray(ids, dtype=np.int64)
    shape = ids.shape
    flat = ids.reshape(-1)
    n = flat.size
    u_select = rng.random(n)
    u_kind = rng.random(n)
    u_tok = rng.random(n)
    selectable = np.ones(n, dtype=bool)
    if len(special_positions):
        selectable[np.asarray(list(special_positions), dtype=np.int64).reshape(-1)] = False
    selected = selectable & (u_select < policy.select_prob)
    labels = np.full(n, policy.ignore_label, dtype=np.int64)
    labels[selected] = flat[selected]
    out = flat.copy()
    to_mask = selected & (u_kind < policy.mask_frac)
    to_rand = selected & (u_kind >= policy.mask_frac) & (u_kind < policy.mask_frac + policy.random_frac)
    out[to_mask] = mask_id
    if to_rand.any():
        if vocab_size is None:
            raise ConfigurationError("vocab_size is required when random replacement can occur")
        pool = np.array(sorted(set(range(vocab_size)) - set(special_ids)), dtype=np.int64)
        picks = np.minimum((u_tok * len(pool)).astype(np.int64), len(pool) - 1)
        out[to_rand] = pool[picks[to_rand]]
    return out.reshape(shape), labels.reshape(shape)
