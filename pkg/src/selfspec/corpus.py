"""Seeded synthetic corpora with learnable structure.

Sequences come from an order-2 Markov source: each context pair ``(a, b)``
deterministically hashes (via the package's splitmix streams) to a small
candidate set of next tokens with fixed concentrated probabilities, so the
transition table never materializes but the distillation trainer has real
signal to fit.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .seeding import derive, generator

_CANDIDATE_PROBS = np.array([0.55, 0.25, 0.12, 0.08])


def _candidates(seed: int, a: int, b: int, vocab_size: int) -> np.ndarray:
    return np.array(
        [derive(seed, "markov", a, b, i) % vocab_size for i in range(len(_CANDIDATE_PROBS))],
        dtype=np.int64,
    )


def gen_corpus(
    vocab_size: int,
    n_seqs: int,
    len_range: tuple[int, int],
    seed: int,
) -> list[list[int]]:
    """Draw ``n_seqs`` sequences with lengths uniform in ``len_range``."""
    lo, hi = len_range
    if lo < 2 or hi < lo:
        raise ConfigError(f"len_range must satisfy 2 <= lo <= hi, got {len_range}")
    if n_seqs < 1 or vocab_size < 2:
        raise ConfigError("need n_seqs >= 1 and vocab_size >= 2")
    rng = generator(seed, "corpus")
    sequences = []
    for _ in range(n_seqs):
        length = int(rng.integers(lo, hi + 1))
        seq = [int(rng.integers(vocab_size)), int(rng.integers(vocab_size))]
        while len(seq) < length:
            cands = _candidates(seed, seq[-2], seq[-1], vocab_size)
            seq.append(int(rng.choice(cands, p=_CANDIDATE_PROBS)))
        sequences.append(seq[:length])
    return sequences
