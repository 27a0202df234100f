"""Speculative greedy decoding with dynamic confidence-thresholded drafting.

Each round drafts tokens from the shallow layers + adapter until the draft
confidence drops to the threshold (that low-confidence draft is kept, per
the double-early-exit rule), the step budget runs out, or the cache fills.
The early feature of the final token is always computed, so a round with
``d`` drafts produces a unit of ``d+1`` features; one batched pass of the
remaining layers verifies every draft and supplies the bonus token at the
first mismatch (or after full acceptance).  Emitted tokens always come from
the target's own argmax, which makes the output identical to plain greedy
decoding for every adapter and policy.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adapter import AdapterWeights, draft_logits
from .errors import ConfigError
from .model import (
    FeatureBlock,
    KVCacheSet,
    TargetWeights,
    forward_remaining,
    forward_shallow,
)


@dataclass(frozen=True)
class DraftPolicy:
    """Drafting stops when top-1 confidence <= eta or after gamma_max drafts.

    The stop comparison is inclusive, so ``eta=1.0`` keeps exactly one
    (always low-confidence) draft per round; ``skip_certain_probes`` elides
    even that probe, trading uniform traces for pure vanilla behavior.
    """

    eta: float = 0.6
    gamma_max: int = 6
    skip_certain_probes: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        if self.gamma_max < 0:
            raise ConfigError(f"gamma_max must be >= 0, got {self.gamma_max}")

    @property
    def effective_gamma(self) -> int:
        if self.skip_certain_probes and self.eta >= 1.0:
            return 0
        return self.gamma_max


class StopReason(enum.Enum):
    THRESHOLD = "threshold"
    MAX_STEPS = "max_steps"
    CAPACITY = "capacity"


@dataclass
class RoundTrace:
    """Accounting for one draft/verify round.

    ``emitted`` counts tokens actually kept; it equals ``accepted_drafts + 1``
    except on a final round truncated at the requested token budget.
    """

    drafted: int
    accepted_drafts: int
    emitted: int
    confidences: list[float]
    stop_reason: StopReason


@dataclass
class GenerationResult:
    tokens: list[int]
    rounds: list[RoundTrace]
    truncated: bool = False

    @property
    def big_forward_count(self) -> int:
        return len(self.rounds)

    @property
    def emitted_per_round(self) -> list[int]:
        return [r.emitted for r in self.rounds]


@dataclass
class DraftWindow:
    """One round's drafting output: the feature unit plus its draft tokens."""

    features: FeatureBlock  # drafted + 1 rows
    drafts: list[int]
    confidences: list[float]
    stop_reason: StopReason


class DecodeSession:
    """One speculative decoding session owning its caches and token state.

    Between rounds the shallow and deep caches cover every committed token
    except the newest one (whose shallow pass opens the next round).  The
    adapter cache may additionally lag by the features in ``_backlog`` --
    features that were computed but never probed, e.g. the stopped token's
    feature after a fully accepted round; the next probe consumes the
    backlog in one batched adapter pass, which is the single saved adapter
    forward the carry optimization buys.
    """

    def __init__(self, model: TargetWeights, adapter: AdapterWeights, prompt: list[int]):
        if len(prompt) == 0:
            raise ConfigError("prompt must be non-empty")
        if any(not 0 <= t < model.config.vocab_size for t in prompt):
            raise ConfigError("prompt token id outside vocabulary")
        self.model = model
        self.adapter = adapter
        self.caches = KVCacheSet(model.config, dtype=model.dtype)
        self.tokens = list(prompt)
        self._backlog: list[np.ndarray] = []
        if len(prompt) > 1:
            features = forward_shallow(model, prompt[:-1], self.caches)
            forward_remaining(model, features, self.caches)
            self._probe(features)  # warm the adapter cache over the prompt

    @property
    def committed(self) -> int:
        """Number of positions cached in the shallow/deep caches."""
        return self.caches.shallow_len

    def _probe(self, feature: FeatureBlock) -> tuple[np.ndarray, float, int]:
        if self._backlog:
            rows = np.concatenate([np.stack(self._backlog), feature.values])
            feature = FeatureBlock(start=feature.start - len(self._backlog), values=rows)
            self._backlog = []
        return draft_logits(self.model, self.adapter, feature, self.caches)

    def draft_window(self, policy: DraftPolicy) -> DraftWindow:
        """Draft until threshold / step budget / capacity; return the unit."""
        max_len = self.model.config.max_seq_len
        current = self.tokens[-1]
        rows: list[np.ndarray] = []
        drafts: list[int] = []
        confidences: list[float] = []
        start = self.committed
        threshold_hit = False
        while True:
            block = forward_shallow(self.model, [current], self.caches)
            rows.append(block.values[0])
            if threshold_hit:
                reason = StopReason.THRESHOLD
                break
            if len(drafts) == policy.effective_gamma:
                reason = StopReason.MAX_STEPS
                break
            if self.caches.shallow_len >= max_len:
                reason = StopReason.CAPACITY
                break
            _, confidence, token = self._probe(block)
            drafts.append(token)
            confidences.append(confidence)
            current = token
            if confidence <= policy.eta:
                threshold_hit = True
        features = FeatureBlock(start=start, values=np.stack(rows))
        return DraftWindow(features, drafts, confidences, reason)

    def verify_window(self, window: DraftWindow) -> tuple[int, list[int]]:
        """One batched pass of the remaining layers over the feature unit.

        Accepts the longest draft prefix matching the target's greedy tokens,
        emits it plus the target's own token at the first mismatch (or the
        bonus token after full acceptance), and rolls every cache back to the
        new committed prefix.
        """
        logits = forward_remaining(self.model, window.features, self.caches)
        targets = np.argmax(logits, axis=-1).tolist()
        accepted = 0
        while accepted < len(window.drafts) and window.drafts[accepted] == targets[accepted]:
            accepted += 1
        emitted = window.drafts[:accepted] + [targets[accepted]]

        kept = window.features.start + accepted + 1
        if accepted == len(window.drafts):
            # Full acceptance: nothing to discard; the final feature was
            # never probed, so it stays pending for the next adapter batch.
            self._backlog.append(window.features.values[-1])
        else:
            self.caches.rollback(kept)
            self._backlog = []
        self.tokens.extend(emitted)
        return accepted, emitted


def generate(
    model: TargetWeights,
    adapter: AdapterWeights,
    policy: DraftPolicy,
    prompt: list[int],
    n_tokens: int,
) -> GenerationResult:
    """Speculatively decode ``n_tokens`` greedy tokens after ``prompt``.

    Output tokens are exactly those of the vanilla greedy reference for any
    adapter and policy; a result that had to stop at the context limit is
    flagged ``truncated`` instead of raising.
    """
    session = DecodeSession(model, adapter, prompt)
    rounds: list[RoundTrace] = []
    out: list[int] = []
    while len(out) < n_tokens:
        if len(session.tokens) > model.config.max_seq_len:
            return GenerationResult(tokens=out, rounds=rounds, truncated=True)
        window = session.draft_window(policy)
        accepted, emitted = session.verify_window(window)
        kept = emitted[: n_tokens - len(out)]
        out.extend(kept)
        rounds.append(
            RoundTrace(
                drafted=len(window.drafts),
                accepted_drafts=accepted,
                emitted=len(kept),
                confidences=window.confidences,
                stop_reason=window.stop_reason,
            )
        )
    return GenerationResult(tokens=out, rounds=rounds)


def measure_walltime(
    run: Callable[[], object], repetitions: int = 3
) -> tuple[float, float, object]:
    """Median monotonic-clock timing of ``run`` after one warmup call.

    Returns ``(tokens_per_sec, seconds, result)`` when the result exposes
    ``tokens`` (tokens/sec is 0 otherwise).
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    result = run()  # warmup
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        result = run()
        times.append(time.perf_counter() - t0)
    seconds = float(np.median(times))
    tokens = getattr(result, "tokens", None)
    n = len(tokens) if tokens is not None else 0
    return (n / seconds if seconds > 0 and n else 0.0), seconds, result
