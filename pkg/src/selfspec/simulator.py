"""Analytic latency model and policy sweeps.

The model charges four abstract costs per round: one shallow forward per
feature (``d_k`` drafts plus the stopped token's feature), one adapter probe
per draft, one batched remaining-layers verification, and a fixed per-round
overhead.  In the free-draft limit (all costs but the verification zero) the
predicted speedup equals the compression rate, which is the proportionality
the sweeps explore.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .adapter import AdapterWeights, adapter_forward, draft_logits
from .engine import DecodeSession, DraftPolicy, RoundTrace, generate
from .errors import CalibrationError, ConfigError, LosslessnessError, MetricsDomainError
from .metrics import CTAR_WINDOWS, AcceptanceRecord, compression_rate
from .model import (
    FeatureBlock,
    KVCacheSet,
    TargetWeights,
    forward_remaining,
    forward_shallow,
    vanilla_greedy_decode,
)
from .seeding import generator


@dataclass(frozen=True)
class LatencyModel:
    """Abstract per-component costs (any consistent time unit)."""

    c_big: float
    c_shallow: float = 0.0
    c_adapter: float = 0.0
    c_overhead: float = 0.0

    def __post_init__(self) -> None:
        if self.c_big <= 0:
            raise ConfigError(f"c_big must be > 0, got {self.c_big}")
        if min(self.c_shallow, self.c_adapter, self.c_overhead) < 0:
            raise ConfigError("component costs must be >= 0")

    def round_cost(self, drafted: int) -> float:
        return (
            drafted * (self.c_shallow + self.c_adapter)
            + self.c_shallow
            + self.c_big
            + self.c_overhead
        )


def simulate_speedup(
    traces: list[RoundTrace], lat: LatencyModel, n_tokens: int
) -> float:
    """Predicted vanilla-time over speculative-time for one run's traces."""
    emitted = sum(t.emitted for t in traces)
    if emitted != n_tokens:
        raise MetricsDomainError(
            f"traces emit {emitted} tokens but n_tokens is {n_tokens}"
        )
    t_vanilla = n_tokens * lat.c_big
    t_spec = sum(lat.round_cost(t.drafted) for t in traces)
    return t_vanilla / t_spec


@dataclass
class SweepPoint:
    eta: float
    gamma: int
    cr: float
    ctars: dict[int, float]
    simulated_speedup: float
    measured_speedup: float


@dataclass
class SimReport:
    etas: list[float]
    gammas: list[int]
    points: list[SweepPoint]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["eta", "gamma", "CR"]
            + [f"CTAR_{w}" for w in CTAR_WINDOWS]
            + ["simulated_speedup", "measured_speedup"]
        )
        for p in self.points:
            writer.writerow(
                [f"{p.eta:g}", p.gamma, f"{p.cr:.6f}"]
                + [f"{p.ctars[w]:.6f}" for w in CTAR_WINDOWS]
                + [f"{p.simulated_speedup:.6f}", f"{p.measured_speedup:.6f}"]
            )
        return buf.getvalue()


def sweep(
    model: TargetWeights,
    adapter: AdapterWeights,
    prompts: list[list[int]],
    etas: list[float],
    gammas: list[int],
    lat: LatencyModel,
    n_tokens: int = 64,
) -> SimReport:
    """Run the engine at every grid point over the prompts.

    Traces depend on the threshold, so each point re-runs the engine; every
    run is cross-checked token-for-token against the greedy reference.
    """
    if not etas or not gammas or not prompts:
        raise ConfigError("sweep needs non-empty eta grid, gamma grid and prompts")
    references: list[list[int]] = []
    vanilla_seconds = []
    for prompt in prompts:
        t0 = time.perf_counter()
        references.append(vanilla_greedy_decode(model, prompt, n_tokens))
        vanilla_seconds.append(time.perf_counter() - t0)
    total_vanilla = sum(vanilla_seconds)

    points = []
    for eta in etas:
        for gamma in gammas:
            policy = DraftPolicy(eta=eta, gamma_max=gamma)
            all_s: list[int] = []
            total_spec_time = 0.0
            sim_spec_time = 0.0
            for prompt, reference in zip(prompts, references):
                t0 = time.perf_counter()
                result = generate(model, adapter, policy, prompt, n_tokens)
                total_spec_time += time.perf_counter() - t0
                if result.tokens != reference:
                    raise LosslessnessError(
                        f"divergence at eta={eta}, gamma={gamma}: "
                        f"{result.tokens} != {reference}"
                    )
                all_s.extend(result.emitted_per_round)
                sim_spec_time += sum(lat.round_cost(t.drafted) for t in result.rounds)
            rec = AcceptanceRecord(all_s)
            points.append(
                SweepPoint(
                    eta=eta,
                    gamma=gamma,
                    cr=compression_rate(rec),
                    ctars={
                        w: sum(1 for s in rec.s if s > w) / rec.rounds
                        for w in CTAR_WINDOWS
                    },
                    simulated_speedup=(rec.n_tokens * lat.c_big) / sim_spec_time,
                    measured_speedup=total_vanilla / total_spec_time,
                )
            )
    return SimReport(etas=list(etas), gammas=list(gammas), points=points)


def _median_time(fn, reps: int) -> float:
    fn()  # warmup
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def calibrate_latency(
    model: TargetWeights,
    adapter: AdapterWeights,
    probe_lengths: tuple[int, ...] = (8, 24, 48),
    reps: int = 5,
    seed: int = 0,
    gamma: int = 6,
) -> LatencyModel:
    """Fit the four component costs from timed micro-runs.

    Observations are direct timings of single-token shallow forwards,
    adapter probes and unit verifications at several context lengths, plus
    whole engine rounds; the cost vector is the least-squares solution with
    negative components clamped to zero.
    """
    cfg = model.config
    rng = generator(seed, "calibration")
    horizon = max(probe_lengths) + gamma + 4
    if horizon >= cfg.max_seq_len:
        raise ConfigError("probe lengths exceed the model context")
    tokens = [int(t) for t in rng.integers(cfg.vocab_size, size=horizon)]

    rows: list[list[float]] = []
    times: list[float] = []
    for ctx in probe_lengths:
        caches = KVCacheSet(cfg, dtype=model.dtype)
        feats = forward_shallow(model, tokens[:ctx], caches)
        forward_remaining(model, feats, caches)
        adapter_forward(adapter, feats, caches.adapter, model.rope)

        def time_shallow():
            forward_shallow(model, [tokens[ctx]], caches)
            for c in caches.shallow:
                c.truncate(ctx)

        rows.append([1.0, 0.0, 0.0, 0.0])
        times.append(_median_time(time_shallow, reps))

        probe = forward_shallow(model, [tokens[ctx]], caches)

        def time_adapter():
            draft_logits(model, adapter, probe, caches)
            caches.adapter.truncate(ctx)

        rows.append([0.0, 1.0, 0.0, 0.0])
        times.append(_median_time(time_adapter, reps))

        unit = forward_shallow(model, tokens[ctx + 1 : ctx + 1 + gamma], caches)
        unit_block = FeatureBlock(start=ctx, values=np.concatenate([probe.values, unit.values]))

        def time_big():
            forward_remaining(model, unit_block, caches)
            for c in caches.deep:
                c.truncate(ctx)

        rows.append([0.0, 0.0, 1.0, 0.0])
        times.append(_median_time(time_big, reps))

    # Whole rounds pin down the per-round overhead.
    prompt = tokens[: max(4, probe_lengths[0])]
    policy = DraftPolicy(eta=0.0, gamma_max=gamma)
    session = DecodeSession(model, adapter, prompt)
    session.draft_window(policy)  # warmup round
    session = DecodeSession(model, adapter, prompt)
    for _ in range(reps):
        t0 = time.perf_counter()
        window = session.draft_window(policy)
        session.verify_window(window)
        dt = time.perf_counter() - t0
        d = float(len(window.drafts))
        rows.append([d + 1.0, d, 1.0, 1.0])
        times.append(dt)

    design = np.array(rows)
    observed = np.array(times)
    if np.linalg.matrix_rank(design) < 4:
        raise CalibrationError("calibration design matrix is singular")
    fitted, *_ = np.linalg.lstsq(design, observed, rcond=None)
    c_shallow, c_adapter, c_big, c_overhead = np.maximum(fitted, 0.0)
    if c_big <= 0:
        raise CalibrationError("calibration produced a non-positive verification cost")
    return LatencyModel(
        c_big=float(c_big),
        c_shallow=float(c_shallow),
        c_adapter=float(c_adapter),
        c_overhead=float(c_overhead),
    )
