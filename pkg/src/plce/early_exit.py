"""Threshold-driven early exit over the progressive stages.

At stage ``q`` the estimate is compared with the previous one (the noisy
input for ``q = 1``)::

    Dist_q = sum |S~q - S~(q-1)|^2 / (Z * L * K),   Z = sum |X|^2 / (L * K)

Inference stops at the first stage with ``Dist_q < tau`` (strictly) and
returns that stage's estimate; otherwise all stages run.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dsp import Spectrogram
from .model import ModelWeights, forward_stage, initial_state

TRACE_COLUMNS = ["utterance_id", "snr_db", "tau", "stage", "dist", "exited", "wall_time_ms"]


@dataclass(frozen=True)
class ExitPolicy:
    tau: float
    max_stages: int = 5

    def __post_init__(self):
        if math.isnan(self.tau) or self.tau < 0:
            raise ValueError(f"tau must be >= 0 or +inf, got {self.tau}")
        if self.max_stages < 1:
            raise ValueError(f"max_stages must be >= 1, got {self.max_stages}")


@dataclass
class StageTrace:
    dists: list[float] = field(default_factory=list)
    exit_stage: int = 0
    Z: float = 0.0
    wall_times: list[float] = field(default_factory=list)


def compute_Z(X: Spectrogram) -> float:
    if X.real.size == 0:
        raise ValueError("cannot normalise an empty spectrogram")
    z = float(np.mean(X.real ** 2 + X.imag ** 2))
    if z == 0.0:
        raise ValueError("degenerate normalization: input spectrogram has zero energy")
    return z


def compute_dist(A: Spectrogram, B: Spectrogram, Z: float) -> float:
    if A.shape != B.shape:
        raise ValueError(f"spectrogram shapes differ: {A.shape} vs {B.shape}")
    if not Z > 0:
        raise ValueError(f"normalisation must be positive, got {Z}")
    dr = A.real - B.real
    di = A.imag - B.imag
    return float(np.sum(dr * dr + di * di) / (Z * dr.size))


def first_exit(dists: Sequence[float], tau: float) -> int:
    """1-based index of the first distance strictly below ``tau``, else ``len(dists)``."""
    for q, d in enumerate(dists, start=1):
        if d < tau:
            return q
    return len(dists)


def run_with_early_exit(weights: ModelWeights, X: Spectrogram, policy: ExitPolicy) -> tuple[Spectrogram, StageTrace]:
    if policy.max_stages > weights.config.stages:
        raise ValueError(f"policy allows {policy.max_stages} stages but the model has {weights.config.stages}")
    trace = StageTrace(Z=compute_Z(X))
    state = initial_state(X)
    prev = X
    estimate = X
    for q in range(1, policy.max_stages + 1):
        t0 = time.perf_counter()
        estimate, state = forward_stage(weights, state, X)
        dist = compute_dist(estimate, prev, trace.Z)
        trace.wall_times.append(time.perf_counter() - t0)
        trace.dists.append(dist)
        trace.exit_stage = q
        if dist < policy.tau:
            break
        prev = estimate
    return estimate, trace


def speedup_ratio(exit_stages: Sequence[int], Q: int, convention: str = "mean") -> float:
    """Speed-up over always running ``Q`` stages.

    ``convention="mean"`` averages the per-utterance ratios ``Q / exit_stage``;
    ``"total"`` divides total stage budget by total stages run, ``Q * N / sum``.
    """
    stages = list(exit_stages)
    if not stages:
        raise ValueError("no exit stages to aggregate")
    if any(not 1 <= s <= Q for s in stages):
        raise ValueError(f"exit stages must lie in [1, {Q}]")
    if convention == "mean":
        return float(np.mean([Q / s for s in stages]))
    if convention == "total":
        return Q * len(stages) / float(sum(stages))
    raise ValueError(f"unknown speed-up convention {convention!r}")


def format_tau(tau: float) -> str:
    return "inf" if math.isinf(tau) else repr(float(tau))


def trace_rows(trace: StageTrace, utterance_id: str, snr_db: float, tau: float) -> Iterable[list]:
    for q, (d, wt) in enumerate(zip(trace.dists, trace.wall_times), start=1):
        yield [utterance_id, f"{snr_db:g}", format_tau(tau), q, repr(d), int(q == trace.exit_stage), f"{1000 * wt:.3f}"]


def write_trace_csv(path, records: Iterable[tuple[str, float, float, StageTrace]]) -> None:
    """``records`` yields ``(utterance_id, snr_db, tau, trace)``."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for uid, snr, tau, trace in records:
            writer.writerows(trace_rows(trace, uid, snr, tau))
