"""Benchmark harness: threshold sweeps, per-stage distance traces, SI-SDR and segmental SNR."""

from __future__ import annotations

import csv
import math
import os
import shlex
import subprocess
import tempfile
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dsp import HOP, WIN, Waveform, istft, stft, write_wav
from .early_exit import (
    ExitPolicy,
    StageTrace,
    compute_dist,
    compute_Z,
    format_tau,
    run_with_early_exit,
    speedup_ratio,
)
from .errors import DataError
from .model import ModelWeights, forward_all

DEFAULT_TAUS = (math.inf, 0.6, 0.2, 0.08, 0.04, 0.02, 0.01, 0.0)
REPORT_COLUMNS = ["tau", "snr_db", "n", "mean_exit_stage", "speedup", "si_sdr_db", "seg_snr_db"]
TRACE_TABLE_COLUMNS = ["snr_db", "stage", "mean_dist", "log10_mean_dist"]
SI_SDR_CLAMP = 100.0
SEG_SNR_RANGE = (-10.0, 35.0)
VOICED_DBFS = -60.0


def _pair(estimate, reference) -> tuple[np.ndarray, np.ndarray]:
    est = estimate.samples if isinstance(estimate, Waveform) else np.asarray(estimate, dtype=np.float64)
    ref = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"estimate and reference lengths differ: {est.shape[0]} vs {ref.shape[0]}")
    if not np.any(ref):
        raise ValueError("reference signal is silent")
    return est, ref


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, clamped to +/-100 dB."""
    est, ref = _pair(estimate, reference)
    alpha = np.dot(est, ref) / np.dot(ref, ref)
    target = alpha * ref
    residual = est - target
    p_t = float(np.dot(target, target))
    p_r = float(np.dot(residual, residual))
    if p_r <= 1e-20 * max(p_t, 1e-300):
        return SI_SDR_CLAMP
    if p_t == 0.0:
        return -SI_SDR_CLAMP
    return float(np.clip(10.0 * np.log10(p_t / p_r), -SI_SDR_CLAMP, SI_SDR_CLAMP))


def frame_snrs(estimate, reference, frame: int = WIN, hop: int = HOP) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame clamped SNRs and the voiced-frame mask (reference above -60 dBFS)."""
    est, ref = _pair(estimate, reference)
    if ref.shape[0] < frame:
        starts = [0]
        frame = ref.shape[0]
    else:
        starts = range(0, ref.shape[0] - frame + 1, hop)
    lo, hi = SEG_SNR_RANGE
    snrs, voiced = [], []
    for s in starts:
        r = ref[s:s + frame]
        e = r - est[s:s + frame]
        p_s, p_e = float(np.dot(r, r)), float(np.dot(e, e))
        voiced.append(p_s / frame > 10.0 ** (VOICED_DBFS / 10.0))
        snrs.append(hi if p_e == 0.0 else float(np.clip(10.0 * np.log10(max(p_s, 1e-300) / p_e), lo, hi)))
    return np.array(snrs), np.array(voiced)


def seg_snr(estimate, reference, frame: int = WIN, hop: int = HOP) -> float:
    snrs, voiced = frame_snrs(estimate, reference, frame, hop)
    if not voiced.any():
        raise ValueError("reference has no frames above the voicing threshold")
    return float(snrs[voiced].mean())


def external_metric(template: str, estimate: Waveform, reference: Waveform) -> float:
    """Run a user command with ``{est}``/``{ref}`` WAV paths; the last stdout token is the score."""
    with tempfile.TemporaryDirectory() as tmp:
        est_path, ref_path = Path(tmp, "est.wav"), Path(tmp, "ref.wav")
        write_wav(est_path, estimate)
        write_wav(ref_path, reference)
        cmd = shlex.split(template.format(est=str(est_path), ref=str(ref_path)))
        out = subprocess.run(cmd, capture_output=True, text=True, check=True).stdout
    tokens = out.split()
    if not tokens:
        raise RuntimeError(f"metric command produced no output: {template}")
    return float(tokens[-1])


@dataclass
class TestUtterance:
    uid: str
    snr_db: float
    mixture: Waveform
    clean: Waveform

    __test__ = False  # not a pytest class


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PLCE_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn: Callable, items: Sequence, workers: int | None):
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class BenchRow:
    tau: float
    snr_db: float
    n: int
    mean_exit_stage: float
    speedup: float
    si_sdr_db: float
    seg_snr_db: float
    speedup_total: float | None = None
    ext_metric: float | None = None


@dataclass
class BenchReport:
    stages: int
    rows: list[BenchRow]
    traces: list[tuple[str, float, float, StageTrace]] = field(default_factory=list)

    def row(self, tau: float, snr_db: float) -> BenchRow:
        for r in self.rows:
            if r.tau == tau and r.snr_db == snr_db:
                return r
        raise KeyError((tau, snr_db))

    def columns(self) -> list[str]:
        cols = list(REPORT_COLUMNS)
        if any(r.speedup_total is not None for r in self.rows):
            cols.append("speedup_total")
        if any(r.ext_metric is not None for r in self.rows):
            cols.append("ext_metric")
        return cols

    def to_csv(self, path) -> None:
        cols = self.columns()
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(cols)
            for r in self.rows:
                line = [format_tau(r.tau), f"{r.snr_db:g}", r.n, f"{r.mean_exit_stage:.6f}", f"{r.speedup:.6f}",
                        f"{r.si_sdr_db:.6f}", f"{r.seg_snr_db:.6f}"]
                if "speedup_total" in cols:
                    line.append(f"{r.speedup_total:.6f}")
                if "ext_metric" in cols:
                    line.append(f"{r.ext_metric:.6f}")
                writer.writerow(line)


def _check_testset(testset: Sequence[TestUtterance]) -> list[TestUtterance]:
    if not testset:
        raise DataError("test set is empty")
    return sorted(testset, key=lambda u: u.uid)


def run_bench(weights: ModelWeights, testset: Sequence[TestUtterance], taus: Sequence[float] = DEFAULT_TAUS,
              Q: int | None = None, workers: int | None = None, both_speedups: bool = False,
              metric_hook: str | None = None) -> BenchReport:
    """Early-exit inference for every (tau, utterance); rows ordered by tau as given, then SNR."""
    utts = _check_testset(testset)
    Q = weights.config.stages if Q is None else Q

    def one(u: TestUtterance):
        X = stft(u.mixture)
        results = []
        for tau in taus:
            est, trace = run_with_early_exit(weights, X, ExitPolicy(tau, Q))
            wav = istft(est, len(u.mixture))
            ext = external_metric(metric_hook, wav, u.clean) if metric_hook else None
            results.append((trace, si_sdr(wav, u.clean), seg_snr(wav, u.clean), ext))
        return results

    per_utt = _map(one, utts, workers)
    cells: dict[tuple[int, float], list] = defaultdict(list)
    traces = []
    for u, results in zip(utts, per_utt):
        for ti, (tau, res) in enumerate(zip(taus, results)):
            cells[(ti, u.snr_db)].append(res)
            traces.append((u.uid, u.snr_db, tau, res[0]))
    rows = []
    snrs = sorted({u.snr_db for u in utts})
    for ti, tau in enumerate(taus):
        for snr in snrs:
            res = cells[(ti, snr)]
            exits = [r[0].exit_stage for r in res]
            rows.append(BenchRow(
                tau=tau, snr_db=snr, n=len(res),
                mean_exit_stage=float(np.mean(exits)),
                speedup=speedup_ratio(exits, Q, "mean"),
                si_sdr_db=float(np.mean([r[1] for r in res])),
                seg_snr_db=float(np.mean([r[2] for r in res])),
                speedup_total=speedup_ratio(exits, Q, "total") if both_speedups else None,
                ext_metric=float(np.mean([r[3] for r in res])) if metric_hook else None,
            ))
    return BenchReport(Q, rows, traces)


def all_stage_dists(weights: ModelWeights, mixture: Waveform) -> list[float]:
    """Dist_q for every stage without exiting (S~0 is the noisy input)."""
    X = stft(mixture)
    Z = compute_Z(X)
    prev = X
    dists = []
    for est in forward_all(weights, X):
        dists.append(compute_dist(est, prev, Z))
        prev = est
    return dists


@dataclass
class DistTraceTable:
    rows: list[tuple[float, int, float]]  # (snr_db, stage, mean_dist)

    def mean_dist(self, snr_db: float, stage: int) -> float:
        for s, q, d in self.rows:
            if s == snr_db and q == stage:
                return d
        raise KeyError((snr_db, stage))

    def snrs(self) -> list[float]:
        return sorted({r[0] for r in self.rows})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(TRACE_TABLE_COLUMNS)
            for snr, q, d in self.rows:
                log_d = math.log10(d) if d > 0 else -math.inf
                writer.writerow([f"{snr:g}", q, repr(d), repr(log_d)])


def dist_trace_aggregate(weights: ModelWeights, testset: Sequence[TestUtterance], Q: int | None = None,
                         workers: int | None = None) -> DistTraceTable:
    utts = _check_testset(testset)
    Q = weights.config.stages if Q is None else Q
    per_utt = _map(lambda u: all_stage_dists(weights, u.mixture)[:Q], utts, workers)
    grouped: dict[float, list[list[float]]] = defaultdict(list)
    for u, d in zip(utts, per_utt):
        grouped[u.snr_db].append(d)
    rows = []
    for snr in sorted(grouped):
        mean = np.mean(np.array(grouped[snr]), axis=0)
        rows.extend((snr, q, float(mean[q - 1])) for q in range(1, Q + 1))
    return DistTraceTable(rows)
