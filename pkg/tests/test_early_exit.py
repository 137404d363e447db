import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import plce.early_exit as ee
import plce.model as model
from plce.dsp import Spectrogram
from plce.early_exit import (
    TRACE_COLUMNS,
    ExitPolicy,
    compute_dist,
    compute_Z,
    first_exit,
    run_with_early_exit,
    speedup_ratio,
    write_trace_csv,
)
from plce.model import ModelConfig, build_model, forward_all


@pytest.fixture(scope="module")
def weights():
    return build_model(ModelConfig(stages=5, channels=4, lstm_units=8), seed=2)


def spec(L=6, seed=0):
    rng = np.random.default_rng(seed)
    return Spectrogram(rng.standard_normal((161, L)), rng.standard_normal((161, L)))


def tiny_spec(values):
    z = np.asarray(values, dtype=complex).reshape(2, 2)
    return Spectrogram.from_complex(z)


def test_Z_hand_example():
    assert compute_Z(tiny_spec([1, 1j, 1 + 1j, 1 + 1j])) == pytest.approx(1.5)


def test_dist_hand_example():
    X = tiny_spec([1, 1j, 1 + 1j, 1 + 1j])
    A = tiny_spec([1, 1j, 1 + 1j, 1 + 1j])
    B = tiny_spec([1, 1j, 1 + 1j, 1 + 1j + math.sqrt(1.5)])
    # |diff|^2 = 1.5, Z * L * K = 1.5 * 4
    assert compute_dist(A, B, compute_Z(X)) == pytest.approx(0.25)


def test_Z_rejects_silence():
    with pytest.raises(ValueError, match="degenerate"):
        compute_Z(Spectrogram(np.zeros((161, 3)), np.zeros((161, 3))))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(1e-3, 1e3))
def test_dist_is_scale_invariant(seed, c):
    X, A, B = spec(4, seed), spec(4, seed + 1), spec(4, seed + 2)
    d = compute_dist(A, B, compute_Z(X))
    dc = compute_dist(A.scaled(c), B.scaled(c), compute_Z(X.scaled(c)))
    assert dc == pytest.approx(d, rel=1e-9)


def test_first_exit_strict():
    assert first_exit([0.5, 0.1, 0.03, 0.01, 0.005], 0.04) == 3
    assert first_exit([0.5, 0.04, 0.03], 0.04) == 3
    assert first_exit([0.5, 0.4], 0.0) == 2
    assert first_exit([0.0, 0.0], 0.0) == 2
    assert first_exit([0.5, 0.4], math.inf) == 1


def test_policy_validation():
    with pytest.raises(ValueError):
        ExitPolicy(-0.1)
    with pytest.raises(ValueError):
        ExitPolicy(float("nan"))
    with pytest.raises(ValueError):
        ExitPolicy(0.1, max_stages=0)


@pytest.fixture
def stage_counter(monkeypatch):
    calls = []
    real = model._cell_forward

    def counting(w, q, feat):
        calls.append(q)
        return real(w, q, feat)

    monkeypatch.setattr(model, "_cell_forward", counting)
    return calls


def test_stubbed_distances_exit_at_third_stage(weights, monkeypatch, stage_counter):
    seq = iter([0.5, 0.1, 0.03, 0.01, 0.005])
    monkeypatch.setattr(ee, "compute_dist", lambda a, b, z: next(seq))
    X = spec()
    est, trace = run_with_early_exit(weights, X, ExitPolicy(0.04))
    assert trace.exit_stage == 3
    assert trace.dists == [0.5, 0.1, 0.03]
    assert stage_counter == [1, 2, 3]
    assert np.array_equal(est.real, forward_all(weights, X)[2].real)


def test_sentinels(weights, stage_counter):
    X = spec()
    full = forward_all(weights, X)
    stage_counter.clear()
    est, trace = run_with_early_exit(weights, X, ExitPolicy(math.inf))
    assert trace.exit_stage == 1 and stage_counter == [1]
    assert np.array_equal(est.real, full[0].real)
    stage_counter.clear()
    est, trace = run_with_early_exit(weights, X, ExitPolicy(0.0))
    assert trace.exit_stage == 5 and stage_counter == [1, 2, 3, 4, 5]
    assert np.array_equal(est.imag, full[4].imag)


def test_exit_is_monotone_in_tau(weights):
    X = spec(seed=5)
    exits = [run_with_early_exit(weights, X, ExitPolicy(t))[1].exit_stage
             for t in (math.inf, 1.0, 0.3, 0.1, 0.03, 0.01, 0.0)]
    assert exits == sorted(exits)


def test_trace_distances_match_direct_computation(weights):
    X = spec(seed=8)
    _, trace = run_with_early_exit(weights, X, ExitPolicy(0.0))
    outs = [X] + forward_all(weights, X)
    Z = compute_Z(X)
    direct = [compute_dist(outs[q], outs[q - 1], Z) for q in range(1, 6)]
    assert trace.dists == direct
    assert len(trace.wall_times) == 5 and all(t >= 0 for t in trace.wall_times)


def test_policy_cannot_exceed_model(weights):
    with pytest.raises(ValueError):
        run_with_early_exit(weights, spec(), ExitPolicy(0.1, max_stages=6))


def test_speedups():
    assert speedup_ratio([1, 1, 1], 5) == 5.0
    assert speedup_ratio([5, 5], 5) == 1.0
    assert speedup_ratio([1, 5], 5) == 3.0
    assert speedup_ratio([1, 5], 5, "total") == pytest.approx(10 / 6)
    with pytest.raises(ValueError):
        speedup_ratio([], 5)
    with pytest.raises(ValueError):
        speedup_ratio([6], 5)
    with pytest.raises(ValueError):
        speedup_ratio([1], 5, "median")


def test_trace_csv(tmp_path, weights):
    X = spec()
    _, t_inf = run_with_early_exit(weights, X, ExitPolicy(math.inf))
    _, t_zero = run_with_early_exit(weights, X, ExitPolicy(0.0))
    path = tmp_path / "trace.csv"
    write_trace_csv(path, [("u1", 5.0, math.inf, t_inf), ("u1", 5.0, 0.0, t_zero)])
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == TRACE_COLUMNS
    assert len(rows) == 1 + 1 + 5
    assert rows[1][:4] == ["u1", "5", "inf", "1"] and rows[1][5] == "1"
    assert [r[5] for r in rows[2:]] == ["0", "0", "0", "0", "1"]
    assert float(rows[6][4]) == t_zero.dists[4]
