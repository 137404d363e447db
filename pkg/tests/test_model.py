import struct

import numpy as np
import pytest

from plce.dsp import Spectrogram, stft
from plce.errors import ModelError
from plce.model import (
    META_NAME,
    ModelConfig,
    build_model,
    forward_all,
    forward_stage,
    initial_state,
    load_weights,
    param_count,
    param_shapes,
    save_weights,
)

TINY = ModelConfig(stages=3, channels=4, lstm_units=8)


def random_spec(L, seed=0):
    rng = np.random.default_rng(seed)
    return Spectrogram(rng.standard_normal((161, L)), rng.standard_normal((161, L)))


@pytest.fixture(scope="module")
def tiny():
    return build_model(TINY, seed=7)


def test_freq_chain_and_pads():
    assert TINY.freq_chain() == [161, 81, 41, 21, 11, 6]
    assert TINY.decoder_out_pads() == [0, 0, 0, 0, 0]


def test_config_round_trip_and_validation():
    cfg = ModelConfig(stages=2, channels=3, gate_enabled=False, norm_mode="cumulative")
    assert ModelConfig.from_vector(cfg.to_vector()) == cfg
    with pytest.raises(ModelError):
        ModelConfig(stages=0)
    with pytest.raises(ModelError):
        ModelConfig(norm_mode="layer")


def test_build_is_deterministic():
    a, b = build_model(TINY, seed=3), build_model(TINY, seed=3)
    c = build_model(TINY, seed=4)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.params)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.params)


def test_param_count_by_hand():
    # C=4, H=8, depth 5, two LSTM layers, two stages, gated, shared SRNN, skips
    C, H, Fb = 4, 8, 6
    unit = lambda ci, co, gated, normed: (2 if gated else 1) * (ci * co * 6 + co) + (2 * co + 1 if normed else 0)
    srnn = unit(4, C, False, True) + 3 * (C * 2 * C * 3 + C)
    enc = 5 * unit(C, C, True, True)
    d = C * Fb
    lstm = (4 * H * d + 4 * H * H + 4 * H) + (4 * H * H + 4 * H * H + 4 * H)
    proj = d * H + d
    dec = 4 * unit(2 * C, C, True, True) + unit(2 * C, 2, False, False)
    expected = srnn + 2 * (enc + lstm + proj + dec)
    assert expected == 9535
    assert param_count(build_model(ModelConfig(stages=2, channels=4, lstm_units=8))) == expected


def test_full_config_counts_follow_ablation_order():
    counts = {}
    for gate in (True, False):
        for srnn in (True, False):
            shapes = param_shapes(ModelConfig(gate_enabled=gate, srnn_enabled=srnn))
            counts[(gate, srnn)] = sum(int(np.prod(s)) for s in shapes.values())
    assert counts[(True, True)] == 9_691_704
    assert counts[(True, True)] > counts[(True, False)] > counts[(False, True)] > counts[(False, False)]


def test_meta_record_is_not_a_parameter(tiny):
    assert META_NAME not in tiny.params
    with pytest.raises(ModelError):
        tiny["no.such.param"]


def test_output_shapes(tiny):
    outs = forward_all(tiny, random_spec(9))
    assert len(outs) == 3
    assert all(o.shape == (161, 9) for o in outs)
    assert all(np.all(np.isfinite(o.real)) for o in outs)


def test_forward_all_matches_manual_stages(tiny):
    X = random_spec(6, seed=1)
    state = initial_state(X)
    manual = []
    for _ in range(3):
        est, state = forward_stage(tiny, state, X)
        manual.append(est)
    for a, b in zip(forward_all(tiny, X), manual):
        assert np.array_equal(a.real, b.real) and np.array_equal(a.imag, b.imag)


def test_stage_overflow(tiny):
    X = random_spec(4)
    state = initial_state(X)
    for _ in range(3):
        _, state = forward_stage(tiny, state, X)
    with pytest.raises(ModelError, match="stage overflow"):
        forward_stage(tiny, state, X)


def test_wrong_bin_count(tiny):
    X = Spectrogram(np.zeros((160, 4)), np.zeros((160, 4)))
    with pytest.raises(ModelError):
        forward_stage(tiny, initial_state(X), X)


def test_later_stage_weights_do_not_affect_earlier_stages(tiny):
    X = random_spec(5, seed=2)
    before = forward_all(tiny, X)
    w = tiny.copy()
    for name, t in w.params.items():
        if name.startswith("cell3."):
            t.data[...] = 0.5
    after = forward_all(w, X)
    for q in range(2):
        assert np.array_equal(before[q].real, after[q].real)
    assert not np.array_equal(before[2].real, after[2].real)


def test_zeroed_last_block_returns_its_bias(tiny):
    w = tiny.copy()
    w["cell1.dec4.conv.w"].data[...] = 0.0
    w["cell1.dec4.conv.b"].data[...] = [0.25, -1.5]
    est = forward_all(w, random_spec(4))[0]
    np.testing.assert_array_equal(est.real, np.float32(0.25))
    np.testing.assert_array_equal(est.imag, np.float32(-1.5))


@pytest.mark.parametrize("srnn", [True, False])
def test_cumulative_norm_is_causal(srnn):
    w = build_model(ModelConfig(stages=2, channels=4, lstm_units=8, srnn_enabled=srnn, norm_mode="cumulative"), 1)
    X = random_spec(10, seed=3)
    Y = Spectrogram(X.real.copy(), X.imag.copy())
    Y.real[:, 6:] += np.random.default_rng(9).standard_normal((161, 4))
    a, b = forward_all(w, X), forward_all(w, Y)
    for q in range(2):
        np.testing.assert_array_equal(a[q].real[:, :6], b[q].real[:, :6])
        assert not np.array_equal(a[q].real[:, 6:], b[q].real[:, 6:])


def test_save_load_round_trip(tmp_path, tiny):
    path = tmp_path / "w.bin"
    save_weights(tiny, path)
    loaded = load_weights(path)
    assert loaded.config == TINY
    assert list(loaded.params) == list(tiny.params)
    assert all(np.array_equal(loaded[n].data, tiny[n].data) for n in tiny.params)
    X = random_spec(5)
    assert np.array_equal(forward_all(loaded, X)[-1].real, forward_all(tiny, X)[-1].real)
    save_weights(loaded, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_weight_file_size_formula(tmp_path, tiny):
    path = tmp_path / "w.bin"
    save_weights(tiny, path)
    entries = [(META_NAME, (10,))] + [(n, t.shape) for n, t in tiny.params.items()]
    size = 12 + 4 + sum(4 + len(n) + 4 + 8 * len(s) + 1 + 4 * int(np.prod(s)) for n, s in entries)
    blob = path.read_bytes()
    assert len(blob) == size
    assert blob[:4] == b"PLCW" and struct.unpack_from("<II", blob, 4) == (1, len(entries))


def test_load_rejects_bad_files(tmp_path, tiny):
    path = tmp_path / "w.bin"
    save_weights(tiny, path)
    blob = path.read_bytes()
    cases = {
        "magic.bin": b"XXXX" + blob[4:],
        "trunc.bin": blob[:-100],
        "flip.bin": blob[:200] + bytes([blob[200] ^ 1]) + blob[201:],
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
    with pytest.raises(ModelError, match="not a weight file"):
        load_weights(tmp_path / "magic.bin")
    for name in ("trunc.bin", "flip.bin"):
        with pytest.raises(ModelError):
            load_weights(tmp_path / name)
    with pytest.raises(ModelError):
        load_weights(tmp_path / "missing.bin")


def test_real_stft_input(tiny):
    x = np.random.default_rng(0).standard_normal(1600) * 0.1
    outs = forward_all(tiny, stft(x))
    assert outs[-1].shape == (161, 11)
