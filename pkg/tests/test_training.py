import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plce.dsp import Waveform
from plce.errors import DataError
from plce.model import ModelConfig, save_weights
from plce.tensor_nn.gradcheck import check_gradients
from plce.training import (
    AdamState,
    LossIncreaseHalving,
    adam_step,
    batch_loss,
    example_loss,
    lr_schedule,
    mix_at_snr,
    power,
    snr_db,
    split_seed,
    stage_weights,
    target_noise_gains,
    target_waveforms,
    toy_dataset,
    train_loop,
    weighted_loss,
    write_loss_csv,
)

TINY = ModelConfig(stages=2, channels=4, lstm_units=8)


def noise(n, seed=0, scale=1.0):
    return Waveform(np.random.default_rng(seed).standard_normal(n) * scale)


def test_gain_is_one_at_equal_power_and_zero_db():
    c = Waveform(np.tile([1.0, -1.0], 500))
    n = Waveform(np.tile([1.0, 1.0, -1.0, -1.0], 250))
    _, scaled = mix_at_snr(c, n, 0.0)
    np.testing.assert_allclose(scaled.samples, n.samples)


def test_gain_hand_value():
    # clean power 0.25, noise power 1, 10 dB: sqrt(0.25 / 10)
    c = Waveform(np.full(400, 0.5))
    n = Waveform(np.tile([1.0, -1.0], 200))
    _, scaled = mix_at_snr(c, n, 10.0)
    assert np.max(np.abs(scaled.samples)) == pytest.approx(0.158113883, rel=1e-8)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), snr=st.floats(-5, 30))
def test_realized_snr_matches_request(seed, snr):
    rng = np.random.default_rng(seed)
    c = Waveform(rng.standard_normal(800) * rng.uniform(0.01, 1))
    n = Waveform(rng.standard_normal(1500) * rng.uniform(0.01, 1))
    mixture, scaled = mix_at_snr(c, n, snr, seed)
    assert abs(snr_db(c, scaled) - snr) < 1e-6
    np.testing.assert_allclose(mixture.samples, c.samples + scaled.samples)


def test_mix_cut_is_seeded_and_within_noise():
    c, n = noise(100, 1), noise(1000, 2)
    a = mix_at_snr(c, n, 5.0, seed=3)[1].samples
    assert np.array_equal(a, mix_at_snr(c, n, 5.0, seed=3)[1].samples)
    # the scaled noise is a positive multiple of one contiguous window of the source
    hits = [s for s in range(901) if np.allclose(a, a[0] / n.samples[s] * n.samples[s:s + 100])]
    assert len(hits) == 1 and a[0] / n.samples[hits[0]] > 0


def test_mix_errors():
    with pytest.raises(DataError, match="shorter"):
        mix_at_snr(noise(100), noise(50), 0.0)
    with pytest.raises(DataError, match="silent"):
        mix_at_snr(Waveform(np.zeros(10)), noise(20), 0.0)
    with pytest.raises(DataError, match="silent"):
        mix_at_snr(noise(10), Waveform(np.zeros(20)), 0.0)


def test_target_gains():
    np.testing.assert_allclose(target_noise_gains(5), [10 ** -0.5, 0.1, 10 ** -1.5, 0.01, 0.0])
    assert target_noise_gains(2)[0] == pytest.approx(0.31623, abs=1e-5)
    assert target_noise_gains(1) == [0.0]


def test_target_snrs_step_by_ten_db():
    c, n = noise(4000, 1), noise(8000, 2)
    _, scaled = mix_at_snr(c, n, 0.0, seed=0)
    targets = target_waveforms(c, scaled, 5)
    for q, t in enumerate(targets[:-1], start=1):
        assert snr_db(c, t.samples - c.samples) == pytest.approx(10.0 * q, abs=1e-9)
    np.testing.assert_array_equal(targets[-1].samples, c.samples)


def test_stage_weights():
    np.testing.assert_allclose(stage_weights(3), [1 / 6, 2 / 6, 3 / 6])


def test_weighted_loss_hand_value():
    ones = np.ones((2, 3, 4))
    loss = weighted_loss([np.zeros((2, 3, 4))] * 2, [ones, -ones])
    assert float(loss.data) == pytest.approx(1.0)
    loss = weighted_loss([np.zeros((2, 3, 4))] * 2, [ones, 2 * ones])
    assert float(loss.data) == pytest.approx((1 + 2 * 4) / 3)


def test_weighted_loss_gradient():
    rng = np.random.default_rng(0)
    arrs = [rng.standard_normal((2, 3, 4)) for _ in range(3)]
    tgts = [rng.standard_normal((2, 3, 4)) for _ in range(3)]
    errs = check_gradients(lambda *e: weighted_loss(list(e), tgts), arrs, dtype=np.float64)
    assert max(errs) < 1e-6


def test_weighted_loss_mismatch():
    with pytest.raises(ValueError):
        weighted_loss([np.zeros(3)], [np.zeros(3), np.zeros(3)])


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_two_hand_steps():
    p = {"w": np.array([1.0])}
    st_ = AdamState()
    adam_step(p, {"w": np.array([2.0])}, st_, lr=0.1)
    # bias-corrected m = g, v = g^2 on the first step
    assert p["w"][0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8))
    adam_step(p, {"w": np.array([-1.0])}, st_, lr=0.1)
    m = 0.9 * 0.2 + 0.1 * -1.0
    v = 0.999 * 0.004 + 0.001 * 1.0
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert p["w"][0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8) - step, rel=1e-12)


def test_adam_aborts_on_nan():
    p = {"w": np.array([1.0])}
    with pytest.raises(FloatingPointError, match="non-finite"):
        adam_step(p, {"w": np.array([np.nan])}, AdamState())
    assert p["w"][0] == 1.0


@pytest.mark.parametrize("history,expected", [
    ([5, 6, 7, 8], 0.5),
    ([5, 6, 5, 6], 1.0),
    ([5, 6, 7, 8, 9, 10, 11], 0.25),
    ([5, 6, 7, 8, 9, 10], 0.5),
    ([], 1.0),
])
def test_lr_schedule(history, expected):
    assert lr_schedule(history) == expected


def test_halving_resets_counter():
    s = LossIncreaseHalving()
    assert [s.update(x) for x in [1, 2, 3, 4, 5, 6]] == [False, False, False, True, False, False]


def test_split_seed_is_stable_and_distinct():
    a = split_seed(1234)
    assert a == split_seed(1234) and len(set(a)) == 3
    assert a != split_seed(1235)


@pytest.fixture(scope="module")
def toy():
    return toy_dataset(3, 0.1, 2, seed=4, snrs=(0.0, 5.0))


def test_toy_dataset_shapes(toy):
    ex = toy[0]
    assert ex.noisy.shape == (2, 161, 11) and ex.targets.shape == (2, 2, 161, 11)
    assert [e.snr_db for e in toy] == [0.0, 5.0, 0.0]
    assert snr_db(ex.clean, ex.mixture.samples - ex.clean.samples) == pytest.approx(0.0, abs=1e-9)


def test_batch_loss_is_mean_of_utterance_losses(toy):
    from plce.model import build_model
    w = build_model(TINY, 0)
    per = [float(example_loss(w, ex).data) for ex in toy]
    assert float(batch_loss(w, toy).data) == pytest.approx(np.mean(per), rel=1e-6)


def test_train_loop_is_deterministic(tmp_path, toy):
    a = train_loop(TINY, toy, epochs=2, batch=2, seed=5)
    b = train_loop(TINY, toy, epochs=2, batch=2, seed=5)
    assert a.step_losses == b.step_losses and len(a.step_losses) == 4
    save_weights(a.weights, tmp_path / "a.bin")
    save_weights(b.weights, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    write_loss_csv(tmp_path / "loss.csv", a.history)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr" and len(lines) == 3


def test_train_loop_reduces_loss(toy):
    res = train_loop(TINY, toy[:1], epochs=15, batch=1, seed=0, lr=3e-3)
    assert res.step_losses[-1] < res.step_losses[0]


def test_train_loop_errors(toy):
    with pytest.raises(DataError, match="empty"):
        train_loop(TINY, [], epochs=1)
    with pytest.raises(DataError):
        train_loop(ModelConfig(stages=3, channels=4, lstm_units=8), toy, epochs=1)


def test_power_and_snr():
    assert power(np.array([1.0, -1.0, 3.0, -3.0])) == 5.0
    assert snr_db(np.ones(4), 0.1 * np.ones(4)) == pytest.approx(20.0)
