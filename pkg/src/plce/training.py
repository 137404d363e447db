"""Progressive-target synthesis, stage-weighted loss, Adam and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_nn as nn
from .dsp import SAMPLE_RATE, Spectrogram, Waveform, stft
from .errors import DataError
from .model import ModelConfig, ModelWeights, build_model, forward_tensors
from .tensor_nn import Tape, Tensor

log = logging.getLogger(__name__)

SNR_GRID = tuple(float(s) for s in range(-5, 31, 2))
SNR_RANGE = (-5.0, 30.0)
STAGE_SNR_STEP_DB = 10.0


def power(x) -> float:
    x = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def snr_db(signal, noise) -> float:
    return 10.0 * np.log10(power(signal) / power(noise))


@dataclass
class MixSpec:
    clean: Waveform
    noise: Waveform
    snr_db: float
    seed: int = 0

    def mix(self) -> tuple[Waveform, Waveform]:
        return mix_at_snr(self.clean, self.noise, self.snr_db, self.seed)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, seed: int = 0) -> tuple[Waveform, Waveform]:
    """Cut a random noise segment as long as ``clean`` and scale it to ``snr_db``.

    Returns ``(mixture, scaled_noise)``.
    """
    c = clean.samples
    n = noise.samples
    if n.shape[0] < c.shape[0]:
        raise DataError(f"noise ({n.shape[0]} samples) shorter than clean ({c.shape[0]} samples)")
    start = int(np.random.default_rng(seed).integers(0, n.shape[0] - c.shape[0] + 1))
    seg = n[start:start + c.shape[0]]
    p_clean, p_noise = power(c), power(seg)
    if p_clean == 0.0:
        raise DataError("clean signal is silent")
    if p_noise == 0.0:
        raise DataError("noise segment is silent")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    scaled = gain * seg
    return Waveform(c + scaled), Waveform(scaled)


def target_noise_gains(Q: int) -> list[float]:
    """Amplitude left on the noise in each target; the last target is clean."""
    if Q < 1:
        raise ValueError(f"stage count must be >= 1, got {Q}")
    return [10.0 ** (-STAGE_SNR_STEP_DB * q / 20.0) for q in range(1, Q)] + [0.0]


def target_waveforms(clean: Waveform, scaled_noise: Waveform, Q: int) -> list[Waveform]:
    return [Waveform(clean.samples + g * scaled_noise.samples) for g in target_noise_gains(Q)]


def synth_targets(clean: Waveform, scaled_noise: Waveform, Q: int) -> list[Spectrogram]:
    """Spectra whose SNR rises by 10 dB per stage, ending on the clean signal."""
    return [stft(w) for w in target_waveforms(clean, scaled_noise, Q)]


def stage_weights(Q: int) -> np.ndarray:
    q = np.arange(1, Q + 1, dtype=np.float64)
    return q / q.sum()


def _as_ri_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Spectrogram):
        return Tensor(x.to_ri())
    return Tensor(x)


def weighted_loss(estimates: Sequence, targets: Sequence) -> Tensor:
    """``sum_q q * mse(S~q, S^q) / sum_q q`` with the MSE taken over RI, bins and frames."""
    if len(estimates) != len(targets) or not estimates:
        raise ValueError(f"need matching non-empty stage lists, got {len(estimates)} and {len(targets)}")
    total = None
    for w, est, tgt in zip(stage_weights(len(estimates)), estimates, targets):
        est, tgt = _as_ri_tensor(est), _as_ri_tensor(tgt)
        if est.shape != tgt.shape:
            raise ValueError(f"estimate {est.shape} and target {tgt.shape} differ")
        term = nn.scale(nn.mean_all(nn.square(nn.sub(est, tgt))), w)
        total = term if total is None else nn.add(total, term)
    return total


# -- optimisation ---------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on the ``params`` arrays."""
    bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient at step {state.step + 1} in {len(bad)} parameter(s): {bad[:5]}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class LossIncreaseHalving:
    """Halve the learning rate after ``patience`` consecutive loss increases, then reset."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.count = 0
        self.last = None
        self.multiplier = 1.0

    def update(self, loss: float) -> bool:
        halved = False
        if self.last is not None and loss > self.last:
            self.count += 1
            if self.count >= self.patience:
                self.multiplier *= 0.5
                self.count = 0
                halved = True
        else:
            self.count = 0
        self.last = loss
        return halved


def lr_schedule(history: Sequence[float], patience: int = 3) -> float:
    """Learning-rate multiplier implied by a sequence of per-epoch validation losses."""
    sched = LossIncreaseHalving(patience)
    for loss in history:
        sched.update(loss)
    return sched.multiplier


# -- data -------------------------------------------------------------------------

@dataclass
class Example:
    uid: str
    snr_db: float
    noisy: np.ndarray        # (2, K, L)
    targets: np.ndarray      # (Q, 2, K, L)
    clean: Waveform | None = None
    mixture: Waveform | None = None


def make_example(uid: str, clean: Waveform, noise: Waveform, snr: float, seed: int, Q: int) -> Example:
    mixture, scaled = mix_at_snr(clean, noise, snr, seed)
    targets = np.stack([t.to_ri() for t in synth_targets(clean, scaled, Q)]).astype(np.float32)
    return Example(uid, snr, stft(mixture).to_ri().astype(np.float32), targets, clean, mixture)


def synthetic_speech(n_samples: int, rng: np.random.Generator, rms: float = 0.1) -> Waveform:
    """Voiced-speech-like test signal: a gliding harmonic series under a syllabic envelope."""
    t = np.arange(n_samples) / SAMPLE_RATE
    f0 = rng.uniform(100, 220) * (1 + 0.1 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    formants = rng.uniform([500, 1200, 2400], [900, 2000, 3200])
    x = np.zeros(n_samples)
    for h in range(1, 30):
        fh = h * f0
        amp = sum(np.exp(-0.5 * ((fh - f) / 150.0) ** 2) for f in formants) / h ** 0.5
        x += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(3, 5) * t + rng.uniform(0, 2 * np.pi))
    x *= env
    x *= rms / np.sqrt(np.mean(x * x))
    return Waveform(x)


def synthetic_noise(n_samples: int, rng: np.random.Generator, kind: str = "white") -> Waveform:
    if kind == "white":
        x = rng.standard_normal(n_samples)
    elif kind == "babble":
        x = sum(synthetic_speech(n_samples, rng).samples for _ in range(6))
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return Waveform(0.1 * x / np.sqrt(np.mean(x * x)))


def toy_dataset(n: int, seconds: float, Q: int, seed: int = 0, snrs: Sequence[float] = (0.0,),
                noise_kind: str = "white") -> list[Example]:
    """Synthetic utterances mixed at the given SNRs (cycled)."""
    rng = np.random.default_rng(seed)
    n_samples = int(round(seconds * SAMPLE_RATE))
    out = []
    for i in range(n):
        clean = synthetic_speech(n_samples, rng)
        noise = synthetic_noise(2 * n_samples, rng, noise_kind)
        snr = float(snrs[i % len(snrs)])
        out.append(make_example(f"toy{i:03d}", clean, noise, snr, int(rng.integers(2 ** 31)), Q))
    return out


# -- loop ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    weights: ModelWeights
    history: list[dict]
    step_losses: list[float]


def split_seed(seed: int, n: int = 3) -> list[int]:
    """Independent integer seeds (init, data, shuffle) derived from one root seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def example_loss(weights: ModelWeights, ex: Example) -> Tensor:
    estimates = forward_tensors(weights, Tensor(ex.noisy))
    return weighted_loss(estimates, [Tensor(t) for t in ex.targets])


def batch_loss(weights: ModelWeights, batch: Sequence[Example]) -> Tensor:
    """Mean of the per-utterance losses."""
    total = None
    for ex in batch:
        l = example_loss(weights, ex)
        total = l if total is None else nn.add(total, l)
    return nn.scale(total, 1.0 / len(batch))


def evaluate_loss(weights: ModelWeights, dataset: Sequence[Example]) -> float:
    return float(np.mean([float(example_loss(weights, ex).data) for ex in dataset]))


def train_loop(config: ModelConfig, dataset: Sequence[Example], epochs: int, batch: int = 8, seed: int = 0,
               lr: float = 1e-3, val_dataset: Sequence[Example] | None = None,
               weights: ModelWeights | None = None) -> TrainResult:
    if not dataset:
        raise DataError("training set is empty")
    if epochs < 1 or batch < 1:
        raise ValueError("epochs and batch must be >= 1")
    Q = config.stages
    for ex in dataset:
        if ex.targets.shape[0] != Q:
            raise DataError(f"{ex.uid}: has {ex.targets.shape[0]} targets, model has {Q} stages")
    init_seed, _, shuffle_seed = split_seed(seed)
    weights = build_model(config, init_seed) if weights is None else weights
    shuffle_rng = np.random.default_rng(shuffle_seed)
    params = {k: t.data for k, t in weights.params.items()}
    opt = AdamState()
    sched = LossIncreaseHalving()
    history, step_losses = [], []
    for epoch in range(1, epochs + 1):
        cur_lr = lr * sched.multiplier
        order = shuffle_rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), batch):
            items = [dataset[i] for i in order[start:start + batch]]
            with Tape() as tape:
                loss = batch_loss(weights, items)
            nn.backward(tape, loss)
            grads = {k: t.grad for k, t in weights.params.items()}
            adam_step(params, grads, opt, lr=cur_lr)
            for t in weights.params.values():
                t.zero_grad()
            step_losses.append(float(loss.data))
            epoch_losses.append(float(loss.data) * len(items))
        train_loss = sum(epoch_losses) / len(dataset)
        val_loss = evaluate_loss(weights, val_dataset) if val_dataset else train_loss
        if sched.update(val_loss):
            log.info("epoch %d: loss rose %d times in a row, halving lr", epoch, sched.patience)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": cur_lr})
        log.debug("epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val_loss, cur_lr)
    return TrainResult(weights, history, step_losses)


def write_loss_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])
