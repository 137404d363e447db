"""Waveform <-> spectrogram conversion and 16-bit WAV I/O.

Framing is fixed: 16 kHz audio, 320-sample (20 ms) periodic Hann window,
hop 160 (50 % overlap), 320-point real FFT keeping 161 bins.  Analysis
prepends one hop of zeros so frame ``l`` only sees samples up to
``l * HOP + HOP - 1``; synthesis is weighted overlap-add divided by the
summed squared window, which reconstructs every sample exactly.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AudioError

SAMPLE_RATE = 16000
WIN = 320
HOP = 160
N_FFT = 320
N_BINS = N_FFT // 2 + 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"unsupported sample rate {self.sample_rate} Hz (expected {SAMPLE_RATE})")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class Spectrogram:
    """Complex T-F representation stored as real and imaginary K x L planes."""

    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        self.real = np.asarray(self.real, dtype=np.float64)
        self.imag = np.asarray(self.imag, dtype=np.float64)
        if self.real.ndim != 2 or self.real.shape != self.imag.shape:
            raise ValueError(
                f"real/imag planes must be 2-D with equal shapes, got {self.real.shape} and {self.imag.shape}"
            )

    @property
    def K(self) -> int:
        return self.real.shape[0]

    @property
    def L(self) -> int:
        return self.real.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "Spectrogram":
        return cls(np.real(z), np.imag(z))

    def to_ri(self) -> np.ndarray:
        """Stack into a (2, K, L) array, real channel first."""
        return np.stack([self.real, self.imag])

    @classmethod
    def from_ri(cls, ri: np.ndarray) -> "Spectrogram":
        ri = np.asarray(ri)
        if ri.ndim != 3 or ri.shape[0] != 2:
            raise ValueError(f"expected a (2, K, L) array, got {ri.shape}")
        return cls(ri[0], ri[1])

    def scaled(self, factor: float) -> "Spectrogram":
        return Spectrogram(self.real * factor, self.imag * factor)


def make_window(size: int) -> np.ndarray:
    """Periodic Hann window, ``0.5 - 0.5 cos(2 pi t / size)``."""
    if size <= 0:
        raise ValueError("window size must be positive")
    t = np.arange(size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * t / size)


def num_frames(n_samples: int) -> int:
    """Frame count for a signal of ``n_samples`` under the causal padding policy."""
    return -(-n_samples // HOP) + 1


def _as_samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64).reshape(-1)


def stft(x: Waveform | np.ndarray) -> Spectrogram:
    samples = _as_samples(x)
    n = samples.shape[0]
    if n == 0:
        raise AudioError("cannot transform an empty waveform")
    n_frames = num_frames(n)
    padded = np.zeros((n_frames + 1) * HOP)
    padded[HOP:HOP + n] = samples
    frames = np.lib.stride_tricks.sliding_window_view(padded, WIN)[::HOP][:n_frames]
    spec = np.fft.rfft(frames * make_window(WIN), n=N_FFT, axis=1)
    return Spectrogram.from_complex(spec.T)


def istft(s: Spectrogram, length: int) -> Waveform:
    if s.K != N_BINS:
        raise AudioError(f"expected {N_BINS} frequency bins, got {s.K}")
    n_frames = s.L
    window = make_window(WIN)
    frames = np.fft.irfft(s.to_complex().T, n=N_FFT, axis=1)[:, :WIN] * window
    total = (n_frames + 1) * HOP
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window ** 2
    for l in range(n_frames):
        out[l * HOP:l * HOP + WIN] += frames[l]
        norm[l * HOP:l * HOP + WIN] += wsq
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out = out[HOP:]
    if out.shape[0] >= length:
        out = out[:length]
    else:
        out = np.concatenate([out, np.zeros(length - out.shape[0])])
    return Waveform(out)


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except FileNotFoundError:
        raise AudioError(f"{path}: no such file") from None
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: not a PCM WAV file ({exc})") from None
    if rate != SAMPLE_RATE:
        raise AudioError(f"{path}: unsupported sample rate {rate} Hz (expected {SAMPLE_RATE})")
    if channels != 1:
        raise AudioError(f"{path}: unsupported channel count {channels} (mono only)")
    if width != 2:
        raise AudioError(f"{path}: unsupported sample width {8 * width} bits (16-bit PCM only)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0)


def write_wav(path, w: Waveform | np.ndarray) -> None:
    samples = np.clip(_as_samples(w), -1.0, 1.0)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())
