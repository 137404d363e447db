"""Model assembly: a shared stage-recurrent ConvGRU plus Q unshared PL-Cells.

Stage ``q`` sees ``Cat[X, S~(q-1)]`` (4 channels, ``S~(0) = X``), lifts it to
``channels`` maps with a causal conv, updates the shared hidden state with
the ConvGRU and hands it to the stage's own encoder -> LSTM -> decoder cell,
which emits a 2-channel (real, imaginary) spectrum estimate.
"""

from __future__ import annotations

import dataclasses
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_nn as nn
from .dsp import N_BINS, Spectrogram
from .errors import ModelError
from .tensor_nn import Tensor

KT, KF = 2, 3
STRIDE_F, PAD_F = 2, 1
GRU_KF = 3
META_NAME = "meta.config"


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 5
    bins: int = N_BINS
    channels: int = 64
    encoder_depth: int = 5
    lstm_layers: int = 2
    lstm_units: int = 256
    gate_enabled: bool = True
    srnn_enabled: bool = True
    skip_enabled: bool = True
    norm_mode: str = "utterance"

    def __post_init__(self):
        if self.stages < 1:
            raise ModelError(f"stage count must be >= 1, got {self.stages}")
        for field in ("bins", "channels", "encoder_depth", "lstm_layers", "lstm_units"):
            if getattr(self, field) < 1:
                raise ModelError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.norm_mode not in nn.NORM_MODES:
            raise ModelError(f"unknown norm mode {self.norm_mode!r}")

    def freq_chain(self) -> list[int]:
        """Frequency sizes through the encoder, e.g. 161, 81, 41, 21, 11, 6."""
        chain = [self.bins]
        for _ in range(self.encoder_depth):
            chain.append(nn.conv_out_size(chain[-1], KF, STRIDE_F, PAD_F))
        return chain

    def decoder_out_pads(self) -> list[int]:
        """Output padding per decoder block so the decoder lands back on the encoder sizes."""
        chain = self.freq_chain()
        pads = []
        for i in range(self.encoder_depth, 0, -1):
            pads.append(chain[i - 1] - nn.deconv_out_size(chain[i], KF, STRIDE_F, PAD_F))
        return pads

    def to_vector(self) -> np.ndarray:
        return np.array([
            self.stages, self.bins, self.channels, self.encoder_depth, self.lstm_layers,
            self.lstm_units, self.gate_enabled, self.srnn_enabled, self.skip_enabled,
            nn.NORM_MODES.index(self.norm_mode),
        ], dtype=np.float32)

    @classmethod
    def from_vector(cls, v) -> "ModelConfig":
        v = [int(round(float(a))) for a in np.asarray(v).reshape(-1)]
        if len(v) != 10:
            raise ModelError(f"config record has {len(v)} fields, expected 10")
        return cls(
            stages=v[0], bins=v[1], channels=v[2], encoder_depth=v[3], lstm_layers=v[4],
            lstm_units=v[5], gate_enabled=bool(v[6]), srnn_enabled=bool(v[7]),
            skip_enabled=bool(v[8]), norm_mode=nn.NORM_MODES[v[9]],
        )


def _unit_shapes(prefix, w_shape, gated, normed, out_ch):
    shapes = [(f"{prefix}.conv.w", w_shape), (f"{prefix}.conv.b", (out_ch,))]
    if gated:
        shapes += [(f"{prefix}.gate.w", w_shape), (f"{prefix}.gate.b", (out_ch,))]
    if normed:
        shapes += [
            (f"{prefix}.norm.gamma", (out_ch,)),
            (f"{prefix}.norm.beta", (out_ch,)),
            (f"{prefix}.prelu.alpha", (1,)),
        ]
    return shapes


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Every parameter name and shape, in initialisation order."""
    C, H = config.channels, config.lstm_units
    chain = config.freq_chain()
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if config.srnn_enabled:
        shapes += _unit_shapes("srnn.in", (C, 4, KT, KF), False, True, C)
        for gate in ("z", "r", "n"):
            shapes += [(f"srnn.gru.{gate}.w", (C, 2 * C, 1, GRU_KF)), (f"srnn.gru.{gate}.b", (C,))]
    for q in range(1, config.stages + 1):
        cell = f"cell{q}"
        if not config.srnn_enabled:
            shapes += _unit_shapes(f"{cell}.in", (C, 4, KT, KF), False, True, C)
        for i in range(config.encoder_depth):
            shapes += _unit_shapes(f"{cell}.enc{i}", (C, C, KT, KF), config.gate_enabled, True, C)
        d_in = C * chain[-1]
        for j in range(config.lstm_layers):
            width = d_in if j == 0 else H
            shapes += [
                (f"{cell}.lstm{j}.w_ih", (4 * H, width)),
                (f"{cell}.lstm{j}.w_hh", (4 * H, H)),
                (f"{cell}.lstm{j}.b", (4 * H,)),
            ]
        shapes += [(f"{cell}.proj.w", (d_in, H)), (f"{cell}.proj.b", (d_in,))]
        dec_in = 2 * C if config.skip_enabled else C
        for i in range(config.encoder_depth):
            last = i == config.encoder_depth - 1
            out_ch = 2 if last else C
            shapes += _unit_shapes(
                f"{cell}.dec{i}", (dec_in, out_ch, KT, KF), config.gate_enabled and not last, not last, out_ch
            )
    return OrderedDict(shapes)


def _init_param(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf == "alpha":
        return np.full(shape, 0.25)
    if leaf in ("b", "beta"):
        out = np.zeros(shape)
        if ".lstm" in name:
            H = shape[0] // 4
            out[H:2 * H] = 1.0
        return out
    if len(shape) == 4:
        if ".dec" in name:
            fan_in, fan_out = shape[0] * shape[2] * shape[3], shape[1] * shape[2] * shape[3]
        else:
            fan_in, fan_out = shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]
    elif leaf in ("w_ih", "w_hh"):
        fan_in, fan_out = shape[1], shape[0] // 4
    else:
        fan_in, fan_out = shape[1], shape[0]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ModelWeights:
    config: ModelConfig
    params: "OrderedDict[str, Tensor]"

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ModelError(f"missing parameter {name!r}") from None

    def __iter__(self):
        return iter(self.params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def with_norm_mode(self, mode: str) -> "ModelWeights":
        """Same tensors, different normalisation statistics at run time."""
        return ModelWeights(dataclasses.replace(self.config, norm_mode=mode), self.params)

    def astype(self, dtype) -> "ModelWeights":
        params = OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=True, name=k, dtype=dtype)) for k, v in self.params.items()
        )
        return ModelWeights(self.config, params)

    def copy(self) -> "ModelWeights":
        return self.astype(np.float32)


def build_model(config: ModelConfig, seed: int = 0) -> ModelWeights:
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        data = _init_param(name, shape, rng).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name, dtype=np.float32)
    return ModelWeights(config, params)


def param_count(weights: ModelWeights) -> int:
    return int(sum(t.size for t in weights.params.values()))


# -- forward -----------------------------------------------------------------

def _unit(p: ModelWeights, prefix: str, x: Tensor, mode: str, *, transposed=False, gated=False,
          normed=True, **conv_kwargs) -> Tensor:
    if gated:
        y = nn.glu(x, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], p[f"{prefix}.gate.w"],
                   p[f"{prefix}.gate.b"], transposed=transposed, **conv_kwargs)
    elif transposed:
        y = nn.deconv2d(x, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], **conv_kwargs)
    else:
        y = nn.conv2d(x, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], **conv_kwargs)
    if not normed:
        return y
    y = nn.instance_norm(y, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"], mode=mode)
    return nn.prelu(y, p[f"{prefix}.prelu.alpha"])


def _cell_forward(weights: ModelWeights, q: int, feat: Tensor) -> Tensor:
    """PL-Cell of stage ``q``: (C, K, L) features -> (2, K, L) RI estimate."""
    cfg = weights.config
    mode = cfg.norm_mode
    cell = f"cell{q}"
    C, L = cfg.channels, feat.shape[2]
    chain = cfg.freq_chain()
    skips = []
    x = feat
    for i in range(cfg.encoder_depth):
        x = _unit(weights, f"{cell}.enc{i}", x, mode, gated=cfg.gate_enabled, stride_f=STRIDE_F, pad_f=PAD_F)
        skips.append(x)
    seq = nn.reshape(nn.permute(x, (2, 0, 1)), (L, C * chain[-1]))
    for j in range(cfg.lstm_layers):
        seq = nn.lstm(seq, weights[f"{cell}.lstm{j}.w_ih"], weights[f"{cell}.lstm{j}.w_hh"], weights[f"{cell}.lstm{j}.b"])
    seq = nn.linear(seq, weights[f"{cell}.proj.w"], weights[f"{cell}.proj.b"])
    x = nn.permute(nn.reshape(seq, (L, C, chain[-1])), (1, 2, 0))
    for i, out_pad in enumerate(cfg.decoder_out_pads()):
        if cfg.skip_enabled:
            x = nn.concat([x, skips[cfg.encoder_depth - 1 - i]], axis=0)
        last = i == cfg.encoder_depth - 1
        x = _unit(weights, f"{cell}.dec{i}", x, mode, transposed=True, gated=cfg.gate_enabled and not last,
                  normed=not last, stride_f=STRIDE_F, pad_f=PAD_F, out_pad_f=out_pad)
    return x


def stage_tensors(weights: ModelWeights, q: int, x: Tensor, prev: Tensor, h_prev: Tensor | None):
    """One stage on tensors; returns ``(estimate, hidden)``.  Differentiable."""
    cfg = weights.config
    if not 1 <= q <= cfg.stages:
        raise ModelError(f"stage overflow: stage {q} requested, model has {cfg.stages}")
    if x.shape != prev.shape or x.shape[:2] != (2, cfg.bins):
        raise ModelError(f"expected inputs of shape (2, {cfg.bins}, L), got {x.shape} and {prev.shape}")
    inp = nn.concat([x, prev], axis=0)
    if cfg.srnn_enabled:
        lifted = _unit(weights, "srnn.in", inp, cfg.norm_mode, pad_f=1)
        if h_prev is None:
            h_prev = nn.zeros(lifted.shape)
        h = nn.convgru_step(
            h_prev, lifted,
            weights["srnn.gru.z.w"], weights["srnn.gru.z.b"],
            weights["srnn.gru.r.w"], weights["srnn.gru.r.b"],
            weights["srnn.gru.n.w"], weights["srnn.gru.n.b"],
        )
        feat = h
    else:
        feat = _unit(weights, f"cell{q}.in", inp, cfg.norm_mode, pad_f=1)
        h = None
    return _cell_forward(weights, q, feat), h


def forward_tensors(weights: ModelWeights, x: Tensor, stages: int | None = None) -> list[Tensor]:
    """All stage estimates as tensors, keeping the graph for training."""
    stages = weights.config.stages if stages is None else stages
    prev, h = x, None
    out = []
    for q in range(1, stages + 1):
        prev, h = stage_tensors(weights, q, x, prev, h)
        out.append(prev)
    return out


@dataclass
class StageState:
    """Carry between stages: ``q`` is the next stage to run."""

    q: int
    h: Tensor | None
    prev_estimate: Spectrogram


def initial_state(X: Spectrogram) -> StageState:
    return StageState(q=1, h=None, prev_estimate=X)


def forward_stage(weights: ModelWeights, state: StageState, X: Spectrogram) -> tuple[Spectrogram, StageState]:
    x = Tensor(X.to_ri())
    prev = Tensor(state.prev_estimate.to_ri())
    est, h = stage_tensors(weights, state.q, x, prev, state.h)
    estimate = Spectrogram.from_ri(est.data)
    return estimate, StageState(q=state.q + 1, h=h, prev_estimate=estimate)


def forward_all(weights: ModelWeights, X: Spectrogram) -> list[Spectrogram]:
    state = initial_state(X)
    out = []
    for _ in range(weights.config.stages):
        est, state = forward_stage(weights, state, X)
        out.append(est)
    return out


# -- weight files ------------------------------------------------------------
# little endian: b"PLCW", u32 version, u32 count, then per tensor
# u32 name_len, name, u32 rank, u64 dims[rank], u8 dtype (0 = f32), f32 data;
# trailing u32 CRC32 over everything before it.

MAGIC = b"PLCW"
VERSION = 1


def _entries(weights: ModelWeights):
    yield META_NAME, weights.config.to_vector()
    for name, t in weights.params.items():
        yield name, t.data


def save_weights(weights: ModelWeights, path) -> None:
    entries = list(_entries(weights))
    buf = bytearray(MAGIC + struct.pack("<II", VERSION, len(entries)))
    for name, data in entries:
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}Q", *data.shape)
        buf += struct.pack("<B", 0) + np.asarray(data, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_weights(path) -> ModelWeights:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ModelError(f"{path}: cannot read weight file ({exc.strerror})") from None
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ModelError(f"{path}: not a weight file")
    if struct.unpack_from("<I", blob, len(blob) - 4)[0] != zlib.crc32(blob[:-4]):
        raise ModelError(f"{path}: checksum mismatch (truncated or corrupted weight file)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ModelError(f"{path}: unsupported weight file version {version}")
    end = len(blob) - 4
    pos = 12
    tensors = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            (dtype,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            if dtype != 0:
                raise ModelError(f"{path}: unsupported dtype code {dtype} for {name!r}")
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > end:
                raise ModelError(f"{path}: truncated data for {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
            pos += nbytes
    except struct.error:
        raise ModelError(f"{path}: truncated weight file") from None
    if pos != end:
        raise ModelError(f"{path}: {end - pos} unexpected trailing bytes")
    if META_NAME not in tensors:
        raise ModelError(f"{path}: missing {META_NAME} record")
    config = ModelConfig.from_vector(tensors.pop(META_NAME))
    expected = param_shapes(config)
    if list(expected) != list(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise ModelError(f"{path}: parameter set does not match its config (missing {missing[:3]}, extra {extra[:3]})")
    params = OrderedDict()
    for name, data in tensors.items():
        if tuple(data.shape) != expected[name]:
            raise ModelError(f"{path}: {name!r} has shape {data.shape}, expected {expected[name]}")
        params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name, dtype=np.float32)
    return ModelWeights(config, params)
