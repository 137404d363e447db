"""Layer kernels with hand-written backward passes.

Feature maps are laid out ``(C, F, T)``: channels, frequency, time.  Every
time axis is causal: output frame ``t`` never reads input frames ``> t``.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .ops import as_tensor
from .tensor import Tensor, make_output

NORM_MODES = ("utterance", "cumulative")


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def deconv_out_size(size: int, kernel: int, stride: int, pad: int, out_pad: int = 0) -> int:
    return (size - 1) * stride - 2 * pad + kernel + out_pad


def _im2col(xp: np.ndarray, kT: int, kF: int, stride_f: int, F_out: int, T_out: int) -> np.ndarray:
    """(C, Fp, Tp) padded map -> (C*kT*kF, F_out*T_out) patch matrix."""
    f_stop = stride_f * (F_out - 1) + 1
    taps = [xp[:, kf : kf + f_stop : stride_f, kt : kt + T_out] for kt in range(kT) for kf in range(kF)]
    return np.stack(taps, axis=1).reshape(xp.shape[0] * kT * kF, F_out * T_out)


def _col2im(cols: np.ndarray, shape, kT: int, kF: int, stride_f: int, F_out: int, T_out: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto a (C, Fp, Tp) map."""
    cols = cols.reshape(shape[0], kT, kF, F_out, T_out)
    out = np.zeros(shape, dtype=cols.dtype)
    f_stop = stride_f * (F_out - 1) + 1
    for kt in range(kT):
        for kf in range(kF):
            out[:, kf : kf + f_stop : stride_f, kt : kt + T_out] += cols[:, kt, kf]
    return out


def conv2d(x, w, b=None, stride_f: int = 1, pad_f: int = 0, causal_pad_t: bool = True) -> Tensor:
    """2-D convolution over (F, T) with ``w`` shaped (C_out, C_in, kT, kF).

    With ``causal_pad_t`` the time axis gets ``kT - 1`` zero frames on the
    past side, so the time length is preserved and kernel tap ``kT - 1``
    is the current frame.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected x (C,F,T) and w (Co,Ci,kT,kF), got {x.shape}, {w.shape}")
    C_in, F, T = x.shape
    C_out, C_in_w, kT, kF = w.shape
    if C_in != C_in_w:
        raise ValueError(f"conv2d: input has {C_in} channels, kernel expects {C_in_w}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (C_out,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({C_out},)")
    pad_t = kT - 1 if causal_pad_t else 0
    F_out = conv_out_size(F, kF, stride_f, pad_f)
    T_out = T + pad_t - kT + 1
    if F_out < 1 or T_out < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (pad_f, pad_f), (pad_t, 0)))
    cols = _im2col(xp, kT, kF, stride_f, F_out, T_out)
    wmat = w.data.reshape(C_out, -1)
    out = (wmat @ cols).reshape(C_out, F_out, T_out)
    if b is not None:
        out += b.data[:, None, None]

    def grad(g):
        gmat = g.reshape(C_out, F_out * T_out)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ gmat, xp.shape, kT, kF, stride_f, F_out, T_out)
            gx = gxp[:, pad_f : pad_f + F, pad_t:]
        gb = g.sum(axis=(1, 2)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_output(np.ascontiguousarray(out), inputs, grad, "conv2d")


def deconv2d(x, w, b=None, stride_f: int = 1, pad_f: int = 0, out_pad_f: int = 0) -> Tensor:
    """Transposed convolution along frequency, causal along time.

    ``w`` is shaped (C_in, C_out, kT, kF).  In time it acts as a stride-1
    transposed conv whose trailing ``kT - 1`` frames are trimmed, so output
    frame ``t`` mixes input frames ``t - kT + 1 .. t``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"deconv2d: expected x (C,F,T) and w (Ci,Co,kT,kF), got {x.shape}, {w.shape}")
    C_in, F, T = x.shape
    C_in_w, C_out, kT, kF = w.shape
    if C_in != C_in_w:
        raise ValueError(f"deconv2d: input has {C_in} channels, kernel expects {C_in_w}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (C_out,):
            raise ValueError(f"deconv2d: bias shape {b.shape} != ({C_out},)")
    if not 0 <= out_pad_f < max(stride_f, 1):
        raise ValueError(f"deconv2d: output padding {out_pad_f} must be smaller than stride {stride_f}")
    F_out = deconv_out_size(F, kF, stride_f, pad_f, out_pad_f)
    if F_out < 1:
        raise ValueError(f"deconv2d: output frequency size {F_out} < 1")
    F_full = (F - 1) * stride_f + kF + out_pad_f
    T_full = T + kT - 1
    full_shape = (C_out, F_full, T_full)
    xmat = x.data.reshape(C_in, F * T)
    wmat = w.data.transpose(1, 2, 3, 0).reshape(C_out * kT * kF, C_in)
    # scatter tap (kt, kf) of input (f, t) to (f * stride + kf, t + kt); trimming the
    # trailing kT - 1 frames leaves y[t] = sum_kt w[kt] x[t - kt]
    full = _col2im(wmat @ xmat, full_shape, kT, kF, stride_f, F, T)
    out = full[:, pad_f : pad_f + F_out, :T]
    if b is not None:
        out = out + b.data[:, None, None]

    def grad(g):
        gfull = np.zeros(full_shape, dtype=g.dtype)
        gfull[:, pad_f : pad_f + F_out, :T] = g
        gcols = _im2col(gfull, kT, kF, stride_f, F, T)
        gx = (wmat.T @ gcols).reshape(C_in, F, T) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = (gcols @ xmat.T).reshape(C_out, kT, kF, C_in).transpose(3, 0, 1, 2)
        gb = g.sum(axis=(1, 2)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_output(np.ascontiguousarray(out), inputs, grad, "deconv2d")


def glu(x, w_main, b_main, w_gate, b_gate, transposed: bool = False, **conv_kwargs) -> Tensor:
    """Gated linear unit: ``conv_main(x) * sigmoid(conv_gate(x))``, both branches configured alike."""
    conv = deconv2d if transposed else conv2d
    main = conv(x, w_main, b_main, **conv_kwargs)
    gate = conv(x, w_gate, b_gate, **conv_kwargs)
    if main.shape != gate.shape:
        raise ValueError(f"glu: branch shapes differ, {main.shape} vs {gate.shape}")
    return ops.mul(main, ops.sigmoid(gate))


def instance_norm(x, gamma, beta, eps: float = 1e-5, mode: str = "utterance") -> Tensor:
    """Per-channel normalisation over (F, T).

    ``mode="utterance"`` uses statistics of the whole map.  ``mode="cumulative"``
    normalises frame ``t`` with the running statistics of frames ``0..t`` so
    that no output frame depends on later input.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if mode not in NORM_MODES:
        raise ValueError(f"unknown norm mode {mode!r}")
    C, F, T = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"instance_norm: gamma/beta must have shape ({C},)")
    dt = x.data.dtype
    xd = x.data.astype(np.float64)
    if mode == "utterance":
        mu = xd.mean(axis=(1, 2), keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=(1, 2), keepdims=True)
        r = 1.0 / np.sqrt(var + eps)
    else:
        n = F * np.arange(1, T + 1, dtype=np.float64)
        s1 = np.cumsum(xd.sum(axis=1), axis=1)
        s2 = np.cumsum((xd * xd).sum(axis=1), axis=1)
        mu = (s1 / n)[:, None, :]
        var = np.maximum(s2 / n - (s1 / n) ** 2, 0.0)[:, None, :]
        r = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * r
    g64 = gamma.data.astype(np.float64)[:, None, None]
    out = (xhat * g64 + beta.data.astype(np.float64)[:, None, None]).astype(dt)

    def grad(g):
        g = g.astype(np.float64)
        ggamma = (g * xhat).sum(axis=(1, 2)).astype(dt)
        gbeta = g.sum(axis=(1, 2)).astype(dt)
        gx = None
        if x.requires_grad:
            gh = g * g64
            if mode == "utterance":
                gx = r * (gh - gh.mean(axis=(1, 2), keepdims=True)
                          - xhat * (gh * xhat).mean(axis=(1, 2), keepdims=True))
            else:
                mu2, r2 = mu[:, 0, :], r[:, 0, :]
                d_mu = -r2 * gh.sum(axis=1)
                d_r = (gh * (xd - mu)).sum(axis=1)
                d_var = d_r * (-0.5) * r2 ** 3
                d_var = np.where(var[:, 0, :] > 0, d_var, 0.0)
                d_mu = d_mu - 2.0 * mu2 * d_var
                d_s1 = d_mu / n
                d_s2 = d_var / n
                # s_t = cumsum(col)_t, so d col_t' = sum_{t >= t'} d s_t
                c1 = np.cumsum(d_s1[:, ::-1], axis=1)[:, ::-1]
                c2 = np.cumsum(d_s2[:, ::-1], axis=1)[:, ::-1]
                gx = gh * r + c1[:, None, :] + 2.0 * xd * c2[:, None, :]
            gx = gx.astype(dt)
        return gx, ggamma, gbeta

    return make_output(out, (x, gamma, beta), grad, "instance_norm")


def prelu(x, alpha) -> Tensor:
    """``x`` where non-negative, ``alpha * x`` elsewhere; ``alpha`` is one scalar."""
    x, alpha = as_tensor(x), as_tensor(alpha)
    if alpha.size != 1:
        raise ValueError("prelu: alpha must be a single scalar")
    a = alpha.data.reshape(())
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)

    def grad(g):
        gx = np.where(neg, a * g, g)
        ga = np.asarray((g * x.data)[neg].sum(dtype=np.float64), dtype=x.data.dtype).reshape(alpha.shape)
        return gx, ga

    return make_output(out, (x, alpha), grad, "prelu")


def linear(x, W, b=None) -> Tensor:
    """Per-frame affine map: x (T, D), W (O, D), b (O,) -> (T, O)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"linear: cannot apply W {W.shape} to x {x.shape}")
    out = x.data @ W.data.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
        out = out + b.data

    def grad(g):
        gx = g @ W.data if x.requires_grad else None
        gW = g.T @ x.data if W.requires_grad else None
        gb = g.sum(axis=0) if b is not None else None
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return make_output(out, inputs, grad, "linear")


def lstm(x, w_ih, w_hh, b, h0=None, c0=None) -> Tensor:
    """One LSTM layer over a (T, D) sequence, returning hidden states (T, H).

    Gate order in the stacked weights is input, forget, cell, output.
    ``h0``/``c0`` are constant initial states (zeros when omitted).
    """
    x, w_ih, w_hh, b = as_tensor(x), as_tensor(w_ih), as_tensor(w_hh), as_tensor(b)
    if x.data.ndim != 2:
        raise ValueError(f"lstm: expected a (T, D) sequence, got {x.shape}")
    T, D = x.shape
    H4, H = w_hh.shape
    if H4 != 4 * H or w_ih.shape != (4 * H, D) or b.shape != (4 * H,):
        raise ValueError(f"lstm: inconsistent weights w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape} for input dim {D}")
    dt = x.data.dtype
    h = np.zeros(H, dtype=dt) if h0 is None else np.asarray(h0, dtype=dt)
    c = np.zeros(H, dtype=dt) if c0 is None else np.asarray(c0, dtype=dt)
    h_init, c_init = h, c
    pre_x = x.data @ w_ih.data.T + b.data
    Whh = w_hh.data
    hs = np.empty((T, H), dtype=dt)
    cs = np.empty((T, H), dtype=dt)
    gates = np.empty((T, 4 * H), dtype=dt)
    for t in range(T):
        z = pre_x[t] + Whh @ h
        i = ops._sigmoid(z[:H])
        f = ops._sigmoid(z[H:2 * H])
        gc = np.tanh(z[2 * H:3 * H])
        o = ops._sigmoid(z[3 * H:])
        c = f * c + i * gc
        h = o * np.tanh(c)
        gates[t] = np.concatenate([i, f, gc, o])
        hs[t] = h
        cs[t] = c

    def grad(g):
        dz = np.empty((T, 4 * H), dtype=dt)
        dh_next = np.zeros(H, dtype=dt)
        dc_next = np.zeros(H, dtype=dt)
        for t in range(T - 1, -1, -1):
            i, f, gc, o = (gates[t, k * H:(k + 1) * H] for k in range(4))
            c_prev = cs[t - 1] if t > 0 else c_init
            tc = np.tanh(cs[t])
            dh = g[t] + dh_next
            do = dh * tc
            dc = dh * o * (1 - tc * tc) + dc_next
            di = dc * gc
            df = dc * c_prev
            dg = dc * i
            dz[t, :H] = di * i * (1 - i)
            dz[t, H:2 * H] = df * f * (1 - f)
            dz[t, 2 * H:3 * H] = dg * (1 - gc * gc)
            dz[t, 3 * H:] = do * o * (1 - o)
            dh_next = Whh.T @ dz[t]
            dc_next = dc * f
        h_prev = np.vstack([h_init[None, :], hs[:-1]])
        gx = dz @ w_ih.data if x.requires_grad else None
        g_ih = dz.T @ x.data
        g_hh = dz.T @ h_prev
        gb = dz.sum(axis=0)
        return gx, g_ih, g_hh, gb

    return make_output(hs, (x, w_ih, w_hh, b), grad, "lstm")


def convgru_step(h_prev, x, wz, bz, wr, br, wn, bn, pad_f: int = 1) -> Tensor:
    """One ConvGRU update across stages.

    Gate convolutions read ``Cat[x, h_prev]`` (2C -> C channels)::

        z  = sigmoid(conv_z([x, h_prev]))
        r  = sigmoid(conv_r([x, h_prev]))
        h~ = tanh(conv_n([x, r * h_prev]))
        h  = (1 - z) * h_prev + z * h~
    """
    h_prev, x = as_tensor(h_prev), as_tensor(x)
    if h_prev.shape != x.shape:
        raise ValueError(f"convgru_step: state {h_prev.shape} and input {x.shape} differ")
    xh = ops.concat([x, h_prev], axis=0)
    z = ops.sigmoid(conv2d(xh, wz, bz, pad_f=pad_f))
    r = ops.sigmoid(conv2d(xh, wr, br, pad_f=pad_f))
    cand = ops.tanh(conv2d(ops.concat([x, ops.mul(r, h_prev)], axis=0), wn, bn, pad_f=pad_f))
    if cand.shape != h_prev.shape:
        raise ValueError(f"convgru_step: gate convs produce {cand.shape}, expected {h_prev.shape}")
    return ops.add(h_prev, ops.mul(z, ops.sub(cand, h_prev)))
