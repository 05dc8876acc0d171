"""Layer primitives with full-sequence (offline) semantics.

Sequences are laid out channels-first, ``(C, T)``, except attention which
works on ``(T, D)``. Convolutions are cross-correlations whose last tap
multiplies the newest sample.

Parameter arguments are plain mappings from short names (``"weight"``,
``"ln1.gain"``, ...) to arrays; see :func:`sub` for slicing a bundle.
"""

from __future__ import annotations

from collections.abc import Mapping
from functools import lru_cache

import numpy as np
from scipy.special import erf

from .errors import ShapeMismatch

LEAKY_SLOPE = 0.1
RES_KERNEL = 5
RES_DILATIONS = ((1, 1), (3, 1), (5, 1))
ROPE_BASE = 10000.0


def sub(params: Mapping, prefix: str) -> dict:
    """Entries of ``params`` under ``prefix.``, with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


# -- activations ----------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x >= 0, x, slope * x)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


# -- dense / norms --------------------------------------------------------

def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis; ``w`` has shape (out, in)."""
    x = np.asarray(x)
    if x.shape[-1] != w.shape[-1]:
        raise ShapeMismatch(f"linear: input dim {x.shape[-1]} vs weight {w.shape}")
    y = x @ w.T
    return y if b is None else y + b


def layer_norm(x, gain, bias, eps=1e-5, axis=-1):
    mu = np.mean(x, axis=axis, keepdims=True)
    var = np.var(x, axis=axis, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if axis in (-1, x.ndim - 1):
        return y * gain + bias
    shape = [1] * x.ndim
    shape[axis] = -1
    return y * np.reshape(gain, shape) + np.reshape(bias, shape)


def instance_norm(x, eps=1e-5):
    """Normalise each channel of ``x`` (C, T) over the whole time axis."""
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.var(x, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# -- 1-D convolutions -----------------------------------------------------

def tap_major(w, transposed=False):
    """Contiguous (K, C_out, C_in) copy of a conv weight, the layout BLAS wants.

    ``transposed`` takes a conv-transpose weight of shape (C_in, C_out, K).
    """
    return np.ascontiguousarray(w.transpose(2, 1, 0) if transposed else w.transpose(2, 0, 1))


def conv1d(x, w, b=None, stride=1, dilation=1, causal=True, pad=None, taps=None):
    """1-D convolution of ``x`` (C_in, T) with ``w`` (C_out, C_in, K).

    ``causal`` left-pads with ``(K-1)*dilation`` zeros, giving
    ``ceil(T/stride)`` outputs. ``pad=(left, right)`` overrides the padding.
    ``taps`` may carry ``tap_major(w)`` precomputed.
    """
    x = np.asarray(x)
    c_out, c_in, k = w.shape
    if x.ndim != 2 or x.shape[0] != c_in:
        raise ShapeMismatch(f"conv1d: input {x.shape} vs weight {w.shape}")
    if taps is None:
        taps = tap_major(w)
    span = (k - 1) * dilation
    if pad is None:
        pad = (span, 0) if causal else (0, 0)
    left, right = pad
    if left or right:
        x = np.pad(x, ((0, 0), (left, right)))
    n_out = (x.shape[1] - span - 1) // stride + 1
    if n_out <= 0:
        y = np.zeros((c_out, 0))
        return y if b is None else y + b[:, None]
    stop = (n_out - 1) * stride + 1
    y = None
    for j in range(k):
        o = j * dilation
        seg = x[:, o : o + stop : stride]
        if stride > 1:
            seg = np.ascontiguousarray(seg)
        y = taps[j] @ seg if y is None else y + taps[j] @ seg
    if b is not None:
        y += b[:, None]
    return y


def depthwise_conv1d(x, w, b=None, causal=True):
    """Per-channel causal convolution; ``w`` has shape (C, K)."""
    c, k = w.shape
    if x.shape[0] != c:
        raise ShapeMismatch(f"depthwise_conv1d: input {x.shape} vs weight {w.shape}")
    xp = np.pad(x, ((0, 0), (k - 1, 0))) if causal else x
    n = xp.shape[1] - k + 1
    y = w[:, 0:1] * xp[:, 0:n]
    for j in range(1, k):
        y += w[:, j : j + 1] * xp[:, j : j + n]
    if b is not None:
        y += b[:, None]
    return y


def conv_transpose1d(x, w, b=None, stride=1, causal=True, taps=None):
    """Transposed convolution of ``x`` (C_in, T) with ``w`` (C_in, C_out, K).

    Frame ``t`` writes ``w[:, :, j]`` scaled copies to output position
    ``t*stride + j``; overlapping writes are summed. The causal variant keeps
    exactly ``T*stride`` outputs, so position ``t*stride + j`` never depends on
    frames after ``t``.
    """
    x = np.asarray(x)
    c_in, c_out, k = w.shape
    if x.ndim != 2 or x.shape[0] != c_in:
        raise ShapeMismatch(f"conv_transpose1d: input {x.shape} vs weight {w.shape}")
    if taps is None:
        taps = tap_major(w, transposed=True)
    t = x.shape[1]
    full = max((t - 1) * stride + k, t * stride) if t else 0
    y = np.zeros((c_out, full))
    for j in range(k):
        y[:, j : j + (t - 1) * stride + 1 : stride] += taps[j] @ x
    if causal:
        y = y[:, : t * stride]
    if b is not None:
        y += b[:, None]
    return y


# -- composite 1-D blocks -------------------------------------------------

def residual_block(x, params, kernel=RES_KERNEL, dilations=RES_DILATIONS, slope=LEAKY_SLOPE):
    """HiFi-style residual block: three causal (leaky, conv, leaky, conv) units with skips.

    Each unit looks back ``(kernel-1)*(d1+d2)`` frames, so the whole block
    sees ``1 + 4*(2+4+6) = 49`` frames with the default settings.
    """
    for u, (d1, d2) in enumerate(dilations):
        p = sub(params, f"unit{u}")
        h = conv1d(leaky_relu(x, slope), p["conv1.weight"], p["conv1.bias"], dilation=d1)
        h = conv1d(leaky_relu(h, slope), p["conv2.weight"], p["conv2.bias"], dilation=d2)
        x = x + h
    return x


def convnext_block(x, params):
    """Causal ConvNeXt block on (C, T): depthwise conv, LN, 4x MLP, skip."""
    h = depthwise_conv1d(x, params["dw.weight"], params["dw.bias"])
    h = layer_norm(h.T, params["ln.gain"], params["ln.bias"])
    h = gelu(linear(h, params["pw1.weight"], params["pw1.bias"]))
    h = linear(h, params["pw2.weight"], params["pw2.bias"])
    return x + h.T


# -- attention ------------------------------------------------------------

def rotary(x, positions, base=ROPE_BASE):
    """Rotate (T, H, dh) query/key vectors by their absolute frame index."""
    dh = x.shape[-1]
    half = dh // 2
    inv = base ** (-np.arange(half) * 2.0 / dh)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def window_mask(q_pos, k_pos, window):
    """True where key position lies in ``[q - window + 1, q]``."""
    d = np.asarray(q_pos)[:, None] - np.asarray(k_pos)[None, :]
    return (d >= 0) & (d < window)


def attend(q, k, v, mask):
    """Masked scaled dot-product attention on (T, H, dh) tensors."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.einsum("qhd,khd->hqk", q, k) * scale
    scores = np.where(mask[None], scores, -np.inf)
    p = softmax(scores, axis=-1)
    return np.einsum("hqk,khd->qhd", p, v)


def qkv(h, params, heads, positions):
    t, d = h.shape
    dh = d // heads
    q = linear(h, params["q.weight"], params["q.bias"]).reshape(t, heads, dh)
    k = linear(h, params["k.weight"], params["k.bias"]).reshape(t, heads, dh)
    v = linear(h, params["v.weight"], params["v.bias"]).reshape(t, heads, dh)
    return rotary(q, positions), rotary(k, positions), v


def feed_forward(x, params):
    h = layer_norm(x, params["ln2.gain"], params["ln2.bias"])
    h = gelu(linear(h, params["ff1.weight"], params["ff1.bias"]))
    return x + linear(h, params["ff2.weight"], params["ff2.bias"])


def mhsa(x, params, heads=8, causal_window_frames=100, positions=None):
    """Pre-norm transformer block with windowed causal self-attention.

    Position ``t`` attends to ``[max(0, t-window+1), t]``. ``x`` is (T, D).
    """
    x = np.asarray(x)
    t, d = x.shape
    if d % heads or params["q.weight"].shape != (d, d):
        raise ShapeMismatch(f"mhsa: input {x.shape} with {heads} heads")
    if t == 0:
        return x
    pos = np.arange(t) if positions is None else np.asarray(positions)
    h = layer_norm(x, params["ln1.gain"], params["ln1.bias"])
    q, k, v = qkv(h, params, heads, pos)
    a = attend(q, k, v, window_mask(pos, pos, causal_window_frames)).reshape(t, d)
    x = x + linear(a, params["out.weight"], params["out.bias"])
    return feed_forward(x, params)


# -- 2-D blocks (speaker generator / critic) ------------------------------

# maps at most this many pixels use the dense-operator path
DENSE_PIXELS = 64


@lru_cache(maxsize=None)
def _tap_selector(kh, kw, h, w):
    """(kh*kw, h*w, h*w) 0/1 tensor: entry [k, p, q] marks input q under tap k of output p."""
    sel = np.zeros((kh * kw, h * w, h * w))
    for i in range(kh):
        for j in range(kw):
            for r in range(h):
                for c in range(w):
                    rr, cc = r + i - kh // 2, c + j - kw // 2
                    if 0 <= rr < h and 0 <= cc < w:
                        sel[i * kw + j, r * w + c, rr * w + cc] = 1.0
    sel.setflags(write=False)
    return sel


def conv2d_same(x, w, b=None):
    """'Same'-padded 2-D convolution; supports matching leading batch dims on x and w.

    ``x``: (..., N, C_in, H, W); ``w``: (..., C_out, C_in, kh, kw). Small maps
    go through an explicit (C_out*H*W, C_in*H*W) operator and one batched
    matmul, which is far cheaper than per-tap contractions at these sizes.
    """
    kh, kw = w.shape[-2:]
    h, wd = x.shape[-2:]
    c_out, c_in = w.shape[-4:-2]
    lead = w.shape[:-4]
    if h * wd <= DENSE_PIXELS:
        hw = h * wd
        sel = _tap_selector(kh, kw, h, wd).reshape(kh * kw, hw * hw)
        op = w.reshape(-1, kh * kw) @ sel
        op = op.reshape(lead + (c_out, c_in, hw, hw))
        op = np.swapaxes(op, -3, -2).reshape(lead + (c_out * hw, c_in * hw))
        flat = x.reshape(x.shape[:-3] + (c_in * hw,))
        y = (flat @ np.swapaxes(op, -1, -2)).reshape(flat.shape[:-1] + (c_out, h, wd))
    else:
        ph, pw = kh // 2, kw // 2
        pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
        xp = np.pad(x, pad)
        y = 0.0
        for i in range(kh):
            for j in range(kw):
                patch = xp[..., i : i + h, j : j + wd]
                y = y + np.einsum("...oc,...nchw->...nohw", w[..., i, j], patch)
    if b is not None:
        y = y + b[..., None, :, None, None]
    return y


def resnet2d_block(x, params):
    """Pre-activation residual block of two 3x3 convolutions on C x H x W maps."""
    h = conv2d_same(relu(x), params["conv1.weight"], params["conv1.bias"])
    h = conv2d_same(relu(h), params["conv2.weight"], params["conv2.bias"])
    return x + h


def upsample2x(x):
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def avgpool2x(x):
    return 0.25 * (x[..., ::2, ::2] + x[..., 1::2, ::2] + x[..., ::2, 1::2] + x[..., 1::2, 1::2])
