"""Content encoder, token head and the k-means bottleneck.

The encoder maps 16 kHz audio to 512-dim content frames at 50 Hz:

    front-end (strided causal CNN, or log-Mel + causal ConvNeXt)
      -> lookahead conv over frames [i, i+l]
      -> stack of windowed causal attention blocks (optional)

Frame ``i`` depends on input samples up to ``320*(i+l) + 319`` only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .audio import HOP, N_MELS, MEL_TAIL, MelState, log_mel, stream_log_mel
from .errors import ConfigWeightMismatch, InsufficientData, InvalidConfig, LengthMismatch, ShapeMismatch
from .streaming import (
    AttentionBlock,
    Conv,
    ConvNeXtBlock,
    ParallelMean,
    Pointwise,
    ResidualBlock,
    Sequential,
)
from .weights import ParamSpec, WeightBundle, check_shapes

LOOKAHEAD_FRAMES = (0, 1, 3, 7, 14)
MAX_LOOKAHEAD = 14
FRAME_MS = 20


def attention_specs(prefix, dim):
    ff = 4 * dim
    specs = [ParamSpec(f"{prefix}.ln1.gain", (dim,), "ones"), ParamSpec(f"{prefix}.ln1.bias", (dim,), "zeros")]
    for name in ("q", "k", "v", "out"):
        specs += [ParamSpec(f"{prefix}.{name}.weight", (dim, dim), fan_in=dim),
                  ParamSpec(f"{prefix}.{name}.bias", (dim,), fan_in=dim)]
    specs += [
        ParamSpec(f"{prefix}.ln2.gain", (dim,), "ones"),
        ParamSpec(f"{prefix}.ln2.bias", (dim,), "zeros"),
        ParamSpec(f"{prefix}.ff1.weight", (ff, dim), fan_in=dim),
        ParamSpec(f"{prefix}.ff1.bias", (ff,), fan_in=dim),
        ParamSpec(f"{prefix}.ff2.weight", (dim, ff), fan_in=ff),
        ParamSpec(f"{prefix}.ff2.bias", (dim,), fan_in=ff),
    ]
    return specs


def conv_specs(prefix, c_out, c_in, k):
    return [ParamSpec(f"{prefix}.weight", (c_out, c_in, k), fan_in=c_in * k),
            ParamSpec(f"{prefix}.bias", (c_out,), fan_in=c_in * k)]


def resblock_specs(prefix, channels, kernel=nn.RES_KERNEL, n_units=len(nn.RES_DILATIONS)):
    specs = []
    for u in range(n_units):
        specs += conv_specs(f"{prefix}.unit{u}.conv1", channels, channels, kernel)
        specs += conv_specs(f"{prefix}.unit{u}.conv2", channels, channels, kernel)
    return specs


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder topology.

    With ``contextual`` off the encoder reverts to the heavier CNN-only
    baseline: three residual blocks per wave stage, or ConvNeXt depths
    (3, 3, 9, 3) for the Mel variant.
    """

    variant: str = "wave"
    lookahead_frames: int = 7
    contextual: bool = True
    downsample_rates: tuple = (2, 4, 5, 8)
    channels: tuple = (64, 128, 256, 512)
    input_channels: int = 32
    input_kernel: int = 7
    convnext_dims: tuple = (96, 192, 384, 768)
    convnext_depths: tuple | None = None
    content_dim: int = 512
    attn_layers: int = 8
    heads: int = 8
    window: int = 100
    n_tokens: int = 200

    def __post_init__(self):
        if self.variant not in ("wave", "mel"):
            raise InvalidConfig(f"variant must be 'wave' or 'mel', got {self.variant!r}")
        if self.lookahead_frames not in LOOKAHEAD_FRAMES:
            raise InvalidConfig(f"lookahead_frames must be one of {LOOKAHEAD_FRAMES}")
        if int(np.prod(self.downsample_rates)) != HOP:
            raise InvalidConfig("downsample rates must multiply to 320")
        if len(self.channels) != len(self.downsample_rates) or self.channels[-1] != self.content_dim:
            raise InvalidConfig("need one channel width per stage, ending at content_dim")
        if self.content_dim % self.heads:
            raise InvalidConfig("content_dim must be divisible by heads")
        if self.convnext_depths is not None and len(self.convnext_depths) != len(self.convnext_dims):
            raise InvalidConfig("convnext depths and dims must have equal length")

    @property
    def la_ms(self):
        return self.lookahead_frames * FRAME_MS

    @property
    def res_blocks(self):
        return 1 if self.contextual else 3

    @property
    def depths(self):
        if self.convnext_depths is not None:
            return tuple(self.convnext_depths)
        return (1, 1, 3, 1) if self.contextual else (3, 3, 9, 3)

    @property
    def n_attn(self):
        return self.attn_layers if self.contextual else 0

    def param_specs(self):
        d = self.content_dim
        specs = []
        if self.variant == "wave":
            specs += conv_specs("encoder.input", self.input_channels, 1, self.input_kernel)
            c_prev = self.input_channels
            for i, (r, c) in enumerate(zip(self.downsample_rates, self.channels)):
                specs += conv_specs(f"encoder.stage{i}.down", c, c_prev, 2 * r)
                for j in range(self.res_blocks):
                    specs += resblock_specs(f"encoder.stage{i}.res{j}", c)
                c_prev = c
        else:
            dims = self.convnext_dims
            specs += [ParamSpec("encoder.stem.weight", (dims[0], N_MELS), fan_in=N_MELS),
                      ParamSpec("encoder.stem.bias", (dims[0],), fan_in=N_MELS),
                      ParamSpec("encoder.stem_ln.gain", (dims[0],), "ones"),
                      ParamSpec("encoder.stem_ln.bias", (dims[0],), "zeros")]
            for i, (dim, depth) in enumerate(zip(dims, self.depths)):
                if i > 0:
                    specs += [ParamSpec(f"encoder.stage{i}.proj_ln.gain", (dims[i - 1],), "ones"),
                              ParamSpec(f"encoder.stage{i}.proj_ln.bias", (dims[i - 1],), "zeros"),
                              ParamSpec(f"encoder.stage{i}.proj.weight", (dim, dims[i - 1]), fan_in=dims[i - 1]),
                              ParamSpec(f"encoder.stage{i}.proj.bias", (dim,), fan_in=dims[i - 1])]
                for j in range(depth):
                    p = f"encoder.stage{i}.block{j}"
                    specs += [ParamSpec(f"{p}.dw.weight", (dim, 7), fan_in=7),
                              ParamSpec(f"{p}.dw.bias", (dim,), fan_in=7),
                              ParamSpec(f"{p}.ln.gain", (dim,), "ones"),
                              ParamSpec(f"{p}.ln.bias", (dim,), "zeros"),
                              ParamSpec(f"{p}.pw1.weight", (4 * dim, dim), fan_in=dim),
                              ParamSpec(f"{p}.pw1.bias", (4 * dim,), fan_in=dim),
                              ParamSpec(f"{p}.pw2.weight", (dim, 4 * dim), fan_in=4 * dim),
                              ParamSpec(f"{p}.pw2.bias", (dim,), fan_in=4 * dim)]
            specs += [ParamSpec("encoder.head_ln.gain", (dims[-1],), "ones"),
                      ParamSpec("encoder.head_ln.bias", (dims[-1],), "zeros"),
                      ParamSpec("encoder.head.weight", (d, dims[-1]), fan_in=dims[-1]),
                      ParamSpec("encoder.head.bias", (d,), fan_in=dims[-1])]
        # one lookahead tensor serves every setting; l frames read taps [0, l]
        specs += conv_specs("encoder.lookahead", d, d, MAX_LOOKAHEAD + 1)
        for i in range(self.n_attn):
            specs += attention_specs(f"encoder.attn{i}", d)
        specs += [ParamSpec("encoder.token_head.weight", (self.n_tokens, d), fan_in=d),
                  ParamSpec("encoder.token_head.bias", (self.n_tokens,), fan_in=d)]
        return specs


def as_float64(bundle) -> dict:
    return {k: np.asarray(v, dtype=np.float64) for k, v in bundle.items()}


def _channel_ln(gain, bias):
    return Pointwise(lambda x: nn.layer_norm(x.T, gain, bias).T)


def _pointwise_linear(w, b):
    return Pointwise(lambda x: (nn.linear(x.T, w, b)).T)


class Encoder:
    """Content encoder bound to a weight bundle.

    Offline use: :meth:`forward` on a whole utterance. Streaming use:
    :meth:`make_state`, repeated :meth:`step`, then :meth:`flush`.
    """

    def __init__(self, config: EncoderConfig, weights):
        check_shapes(weights, config.param_specs(), ConfigWeightMismatch)
        self.config = config
        p = weights if all(v.dtype == np.float64 for v in weights.values()) else as_float64(weights)
        self.params = p
        self.frontend = self._build_frontend(p)
        l = config.lookahead_frames
        self.lookahead = Conv(
            np.ascontiguousarray(p["encoder.lookahead.weight"][:, :, : l + 1]),
            p["encoder.lookahead.bias"],
            left_pad=0,
            right_pad=l,
        )
        self.context = Sequential(
            AttentionBlock(nn.sub(p, f"encoder.attn{i}"), config.heads, config.window)
            for i in range(config.n_attn)
        )

    def _build_frontend(self, p):
        cfg = self.config
        layers = []
        if cfg.variant == "wave":
            layers.append(Conv(p["encoder.input.weight"], p["encoder.input.bias"]))
            for i, r in enumerate(cfg.downsample_rates):
                layers.append(Pointwise(nn.leaky_relu))
                layers.append(Conv.end_aligned(p[f"encoder.stage{i}.down.weight"],
                                               p[f"encoder.stage{i}.down.bias"], r))
                layers.append(ParallelMean(
                    ResidualBlock(nn.sub(p, f"encoder.stage{i}.res{j}")) for j in range(cfg.res_blocks)
                ))
        else:
            layers.append(_pointwise_linear(p["encoder.stem.weight"], p["encoder.stem.bias"]))
            layers.append(_channel_ln(p["encoder.stem_ln.gain"], p["encoder.stem_ln.bias"]))
            for i, depth in enumerate(cfg.depths):
                if i > 0:
                    layers.append(_channel_ln(p[f"encoder.stage{i}.proj_ln.gain"], p[f"encoder.stage{i}.proj_ln.bias"]))
                    layers.append(_pointwise_linear(p[f"encoder.stage{i}.proj.weight"], p[f"encoder.stage{i}.proj.bias"]))
                for j in range(depth):
                    layers.append(ConvNeXtBlock(nn.sub(p, f"encoder.stage{i}.block{j}")))
            layers.append(_channel_ln(p["encoder.head_ln.gain"], p["encoder.head_ln.bias"]))
            layers.append(_pointwise_linear(p["encoder.head.weight"], p["encoder.head.bias"]))
        return Sequential(layers)

    # offline ---------------------------------------------------------------

    def features(self, x):
        """Front-end input (C, T): raw samples for wave, log-Mel frames for mel."""
        if self.config.variant == "wave":
            return np.asarray(x, dtype=np.float64).reshape(1, -1)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2 and x.shape[1] == N_MELS:
            return x.T
        return log_mel(x).T

    def forward(self, x) -> np.ndarray:
        """Encode a whole utterance; returns (n_frames, content_dim)."""
        h = self.frontend.forward(self.features(x))
        h = self.lookahead.forward(h)
        h = self.context.forward(h)
        return h.T

    # streaming -------------------------------------------------------------

    def make_state(self) -> dict:
        return {
            "mel": MelState() if self.config.variant == "mel" else None,
            "frontend": self.frontend.new_state(),
            "lookahead": self.lookahead.new_state(),
            "context": self.context.new_state(),
        }

    def _after_frontend(self, state, h):
        h = self.lookahead.step(state["lookahead"], h)
        return self.context.step(state["context"], h)

    def step(self, state, samples) -> np.ndarray:
        """Consume the next samples; returns the newly determined frames (n, D)."""
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        if self.config.variant == "wave":
            x = samples.reshape(1, -1)
        else:
            x = stream_log_mel(samples, state["mel"]).T
        h = self.frontend.step(state["frontend"], x)
        return self._after_frontend(state, h).T

    def flush(self, state) -> np.ndarray:
        """Drain the lookahead line with zero frames (partial hops are dropped)."""
        zeros = np.zeros((self.config.content_dim, self.config.lookahead_frames))
        return self._after_frontend(state, zeros).T

    def token_logits(self, frames):
        return token_logits(frames, self.params["encoder.token_head.weight"], self.params["encoder.token_head.bias"])


def encode(audio_or_mel, config: EncoderConfig, weights, state=None, encoder=None):
    """Encode audio (or log-Mel frames for the mel variant) into content frames.

    Without ``state`` the input is a whole utterance. With ``state`` (from
    ``Encoder.make_state``) the input is the next chunk of a stream and only
    newly determined frames are returned.
    """
    enc = encoder or Encoder(config, weights)
    if state is None:
        return enc.forward(audio_or_mel)
    return enc.step(state, audio_or_mel)


# -- token head -------------------------------------------------------------

def token_logits(frames, weight, bias=None):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"frames {frames.shape} vs token head {weight.shape}")
    return nn.linear(frames, np.asarray(weight, np.float64), None if bias is None else np.asarray(bias, np.float64))


def token_accuracy(logits, labels) -> float:
    """Top-1 token-ID accuracy in percent."""
    logits = np.asarray(logits)
    labels = np.asarray(labels).reshape(-1)
    if logits.shape[0] != labels.shape[0]:
        raise LengthMismatch(f"{logits.shape[0]} frames vs {labels.shape[0]} labels")
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels) * 100.0)


def read_labels(path) -> np.ndarray:
    lines = [s.strip() for s in Path(path).read_text(encoding="utf-8").splitlines()]
    return np.array([int(s) for s in lines if s], dtype=np.int64)


# -- k-means bottleneck ----------------------------------------------------

@dataclass
class Codebook:
    centroids: np.ndarray
    distortion: list = field(default_factory=list)

    @property
    def k(self):
        return self.centroids.shape[0]

    def to_bundle(self) -> WeightBundle:
        return WeightBundle({"kmeans.centroids": self.centroids})

    @classmethod
    def from_bundle(cls, bundle) -> "Codebook":
        if "kmeans.centroids" not in bundle:
            raise ConfigWeightMismatch("bundle has no 'kmeans.centroids' tensor")
        return cls(np.asarray(bundle["kmeans.centroids"], dtype=np.float64))


def sq_distances(x, c):
    """Squared Euclidean distances (n, k) via the expanded form."""
    d = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ c.T + np.sum(c * c, axis=1)[None, :]
    return np.maximum(d, 0.0)


def nearest(x, c):
    """Index of the nearest centroid per row, ties to the lowest index.

    The expanded-form distances pick candidates; near-ties are re-scored with
    exact differences so rounding cannot reorder them.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.asarray(c, dtype=np.float64)
    d = sq_distances(x, c)
    best = np.argmin(d, axis=1)
    dmin = d[np.arange(len(x)), best]
    tol = 1e-9 * (np.sum(x * x, axis=1) + np.max(np.sum(c * c, axis=1))) + 1e-12
    close = d <= (dmin + tol)[:, None]
    for i in np.flatnonzero(close.sum(axis=1) > 1):
        cand = np.flatnonzero(close[i])
        exact = np.sum((c[cand] - x[i]) ** 2, axis=1)
        best[i] = cand[np.flatnonzero(exact == exact.min())[0]]
    return best


def quantize(frame, codebook: Codebook):
    """Nearest centroid to ``frame`` (one vector or a batch) and its index."""
    frame = np.asarray(frame, dtype=np.float64)
    idx = nearest(frame.reshape(-1, codebook.centroids.shape[1]), codebook.centroids)
    if frame.ndim == 1:
        return int(idx[0]), codebook.centroids[idx[0]].copy()
    return idx, codebook.centroids[idx]


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d / total))
        centers.append(x[idx])
        d = np.minimum(d, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def fit_kmeans(frames, k=256, iterations=50, seed=0) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its current
    centroid. ``Codebook.distortion`` records the mean squared distance to the
    nearest centroid after every iteration; it never increases.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch("frames must be a 2-D array")
    if len(np.unique(x, axis=0)) < k:
        raise InsufficientData(f"need at least {k} distinct frames, got {len(np.unique(x, axis=0))}")
    rng = np.random.default_rng(seed)
    c = _kmeanspp(x, k, rng)
    history = []
    labels = nearest(x, c)
    for _ in range(iterations):
        new_c = c.copy()
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        filled = counts > 0
        new_c[filled] = sums[filled] / counts[filled, None]
        if not filled.all():
            dist = np.sum((x - new_c[labels]) ** 2, axis=1)
            order = np.argsort(-dist, kind="stable")
            for taken, j in enumerate(np.flatnonzero(~filled)):
                new_c[j] = x[order[taken]]
        c = new_c
        new_labels = nearest(x, c)
        history.append(float(np.mean(np.sum((x - c[new_labels]) ** 2, axis=1))))
        if np.array_equal(new_labels, labels) and len(history) > 1:
            labels = new_labels
            break
        labels = new_labels
    return Codebook(c, history)


def load_codebook(path) -> Codebook:
    from .weights import load_weights

    return Codebook.from_bundle(load_weights(path))
