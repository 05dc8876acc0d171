"""Speaker/variance adapter, waveform decoder and the end-to-end pipeline.

Inference chain::

    audio -> Encoder -> [k-means bottleneck] -> adapter(target speaker) -> decoder -> audio

The adapter normalises content frames over a trailing 2 s window, re-colours
them with FiLM parameters predicted from the target speaker embedding, then
adds projected F0 and energy predictions. The decoder is a single attention
block followed by four causal transposed-conv stages (x8, x5, x4, x2).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .audio import HOP, AudioBuffer
from .encoder import (
    Codebook,
    Encoder,
    EncoderConfig,
    FRAME_MS,
    as_float64,
    attention_specs,
    conv_specs,
    nearest,
    resblock_specs,
)
from .errors import (
    ConfigWeightMismatch,
    DoubleFlush,
    InvalidConfig,
    LengthMismatch,
    MalformedFile,
    ShapeMismatch,
    ZeroVector,
)
from .streaming import (
    AttentionBlock,
    Conv,
    ConvTranspose,
    ParallelMean,
    Pointwise,
    ResidualBlock,
    Sequential,
    StreamState,
    WindowedInstanceNorm,
)
from .weights import ParamSpec, atomic_write_bytes, check_shapes

SPK_DIM = 704
XVECTOR_DIM = 512
F0_MIN, F0_RANGE = 50.0, 450.0
# F0 enters the latent stream in units of this many Hz
F0_SCALE = 500.0


# -- speaker embeddings -----------------------------------------------------

@dataclass(frozen=True)
class SpeakerEmbedding:
    """Identity vector: x-vector part (first 512) followed by the ECAPA part."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("speaker embedding contains non-finite values")
        if not np.any(v):
            raise ZeroVector("speaker embedding has zero norm")
        object.__setattr__(self, "values", v)

    @property
    def xvector(self):
        return self.values[:XVECTOR_DIM]

    @property
    def ecapa(self):
        return self.values[XVECTOR_DIM:]

    def __len__(self):
        return self.values.size


def read_embedding(path, dim=SPK_DIM) -> SpeakerEmbedding:
    """Read a raw little-endian float32 ``.emb`` file."""
    raw = Path(path).read_bytes()
    if dim is not None and len(raw) != 4 * dim:
        raise MalformedFile(f"{path}: expected {4 * dim} bytes, found {len(raw)}")
    if len(raw) % 4:
        raise MalformedFile(f"{path}: size is not a multiple of 4")
    return SpeakerEmbedding(np.frombuffer(raw, dtype="<f4"))


def write_embedding(path, emb) -> None:
    values = emb.values if isinstance(emb, SpeakerEmbedding) else emb
    atomic_write_bytes(path, np.asarray(values, dtype="<f4").tobytes())


def read_embeddings_dir(directory, dim=SPK_DIM) -> list:
    paths = sorted(Path(directory).glob("*.emb"))
    return [read_embedding(p, dim) for p in paths]


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class ProsodyTrack:
    f0: np.ndarray
    energy: np.ndarray


@dataclass(frozen=True)
class PipelineConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    use_kmeans: bool = False
    chunk_ms: int = 60
    upsample_rates: tuple = (8, 5, 4, 2)
    decoder_channels: tuple = (256, 128, 64, 32)
    decoder_window: int = 100
    decoder_attn_layers: int = 1
    spk_dim: int = SPK_DIM
    prosody_hidden: int = 256
    output_kernel: int = 7

    def __post_init__(self):
        if int(np.prod(self.upsample_rates)) != HOP:
            raise InvalidConfig("decoder upsample rates must multiply to 320")
        if len(self.decoder_channels) != len(self.upsample_rates):
            raise InvalidConfig("need one decoder channel width per upsample stage")
        if not 10 <= self.chunk_ms <= 1000:
            raise InvalidConfig("chunk_ms must lie in [10, 1000]")

    @property
    def la_ms(self):
        return self.encoder.la_ms

    @property
    def content_dim(self):
        return self.encoder.content_dim

    @property
    def n_decoder_attn(self):
        return self.decoder_attn_layers if self.encoder.contextual else 0

    def param_specs(self):
        d, s, h = self.content_dim, self.spk_dim, self.prosody_hidden
        specs = list(self.encoder.param_specs())
        for name in ("gamma", "beta"):
            specs += conv_specs(f"adapter.{name}.conv1", d, d + s, 3)
            specs += conv_specs(f"adapter.{name}.conv2", d, d, 3)
        for name in ("f0", "energy"):
            p = f"adapter.{name}"
            specs += conv_specs(f"{p}.conv1", h, d, 3)
            specs += [ParamSpec(f"{p}.ln1.gain", (h,), "ones"), ParamSpec(f"{p}.ln1.bias", (h,), "zeros")]
            specs += conv_specs(f"{p}.conv2", h, h, 3)
            specs += [ParamSpec(f"{p}.ln2.gain", (h,), "ones"), ParamSpec(f"{p}.ln2.bias", (h,), "zeros")]
            specs += [ParamSpec(f"{p}.out.weight", (1, h), fan_in=h),
                      ParamSpec(f"{p}.out.bias", (1,), fan_in=h),
                      ParamSpec(f"{p}.proj.weight", (d, 1), fan_in=1)]
        for i in range(self.n_decoder_attn):
            specs += attention_specs(f"decoder.attn{i}", d)
        c_prev = d
        for i, (r, c) in enumerate(zip(self.upsample_rates, self.decoder_channels)):
            # each output sample receives 2 * c_prev contributions
            specs += [ParamSpec(f"decoder.stage{i}.up.weight", (c_prev, c, 2 * r), fan_in=2 * c_prev),
                      ParamSpec(f"decoder.stage{i}.up.bias", (c,), fan_in=2 * c_prev)]
            for j in range(self.encoder.res_blocks):
                specs += resblock_specs(f"decoder.stage{i}.res{j}", c)
            c_prev = c
        specs += conv_specs("decoder.output", 1, c_prev, self.output_kernel)
        return specs

    # key=value text form -------------------------------------------------

    def to_text(self) -> str:
        e = self.encoder
        rows = {
            "variant": e.variant,
            "la_ms": e.la_ms,
            "cl": "on" if e.contextual else "off",
            "use_kmeans": str(self.use_kmeans).lower(),
            "chunk_ms": self.chunk_ms,
            "downsample_rates": ",".join(map(str, e.downsample_rates)),
            "encoder_channels": ",".join(map(str, e.channels)),
            "input_channels": e.input_channels,
            "convnext_dims": ",".join(map(str, e.convnext_dims)),
            "content_dim": e.content_dim,
            "attn_layers": e.attn_layers,
            "heads": e.heads,
            "window": e.window,
            "n_tokens": e.n_tokens,
            "upsample_rates": ",".join(map(str, self.upsample_rates)),
            "decoder_channels": ",".join(map(str, self.decoder_channels)),
            "decoder_window": self.decoder_window,
            "decoder_attn_layers": self.decoder_attn_layers,
            "spk_dim": self.spk_dim,
            "prosody_hidden": self.prosody_hidden,
        }
        if e.convnext_depths is not None:
            rows["convnext_depths"] = ",".join(map(str, e.convnext_depths))
        return "".join(f"{k}={v}\n" for k, v in rows.items())

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        kv = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InvalidConfig(f"line {n}: expected key=value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        return config_from_mapping(kv)

    def replace(self, **changes) -> "PipelineConfig":
        enc_fields = {f.name for f in dataclasses.fields(EncoderConfig)}
        enc = {k: changes.pop(k) for k in list(changes) if k in enc_fields}
        encoder = dataclasses.replace(self.encoder, **enc) if enc else self.encoder
        return dataclasses.replace(self, encoder=encoder, **changes)


def _ints(s):
    return tuple(int(p) for p in str(s).split(",") if p.strip())


def _flag(s):
    s = str(s).lower()
    if s in ("on", "true", "1", "yes"):
        return True
    if s in ("off", "false", "0", "no"):
        return False
    raise InvalidConfig(f"not a boolean: {s!r}")


def la_frames(la_ms) -> int:
    la_ms = int(la_ms)
    if la_ms % FRAME_MS:
        raise InvalidConfig(f"lookahead must be a multiple of {FRAME_MS} ms")
    return la_ms // FRAME_MS


def config_from_mapping(kv) -> PipelineConfig:
    """Build a config from string key/values (file rows or CLI flags)."""
    try:
        enc = {}
        if "variant" in kv:
            enc["variant"] = kv["variant"]
        if "la_ms" in kv:
            enc["lookahead_frames"] = la_frames(kv["la_ms"])
        if "cl" in kv:
            enc["contextual"] = _flag(kv["cl"])
        for key, name in (("downsample_rates", "downsample_rates"), ("encoder_channels", "channels"),
                          ("convnext_dims", "convnext_dims"), ("convnext_depths", "convnext_depths")):
            if key in kv:
                enc[name] = _ints(kv[key])
        for key in ("input_channels", "content_dim", "attn_layers", "heads", "window", "n_tokens"):
            if key in kv:
                enc[key] = int(kv[key])
        top = {}
        if "use_kmeans" in kv:
            top["use_kmeans"] = _flag(kv["use_kmeans"])
        for key in ("upsample_rates", "decoder_channels"):
            if key in kv:
                top[key] = _ints(kv[key])
        for key in ("chunk_ms", "decoder_window", "decoder_attn_layers", "spk_dim", "prosody_hidden"):
            if key in kv:
                top[key] = int(kv[key])
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from exc
    return PipelineConfig(encoder=EncoderConfig(**enc), **top)


def read_config(path) -> PipelineConfig:
    return PipelineConfig.from_text(Path(path).read_text(encoding="utf-8"))


def write_config(path, config: PipelineConfig) -> None:
    atomic_write_bytes(path, config.to_text().encode("utf-8"))


# -- adapter ------------------------------------------------------------------

def _conv(p, name):
    return Conv(p[f"{name}.weight"], p[f"{name}.bias"])


class ProsodyPredictor:
    """Two causal K=3 convs (ReLU, LayerNorm) and a scalar read-out per frame.

    Dropout is an identity at inference and is therefore omitted.
    """

    def __init__(self, p, name, out_map):
        q = nn.sub(p, f"adapter.{name}")
        self.body = Sequential([
            _conv(q, "conv1"), Pointwise(nn.relu),
            Pointwise(lambda x, g=q["ln1.gain"], b=q["ln1.bias"]: nn.layer_norm(x.T, g, b).T),
            _conv(q, "conv2"), Pointwise(nn.relu),
            Pointwise(lambda x, g=q["ln2.gain"], b=q["ln2.bias"]: nn.layer_norm(x.T, g, b).T),
        ])
        self.out_w, self.out_b = q["out.weight"], q["out.bias"]
        self.proj = q["proj.weight"]
        self.out_map = out_map

    def _read(self, h):
        return self.out_map(nn.linear(h.T, self.out_w, self.out_b)[:, 0])

    def forward(self, x):
        return self._read(self.body.forward(x))

    def new_state(self):
        return self.body.new_state()

    def step(self, state, x):
        return self._read(self.body.step(state, x))


def f0_map(u):
    return F0_MIN + F0_RANGE * nn.sigmoid(u)


class Adapter:
    def __init__(self, config: PipelineConfig, p):
        self.config = config
        d = config.content_dim
        self.norm = WindowedInstanceNorm(d, config.encoder.window)
        self.gamma = Sequential([_conv(p, "adapter.gamma.conv1"), Pointwise(nn.relu), _conv(p, "adapter.gamma.conv2")])
        self.beta = Sequential([_conv(p, "adapter.beta.conv1"), Pointwise(nn.relu), _conv(p, "adapter.beta.conv2")])
        self.f0 = ProsodyPredictor(p, "f0", f0_map)
        self.energy = ProsodyPredictor(p, "energy", nn.softplus)

    @staticmethod
    def _with_speaker(xn, spk):
        return np.concatenate([xn, np.repeat(spk[:, None], xn.shape[1], axis=1)], axis=0)

    def inject(self, x, f0, energy):
        return x + self.f0.proj @ (f0[None, :] / F0_SCALE) + self.energy.proj @ energy[None, :]

    def forward(self, x, spk):
        xn = self.norm.forward(x)
        cond = self._with_speaker(xn, spk)
        y = self.gamma.forward(cond) * xn + self.beta.forward(cond)
        return self.inject(y, self.f0.forward(y), self.energy.forward(y))

    def new_state(self):
        return {
            "norm": self.norm.new_state(),
            "gamma": self.gamma.new_state(),
            "beta": self.beta.new_state(),
            "f0": self.f0.new_state(),
            "energy": self.energy.new_state(),
        }

    def step(self, state, x, spk):
        xn = self.norm.step(state["norm"], x)
        cond = self._with_speaker(xn, spk)
        y = self.gamma.step(state["gamma"], cond) * xn + self.beta.step(state["beta"], cond)
        f0 = self.f0.step(state["f0"], y)
        energy = self.energy.step(state["energy"], y)
        return self.inject(y, f0, energy)


# -- decoder ------------------------------------------------------------------

class Decoder:
    def __init__(self, config: PipelineConfig, p):
        self.config = config
        layers = [AttentionBlock(nn.sub(p, f"decoder.attn{i}"), config.encoder.heads, config.decoder_window)
                  for i in range(config.n_decoder_attn)]
        for i, r in enumerate(config.upsample_rates):
            layers.append(Pointwise(nn.leaky_relu))
            layers.append(ConvTranspose(p[f"decoder.stage{i}.up.weight"], p[f"decoder.stage{i}.up.bias"], r))
            layers.append(ParallelMean(
                ResidualBlock(nn.sub(p, f"decoder.stage{i}.res{j}")) for j in range(config.encoder.res_blocks)
            ))
        layers += [Pointwise(nn.leaky_relu), _conv(p, "decoder.output"), Pointwise(np.tanh)]
        self.net = Sequential(layers)

    def forward(self, x):
        return self.net.forward(x)[0]

    def new_state(self):
        return self.net.new_state()

    def step(self, state, x):
        return self.net.step(state, x)[0]


# -- pipeline -----------------------------------------------------------------

def _target_values(target, config):
    v = target.values if isinstance(target, SpeakerEmbedding) else np.asarray(target, dtype=np.float64)
    if v.shape != (config.spk_dim,):
        raise ShapeMismatch(f"target embedding has shape {v.shape}, expected ({config.spk_dim},)")
    return v


class Pipeline:
    """Immutable (config, weights) pair; shareable across concurrent streams."""

    def __init__(self, config: PipelineConfig, weights, codebook: Codebook | None = None):
        check_shapes(weights, config.param_specs(), ConfigWeightMismatch)
        if codebook is None and "kmeans.centroids" in weights:
            codebook = Codebook.from_bundle(weights)
        if config.use_kmeans:
            if codebook is None:
                raise InvalidConfig("use_kmeans is set but no codebook was supplied")
            if codebook.centroids.shape[1] != config.content_dim:
                raise ConfigWeightMismatch("codebook dimension differs from content_dim")
        self.config = config
        self.codebook = codebook
        p = as_float64(weights)
        self.encoder = Encoder(config.encoder, p)
        self.adapter = Adapter(config, p)
        self.decoder = Decoder(config, p)

    def bottleneck(self, frames):
        """(D, T) content frames, snapped to centroids when k-means is enabled."""
        if not self.config.use_kmeans or frames.shape[1] == 0:
            return frames
        idx = nearest(frames.T, self.codebook.centroids)
        return self.codebook.centroids[idx].T

    # offline -----------------------------------------------------------------

    def forward(self, samples, target=None) -> np.ndarray:
        """Whole-utterance anonymisation; output length equals input length."""
        x = np.asarray(samples, dtype=np.float64).reshape(-1)
        spk = self._spk(target)
        n = x.size
        pad = (-n) % HOP
        frames = self.encoder.forward(np.concatenate([x, np.zeros(pad)])).T
        y = self.adapter.forward(self.bottleneck(frames), spk)
        return self.decoder.forward(y)[:n]

    def _spk(self, target):
        if target is None:
            # neutral unit vector; callers normally pass a real target
            v = np.full(self.config.spk_dim, 1.0 / np.sqrt(self.config.spk_dim))
            return v
        return _target_values(target, self.config)

    # streaming ---------------------------------------------------------------

    def make_state(self, target=None) -> StreamState:
        return StreamState(
            config=self.config,
            layers={
                "encoder": self.encoder.make_state(),
                "adapter": self.adapter.new_state(),
                "decoder": self.decoder.new_state(),
            },
            target=self._spk(target),
        )

    def _tail(self, state, frames):
        h = self.bottleneck(frames.T)
        h = self.adapter.step(state.layers["adapter"], h, state.target)
        out = self.decoder.step(state.layers["decoder"], h)
        state.frames_emitted += frames.shape[0]
        return out

    def step(self, state, chunk) -> np.ndarray:
        samples = np.asarray(getattr(chunk, "samples", chunk), dtype=np.float64).reshape(-1)
        state.samples_in += samples.size
        out = self._tail(state, self.encoder.step(state.layers["encoder"], samples))
        state.samples_out += out.size
        return out

    def flush(self, state) -> np.ndarray:
        if state.flushed:
            raise DoubleFlush("stream already flushed")
        pad = (-state.samples_in) % HOP
        enc_state = state.layers["encoder"]
        parts = [self._tail(state, self.encoder.step(enc_state, np.zeros(pad)))] if pad else []
        parts.append(self._tail(state, self.encoder.flush(enc_state)))
        out = np.concatenate(parts)[: state.samples_in - state.samples_out]
        state.samples_out += out.size
        state.flushed = True
        return out


# -- module-level operations ----------------------------------------------------

def adapt(frames, spk, weights, config: PipelineConfig | None = None):
    """Speaker/variance adapter on (n, D) frames; returns (n, D)."""
    config = config or PipelineConfig()
    a = Adapter(config, as_float64(weights))
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != config.content_dim:
        raise ShapeMismatch(f"frames {frames.shape} vs content_dim {config.content_dim}")
    return a.forward(frames.T, _target_values(spk, config)).T


def predict_f0(frames, weights):
    """Per-frame F0 in Hz, mapped into (50, 500) by ``50 + 450 * sigmoid``."""
    return ProsodyPredictor(as_float64(weights), "f0", f0_map).forward(np.asarray(frames, np.float64).T)


def predict_energy(frames, weights):
    return ProsodyPredictor(as_float64(weights), "energy", nn.softplus).forward(np.asarray(frames, np.float64).T)


def inject_prosody(frames, f0, energy, weights):
    """``frames + P_f0 (f0 / 500) + P_energy energy`` with bias-free projections."""
    frames = np.asarray(frames, dtype=np.float64)
    f0 = np.asarray(f0, dtype=np.float64).reshape(-1)
    energy = np.asarray(energy, dtype=np.float64).reshape(-1)
    if not frames.shape[0] == f0.size == energy.size:
        raise LengthMismatch(f"{frames.shape[0]} frames, {f0.size} f0 values, {energy.size} energy values")
    pf = np.asarray(weights["adapter.f0.proj.weight"], np.float64)
    pe = np.asarray(weights["adapter.energy.proj.weight"], np.float64)
    return frames + (f0[:, None] / F0_SCALE) @ pf.T + energy[:, None] @ pe.T


def decode(frames, weights, state=None, config: PipelineConfig | None = None, decoder=None):
    """Content frames (n, D) -> n*320 samples. With ``state``, decodes the next frames of a stream."""
    config = config or PipelineConfig()
    dec = decoder or Decoder(config, as_float64(weights))
    x = np.asarray(frames, dtype=np.float64).T
    return dec.forward(x) if state is None else dec.step(state, x)


def anonymize(buffer: AudioBuffer, pipeline_config: PipelineConfig, weights, target,
              codebook: Codebook | None = None, streaming=True, pipeline: Pipeline | None = None) -> AudioBuffer:
    """Anonymise ``buffer`` towards ``target``; output has the input's length.

    ``streaming`` runs chunk by chunk at ``pipeline_config.chunk_ms``;
    otherwise the whole utterance is processed at once. Both give the same
    audio to within floating-point rounding.
    """
    pipe = pipeline or Pipeline(pipeline_config, weights, codebook)
    if streaming:
        state = pipe.make_state(target)
        from .audio import chunk_stream
        from .streaming import flush, step

        outs = [step(pipe, state, c) for c in chunk_stream(buffer, pipe.config.chunk_ms)]
        outs.append(flush(pipe, state))
        y = np.concatenate(outs)
    else:
        y = pipe.forward(buffer.samples, target)
    return AudioBuffer(y)
