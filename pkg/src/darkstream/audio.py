"""WAV I/O, chunking and the causal log-Mel frontend.

All audio is mono 16 kHz. The Mel frontend frames causally: the analysis
window of frame ``k`` ends at sample ``320 * (k + 1)``, so it never looks
past the hop it belongs to.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from .errors import InvalidChunkSize, MalformedFile, UnsupportedFormat

SAMPLE_RATE = 16000
HOP = 320
N_FFT = 1024
N_MELS = 160
LOG_FLOOR = 1e-10
# samples of history carried between chunks by the Mel frontend
MEL_TAIL = N_FFT - HOP


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedFormat(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class AudioChunk:
    samples: np.ndarray
    start_index: int
    is_last: bool = False


def read_wav(path) -> AudioBuffer:
    """Read a 16-bit mono 16 kHz PCM WAV file.

    Samples are scaled to [-1, 1) by dividing the integer codes by 32768.
    """
    try:
        with wave.open(str(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            n = f.getnframes()
            payload = f.readframes(n)
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedFormat(str(exc)) from exc
        raise MalformedFile(str(exc)) from exc
    except EOFError as exc:
        raise MalformedFile("unexpected end of file") from exc
    if channels != 1:
        raise UnsupportedFormat(f"expected mono audio, got {channels} channels")
    if width != 2:
        raise UnsupportedFormat(f"expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise UnsupportedFormat(f"expected {SAMPLE_RATE} Hz, got {rate} Hz")
    if len(payload) % 2:
        raise MalformedFile("odd number of payload bytes")
    codes = np.frombuffer(payload, dtype="<i2")
    return AudioBuffer(codes.astype(np.float64) / 32768.0)


def to_pcm16(samples) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0 - 2.0**-15)
    return np.round(x * 32768.0).astype("<i2")


def write_wav(path, buffer: AudioBuffer) -> None:
    codes = to_pcm16(buffer.samples)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(codes.tobytes())


def chunk_stream(buffer: AudioBuffer, chunk_ms: int) -> list[AudioChunk]:
    """Split ``buffer`` into consecutive chunks of ``chunk_ms`` milliseconds.

    The final chunk may be shorter and is always flagged ``is_last``.
    """
    if int(chunk_ms) != chunk_ms or not 10 <= chunk_ms <= 1000:
        raise InvalidChunkSize(f"chunk_ms must be an integer in [10, 1000], got {chunk_ms}")
    size = int(chunk_ms) * SAMPLE_RATE // 1000
    x = buffer.samples
    starts = range(0, len(x), size)
    return [
        AudioChunk(x[s : s + size], s, is_last=s + size >= len(x))
        for s in starts
    ]


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    logstep = np.log(6.4) / 27.0
    lin = f / f_sp
    log = 15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) / logstep
    return np.where(f >= 1000.0, log, lin)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    logstep = np.log(6.4) / 27.0
    return np.where(m >= 15.0, 1000.0 * np.exp(logstep * (m - 15.0)), f_sp * m)


def mel_edges(n_mels=N_MELS, sample_rate=SAMPLE_RATE) -> np.ndarray:
    """Lower edge, centres and upper edge (Hz) of the triangular filters."""
    top = _hz_to_mel(sample_rate / 2)
    return _mel_to_hz(np.linspace(0.0, float(top), n_mels + 2))


@lru_cache(maxsize=8)
def _filterbank(n_mels, n_fft, sample_rate):
    edges = mel_edges(n_mels, sample_rate)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = edges[m : m + 3]
        rising = (freqs - lo) / (c - lo)
        falling = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE) -> np.ndarray:
    """Triangular Mel filters (peak 1) spanning 0 Hz to Nyquist, shape (n_mels, n_fft//2+1)."""
    return _filterbank(int(n_mels), int(n_fft), int(sample_rate))


@lru_cache(maxsize=1)
def _hann():
    w = get_window("hann", N_FFT, fftbins=True)
    w.setflags(write=False)
    return w


def _frames_to_log_mel(frames: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(frames * _hann(), n=N_FFT, axis=-1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank().T
    return np.log(np.maximum(mel, LOG_FLOOR))


def log_mel(samples) -> np.ndarray:
    """Offline log-Mel spectrogram with causal framing, shape (n_frames, 160).

    ``n_frames == len(samples) // 320``; missing history before the first
    sample is treated as silence.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    n = x.size // HOP
    if n == 0:
        return np.zeros((0, N_MELS))
    padded = np.concatenate([np.zeros(MEL_TAIL), x[: n * HOP]])
    windows = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::HOP]
    return _frames_to_log_mel(windows)


@dataclass
class MelState:
    """Carry-over between chunks: the last 704 samples plus any partial hop."""

    buffer: np.ndarray = field(default_factory=lambda: np.zeros(MEL_TAIL))
    frames_emitted: int = 0


def stream_log_mel(chunk, state: MelState) -> np.ndarray:
    """Emit one log-Mel frame per completed 320-sample hop in ``chunk``."""
    samples = chunk.samples if isinstance(chunk, AudioChunk) else chunk
    buf = np.concatenate([state.buffer, np.asarray(samples, dtype=np.float64).reshape(-1)])
    n = (buf.size - MEL_TAIL) // HOP
    if n <= 0:
        state.buffer = buf
        return np.zeros((0, N_MELS))
    frames = np.stack([buf[j * HOP : j * HOP + N_FFT] for j in range(n)])
    state.buffer = buf[n * HOP :]
    state.frames_emitted += n
    return _frames_to_log_mel(frames)
