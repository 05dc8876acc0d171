import wave

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from darkstream.audio import (
    HOP,
    N_FFT,
    N_MELS,
    AudioBuffer,
    MelState,
    chunk_stream,
    log_mel,
    mel_filterbank,
    read_wav,
    stream_log_mel,
    to_pcm16,
    write_wav,
)
from darkstream.errors import InvalidChunkSize, MalformedFile, UnsupportedFormat


def slaney_mel(f):
    """Closed-form Slaney mel for scalar Hz."""
    if f < 1000.0:
        return 3.0 * f / 200.0
    return 15.0 + 27.0 * np.log(f / 1000.0) / np.log(6.4)


def naive_log_mel(x):
    """Per-frame loop with an explicitly written Hann window and DFT matrix."""
    n = len(x) // HOP
    padded = np.concatenate([np.zeros(N_FFT - HOP), x])
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(N_FFT) / N_FFT)
    k = np.arange(N_FFT // 2 + 1)[:, None]
    dft = np.exp(-2j * np.pi * k * np.arange(N_FFT)[None, :] / N_FFT)
    fb = mel_filterbank()
    out = []
    for i in range(n):
        seg = padded[i * HOP : i * HOP + N_FFT] * win
        power = np.abs(dft @ seg) ** 2
        out.append(np.log(np.maximum(fb @ power, 1e-10)))
    return np.array(out).reshape(n, N_MELS)


def write_raw_wav(path, codes, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(np.asarray(codes).tobytes())


# -- WAV I/O ------------------------------------------------------------------

def test_wav_roundtrip_exact(tmp_path, rng):
    codes = rng.integers(-32768, 32767, size=1234).astype("<i2")
    write_raw_wav(tmp_path / "a.wav", codes)
    buf = read_wav(tmp_path / "a.wav")
    assert np.array_equal(to_pcm16(buf.samples), codes)
    write_wav(tmp_path / "b.wav", buf)
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_pcm_scaling():
    assert np.array_equal(to_pcm16([-1.0, 0.0, 0.5, 2.0]), [-32768, 0, 16384, 32767])


@pytest.mark.parametrize("kw", [dict(channels=2), dict(rate=8000), dict(width=1)])
def test_wav_unsupported(tmp_path, kw):
    codes = np.zeros(100, dtype="<i2" if kw.get("width", 2) == 2 else "u1")
    write_raw_wav(tmp_path / "x.wav", codes, **kw)
    with pytest.raises(UnsupportedFormat):
        read_wav(tmp_path / "x.wav")


def test_wav_malformed(tmp_path):
    p = tmp_path / "junk.wav"
    p.write_bytes(b"RIFF\x00\x00")
    with pytest.raises(MalformedFile):
        read_wav(p)


def test_buffer_rejects_other_rates():
    with pytest.raises(UnsupportedFormat):
        AudioBuffer(np.zeros(10), sample_rate=44100)


# -- chunking -------------------------------------------------------------------

@given(st.integers(0, 5000), st.integers(10, 1000))
def test_chunks_tile_buffer(n, chunk_ms):
    x = np.arange(n, dtype=np.float64)
    chunks = chunk_stream(AudioBuffer(x), chunk_ms)
    joined = np.concatenate([c.samples for c in chunks]) if chunks else np.zeros(0)
    assert np.array_equal(joined, x)
    assert all(c.start_index == i * chunk_ms * 16 for i, c in enumerate(chunks))
    if chunks:
        assert chunks[-1].is_last and not any(c.is_last for c in chunks[:-1])


@pytest.mark.parametrize("bad", [0, 5, 1001, 12.5])
def test_chunk_size_validation(bad):
    with pytest.raises(InvalidChunkSize):
        chunk_stream(AudioBuffer(np.zeros(100)), bad)


# -- Mel ----------------------------------------------------------------------

def test_filterbank_shape_and_peaks():
    fb = mel_filterbank()
    assert fb.shape == (N_MELS, N_FFT // 2 + 1)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)
    assert np.all(fb.sum(axis=1) > 0)


def test_filterbank_centres_follow_slaney():
    fb = mel_filterbank()
    freqs = np.arange(N_FFT // 2 + 1) * 16000 / N_FFT
    top = slaney_mel(8000.0)
    centre_mels = np.linspace(0, top, N_MELS + 2)[1:-1]
    peaks = freqs[fb.argmax(axis=1)]
    # each peak bin lies within one bin of its centre frequency
    for m, pk in zip(centre_mels, peaks):
        assert abs(slaney_mel(pk) - m) <= slaney_mel(pk + 16000 / N_FFT) - slaney_mel(pk) + 1e-9


def test_log_mel_matches_naive(rng):
    x = rng.normal(scale=0.1, size=3 * HOP + 77)
    assert np.allclose(log_mel(x), naive_log_mel(x), atol=1e-8)


@given(st.integers(0, 4000))
def test_frame_count(n):
    assert log_mel(np.zeros(n)).shape == (n // HOP, N_MELS)


def test_silence_hits_floor():
    assert np.allclose(log_mel(np.zeros(HOP * 3)), np.log(1e-10))


@pytest.mark.parametrize("chunk_ms", [20, 60, 100])
def test_streaming_mel_equivalence(rng, chunk_ms):
    x = rng.normal(scale=0.3, size=32000)
    state = MelState()
    got = np.concatenate([stream_log_mel(c, state) for c in chunk_stream(AudioBuffer(x), chunk_ms)])
    assert got.shape == (100, N_MELS)
    assert np.max(np.abs(got - log_mel(x))) < 1e-6


def test_mel_is_causal(rng):
    x = rng.normal(size=HOP * 10)
    ref = log_mel(x)
    x2 = x.copy()
    x2[HOP * 6 + 5] += 1.0
    got = log_mel(x2)
    assert np.array_equal(got[:6], ref[:6]) and not np.array_equal(got[6], ref[6])
