"""Waveform ingestion, log-mel frontend, noise augmentation, and the
relaxed frequency-wise input normalizer.

All clips are exactly one second of 16 kHz mono PCM16. The frontend is
40 mel bins over 98 frames (30 ms Hann window, 10 ms hop, power spectrum,
HTK mel scale spanning 0-8000 Hz, natural log with a 1e-6 floor).
"""

import wave
from dataclasses import dataclass

import numpy as np

from .errors import DataError

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000
WINDOW = 480
HOP = 160
N_MELS = 40
N_FRAMES = 1 + (CLIP_SAMPLES - WINDOW) // HOP  # 98
FMAX = 8000.0
LOG_FLOOR = 1e-6


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1], exactly CLIP_SAMPLES long
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"expected {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.shape != (CLIP_SAMPLES,):
            raise DataError(f"expected {CLIP_SAMPLES} samples, got {self.samples.shape}")


def fit_to_clip(samples):
    """Zero-pad at the end, or keep the center, to exactly one second."""
    n = len(samples)
    if n == CLIP_SAMPLES:
        return samples
    if n < CLIP_SAMPLES:
        out = np.zeros(CLIP_SAMPLES)
        out[:n] = samples
        return out
    start = (n - CLIP_SAMPLES) // 2
    return samples[start : start + CLIP_SAMPLES].copy()


def read_pcm16(path):
    """Raw samples of a 16 kHz mono PCM16 WAV, scaled to [-1, 1], any length."""
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise DataError(f"{path}: expected mono, got {f.getnchannels()} channels")
            if f.getsampwidth() != 2:
                raise DataError(f"{path}: expected PCM16, got {8 * f.getsampwidth()}-bit")
            if f.getframerate() != SAMPLE_RATE:
                raise DataError(f"{path}: expected {SAMPLE_RATE} Hz, got {f.getframerate()}")
            n = f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as e:
        raise DataError(f"{path}: not a readable WAV ({e})") from None
    if len(raw) != 2 * n:
        raise DataError(f"{path}: truncated (got {len(raw)} bytes for {n} frames)")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def load_wav(path):
    """Read a WAV and pad/crop it to exactly one second."""
    return Waveform(fit_to_clip(read_pcm16(path)))


def save_wav(path, samples):
    data = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = (data * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=WINDOW, fmax=FMAX):
    """Triangular filters on mel-spaced points, unnormalized (unit peak)."""
    bin_hz = np.arange(n_fft // 2 + 1) * (SAMPLE_RATE / n_fft)
    pts_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, len(bin_hz)))
    for m in range(n_mels):
        left, center, right = pts_hz[m], pts_hz[m + 1], pts_hz[m + 2]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


_FILTERBANK = None
_HANN = None


def _frontend_tables():
    global _FILTERBANK, _HANN
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
        # periodic Hann, the usual STFT analysis window
        _HANN = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WINDOW) / WINDOW)
    return _FILTERBANK, _HANN


def logmel(wave_or_batch):
    """Log-mel features, shape (40, 98) per clip.

    Accepts one Waveform or a (batch, samples) array; batched input returns
    (batch, 40, 98). Inside an arena scope the result may live in a
    recycled scratch buffer; copy it before holding on to it across
    episodes.
    """
    fb, hann = _frontend_tables()
    if isinstance(wave_or_batch, Waveform):
        return _logmel_array(wave_or_batch.samples[None, :], fb, hann)[0]
    arr = np.asarray(wave_or_batch, dtype=np.float64)
    if arr.ndim == 1:
        return _logmel_array(arr[None, :], fb, hann)[0]
    return _logmel_array(arr, fb, hann)


def _take_rows(shape, rows):
    """Arena scratch with the batch axis bucketed so varying batch sizes
    reuse the same buffers."""
    from .tensor import ARENA

    cap = 25 * -(-rows // 25)
    return ARENA.take((cap,) + shape[1:])[:rows]


def _logmel_array(batch, fb, hann):
    import scipy.fft

    b = batch.shape[0]
    if batch.shape[1] != CLIP_SAMPLES:
        raise DataError(f"expected {CLIP_SAMPLES} samples per clip, got {batch.shape[1]}")
    s0, s1 = batch.strides
    frames = np.lib.stride_tricks.as_strided(
        batch, (b, N_FRAMES, WINDOW), (s0, HOP * s1, s1)
    )
    shape = (b, N_FRAMES, WINDOW)
    windowed = np.multiply(frames, hann, out=_take_rows(shape, b))
    spec = scipy.fft.rfft(windowed, n=WINDOW, axis=-1, workers=2)
    n_bins = WINDOW // 2 + 1
    power = np.multiply(spec.real, spec.real, out=_take_rows((b, N_FRAMES, n_bins), b))
    imag_sq = np.multiply(spec.imag, spec.imag, out=_take_rows((b, N_FRAMES, n_bins), b))
    power += imag_sq
    mel_power = np.matmul(power, fb.T, out=_take_rows((b, N_FRAMES, fb.shape[0]), b))
    np.maximum(mel_power, LOG_FLOOR, out=mel_power)
    np.log(mel_power, out=mel_power)
    out = _take_rows((b, fb.shape[0], N_FRAMES), b)
    out[:] = mel_power.transpose(0, 2, 1)
    return out


def mix_noise(w, noise_bank, rng):
    """Add a random one-second crop of a random noise clip scaled by
    Uniform(0, 0.1); output clipped to [-1, 1]."""
    clip = noise_bank[int(rng.integers(len(noise_bank)))]
    if len(clip) < CLIP_SAMPLES:
        raise DataError(f"noise clip too short: {len(clip)} < {CLIP_SAMPLES} samples")
    offset = int(rng.integers(len(clip) - CLIP_SAMPLES + 1))
    level = rng.uniform(0.0, 0.1)
    mixed = w.samples + level * clip[offset : offset + CLIP_SAMPLES]
    return Waveform(np.clip(mixed, -1.0, 1.0))


def augment_noise(w, noise_bank, rng, p=0.8):
    """With probability p, mix in background noise; identity otherwise."""
    if p > 0 and not noise_bank:
        raise DataError("noise augmentation requested but the noise bank is empty")
    if rng.random() >= p:
        return w
    return mix_noise(w, noise_bank, rng)


@dataclass
class RFNConfig:
    """Blend weight between layer norm and per-frequency instance norm."""

    rho: float = 0.5
    eps: float = 1e-12

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise DataError(f"rfn relaxation must be in [0, 1], got {self.rho}")


def rfn(x, cfg):
    """Relaxed frequency-wise normalization of (..., bins, frames) features.

    rho * LN(x) + (1 - rho) * IFN(x), where IFN normalizes each frequency
    bin over time per instance and LN normalizes over all cells per
    instance. Biased variances, no learned affine terms.
    """
    x = np.asarray(x, dtype=np.float64)
    mu_f = x.mean(axis=-1, keepdims=True)
    var_f = x.var(axis=-1, keepdims=True)
    ifn = (x - mu_f) / np.sqrt(var_f + cfg.eps)
    mu_all = x.mean(axis=(-2, -1), keepdims=True)
    var_all = x.var(axis=(-2, -1), keepdims=True)
    ln = (x - mu_all) / np.sqrt(var_all + cfg.eps)
    return cfg.rho * ln + (1.0 - cfg.rho) * ifn
