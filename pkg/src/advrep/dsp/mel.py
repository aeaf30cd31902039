"""Log-mel spectrograms of 500 ms windows: 126 bands x 125 frames."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .audio import SAMPLE_RATE

N_FFT = 512  # 32 ms
HOP = 64  # 4 ms
N_MELS = 126
N_FRAMES = 125
LOG_FLOOR = 1e-10
ZSCORE_EPS = 1e-8


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("hz_to_mel: frequencies must be non-negative")
    return 2595.0 * np.log10(1.0 + f / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hamming(n: int) -> np.ndarray:
    """Symmetric Hamming window 0.54 - 0.46 cos(2 pi k / (n - 1))."""
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def mel_band_edges(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """n_mels + 2 frequencies (Hz) equally spaced on the mel scale."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters with unit peak, unnormalised.

    Neighbouring triangles share edges, so the weights on any FFT bin sum to
    at most 1. At 31.25 Hz bin spacing the narrowest low-frequency filters may
    cover one FFT bin or none.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_band_edges(n_mels, fmin, fmax)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def frame_signal(window: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Reflect-pad by n_fft/2 and cut one frame per hop position inside the window."""
    x = np.asarray(window, dtype=np.float64)
    n_frames = -(-len(x) // hop)
    xp = np.pad(x, n_fft // 2, mode="reflect")
    idx = np.arange(n_frames)[:, None] * hop + np.arange(n_fft)[None, :]
    return xp[idx]


def power_spectrum(frames: np.ndarray, n_fft: int = N_FFT) -> np.ndarray:
    """|rFFT|^2 of Hamming-windowed frames, shape (n_frames, n_fft//2 + 1)."""
    spec = np.fft.rfft(frames * hamming(n_fft), n=n_fft, axis=-1)
    return spec.real**2 + spec.imag**2


def mel_spectrogram(window: np.ndarray) -> np.ndarray:
    """log(mel power + 1e-10) of an 8000-sample window, shape (126, 125)."""
    if len(window) != 8000:
        raise ValueError(f"mel_spectrogram expects 8000 samples, got {len(window)}")
    pw = power_spectrum(frame_signal(window))
    mel = mel_filterbank() @ pw.T
    return np.log(mel + LOG_FLOOR)


def zscore_normalize(chunk: np.ndarray) -> tuple[np.ndarray, bool]:
    """Standardise over all values of the chunk.

    Returns the normalised chunk and a flag that is True when the chunk was
    (numerically) constant and came back as zeros.
    """
    x = np.asarray(chunk, dtype=np.float64)
    mu = x.mean()
    sd = x.std()
    if sd < ZSCORE_EPS:
        return np.zeros_like(x), True
    return (x - mu) / sd, False
