"""Energy-based voice activity detection and fixed-length segmentation."""

from __future__ import annotations

import numpy as np

from .audio import SAMPLE_RATE

CHUNK_SAMPLES = 8000  # 500 ms at 16 kHz
CHUNK_HOP = 4000  # 50% overlap


def frame_energy_db(samples: np.ndarray, frame_len: int) -> np.ndarray:
    """RMS level in dB of consecutive non-overlapping frames (last partial frame kept)."""
    n = len(samples)
    n_frames = -(-n // frame_len)
    padded = np.zeros(n_frames * frame_len)
    padded[:n] = samples
    frames = padded.reshape(n_frames, frame_len)
    # a partial last frame is measured over its real samples only
    counts = np.full(n_frames, frame_len, dtype=float)
    counts[-1] = n - (n_frames - 1) * frame_len
    rms = np.sqrt((frames**2).sum(axis=1) / counts)
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(rms)


def energy_vad(
    samples: np.ndarray,
    sample_rate: int = SAMPLE_RATE,
    frame_ms: float = 10.0,
    threshold_db: float = 25.0,
    hangover_frames: int = 5,
    floor_db: float = -100.0,
) -> list[tuple[int, int]]:
    """Speech intervals ``[start, end)`` in samples, sorted and disjoint.

    A frame is active when its RMS level is within ``threshold_db`` of the
    loudest frame and above the absolute ``floor_db``. Inactive gaps of at most
    ``hangover_frames`` frames between active frames are bridged.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("energy_vad: empty clip")
    frame_len = int(round(sample_rate * frame_ms / 1000.0))
    level = frame_energy_db(samples, frame_len)
    peak = level.max()
    if not np.isfinite(peak) or peak <= floor_db:
        return []
    active = level > max(peak - threshold_db, floor_db)

    idx = np.flatnonzero(active)
    runs = []
    start = prev = idx[0]
    for i in idx[1:]:
        if i - prev - 1 > hangover_frames:
            runs.append((start, prev + 1))
            start = i
        prev = i
    runs.append((start, prev + 1))
    n = len(samples)
    return [(int(a * frame_len), int(min(b * frame_len, n))) for a, b in runs]


def speech_only(samples: np.ndarray, intervals) -> np.ndarray:
    if not intervals:
        return np.zeros(0, dtype=np.asarray(samples).dtype)
    return np.concatenate([samples[a:b] for a, b in intervals])


def segment_offsets(n_samples: int, size: int = CHUNK_SAMPLES, hop: int = CHUNK_HOP) -> list[int]:
    if n_samples < size:
        return []
    return list(range(0, (n_samples - size) // hop * hop + 1, hop))


def segment(speech: np.ndarray, size: int = CHUNK_SAMPLES, hop: int = CHUNK_HOP) -> list[np.ndarray]:
    """500 ms windows with 50% overlap; a trailing partial window is dropped."""
    return [speech[o : o + size] for o in segment_offsets(len(speech), size, hop)]


def expected_chunk_count(n_speech: int) -> int:
    return 0 if n_speech < CHUNK_SAMPLES else (n_speech - CHUNK_SAMPLES) // CHUNK_HOP + 1
