"""Audio frontend: VAD, 500 ms segmentation, log-mel chunks, feature store."""

from .audio import (
    LABELS,
    SAMPLE_RATE,
    AudioClip,
    AudioFormatError,
    ManifestRow,
    load_clip,
    read_manifest,
    read_wav,
    write_manifest,
    write_wav,
)
from .features import FeatureStore, SpectrogramChunk, VadConfig, featurize_clip, featurize_manifest
from .mel import hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, zscore_normalize
from .vad import energy_vad, expected_chunk_count, segment, segment_offsets, speech_only

__all__ = [
    "LABELS",
    "SAMPLE_RATE",
    "AudioClip",
    "AudioFormatError",
    "FeatureStore",
    "ManifestRow",
    "SpectrogramChunk",
    "VadConfig",
    "energy_vad",
    "expected_chunk_count",
    "featurize_clip",
    "featurize_manifest",
    "hz_to_mel",
    "load_clip",
    "mel_filterbank",
    "mel_spectrogram",
    "mel_to_hz",
    "read_manifest",
    "read_wav",
    "segment",
    "segment_offsets",
    "speech_only",
    "write_manifest",
    "write_wav",
    "zscore_normalize",
]
