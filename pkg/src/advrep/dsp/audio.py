"""16 kHz mono PCM WAV input/output and the corpus manifest."""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
LABELS = ("neurotypical", "pathological")


class AudioFormatError(ValueError):
    """The file is not 16-bit PCM mono at 16 kHz, or is unreadable."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    speaker_id: str
    label: str
    utterance_id: str

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"{self.utterance_id}: sample rate {self.sample_rate} Hz, need {SAMPLE_RATE}")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Samples scaled to [-1, 1) and the sample rate."""
    try:
        with wave.open(str(path), "rb") as wf:
            nch, width, rate, nframes = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            raw = wf.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if nch != 1:
        raise AudioFormatError(f"{path}: {nch} channels, need mono")
    if width != 2:
        raise AudioFormatError(f"{path}: {8 * width}-bit samples, need 16-bit PCM")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz, need {SAMPLE_RATE}")
    if len(raw) != 2 * nframes:
        raise AudioFormatError(f"{path}: truncated data ({len(raw)} bytes for {nframes} frames)")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def load_clip(path, speaker_id: str, label: str, utterance_id: str) -> AudioClip:
    samples, rate = read_wav(path)
    return AudioClip(samples, rate, speaker_id, label, utterance_id)


@dataclass(frozen=True)
class ManifestRow:
    speaker_id: str
    label: str
    wav_path: str
    utterance_id: str


MANIFEST_FIELDS = ("speaker_id", "label", "wav_path", "utterance_id")


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.speaker_id, r.label, r.wav_path, r.utterance_id])


def read_manifest(path) -> list[ManifestRow]:
    """Rows of a tab-separated manifest; relative WAV paths resolve against its directory."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        for rec in reader:
            wav = Path(rec["wav_path"])
            if not wav.is_absolute():
                wav = path.parent / wav
            if rec["label"] not in LABELS:
                raise ValueError(f"{path}: unknown label {rec['label']!r} for {rec['utterance_id']}")
            rows.append(ManifestRow(rec["speaker_id"], rec["label"], str(wav), rec["utterance_id"]))
    return rows
