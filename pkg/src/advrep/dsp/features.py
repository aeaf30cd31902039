"""Clip -> chunk featurisation and the on-disk feature store."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import LABELS, AudioClip, AudioFormatError, load_clip, read_manifest
from .mel import N_FRAMES, N_MELS, mel_spectrogram, zscore_normalize
from .vad import energy_vad, segment, speech_only

log = logging.getLogger(__name__)

STORE_MAGIC = b"ADVRFEAT"
STORE_VERSION = 1
NORMALIZATION_SCOPES = ("chunk", "utterance", "none")


@dataclass(frozen=True)
class VadConfig:
    frame_ms: float = 10.0
    threshold_db: float = 25.0
    hangover_frames: int = 5


@dataclass
class SpectrogramChunk:
    values: np.ndarray
    speaker_id: str
    label: str
    utterance_id: str
    chunk_index: int


def featurize_clip(clip: AudioClip, vad: VadConfig = VadConfig(), normalization: str = "chunk"):
    """Chunks of one clip plus the number that were constant (zeroed by z-scoring)."""
    if normalization not in NORMALIZATION_SCOPES:
        raise ValueError(f"normalization must be one of {NORMALIZATION_SCOPES}")
    intervals = energy_vad(clip.samples, clip.sample_rate, vad.frame_ms, vad.threshold_db, vad.hangover_frames)
    if not intervals:
        log.warning("%s: no speech detected, skipping", clip.utterance_id)
        return [], 0
    mels = [mel_spectrogram(w) for w in segment(speech_only(clip.samples, intervals))]
    flagged = 0
    if normalization == "chunk":
        normed = []
        for m in mels:
            z, flat = zscore_normalize(m)
            flagged += flat
            normed.append(z)
        mels = normed
    elif normalization == "utterance" and mels:
        z, flat = zscore_normalize(np.stack(mels))
        flagged += flat * len(mels)
        mels = list(z)
    chunks = [
        SpectrogramChunk(m.astype(np.float32), clip.speaker_id, clip.label, clip.utterance_id, i)
        for i, m in enumerate(mels)
    ]
    return chunks, flagged


def _record_dtype(h: int = N_MELS, w: int = N_FRAMES) -> np.dtype:
    return np.dtype(
        [("speaker", "<u4"), ("label", "<u4"), ("utterance", "<u4"), ("chunk", "<u4"), ("values", "<f4", (h, w))]
    )


@dataclass
class FeatureStore:
    """All chunks of a corpus, ordered by (speaker, utterance, chunk index)."""

    values: np.ndarray  # (N, 126, 125) float32
    speaker: np.ndarray  # (N,) index into speakers
    label: np.ndarray  # (N,) 0 neurotypical, 1 pathological
    utterance: np.ndarray  # (N,) index into utterances
    chunk: np.ndarray  # (N,)
    speakers: list[str] = field(default_factory=list)
    utterances: list[str] = field(default_factory=list)
    speaker_labels: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.speaker)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape[1:]) if self.values.ndim == 3 else (N_MELS, N_FRAMES)

    @classmethod
    def from_chunks(cls, chunks: list[SpectrogramChunk], speaker_labels: dict[str, str]) -> "FeatureStore":
        chunks = sorted(chunks, key=lambda c: (c.speaker_id, c.utterance_id, c.chunk_index))
        speakers = sorted(speaker_labels)
        utterances = sorted({c.utterance_id for c in chunks})
        s_idx = {s: i for i, s in enumerate(speakers)}
        u_idx = {u: i for i, u in enumerate(utterances)}
        n = len(chunks)
        values = np.zeros((n, N_MELS, N_FRAMES), dtype=np.float32)
        for i, c in enumerate(chunks):
            values[i] = c.values
        return cls(
            values=values,
            speaker=np.array([s_idx[c.speaker_id] for c in chunks], dtype=np.int64),
            label=np.array([LABELS.index(c.label) for c in chunks], dtype=np.int64),
            utterance=np.array([u_idx[c.utterance_id] for c in chunks], dtype=np.int64),
            chunk=np.array([c.chunk_index for c in chunks], dtype=np.int64),
            speakers=speakers,
            utterances=utterances,
            speaker_labels=dict(sorted(speaker_labels.items())),
        )

    def select(self, mask: np.ndarray) -> "FeatureStore":
        return FeatureStore(
            self.values[mask], self.speaker[mask], self.label[mask], self.utterance[mask], self.chunk[mask],
            self.speakers, self.utterances, self.speaker_labels,
        )

    def speaker_mask(self, speaker_ids) -> np.ndarray:
        wanted = {self.speakers.index(s) for s in speaker_ids}
        return np.isin(self.speaker, sorted(wanted))

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        """Write ``path`` (binary records) and ``path`` + ``.json`` (index)."""
        path = Path(path)
        h, w = self.shape
        rec = np.zeros(len(self), dtype=_record_dtype(h, w))
        rec["speaker"] = self.speaker
        rec["label"] = self.label
        rec["utterance"] = self.utterance
        rec["chunk"] = self.chunk
        rec["values"] = self.values
        header = STORE_MAGIC + struct.pack(
            "<6I", STORE_VERSION, len(self), len(self.speakers), len(self.utterances), h, w
        )
        path.write_bytes(header + rec.tobytes())
        utt_speaker = {}
        for u, s in zip(self.utterance.tolist(), self.speaker.tolist()):
            utt_speaker[self.utterances[u]] = self.speakers[s]
        index = {
            "version": STORE_VERSION,
            "chunk_shape": [h, w],
            "n_chunks": len(self),
            "speakers": self.speakers,
            "speaker_labels": self.speaker_labels,
            "utterances": self.utterances,
            "utterance_speaker": utt_speaker,
        }
        Path(str(path) + ".json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureStore":
        path = Path(path)
        blob = path.read_bytes()
        if blob[: len(STORE_MAGIC)] != STORE_MAGIC:
            raise ValueError(f"{path}: not a feature store")
        version, n, n_spk, n_utt, h, w = struct.unpack_from("<6I", blob, len(STORE_MAGIC))
        if version != STORE_VERSION:
            raise ValueError(f"{path}: unsupported store version {version}")
        rec = np.frombuffer(blob, dtype=_record_dtype(h, w), count=n, offset=len(STORE_MAGIC) + 24)
        index = json.loads(Path(str(path) + ".json").read_text())
        if len(index["speakers"]) != n_spk or len(index["utterances"]) != n_utt:
            raise ValueError(f"{path}: index does not match store header")
        return cls(
            values=np.array(rec["values"], dtype=np.float32).reshape(n, h, w),
            speaker=rec["speaker"].astype(np.int64),
            label=rec["label"].astype(np.int64),
            utterance=rec["utterance"].astype(np.int64),
            chunk=rec["chunk"].astype(np.int64),
            speakers=list(index["speakers"]),
            utterances=list(index["utterances"]),
            speaker_labels=dict(index["speaker_labels"]),
        )


@dataclass
class FeaturizeReport:
    n_utterances: int = 0
    n_chunks: int = 0
    flagged_chunks: int = 0
    skipped_silent: list[str] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)


def featurize_manifest(manifest, vad: VadConfig = VadConfig(), normalization: str = "chunk"):
    """Featurise every row of a manifest; unreadable files are reported, not fatal."""
    rows = read_manifest(manifest)
    report = FeaturizeReport()
    chunks: list[SpectrogramChunk] = []
    speaker_labels: dict[str, str] = {}
    for row in sorted(rows, key=lambda r: (r.speaker_id, r.utterance_id)):
        prev = speaker_labels.setdefault(row.speaker_id, row.label)
        if prev != row.label:
            raise ValueError(f"speaker {row.speaker_id} has conflicting labels {prev} / {row.label}")
        try:
            clip = load_clip(row.wav_path, row.speaker_id, row.label, row.utterance_id)
        except (AudioFormatError, OSError) as exc:
            log.error("skipping %s: %s", row.wav_path, exc)
            report.errors.append((row.wav_path, str(exc)))
            continue
        got, flagged = featurize_clip(clip, vad, normalization)
        if not got:
            report.skipped_silent.append(row.utterance_id)
        report.n_utterances += 1
        report.flagged_chunks += flagged
        chunks.extend(got)
    store = FeatureStore.from_chunks(chunks, speaker_labels)
    report.n_chunks = len(store)
    return store, report
