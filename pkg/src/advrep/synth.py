"""Synthetic speech-like corpus with planted speaker-identity and pathology cues.

Each utterance is noise-excited, cross-faded "syllables" whose spectral
envelope (in dB, on the mel axis) is the sum of

* a common roll-off,
* per-syllable content bumps (fresh every syllable, what the auto-encoder
  mostly has to reconstruct),
* a per-speaker signature of peaks and notches scaled by ``sigma_id``,
* for pathological speakers, an extra high-frequency tilt scaled by
  ``sigma_pd``;

pathological speakers also modulate amplitude and change syllables more
slowly. Identity parameters, pathology parameters, and per-utterance noise come
from separate seeded streams.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .dsp.audio import SAMPLE_RATE, ManifestRow, write_manifest, write_wav
from .dsp.mel import hz_to_mel
from .rng import substream

MEL_MAX = float(hz_to_mel(SAMPLE_RATE / 2))
SILENCE_S = 0.2


@dataclass(frozen=True)
class SynthSpec:
    n_speakers_per_class: int = 10
    utterances_per_speaker: int = 6
    duration_s: float = 3.0  # per file, including SILENCE_S of silence at each end
    sigma_id: float = 1.0
    sigma_pd: float = 1.0
    sigma_n: float = 0.05
    seed: int = 0
    # fixed shape of the cue model
    id_bumps: int = 4
    id_depth_db: float = 8.0
    pd_tilt_db: float = 20.0
    pd_rate_drop: float = 0.25
    tilt_jitter_db: float = 2.0
    base_rate_hz: float = 4.0

    def __post_init__(self):
        for f in ("sigma_id", "sigma_pd", "sigma_n"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be non-negative, got {getattr(self, f)}")
        if self.n_speakers_per_class <= 0:
            raise ValueError("n_speakers_per_class must be positive")
        if self.utterances_per_speaker <= 0:
            raise ValueError("utterances_per_speaker must be positive")
        if self.duration_s <= 2 * SILENCE_S:
            raise ValueError(f"duration_s must exceed {2 * SILENCE_S} s of silence padding")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown synth spec field(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def speakers(self) -> list[tuple[str, str]]:
        out = []
        for cls_name, prefix in (("neurotypical", "nt"), ("pathological", "pd")):
            for i in range(self.n_speakers_per_class):
                out.append((f"{prefix}{i:02d}", cls_name))
        return out


@dataclass(frozen=True)
class SpeakerTraits:
    speaker_id: str
    label: str
    id_centers: np.ndarray  # mel
    id_amps: np.ndarray  # dB
    tilt_db: float  # extra high-frequency attenuation (jitter + pathology)
    rate_hz: float


def _bumps(mel: np.ndarray, centers, widths, amps) -> np.ndarray:
    c = np.asarray(centers)[:, None]
    w = np.asarray(widths)[:, None]
    a = np.asarray(amps)[:, None]
    return (a * np.exp(-0.5 * ((mel[None, :] - c) / w) ** 2)).sum(axis=0)


def speaker_traits(spec: SynthSpec, index: int) -> SpeakerTraits:
    spk, label = spec.speakers()[index]
    rid = substream(spec.seed, "synth.identity", index)
    centers = rid.uniform(150.0, MEL_MAX - 150.0, spec.id_bumps)
    amps = spec.sigma_id * spec.id_depth_db * rid.choice([-1.0, 1.0], spec.id_bumps) * rid.uniform(0.5, 1.0, spec.id_bumps)
    # individual tilt and speaking rate are identity traits too
    tilt = spec.sigma_id * spec.tilt_jitter_db * rid.standard_normal()
    rate = spec.base_rate_hz * (1.0 + spec.sigma_id * 0.1 * rid.uniform(-1.0, 1.0))
    if label == "pathological":
        tilt += spec.sigma_pd * spec.pd_tilt_db
        rate /= 1.0 + spec.pd_rate_drop * spec.sigma_pd
    return SpeakerTraits(spk, label, centers, amps, float(tilt), float(rate))


def synthesize_utterance(spec: SynthSpec, speaker_index: int, utterance_index: int) -> np.ndarray:
    """Samples in [-1, 1] for one utterance; pure in (spec, speaker, utterance)."""
    tr = speaker_traits(spec, speaker_index)
    rng = substream(spec.seed, "synth.utterance", speaker_index, utterance_index)
    fs = SAMPLE_RATE
    n_total = int(round(spec.duration_s * fs))
    n_sil = int(round(SILENCE_S * fs))
    n_speech = n_total - 2 * n_sil

    seg = max(int(round(fs / tr.rate_hz)), 256)  # one syllable
    hop = seg // 2
    n_syll = n_speech // hop + 2
    nfft = 2 * seg
    freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
    mel = hz_to_mel(freqs)
    frac = mel / MEL_MAX

    # speaker signature with slight per-utterance jitter
    id_c = tr.id_centers + rng.normal(0.0, 15.0, tr.id_centers.shape)
    id_a = tr.id_amps * (1.0 + rng.normal(0.0, 0.05, tr.id_amps.shape))
    fixed_db = -20.0 * frac - tr.tilt_db * frac + _bumps(mel, id_c, np.full(id_c.shape, 90.0), id_a)

    win = np.hanning(seg + 1)[:-1]  # periodic Hann: 50% overlap-add is flat
    speech = np.zeros(n_syll * hop + seg)
    for k in range(n_syll):
        content_db = _bumps(mel, rng.uniform(100.0, MEL_MAX - 100.0, 3), rng.uniform(60.0, 200.0, 3),
                            rng.uniform(6.0, 18.0, 3))
        gain = 10.0 ** ((fixed_db + content_db) / 20.0)
        spec_noise = np.fft.rfft(rng.standard_normal(nfft))
        y = np.fft.irfft(spec_noise * gain, nfft)[:seg]
        speech[k * hop : k * hop + seg] += win * y
    speech = speech[hop : hop + n_speech]

    t = np.arange(n_speech) / fs
    am = 1.0 - 0.7 * (0.5 + 0.5 * np.cos(2 * np.pi * tr.rate_hz * t + rng.uniform(0, 2 * np.pi)))
    speech *= am
    # short fades so onsets do not click
    fade = min(160, n_speech // 2)
    ramp = np.linspace(0.0, 1.0, fade)
    speech[:fade] *= ramp
    speech[-fade:] *= ramp[::-1]
    speech /= np.sqrt(np.mean(speech**2)) + 1e-12
    speech += spec.sigma_n * rng.standard_normal(n_speech)

    out = 1e-4 * rng.standard_normal(n_total)  # faint background, far below the VAD threshold
    out[n_sil : n_sil + n_speech] += speech
    return np.clip(0.05 * out / (np.sqrt(np.mean(speech**2)) + 1e-12), -1.0, 1.0)


def generate_corpus(spec: SynthSpec, out_dir) -> Path:
    """Write ``<speaker>/<utterance>.wav``, ``manifest.tsv`` and ``synth_spec.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for si, (spk, label) in enumerate(spec.speakers()):
        (out / spk).mkdir(exist_ok=True)
        for ui in range(spec.utterances_per_speaker):
            utt = f"{spk}_u{ui:02d}"
            rel = f"{spk}/{utt}.wav"
            write_wav(out / rel, synthesize_utterance(spec, si, ui))
            rows.append(ManifestRow(spk, label, rel, utt))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, rows)
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    return manifest


@dataclass(frozen=True)
class OracleReport:
    pd_accuracy: float  # percent, speaker-disjoint held-out utterances
    speaker_accuracy: float  # percent, held-out utterances of enrolled speakers
    n_speakers: int

    @property
    def speaker_chance(self) -> float:
        return 100.0 / self.n_speakers


def utterance_features(store) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Time-averaged mel profile per utterance, with speaker and label indices."""
    utts = np.unique(store.utterance)
    feats = np.stack([store.values[store.utterance == u].mean(axis=(0, 2)) for u in utts])
    spk = np.array([store.speaker[store.utterance == u][0] for u in utts])
    lab = np.array([store.label[store.utterance == u][0] for u in utts])
    return feats, spk, lab


def oracle_classifiers(store, folds: int = 5, seed: int = 0) -> OracleReport:
    """Regularised linear classifiers on time-averaged mel features.

    PD accuracy uses speaker-grouped folds balanced by class (test speakers unseen); speaker-ID
    accuracy uses utterance folds stratified by speaker.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedGroupKFold, StratifiedKFold, cross_val_predict
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    x, spk, lab = utterance_features(store)

    def model():
        return make_pipeline(StandardScaler(), LogisticRegression(C=0.1, max_iter=2000))

    n_spk = len(np.unique(spk))
    per_class = min(len(np.unique(spk[lab == c])) for c in np.unique(lab))
    pd_cv = StratifiedGroupKFold(n_splits=min(folds, per_class))
    pd_pred = cross_val_predict(model(), x, lab, groups=spk, cv=pd_cv)
    per_spk = np.bincount(spk).min()
    id_cv = StratifiedKFold(n_splits=min(folds, per_spk), shuffle=True, random_state=seed)
    id_pred = cross_val_predict(model(), x, spk, cv=id_cv)
    return OracleReport(
        pd_accuracy=100.0 * float(np.mean(pd_pred == lab)),
        speaker_accuracy=100.0 * float(np.mean(id_pred == spk)),
        n_speakers=n_spk,
    )
