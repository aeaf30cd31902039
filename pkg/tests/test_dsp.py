import numpy as np
import pytest

from advrep.dsp import (
    SAMPLE_RATE,
    AudioFormatError,
    FeatureStore,
    ManifestRow,
    energy_vad,
    expected_chunk_count,
    featurize_manifest,
    hz_to_mel,
    mel_filterbank,
    mel_spectrogram,
    mel_to_hz,
    read_wav,
    segment,
    segment_offsets,
    write_manifest,
    write_wav,
    zscore_normalize,
)
from advrep.dsp.mel import LOG_FLOOR


def tone(seconds, freq=440.0, amp=0.5):
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    return amp * np.sin(2 * np.pi * freq * t)


def test_vad_silence_is_empty():
    assert energy_vad(np.zeros(SAMPLE_RATE)) == []


def test_vad_finds_padded_tone():
    x = np.concatenate([np.zeros(SAMPLE_RATE), tone(1.0), np.zeros(SAMPLE_RATE)])
    iv = energy_vad(x, threshold_db=25.0)
    assert len(iv) == 1
    frame = SAMPLE_RATE // 100
    assert abs(iv[0][0] - SAMPLE_RATE) <= frame
    assert abs(iv[0][1] - 2 * SAMPLE_RATE) <= frame


def test_vad_all_speech_spans_clip():
    x = tone(1.3)
    assert energy_vad(x) == [(0, len(x))]


def test_vad_rejects_empty_clip():
    with pytest.raises(ValueError):
        energy_vad(np.zeros(0))


@pytest.mark.parametrize("n,offsets", [(12000, [0, 4000]), (8000, [0]), (7999, []), (16000, [0, 4000, 8000])])
def test_segment_offsets(n, offsets):
    assert segment_offsets(n) == offsets
    assert expected_chunk_count(n) == len(offsets)
    assert all(len(w) == 8000 for w in segment(np.zeros(n)))


def test_hz_to_mel_reference_points():
    assert hz_to_mel(0.0) == 0.0
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))
    f = np.array([50.0, 1000.0, 7900.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f)


def test_filterbank_shape_and_partition():
    fb = mel_filterbank()
    assert fb.shape == (126, 257)
    assert fb.max() <= 1.0 + 1e-12
    assert np.all(fb.sum(axis=0) <= 1.0 + 1e-9)


def test_mel_spectrogram_of_silence_is_floor():
    m = mel_spectrogram(np.zeros(8000))
    assert m.shape == (126, 125)
    np.testing.assert_allclose(m, np.log(LOG_FLOOR))


def test_mel_spectrogram_sine_peaks_in_its_band():
    m = mel_spectrogram(tone(0.5, freq=1000.0))
    edges = mel_to_hz(np.linspace(0, hz_to_mel(SAMPLE_RATE / 2), 128))
    centers = edges[1:-1]
    expected = int(np.argmin(np.abs(centers - 1000.0)))
    peak = np.argmax(m, axis=0)
    assert np.all(np.abs(peak - expected) <= 1)


def test_mel_spectrogram_length_check():
    with pytest.raises(ValueError):
        mel_spectrogram(np.zeros(7999))


def test_zscore_cases(rng):
    z, flat = zscore_normalize(np.full((126, 125), 3.0))
    assert flat and not z.any()
    pattern = np.tile([0.0, 2.0], (4, 2))
    z, flat = zscore_normalize(pattern)
    np.testing.assert_allclose(z, pattern - 1.0)
    z, _ = zscore_normalize(rng.standard_normal((126, 125)) * 5 + 2)
    assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6


def test_wav_roundtrip(tmp_path):
    x = tone(0.1, amp=0.3)
    write_wav(tmp_path / "a.wav", x)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == SAMPLE_RATE
    np.testing.assert_allclose(y, x, atol=1 / 32767)


def test_wrong_sample_rate_rejected(tmp_path):
    write_wav(tmp_path / "a.wav", tone(0.1), sample_rate=8000)
    from advrep.dsp import load_clip

    with pytest.raises(AudioFormatError):
        load_clip(tmp_path / "a.wav", "s", "neurotypical", "u")


def test_featurize_reports_corrupt_file(tmp_path):
    write_wav(tmp_path / "good.wav", tone(1.2))
    (tmp_path / "bad.wav").write_bytes(b"RIFF0000WAVEjunk")
    rows = [
        ManifestRow("s1", "neurotypical", str(tmp_path / "good.wav"), "s1_u0"),
        ManifestRow("s1", "neurotypical", str(tmp_path / "bad.wav"), "s1_u1"),
    ]
    write_manifest(tmp_path / "m.tsv", rows)
    store, report = featurize_manifest(tmp_path / "m.tsv")
    assert len(report.errors) == 1 and report.errors[0][0].endswith("bad.wav")
    assert len(store) == expected_chunk_count(len(tone(1.2)))
    assert store.values.shape[1:] == (126, 125)


def test_featurize_empty_manifest(tmp_path):
    write_manifest(tmp_path / "m.tsv", [])
    store, report = featurize_manifest(tmp_path / "m.tsv")
    assert len(store) == 0 and report.n_chunks == 0


def test_store_roundtrip(tmp_path, tiny_store):
    tiny_store.save(tmp_path / "s.bin")
    back = FeatureStore.load(tmp_path / "s.bin")
    np.testing.assert_array_equal(back.values, tiny_store.values)
    np.testing.assert_array_equal(back.speaker, tiny_store.speaker)
    assert back.utterances == tiny_store.utterances
    assert back.speaker_labels == tiny_store.speaker_labels
    assert (tmp_path / "s.bin").read_bytes()[:8] == b"ADVRFEAT"


def test_store_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"hello world")
    with pytest.raises(ValueError):
        FeatureStore.load(tmp_path / "x.bin")


def test_every_chunk_is_normalised(tiny_store):
    v = tiny_store.values.reshape(len(tiny_store), -1).astype(np.float64)
    np.testing.assert_allclose(v.mean(axis=1), 0, atol=1e-5)
    np.testing.assert_allclose(v.std(axis=1), 1, atol=1e-4)


def test_power_spectrum_parseval(rng):
    from advrep.dsp.mel import N_FFT, hamming, power_spectrum

    frames = rng.standard_normal((3, N_FFT))
    p = power_spectrum(frames)
    # one-sided spectrum: interior bins count twice
    total = (p[:, 0] + p[:, -1] + 2 * p[:, 1:-1].sum(axis=1)) / N_FFT
    np.testing.assert_allclose(total, np.sum((frames * hamming(N_FFT)) ** 2, axis=1), rtol=1e-6)


def test_hamming_is_symmetric():
    from advrep.dsp.mel import hamming

    w = hamming(512)
    np.testing.assert_allclose(w, w[::-1])
    assert w[0] == pytest.approx(0.08)


def test_filter_centres_increase_and_peak_at_one():
    from advrep.dsp.mel import mel_band_edges

    centres = mel_band_edges()[1:-1]
    assert np.all(np.diff(centres) > 0)
    fb = mel_filterbank(n_fft=2**16)  # fine grid so every triangle is sampled near its apex
    np.testing.assert_allclose(fb.max(axis=1), 1.0, atol=0.02)


def test_featurize_is_deterministic(tiny_corpus):
    a, _ = featurize_manifest(tiny_corpus[1])
    b, _ = featurize_manifest(tiny_corpus[1])
    assert a.values.tobytes() == b.values.tobytes()
