import numpy as np
import pytest

from wakeword.features import (FeatureCache, MfccConfig, MfccStream, compute_mfcc, log_mel_energies,
                               mel_centers, mel_edges, num_frames, read_archive, write_archive)


def sine(freq, n, sr=16000):
    return 0.5 * np.sin(2 * np.pi * freq * np.arange(n) / sr)


@pytest.mark.parametrize("n,want", [(400, 1), (559, 1), (560, 2), (16000, 98), (16160, 99)])
def test_frame_count(n, want):
    assert num_frames(n) == want
    assert compute_mfcc(np.random.default_rng(0).normal(size=n) * 0.1).shape == (want, 40)


def test_too_short_audio_is_rejected():
    with pytest.raises(ValueError):
        compute_mfcc(np.zeros(399))


@pytest.mark.parametrize("freq", [440.0, 1000.0, 3000.0])
def test_tone_lands_in_nearest_mel_band(freq):
    e = log_mel_energies(sine(freq, 16000))
    lo, hi = mel_edges()
    inside = np.nonzero((lo < freq) & (freq < hi))[0]
    peak = np.bincount(e.argmax(axis=1)).argmax()
    assert peak in inside
    # the strongest band is the one whose center is nearest in mel distance
    assert peak == inside[np.argmin(np.abs(np.log1p(mel_centers()[inside] / 700) - np.log1p(freq / 700)))]


def test_streaming_equals_batch():
    x = np.random.default_rng(1).normal(size=12345) * 0.1
    ref = compute_mfcc(x)
    s = MfccStream()
    parts = [s.accept(x[a:a + 777]) for a in range(0, len(x), 777)]
    np.testing.assert_allclose(np.concatenate(parts), ref, rtol=0, atol=1e-4)
    with pytest.raises(ValueError):
        MfccStream(MfccConfig(cmn=True))


def test_sample_rate_checks():
    x = sine(440, 8000, sr=8000)
    with pytest.raises(ValueError):
        compute_mfcc(x, sample_rate=8000)
    feats = compute_mfcc(x, MfccConfig(resample=True), sample_rate=8000)
    assert feats.shape == (num_frames(16000), 40)


def test_cmn_removes_mean():
    f = compute_mfcc(np.random.default_rng(2).normal(size=8000), MfccConfig(cmn=True))
    assert np.abs(f.mean(axis=0)).max() < 1e-4


def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    items = {"a": rng.normal(size=(5, 40)).astype(np.float32), "b-1": np.zeros((0, 40), np.float32)}
    write_archive(tmp_path / "f.ark", items.items())
    back = read_archive(tmp_path / "f.ark")
    assert list(back) == ["a", "b-1"]
    assert np.array_equal(back["a"], items["a"]) and back["b-1"].shape == (0, 40)
    (tmp_path / "bad.ark").write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_archive(tmp_path / "bad.ark")


def test_feature_cache(toy_corpus):
    train, _ = toy_corpus
    cache = FeatureCache()
    e = train.entries[0]
    a = cache.get(train, e)
    assert cache.get(train, e) is a
    assert np.array_equal(a, compute_mfcc(train.load_audio(e)))
