import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import subsegment_report, synthetic_manifest
from wakeword.audio import SAMPLE_RATE, read_wav, write_wav
from wakeword.corpus import (NEGATIVE, AugmentPolicy, Entry, Manifest, ManifestError, UtteranceLabel,
                             augment, chunk_bounds, load_manifest, mix_at_snr, noise_gain, positive,
                             signal_power, speed_perturb, subsegment_negatives, synthetic_reverb)
from wakeword.toy import synth_noise_sources


def test_label_tokens():
    assert UtteranceLabel.parse("neg") == NEGATIVE
    assert UtteranceLabel.parse("pos:2") == positive(2)
    assert str(positive(1)) == "pos:1" and str(NEGATIVE) == "neg"
    for bad in ("pos:", "pos:-1", "yes", "pos:x"):
        with pytest.raises(ValueError):
            UtteranceLabel.parse(bad)


def test_manifest_round_trip_and_errors(tmp_path):
    write_wav(tmp_path / "a.wav", np.zeros(16000))
    (tmp_path / "m.txt").write_text("u1\ta.wav\tpos:0\nu2\ta.wav\tneg\t0.25\t0.5\n")
    m = load_manifest(tmp_path / "m.txt")
    assert [e.duration_s for e in m] == [1.0, 0.5] and m.num_wake_words == 1
    assert len(m.load_audio(m.entries[1])) == 8000
    m.save(tmp_path / "m2.txt")
    assert load_manifest(tmp_path / "m2.txt").entries == m.entries
    cases = {
        "u1\ta.wav\n": "expected 3-5",
        "u1\ta.wav\tmaybe\n": "unknown label",
        "u1\ta.wav\tneg\nu1\ta.wav\tneg\n": "duplicate",
        "u1\tmissing.wav\tneg\n": "missing audio",
        "u1\ta.wav\tneg\t0\t0\n": "positive",
        "u1\ta.wav\tpos:3\n": "wake word",
    }
    for text, msg in cases.items():
        (tmp_path / "bad.txt").write_text(text)
        with pytest.raises(ManifestError, match=msg):
            load_manifest(tmp_path / "bad.txt", num_wake_words=1 if "pos:3" in text else None)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5000), st.lists(st.integers(50, 400), min_size=1, max_size=5), st.integers(0, 49))
def test_chunk_bounds_cover_with_exact_overlap(length, sizes, overlap):
    draws = iter(sizes * 1000)
    chunks = chunk_bounds(length, lambda: next(draws), overlap)
    assert chunks[0][0] == 0 and chunks[-1][1] == length
    for (a0, b0), (a1, b1) in zip(chunks, chunks[1:]):
        assert b0 - a1 == overlap
    # all but the last chunk have a drawn length
    assert all(b - a in sizes for a, b in chunks[:-1])


def test_chunk_count_formula():
    # fixed chunk length c and overlap o: 1 + ceil((L - c) / (c - o)) chunks
    L, c, o = 100_000, 3000, 480
    chunks = chunk_bounds(L, lambda: c, o)
    assert len(chunks) == 1 + -(-(L - c) // (c - o))
    with pytest.raises(ValueError):
        chunk_bounds(100, lambda: 5, 5)


def test_subsegmentation_statistics():
    m = synthetic_manifest(np.random.default_rng(0))
    sub = subsegment_negatives(m, rng_seed=1)
    r = subsegment_report(m, sub)
    assert r["num_chunks"] >= 10_000
    assert (r["overlaps"] == round(0.3 * SAMPLE_RATE)).all()
    assert r["ks_all"] < 0.05
    assert r["covered"]
    assert sub.positives == m.positives
    # deterministic in the seed
    assert subsegment_negatives(m, 1).entries == sub.entries
    assert subsegment_negatives(m, 2).entries != sub.entries


def test_subsegmentation_needs_positives():
    m = Manifest([Entry("n", "n.wav", NEGATIVE, 0.0, 5.0)])
    with pytest.raises(ValueError):
        subsegment_negatives(m, 0)


def test_snr_mixing():
    rng = np.random.default_rng(3)
    x = rng.normal(size=16000)
    n = rng.normal(size=16000) * 5
    y = mix_at_snr(x, n, 10.0)
    snr = 10 * np.log10(signal_power(x) / signal_power(y - x))
    assert snr == pytest.approx(10.0, abs=1e-9)
    assert noise_gain(1.0, 0.0, 5.0) == 0.0


def test_speed_perturb_and_reverb_lengths():
    x = np.random.default_rng(4).normal(size=16000)
    assert abs(len(speed_perturb(x, 1.1)) - 16000 / 1.1) <= 1
    assert abs(len(speed_perturb(x, 0.9)) - 16000 / 0.9) <= 1
    r = synthetic_reverb(x, 0.5, np.random.default_rng(0))
    assert len(r) == len(x) and signal_power(r) == pytest.approx(signal_power(x))


def test_augment(tmp_path, toy_corpus):
    train, _ = toy_corpus
    small = train.with_entries(train.entries[:2] + train.negatives[:1])
    noises = synth_noise_sources(tmp_path / "noise", seconds=3.0, seed=0)
    out = augment(small, noises, AugmentPolicy(seed=5), tmp_path / "aug")
    assert len(out) == 3 * 7
    tags = sorted(e.utt_id.split("-", 1)[1] for e in out if e.utt_id.startswith(small.entries[0].utt_id + "-"))
    assert tags == ["babble", "music", "noise", "reverb", "sp0.9", "sp1.1"]
    for e in out:
        assert out.audio_file(e).exists()
        assert e.label == next(s.label for s in small if e.utt_id.startswith(s.utt_id))
    again = augment(small, noises, AugmentPolicy(seed=5), tmp_path / "aug2")
    for a, b in zip(out, again):
        assert np.array_equal(out.load_audio(a), again.load_audio(b))
    with pytest.raises(ValueError, match="babble"):
        augment(small, {"music": noises, "noise": noises}, AugmentPolicy(), tmp_path / "x")
    with pytest.raises(ValueError):
        AugmentPolicy(noise_snr_db=(5.0, 1.0))


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(5).uniform(-0.9, 0.9, 1000)
    write_wav(tmp_path / "x.wav", x)
    y, rate = read_wav(tmp_path / "x.wav")
    assert rate == SAMPLE_RATE and np.abs(x - y).max() <= 1 / 32768
    y2, _ = read_wav(tmp_path / "x.wav", offset_s=0.01, duration_s=0.02)
    assert np.array_equal(y2, y[160:480])
