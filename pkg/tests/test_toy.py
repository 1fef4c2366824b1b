import numpy as np

from wakeword.toy import ToyConfig, contains_pattern, negative_tones, synth_toy


def test_contains_pattern():
    assert contains_pattern([1, 2, 3, 4], (2, 3))
    assert not contains_pattern([1, 3, 2], (2, 3))
    assert not contains_pattern([], (1,))


def test_negatives_never_contain_the_melody():
    cfg = ToyConfig()
    rng = np.random.default_rng(0)
    for _ in range(2000):
        seq = negative_tones(cfg, int(rng.integers(1, 12)), rng)
        assert not contains_pattern(seq, cfg.wake_tones)


def test_corpus_layout(tmp_path):
    m = synth_toy(tmp_path, 3, 4, seed=5, prefix="x")
    assert [e.utt_id for e in m] == ["xpos00000", "xpos00001", "xpos00002",
                                     "xneg00000", "xneg00001", "xneg00002", "xneg00003"]
    for e in m:
        assert not e.audio_path.startswith("/")
        x = m.load_audio(e)
        assert len(x) / 16000 == e.duration_s and np.abs(x).max() < 1.0
    assert (tmp_path / "manifest.txt").exists()
