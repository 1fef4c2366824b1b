"""Synthetic tone-melody corpus standing in for recorded wake-word data.

The wake word is a fixed three-tone melody in background noise.  Negatives
are random tone sequences (some of them near misses sharing two of the three
tones in order) or plain noise, and never contain the melody itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, write_wav
from .corpus import NEGATIVE, Entry, Manifest, positive


@dataclass(frozen=True)
class ToyConfig:
    wake_tones: tuple[float, ...] = (700.0, 1300.0, 900.0)
    tone_s: float = 0.25
    # tones used by negatives; includes every wake tone
    tone_pool: tuple[float, ...] = (500.0, 700.0, 900.0, 1100.0, 1300.0, 1600.0)
    pos_median_s: float = 2.0
    pos_sigma: float = 0.2
    neg_median_s: float = 3.5
    neg_sigma: float = 0.35
    noise_fraction: float = 0.2
    near_miss_fraction: float = 0.3
    snr_db: tuple[float, float] = (5.0, 20.0)
    tone_amp: float = 0.3


def contains_pattern(seq, pattern) -> bool:
    n = len(pattern)
    return any(tuple(seq[i:i + n]) == tuple(pattern) for i in range(len(seq) - n + 1))


def tone(freq: float, dur_s: float, amp: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(dur_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    ramp = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / (0.01 * SAMPLE_RATE))
    return amp * ramp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))


def melody(freqs, cfg: ToyConfig, rng: np.random.Generator, jitter: float = 0.15) -> np.ndarray:
    parts = []
    for f in freqs:
        d = cfg.tone_s * rng.uniform(1 - jitter, 1 + jitter)
        parts.append(tone(f * rng.uniform(0.98, 1.02), d, cfg.tone_amp, rng))
    return np.concatenate(parts)


def _noise(n: int, level: float, rng: np.random.Generator) -> np.ndarray:
    # lightly low-passed white noise
    w = rng.standard_normal(n + 1)
    return level * 0.5 * (w[1:] + w[:-1])


def _noise_level(cfg: ToyConfig, rng: np.random.Generator) -> float:
    snr = rng.uniform(*cfg.snr_db)
    tone_power = cfg.tone_amp ** 2 / 2
    return float(np.sqrt(tone_power / 10 ** (snr / 10) / 0.5))


def _near_miss(cfg: ToyConfig, rng: np.random.Generator) -> list[float]:
    w = list(cfg.wake_tones)
    others = [f for f in cfg.tone_pool if f not in w]
    k = int(rng.integers(3))
    w[k] = others[int(rng.integers(len(others)))]
    return w


def negative_tones(cfg: ToyConfig, n_tones: int, rng: np.random.Generator) -> list[float]:
    while True:
        seq = [cfg.tone_pool[int(i)] for i in rng.integers(len(cfg.tone_pool), size=n_tones)]
        if n_tones >= 3 and rng.random() < cfg.near_miss_fraction:
            at = int(rng.integers(n_tones - 2))
            seq[at:at + 3] = _near_miss(cfg, rng)
        if not contains_pattern(seq, cfg.wake_tones):
            return seq


def _place(total: int, pieces: list[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Spread ``pieces`` in order over ``total`` samples with random gaps."""
    used = sum(len(p) for p in pieces)
    out = np.zeros(max(total, used))
    free = len(out) - used
    cuts = np.sort(rng.integers(0, free + 1, size=len(pieces)))
    pos = 0
    prev = 0
    for c, p in zip(cuts, pieces):
        pos += int(c) - prev
        prev = int(c)
        out[pos:pos + len(p)] += p
        pos += len(p)
    return out


def synth_positive(cfg: ToyConfig, rng: np.random.Generator) -> np.ndarray:
    dur = cfg.pos_median_s * float(np.exp(cfg.pos_sigma * rng.standard_normal()))
    n = int(round(dur * SAMPLE_RATE))
    x = _place(n, [melody(cfg.wake_tones, cfg, rng)], rng)
    return x + _noise(len(x), _noise_level(cfg, rng), rng)


def synth_negative(cfg: ToyConfig, rng: np.random.Generator) -> np.ndarray:
    dur = cfg.neg_median_s * float(np.exp(cfg.neg_sigma * rng.standard_normal()))
    n = int(round(dur * SAMPLE_RATE))
    if rng.random() < cfg.noise_fraction:
        x = np.zeros(n)
    else:
        # about one tone per 0.5 s, grouped into short phrases
        n_tones = max(1, int(round(dur / 0.5 * rng.uniform(0.6, 1.2))))
        seq = negative_tones(cfg, n_tones, rng)
        phrases, i = [], 0
        while i < len(seq):
            k = int(rng.integers(1, 5))
            phrases.append(melody(seq[i:i + k], cfg, rng))
            i += k
        x = _place(n, phrases, rng)
    return x + _noise(len(x), _noise_level(cfg, rng), rng)


def synth_toy(out_dir: str | Path, n_pos: int, n_neg: int, seed: int = 0,
              cfg: ToyConfig = ToyConfig(), prefix: str = "") -> Manifest:
    """Write ``out_dir/wav/*.wav`` and ``out_dir/manifest.txt``; paths are relative."""
    if n_pos < 1 or n_neg < 1:
        raise ValueError("n_pos and n_neg must be at least 1")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    entries = []
    for kind, count, fn, label in (("pos", n_pos, synth_positive, positive(0)),
                                   ("neg", n_neg, synth_negative, NEGATIVE)):
        for i in range(count):
            utt = f"{prefix}{kind}{i:05d}"
            x = fn(cfg, rng)
            rel = f"wav/{utt}.wav"
            write_wav(out / rel, x)
            entries.append(Entry(utt, rel, label, 0.0, len(x) / SAMPLE_RATE))
    m = Manifest(entries, 1, out.resolve())
    m.save(out / "manifest.txt")
    return m


def synth_noise_sources(out_dir: str | Path, seconds: float = 20.0, seed: int = 0,
                        cfg: ToyConfig = ToyConfig()) -> Manifest:
    """Babble-, music- and noise-like recordings for augmentation tests."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    srcs = {
        "noise": rng.standard_normal(n) * 0.1,
        "music": sum(0.1 * np.sin(2 * np.pi * f * t) * (1 + np.sin(2 * np.pi * r * t))
                     for f, r in ((220, 0.5), (330, 0.7), (440, 1.1))),
        "babble": np.convolve(rng.standard_normal(n), np.hanning(64), mode="same") * 0.05
        * (1 + np.sin(2 * np.pi * 3 * t)),
    }
    entries = []
    for name, x in srcs.items():
        rel = f"wav/{name}-000.wav"
        write_wav(out / rel, x)
        entries.append(Entry(f"{name}-000", rel, NEGATIVE, 0.0, n / SAMPLE_RATE))
    m = Manifest(entries, 1, out.resolve())
    m.save(out / "manifest.txt")
    return m
