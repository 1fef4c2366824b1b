"""Dataset manifests, negative sub-segmentation and data augmentation."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .audio import SAMPLE_RATE, read_wav, wav_duration, write_wav

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceLabel:
    """Negative when ``wake_word`` is None, otherwise Positive(wake_word)."""

    wake_word: int | None = None

    @property
    def is_positive(self) -> bool:
        return self.wake_word is not None

    @classmethod
    def parse(cls, token: str) -> UtteranceLabel:
        if token == "neg":
            return cls()
        if token.startswith("pos:"):
            try:
                k = int(token[4:])
            except ValueError:
                raise ValueError(f"bad label token {token!r}") from None
            if k < 0:
                raise ValueError(f"bad label token {token!r}")
            return cls(k)
        raise ValueError(f"unknown label token {token!r}")

    def __str__(self) -> str:
        return "neg" if self.wake_word is None else f"pos:{self.wake_word}"


NEGATIVE = UtteranceLabel()


def positive(k: int = 0) -> UtteranceLabel:
    return UtteranceLabel(k)


@dataclass(frozen=True)
class Entry:
    utt_id: str
    audio_path: str
    label: UtteranceLabel
    offset_s: float
    duration_s: float

    def line(self) -> str:
        return f"{self.utt_id}\t{self.audio_path}\t{self.label}\t{self.offset_s:.6f}\t{self.duration_s:.6f}"


@dataclass
class Manifest:
    entries: list[Entry] = field(default_factory=list)
    num_wake_words: int = 1
    # relative audio paths are resolved against this directory
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.utt_id in seen:
                raise ManifestError(f"duplicate utt_id {e.utt_id!r}")
            seen.add(e.utt_id)
            if not e.duration_s > 0:
                raise ManifestError(f"{e.utt_id}: duration must be positive")
            if e.label.is_positive and e.label.wake_word >= self.num_wake_words:
                raise ManifestError(f"{e.utt_id}: wake word {e.label.wake_word} >= {self.num_wake_words}")

    def audio_file(self, e: Entry) -> Path:
        p = Path(e.audio_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load_audio(self, e: Entry) -> np.ndarray:
        x, rate = read_wav(self.audio_file(e), e.offset_s, e.duration_s)
        if rate != SAMPLE_RATE:
            raise ValueError(f"{e.utt_id}: expected {SAMPLE_RATE} Hz audio, got {rate}")
        return x

    @property
    def positives(self) -> list[Entry]:
        return [e for e in self.entries if e.label.is_positive]

    @property
    def negatives(self) -> list[Entry]:
        return [e for e in self.entries if not e.label.is_positive]

    def negative_hours(self) -> float:
        return sum(e.duration_s for e in self.negatives) / 3600.0

    def with_entries(self, entries: list[Entry]) -> Manifest:
        return Manifest(list(entries), self.num_wake_words, self.root)

    def to_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def load_manifest(path: str | Path, num_wake_words: int | None = None, check_audio: bool = True) -> Manifest:
    """Read ``utt_id<TAB>audio_path<TAB>label[<TAB>offset_s[<TAB>duration_s]]`` lines.

    A missing or empty duration is read from the WAV header.  When
    ``num_wake_words`` is None it is inferred from the largest label.
    """
    path = Path(path)
    root = path.parent
    entries = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if not 3 <= len(parts) <= 5:
            raise ManifestError(f"{path}:{lineno}: expected 3-5 tab-separated fields, got {len(parts)}")
        utt, audio, tok = parts[:3]
        try:
            label = UtteranceLabel.parse(tok)
            offset = float(parts[3]) if len(parts) > 3 and parts[3] else 0.0
            dur = float(parts[4]) if len(parts) > 4 and parts[4] else None
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if utt in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utt_id {utt!r}")
        seen.add(utt)
        audio_path = Path(audio) if Path(audio).is_absolute() else root / audio
        if check_audio and not audio_path.exists():
            raise ManifestError(f"{path}:{lineno}: missing audio file {audio_path}")
        if dur is None:
            dur = wav_duration(audio_path) - offset
        entries.append(Entry(utt, audio, label, offset, dur))
    if not entries:
        log.warning("manifest %s is empty", path)
    k = max((e.label.wake_word + 1 for e in entries if e.label.is_positive), default=1)
    m = Manifest(entries, num_wake_words if num_wake_words is not None else k, root)
    try:
        m.validate()
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    return m


# -- sub-segmentation ---------------------------------------------------------


def chunk_bounds(length: int, draw, overlap: int) -> list[tuple[int, int]]:
    """Greedy chunker over [0, length) in samples.

    ``draw()`` returns the next chunk length.  Consecutive chunks overlap by
    exactly ``overlap`` samples; the last chunk keeps whatever remains.
    """
    out = []
    start = 0
    while True:
        c = draw()
        if c <= overlap:
            raise ValueError("chunk length must exceed the overlap")
        if start + c >= length:
            out.append((start, length))
            return out
        out.append((start, start + c))
        start += c - overlap


def subsegment_negatives(m: Manifest, rng_seed: int, overlap_s: float = 0.3) -> Manifest:
    """Cut negatives into overlapping chunks with positive-like lengths.

    Chunk lengths are drawn uniformly from the multiset of positive
    durations.  Positives pass through unchanged.
    """
    pos = [e.duration_s for e in m.positives]
    if not pos:
        raise ValueError("sub-segmentation needs at least one positive entry")
    pos_samples = np.array([int(round(d * SAMPLE_RATE)) for d in pos])
    overlap = int(round(overlap_s * SAMPLE_RATE))
    rng = np.random.default_rng(rng_seed)

    def draw() -> int:
        return int(pos_samples[rng.integers(len(pos_samples))])

    out = []
    for e in m.entries:
        if e.label.is_positive:
            out.append(e)
            continue
        if not e.duration_s > 0:
            raise ValueError(f"{e.utt_id}: negative with non-positive duration")
        length = int(round(e.duration_s * SAMPLE_RATE))
        for i, (a, b) in enumerate(chunk_bounds(length, draw, overlap)):
            out.append(Entry(
                f"{e.utt_id}-{i:04d}",
                e.audio_path,
                NEGATIVE,
                e.offset_s + a / SAMPLE_RATE,
                (b - a) / SAMPLE_RATE,
            ))
    return m.with_entries(out)


# -- augmentation -------------------------------------------------------------

NOISE_CATEGORIES = ("babble", "music", "noise")


@dataclass(frozen=True)
class AugmentPolicy:
    babble_count: tuple[int, int] = (3, 7)
    babble_snr_db: tuple[float, float] = (13.0, 20.0)
    music_count: int = 1
    music_snr_db: tuple[float, float] = (5.0, 15.0)
    noise_interval_s: float = 1.0
    noise_snr_db: tuple[float, float] = (0.0, 15.0)
    reverb_decay_s: tuple[float, float] = (0.2, 0.8)
    speed_factors: tuple[float, ...] = (0.9, 1.0, 1.1)
    seed: int = 0

    def __post_init__(self):
        for name in ("babble_snr_db", "music_snr_db", "noise_snr_db", "reverb_decay_s"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted: {lo} > {hi}")
        if self.babble_count[0] > self.babble_count[1] or self.babble_count[0] < 1:
            raise ValueError("babble_count must be a non-empty positive range")
        if any(f <= 0 for f in self.speed_factors):
            raise ValueError("speed factors must be positive")


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x))) if len(x) else 0.0


def noise_gain(signal_power_: float, noise_power: float, snr_db: float) -> float:
    """Gain g with 10 log10(Ps / (g^2 Pn)) == snr_db."""
    if noise_power <= 0:
        return 0.0
    return math.sqrt(signal_power_ / (noise_power * 10.0 ** (snr_db / 10.0)))


def fit_length(noise: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop of ``noise`` to ``n`` samples, tiling when it is too short."""
    if len(noise) < n:
        noise = np.tile(noise, n // len(noise) + 1)
    start = int(rng.integers(len(noise) - n + 1))
    return noise[start:start + n]


def mix_at_snr(x: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Add ``noise`` (same length as ``x``) scaled to the requested SNR."""
    return x + noise_gain(signal_power(x), signal_power(noise), snr_db) * noise


def speed_perturb(x: np.ndarray, factor: float) -> np.ndarray:
    """Resample so that the result plays ``factor`` times faster."""
    if factor == 1.0:
        return x.copy()
    ratio = Fraction(1.0 / factor).limit_denominator(1000)
    return sps.resample_poly(x, ratio.numerator, ratio.denominator)


def synthetic_reverb(x: np.ndarray, decay_s: float, rng: np.random.Generator) -> np.ndarray:
    """Convolve with an exponentially decaying noise tail (60 dB after ``decay_s``)."""
    n = max(1, int(decay_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    kernel = rng.standard_normal(n) * np.exp(-6.9078 * t / decay_s) * 0.1
    kernel[0] = 1.0
    y = sps.fftconvolve(x, kernel)[: len(x)]
    p = signal_power(y)
    return y * math.sqrt(signal_power(x) / p) if p > 0 else y


def _categorize(noise_sources) -> dict[str, Manifest]:
    if isinstance(noise_sources, dict):
        cats = noise_sources
    else:
        cats = {c: noise_sources.with_entries([e for e in noise_sources if e.utt_id.startswith(c)])
                for c in NOISE_CATEGORIES}
    for c in NOISE_CATEGORIES:
        if c not in cats or len(cats[c]) == 0:
            raise ValueError(f"no noise sources for category {c!r}")
    return cats


def _entry_rng(seed: int, utt_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(utt_id.encode("utf-8"))])


def augment(m: Manifest, noise_sources, policy: AugmentPolicy, out_dir: str | Path) -> Manifest:
    """Original entries plus babble, music, noise, reverb and speed copies.

    ``noise_sources`` is either a dict of per-category manifests or one
    manifest whose utt_ids start with the category name.  New audio goes to
    ``out_dir/wav``; the returned manifest is rooted at ``out_dir`` and
    sorted by utt_id.
    """
    cats = _categorize(noise_sources)
    out_dir = Path(out_dir)
    cache: dict[tuple[str, str], np.ndarray] = {}

    def source_audio(cat: str, rng: np.random.Generator) -> np.ndarray:
        src = cats[cat]
        e = src.entries[int(rng.integers(len(src)))]
        key = (cat, e.utt_id)
        if key not in cache:
            cache[key] = src.load_audio(e)
        return cache[key]

    out: list[Entry] = []
    for e in m.entries:
        abs_path = m.audio_file(e).resolve()
        out.append(replace(e, audio_path=str(abs_path)))
        x = m.load_audio(e)
        rng = _entry_rng(policy.seed, e.utt_id)
        copies = {}

        y = x.copy()
        for _ in range(int(rng.integers(policy.babble_count[0], policy.babble_count[1] + 1))):
            y = y + _scaled(x, fit_length(source_audio("babble", rng), len(x), rng), rng, policy.babble_snr_db)
        copies["babble"] = y

        y = x.copy()
        for _ in range(policy.music_count):
            y = y + _scaled(x, fit_length(source_audio("music", rng), len(x), rng), rng, policy.music_snr_db)
        copies["music"] = y

        copies["noise"] = add_foreground_noise(x, lambda: source_audio("noise", rng), policy, rng)
        copies["reverb"] = synthetic_reverb(x, float(rng.uniform(*policy.reverb_decay_s)), rng)
        for f in policy.speed_factors:
            if f != 1.0:
                copies[f"sp{f:g}"] = speed_perturb(x, f)

        for tag, y in copies.items():
            utt = f"{e.utt_id}-{tag}"
            rel = f"wav/{utt}.wav"
            write_wav(out_dir / rel, np.clip(y, -1.0, 1.0 - 1.0 / 32768))
            out.append(Entry(utt, rel, e.label, 0.0, len(y) / SAMPLE_RATE))

    # original entries keep absolute paths so the manifest can live in out_dir
    out.sort(key=lambda e: e.utt_id)
    return Manifest(out, m.num_wake_words, out_dir)


def _scaled(x: np.ndarray, noise: np.ndarray, rng: np.random.Generator, snr_range) -> np.ndarray:
    snr = float(rng.uniform(*snr_range))
    return noise_gain(signal_power(x), signal_power(noise), snr) * noise


def add_foreground_noise(x: np.ndarray, next_clip, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Insert noise clips separated by ``noise_interval_s`` of clean audio."""
    y = x.copy()
    ps = signal_power(x)
    gap = int(policy.noise_interval_s * SAMPLE_RATE)
    pos = 0
    while pos < len(x):
        clip = next_clip()
        n = min(len(clip), len(x) - pos)
        seg = clip[:n]
        y[pos:pos + n] += noise_gain(ps, signal_power(seg), float(rng.uniform(*policy.noise_snr_db))) * seg
        pos += n + gap
    return y
