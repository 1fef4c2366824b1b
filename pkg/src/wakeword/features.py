"""40-dimensional MFCC front end and a small binary feature archive."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

FRAME_LENGTH = 400  # 25 ms at 16 kHz
FRAME_SHIFT = 160  # 10 ms
NUM_CEPS = 40
FEATURE_MAGIC = b"KWSFEAT1"


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    frame_length: int = FRAME_LENGTH
    frame_shift: int = FRAME_SHIFT
    num_bins: int = 40
    num_ceps: int = NUM_CEPS
    low_freq: float = 20.0
    high_freq: float = 7800.0
    preemph: float = 0.97
    remove_dc: bool = True
    fft_size: int = 512
    cmn: bool = False
    resample: bool = False


def mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def inv_mel(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


@lru_cache(maxsize=8)
def _mel_bank(cfg: MfccConfig) -> np.ndarray:
    """(fft_size // 2 + 1, num_bins) triangular weights, triangles in mel space."""
    edges = np.linspace(mel(cfg.low_freq), mel(cfg.high_freq), cfg.num_bins + 2)
    fft_mel = mel(np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_mel - left) / (center - left)
    down = (right - fft_mel) / (right - center)
    return np.maximum(0.0, np.minimum(up, down)).T.copy()


def mel_centers(cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    edges = np.linspace(mel(cfg.low_freq), mel(cfg.high_freq), cfg.num_bins + 2)
    return inv_mel(edges[1:-1])


def mel_edges(cfg: MfccConfig = MfccConfig()) -> tuple[np.ndarray, np.ndarray]:
    edges = inv_mel(np.linspace(mel(cfg.low_freq), mel(cfg.high_freq), cfg.num_bins + 2))
    return edges[:-2], edges[2:]


def num_frames(num_samples: int, cfg: MfccConfig = MfccConfig()) -> int:
    if num_samples < cfg.frame_length:
        return 0
    return 1 + (num_samples - cfg.frame_length) // cfg.frame_shift


def frame_signal(x: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    T = num_frames(len(x), cfg)
    idx = np.arange(T)[:, None] * cfg.frame_shift + np.arange(cfg.frame_length)[None, :]
    return x[idx]


def _log_mel_frames(frames: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    frames = np.array(frames, dtype=np.float64)
    if cfg.remove_dc:
        frames -= frames.mean(axis=1, keepdims=True)
    if cfg.preemph:
        frames[:, 1:] -= cfg.preemph * frames[:, :-1].copy()
        frames[:, 0] -= cfg.preemph * frames[:, 0]
    frames *= np.hamming(cfg.frame_length)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    energies = np.einsum("tf,fb->tb", power, _mel_bank(cfg))
    return np.log(np.maximum(energies, np.finfo(np.float32).eps))


def log_mel_energies(audio: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    return _log_mel_frames(frame_signal(np.asarray(audio, dtype=np.float64), cfg), cfg)


def _check_audio(audio, sample_rate: int, cfg: MfccConfig) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64)
    if sample_rate != cfg.sample_rate:
        if not cfg.resample:
            raise ValueError(f"expected {cfg.sample_rate} Hz audio, got {sample_rate} Hz")
        from scipy.signal import resample_poly
        from math import gcd

        g = gcd(cfg.sample_rate, sample_rate)
        audio = resample_poly(audio, cfg.sample_rate // g, sample_rate // g)
    if len(audio) < cfg.frame_length:
        raise ValueError(f"audio has {len(audio)} samples, fewer than one frame ({cfg.frame_length})")
    return audio


def compute_mfcc(audio, cfg: MfccConfig = MfccConfig(), sample_rate: int = 16000) -> np.ndarray:
    """T x 40 MFCC matrix (float32) with T = 1 + (N - 400) // 160."""
    audio = _check_audio(audio, sample_rate, cfg)
    logmel = log_mel_energies(audio, cfg)
    feats = dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.num_ceps]
    if cfg.cmn:
        feats = feats - feats.mean(axis=0, keepdims=True)
    return feats.astype(np.float32)


class MfccStream:
    """Incremental MFCC: feed samples, get the frames that became complete.

    Output matches :func:`compute_mfcc` on the concatenated input (without
    mean normalization, which needs the whole utterance).
    """

    def __init__(self, cfg: MfccConfig = MfccConfig()):
        if cfg.cmn:
            raise ValueError("per-utterance mean normalization is not available when streaming")
        self.cfg = cfg
        self._buf = np.zeros(0)

    def accept(self, samples) -> np.ndarray:
        self._buf = np.concatenate([self._buf, np.asarray(samples, dtype=np.float64)])
        T = num_frames(len(self._buf), self.cfg)
        if T == 0:
            return np.zeros((0, self.cfg.num_ceps), dtype=np.float32)
        logmel = _log_mel_frames(frame_signal(self._buf, self.cfg), self.cfg)
        self._buf = self._buf[T * self.cfg.frame_shift:]
        return dct(logmel, type=2, norm="ortho", axis=1)[:, : self.cfg.num_ceps].astype(np.float32)


# -- archive ------------------------------------------------------------------


def write_archive(path: str | Path, items) -> None:
    """``items``: iterable of (utt_id, T x D matrix).  Little-endian float32 payloads."""
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        for utt, mat in items:
            mat = np.ascontiguousarray(mat, dtype="<f4")
            if mat.ndim != 2:
                raise ValueError(f"{utt}: expected a matrix")
            key = utt.encode("utf-8")
            f.write(struct.pack("<I", len(key)) + key)
            f.write(struct.pack("<II", *mat.shape))
            f.write(mat.tobytes())


def read_archive(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature archive")
    out = {}
    pos = 8
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        utt = data[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        size = rows * cols * 4
        out[utt] = np.frombuffer(data[pos:pos + size], dtype="<f4").reshape(rows, cols).copy()
        pos += size
    return out


class FeatureCache:
    """MFCCs of manifest entries keyed by (audio file, offset, duration)."""

    def __init__(self, cfg: MfccConfig = MfccConfig()):
        self.cfg = cfg
        self._store: dict[tuple[str, float, float], np.ndarray] = {}

    def get(self, manifest, entry) -> np.ndarray:
        key = (str(manifest.audio_file(entry)), round(entry.offset_s, 6), round(entry.duration_s, 6))
        if key not in self._store:
            audio = manifest.load_audio(entry)
            if len(audio) < self.cfg.frame_length:
                audio = np.pad(audio, (0, self.cfg.frame_length - len(audio)))
            self._store[key] = compute_mfcc(audio, self.cfg)
        return self._store[key]

    def manifest(self, manifest) -> dict[str, np.ndarray]:
        return {e.utt_id: self.get(manifest, e) for e in manifest.entries}
