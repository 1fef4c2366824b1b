"""Mono 16-bit PCM WAV reading and writing."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000


def read_wav(path: str | Path, offset_s: float = 0.0, duration_s: float | None = None) -> tuple[np.ndarray, int]:
    """Return float64 samples in [-1, 1) and the sample rate."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = w.getframerate()
        start = int(round(offset_s * rate))
        total = w.getnframes()
        count = total - start if duration_s is None else int(round(duration_s * rate))
        count = max(0, min(count, total - start))
        w.setpos(min(start, total))
        raw = w.readframes(count)
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path: str | Path, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def wav_duration(path: str | Path) -> float:
    with wave.open(str(path), "rb") as w:
        return w.getnframes() / w.getframerate()
