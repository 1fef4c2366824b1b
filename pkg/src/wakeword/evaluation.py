"""False rejection / false alarm scoring and operating-point sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoder import OnlineDecoder
from .features import FeatureCache
from .graphs import HmmTopology, build_decoding_graph


@dataclass(frozen=True)
class DetPoint:
    positive_cost: float
    frr_percent: float
    fah_per_hour: float


def evaluate(detections: dict, m) -> tuple[float, float]:
    """FRR (percent) and false alarms per hour of negative audio.

    ``detections`` maps utt_id to the detected wake-word index or None.
    A positive counts as detected only when the word matches its label; a
    wrong word firing inside a positive is a false alarm.
    """
    missing = [e.utt_id for e in m.entries if e.utt_id not in detections]
    if missing:
        raise ValueError(f"no decoding result for {len(missing)} utterance(s), e.g. {missing[0]!r}")
    positives = m.positives
    if not positives:
        raise ValueError("no positive utterances to score")
    hours = m.negative_hours()
    if hours <= 0:
        raise ValueError("no negative audio to score false alarms against")
    missed = 0
    false_alarms = 0
    for e in m.entries:
        det = detections[e.utt_id]
        if e.label.is_positive:
            if det != e.label.wake_word:
                missed += 1
                if det is not None:
                    false_alarms += 1
        elif det is not None:
            false_alarms += 1
    return 100.0 * missed / len(positives), false_alarms / hours


def score_manifest(model, m, cache: FeatureCache | None = None) -> dict[str, np.ndarray]:
    """LF-MMI output rows for every entry, as float64."""
    cache = cache or FeatureCache()
    return {e.utt_id: model.forward(cache.get(m, e))[0].astype(np.float64) for e in m.entries}


def decode_manifest(scores: dict[str, np.ndarray], topo: HmmTopology, positive_cost: float,
                    beam: float = 16.0, chunk_frames: int = 20) -> dict[str, int | None]:
    """First detection per utterance (wake-word index) at one operating point."""
    graph = build_decoding_graph(topo, positive_cost)
    inv = topo.inventory
    wake = [inv.wake_phone(k) for k in range(inv.num_wake)]
    out = {}
    for utt in sorted(scores):
        dec = OnlineDecoder(graph, wake, beam=beam, chunk_frames=chunk_frames)
        det = dec.decode(scores[utt])
        out[utt] = None if det is None else det.word - 1
    return out


def det_sweep(scores: dict[str, np.ndarray], topo: HmmTopology, m, cost_grid,
              beam: float = 16.0, chunk_frames: int = 20) -> list[DetPoint]:
    """One full decode per positive-path cost; points sorted by FAH."""
    costs = list(cost_grid)
    if not costs:
        raise ValueError("empty cost grid")
    points = []
    for c in costs:
        try:
            dets = decode_manifest(scores, topo, c, beam, chunk_frames)
        except Exception as exc:
            raise RuntimeError(f"decoding failed at positive cost {c}: {exc}") from exc
        frr, fah = evaluate(dets, m)
        points.append(DetPoint(float(c), frr, fah))
    return sort_points(points)


def sort_points(points: list[DetPoint]) -> list[DetPoint]:
    return sorted(points, key=lambda p: (p.fah_per_hour, -p.frr_percent, p.positive_cost))


def monotone_envelope(points: list[DetPoint]) -> list[DetPoint]:
    """Lower envelope: at each FAH the best FRR reachable without exceeding it."""
    out = []
    best = np.inf
    for p in sort_points(points):
        best = min(best, p.frr_percent)
        out.append(DetPoint(p.positive_cost, best, p.fah_per_hour))
    return out


def frr_at_fah(points: list[DetPoint], max_fah: float) -> float:
    """Best FRR among operating points with FAH <= ``max_fah`` (100 if none)."""
    ok = [p.frr_percent for p in points if p.fah_per_hour <= max_fah]
    return min(ok) if ok else 100.0


def write_det_csv(points: list[DetPoint], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cost", "frr_percent", "fah_per_hour"])
        for p in points:
            w.writerow([repr(p.positive_cost), f"{p.frr_percent:.6f}", f"{p.fah_per_hour:.6f}"])


def read_det_csv(path: str | Path) -> list[DetPoint]:
    with open(path, newline="", encoding="utf-8") as f:
        return [DetPoint(float(r["cost"]), float(r["frr_percent"]), float(r["fah_per_hour"]))
                for r in csv.DictReader(f)]


def summary(points: list[DetPoint], targets=(0.5, 1.0, 1.5)) -> str:
    lines = ["FRR(%) at FAH"]
    lines += [f"  FAH<={t:g}\t{frr_at_fah(points, t):.2f}" for t in targets]
    return "\n".join(lines) + "\n"
