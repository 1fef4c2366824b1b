import numpy as np
import pytest
from hypothesis import given, strategies as st

from wakeword.corpus import NEGATIVE, Entry, Manifest, positive
from wakeword.evaluation import (DetPoint, decode_manifest, det_sweep, evaluate, frr_at_fah, monotone_envelope,
                                 read_det_csv, summary, write_det_csv)
from wakeword.graphs import PhoneInventory, build_topology


def manifest():
    es = [Entry(f"p{i}", "x.wav", positive(i % 2), 0.0, 1.0) for i in range(4)]
    es += [Entry(f"n{i}", "x.wav", NEGATIVE, 0.0, 900.0) for i in range(4)]  # one hour of negatives
    return Manifest(es, 2)


def test_evaluate_counts():
    m = manifest()
    dets = {"p0": 0, "p1": 1, "p2": None, "p3": 0, "n0": None, "n1": 0, "n2": None, "n3": 1}
    frr, fah = evaluate(dets, m)
    # p2 missed; p3 fired the wrong word: a miss and a false alarm
    assert frr == 50.0 and fah == 3.0


def test_evaluate_errors():
    m = manifest()
    with pytest.raises(ValueError, match="no decoding result"):
        evaluate({}, m)
    with pytest.raises(ValueError, match="no positive"):
        evaluate({"n": None}, Manifest([Entry("n", "x", NEGATIVE, 0, 1.0)]))
    with pytest.raises(ValueError, match="no negative"):
        evaluate({"p": 0}, Manifest([Entry("p", "x", positive(0), 0, 1.0)]))


points_strategy = st.lists(st.tuples(st.floats(0, 100), st.floats(0, 50)), min_size=1, max_size=30)


@given(points_strategy)
def test_envelope_is_monotone(raw):
    pts = [DetPoint(float(i), f, a) for i, (f, a) in enumerate(raw)]
    env = monotone_envelope(pts)
    fah = [p.fah_per_hour for p in env]
    frr = [p.frr_percent for p in env]
    assert fah == sorted(fah)
    assert all(a >= b for a, b in zip(frr, frr[1:]))
    assert min(frr) == min(f for f, _ in raw)


def test_frr_at_fah_and_summary():
    pts = [DetPoint(0, 20.0, 0.2), DetPoint(1, 5.0, 0.9), DetPoint(2, 1.0, 3.0)]
    assert frr_at_fah(pts, 1.0) == 5.0 and frr_at_fah(pts, 0.1) == 100.0
    assert "FAH<=1\t5.00" in summary(pts)


def test_csv_round_trip(tmp_path):
    pts = [DetPoint(-0.5, 12.5, 0.25), DetPoint(0.1, 0.0, 7.0)]
    write_det_csv(pts, tmp_path / "d.csv")
    assert read_det_csv(tmp_path / "d.csv") == pts


def test_sweep_on_synthetic_scores():
    topo = build_topology(PhoneInventory())
    wake, free = topo.hmm(1), topo.hmm(2)
    rng = np.random.default_rng(0)

    def rows(h, strength):
        x = rng.normal(0, 0.3, size=(24, topo.num_pdfs))
        for i in range(4):
            x[4 + 4 * i:8 + 4 * i, h.fwd_pdfs[i]] += strength
        return x

    m = Manifest([Entry(f"p{i}", "x", positive(0), 0, 1.0) for i in range(10)]
                 + [Entry(f"n{i}", "x", NEGATIVE, 0, 360.0) for i in range(10)], 1)
    # positives have wake evidence of growing strength; negatives are freetext
    scores = {f"p{i}": rows(wake, 0.5 * i) for i in range(10)}
    scores |= {f"n{i}": rows(free, 2.0) for i in range(10)}
    dets = decode_manifest(scores, topo, 0.0)
    assert dets["p9"] == 0 and dets["n0"] is None
    pts = det_sweep(scores, topo, m, np.arange(-20, 21, 2.0))
    assert len(pts) == 21
    env = monotone_envelope(pts)
    assert env[0].frr_percent == max(p.frr_percent for p in env)
    with pytest.raises(ValueError):
        det_sweep(scores, topo, m, [])
