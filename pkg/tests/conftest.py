import itertools
import math

import numpy as np
import pytest

from wakeword.fst import EPS, Wfst
from wakeword.toy import synth_toy


def random_graph(rng: np.random.Generator, max_states: int = 6, num_pdfs: int = 4,
                 arc_prob: float = 0.35) -> Wfst:
    """Random epsilon-free acceptor over pdf labels 1..num_pdfs."""
    n = int(rng.integers(1, max_states + 1))
    g = Wfst(num_states=n, start=0)
    for s, d in itertools.product(range(n), range(n)):
        for p in range(num_pdfs):
            if rng.random() < arc_prob / num_pdfs * 2:
                g.add_arc(s, d, p + 1, EPS, float(rng.uniform(0, 2)))
    if not g.arcs:
        g.add_arc(0, 0, 1, EPS, 0.5)
    for s in range(n):
        if rng.random() < 0.5:
            g.set_final(s, float(rng.uniform(0, 1)))
    if not g.finals:
        g.set_final(n - 1, 0.0)
    return g


def enumerate_paths(g: Wfst, T: int):
    """All (log score contribution without acoustics, arcs) of length T ending in a final state."""
    table = g.out_arcs()
    out = []

    def walk(s, t, arcs):
        if t == T:
            if s in g.finals:
                out.append(list(arcs))
            return
        for a in table[s]:
            arcs.append(a)
            walk(a.dst, t + 1, arcs)
            arcs.pop()

    walk(g.start, 0, [])
    return out


def enumeration_oracle(g: Wfst, scores: np.ndarray):
    """log total and (T, P) occupancies by brute force; None when no path exists."""
    T, P = scores.shape
    paths = enumerate_paths(g, T)
    if not paths:
        return None
    logs = np.array([sum(scores[t, a.ilabel - 1] - a.weight for t, a in enumerate(p)) - g.finals[p[-1].dst]
                     if p else -g.finals[g.start] for p in paths])
    m = logs.max()
    total = m + math.log(np.exp(logs - m).sum())
    post = np.exp(logs - total)
    gamma = np.zeros((T, P))
    for w, p in zip(post, paths):
        for t, a in enumerate(p):
            gamma[t, a.ilabel - 1] += w
    return total, gamma, paths, logs


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """A small synthetic corpus shared by the slower tests."""
    d = tmp_path_factory.mktemp("toy")
    train = synth_toy(d / "train", 24, 40, seed=1)
    dev = synth_toy(d / "dev", 6, 10, seed=2, prefix="dev")
    return train, dev


def synthetic_manifest(rng: np.random.Generator, n_pos: int = 400, n_neg: int = 300, neg_s: float = 60.0):
    """Audio-free manifest with lognormal positive durations, for chunking checks."""
    from wakeword.corpus import NEGATIVE, Entry, Manifest, positive

    entries = [Entry(f"p{i}", "p.wav", positive(0), 0.0, round(float(2.0 * np.exp(0.2 * rng.standard_normal())), 4))
               for i in range(n_pos)]
    entries += [Entry(f"n{i}", f"n{i}.wav", NEGATIVE, 1.5, float(neg_s * rng.uniform(0.5, 1.5)))
                for i in range(n_neg)]
    return Manifest(entries, 1)


def subsegment_report(m, sub, rate: int = 16000) -> dict:
    """Overlap, chunk-length KS distance and coverage of a sub-segmented manifest."""
    pos = np.sort([round(e.duration_s * rate) for e in m.positives])
    chunks = {e.utt_id: [] for e in m.negatives}
    for e in sub.negatives:
        chunks[e.utt_id.rsplit("-", 1)[0]].append(e)
    overlaps, lengths, interior, covered = [], [], [], True
    for src in m.negatives:
        cs = chunks[src.utt_id]
        a = [round((c.offset_s - src.offset_s) * rate) for c in cs]
        b = [x + round(c.duration_s * rate) for x, c in zip(a, cs)]
        end = round(src.duration_s * rate)
        covered &= a[0] == 0 and b[-1] == end and all(b[i] > a[i + 1] for i in range(len(cs) - 1))
        overlaps += [b[i] - a[i + 1] for i in range(len(cs) - 1)]
        lengths += [y - x for x, y in zip(a, b)]
        interior += [y - x for x, y in zip(a[:-1], b[:-1])]

    def ks(sample):
        s = np.sort(sample)
        grid = np.union1d(s, pos)
        f1 = np.searchsorted(s, grid, side="right") / len(s)
        f2 = np.searchsorted(pos, grid, side="right") / len(pos)
        return float(np.max(np.abs(f1 - f2)))

    return {"overlaps": np.array(overlaps), "num_chunks": len(lengths), "ks_all": ks(lengths),
            "ks_interior": ks(interior), "covered": bool(covered)}


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
