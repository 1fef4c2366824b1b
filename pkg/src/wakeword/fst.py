"""Small weighted finite-state graphs with negative-log weights.

Label 0 is epsilon on both tapes.  Input labels of acoustic graphs are
``pdf_id + 1`` so that pdf 0 does not collide with epsilon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS = 0
INF = math.inf


@dataclass(frozen=True)
class Arc:
    src: int
    dst: int
    ilabel: int
    olabel: int
    weight: float


@dataclass
class Wfst:
    num_states: int = 0
    arcs: list[Arc] = field(default_factory=list)
    start: int = 0
    finals: dict[int, float] = field(default_factory=dict)

    def add_state(self) -> int:
        self.num_states += 1
        return self.num_states - 1

    def add_arc(self, src: int, dst: int, ilabel: int, olabel: int = EPS, weight: float = 0.0) -> None:
        if not (0 <= src < self.num_states and 0 <= dst < self.num_states):
            raise ValueError(f"arc {src}->{dst} refers to a missing state")
        self.arcs.append(Arc(src, dst, ilabel, olabel, float(weight)))

    def set_final(self, state: int, weight: float = 0.0) -> None:
        self.finals[state] = float(weight)

    def out_arcs(self) -> list[list[Arc]]:
        table: list[list[Arc]] = [[] for _ in range(self.num_states)]
        for a in self.arcs:
            table[a.src].append(a)
        return table

    def is_epsilon_free(self) -> bool:
        return all(a.ilabel != EPS for a in self.arcs)

    def final_weights(self) -> np.ndarray:
        fw = np.full(self.num_states, INF)
        for s, w in self.finals.items():
            fw[s] = w
        return fw

    def copy(self) -> Wfst:
        return Wfst(self.num_states, list(self.arcs), self.start, dict(self.finals))

    # -- text format -------------------------------------------------------

    def to_text(self) -> str:
        """Arc-per-line text; the start state is renumbered to 0."""
        order = [self.start] + [s for s in range(self.num_states) if s != self.start]
        remap = {s: i for i, s in enumerate(order)}
        lines = []
        for a in sorted(self.arcs, key=lambda a: (remap[a.src], remap[a.dst], a.ilabel, a.olabel)):
            lines.append(f"{remap[a.src]}\t{remap[a.dst]}\t{a.ilabel}\t{a.olabel}\t{_fmt(a.weight)}")
        for s in sorted(self.finals, key=remap.get):
            lines.append(f"{remap[s]}\t{_fmt(self.finals[s])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Wfst:
        g = cls()
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 5):
                raise ValueError(f"line {lineno}: expected 2 or 5 fields, got {len(parts)}")
            rows.append(parts)
        top = 0
        for p in rows:
            top = max(top, int(p[0]), int(p[1]) if len(p) == 5 else 0)
        g.num_states = top + 1 if rows else 1
        for p in rows:
            if len(p) == 5:
                g.add_arc(int(p[0]), int(p[1]), int(p[2]), int(p[3]), float(p[4]))
            else:
                g.set_final(int(p[0]), float(p[1]))
        return g

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> Wfst:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _fmt(w: float) -> str:
    return "inf" if w == INF else repr(float(w))


def _logadd(a: float, b: float) -> float:
    """-log(exp(-a) + exp(-b)) for negative-log weights."""
    if a == INF:
        return b
    if b == INF:
        return a
    m = min(a, b)
    return m - math.log1p(math.exp(-abs(a - b)))


def reachable(g: Wfst) -> np.ndarray:
    seen = np.zeros(g.num_states, dtype=bool)
    if g.num_states == 0:
        return seen
    table = g.out_arcs()
    stack = [g.start]
    seen[g.start] = True
    while stack:
        s = stack.pop()
        for a in table[s]:
            if not seen[a.dst]:
                seen[a.dst] = True
                stack.append(a.dst)
    return seen


def coreachable(g: Wfst) -> np.ndarray:
    seen = np.zeros(g.num_states, dtype=bool)
    into: list[list[int]] = [[] for _ in range(g.num_states)]
    for a in g.arcs:
        into[a.dst].append(a.src)
    stack = [s for s, w in g.finals.items() if w < INF]
    for s in stack:
        seen[s] = True
    while stack:
        s = stack.pop()
        for p in into[s]:
            if not seen[p]:
                seen[p] = True
                stack.append(p)
    return seen


def connect(g: Wfst) -> Wfst:
    """Drop states that are not on any start-to-final path and renumber."""
    if g.num_states == 0:
        return Wfst(num_states=1, start=0)
    keep = reachable(g) & coreachable(g)
    if not keep[g.start]:
        return Wfst(num_states=1, start=0)
    remap = -np.ones(g.num_states, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    out = Wfst(num_states=int(keep.sum()), start=int(remap[g.start]))
    for a in g.arcs:
        if keep[a.src] and keep[a.dst] and a.weight < INF:
            out.arcs.append(Arc(int(remap[a.src]), int(remap[a.dst]), a.ilabel, a.olabel, a.weight))
    for s, w in g.finals.items():
        if keep[s] and w < INF:
            out.finals[int(remap[s])] = w
    return out


def rm_epsilon(g: Wfst) -> Wfst:
    """Epsilon removal in the log semiring.

    The epsilon closure is the matrix (I - E)^-1 with E holding the
    probabilities of epsilon arcs, which is exact provided every epsilon
    cycle has positive weight.  Epsilon arcs must not carry output labels.
    """
    n = g.num_states
    eps = [a for a in g.arcs if a.ilabel == EPS]
    if not eps:
        return connect(g.copy())
    if any(a.olabel != EPS for a in eps):
        raise ValueError("epsilon arcs with output labels cannot be removed")
    E = np.zeros((n, n))
    for a in eps:
        E[a.src, a.dst] += math.exp(-a.weight)
    K = np.linalg.inv(np.eye(n) - E)
    if np.any(K < -1e-12) or not np.all(np.isfinite(K)):
        raise ValueError("epsilon cycles with non-positive weight")
    out = Wfst(num_states=n, start=g.start)
    table = g.out_arcs()
    merged: dict[tuple[int, int, int, int], float] = {}
    for s in range(n):
        for q in np.nonzero(K[s] > 0)[0]:
            d = -math.log(K[s, q])
            for a in table[q]:
                if a.ilabel == EPS:
                    continue
                key = (s, a.dst, a.ilabel, a.olabel)
                merged[key] = _logadd(merged.get(key, INF), d + a.weight)
            if q in g.finals:
                out.finals[s] = _logadd(out.finals.get(s, INF), d + g.finals[q])
    for (s, t, il, ol), w in merged.items():
        out.arcs.append(Arc(s, t, il, ol, w))
    return connect(out)


def intersect(a: Wfst, b: Wfst) -> Wfst:
    """Product of two epsilon-free acceptors on input labels (weights add).

    Output labels are taken from ``a``.
    """
    if not (a.is_epsilon_free() and b.is_epsilon_free()):
        raise ValueError("intersect requires epsilon-free operands")
    ta, tb = a.out_arcs(), b.out_arcs()
    ids: dict[tuple[int, int], int] = {(a.start, b.start): 0}
    out = Wfst(num_states=1, start=0)
    queue = [(a.start, b.start)]
    while queue:
        sa, sb = queue.pop(0)
        sid = ids[(sa, sb)]
        if sa in a.finals and sb in b.finals:
            out.finals[sid] = a.finals[sa] + b.finals[sb]
        for x in ta[sa]:
            for y in tb[sb]:
                if x.ilabel != y.ilabel:
                    continue
                key = (x.dst, y.dst)
                if key not in ids:
                    ids[key] = out.add_state()
                    queue.append(key)
                out.arcs.append(Arc(sid, ids[key], x.ilabel, x.olabel, x.weight + y.weight))
    return connect(out)


def validate(g: Wfst) -> None:
    """Raise ValueError unless the graph is trim with finite arc weights."""
    if g.num_states == 0:
        raise ValueError("graph has no states")
    if not (0 <= g.start < g.num_states):
        raise ValueError("start state out of range")
    if not g.finals:
        raise ValueError("graph has no final states")
    for a in g.arcs:
        if not math.isfinite(a.weight):
            raise ValueError(f"non-finite weight on arc {a}")
    bad = ~(reachable(g) & coreachable(g))
    if bad.any():
        raise ValueError(f"states not on a successful path: {np.nonzero(bad)[0].tolist()}")
    _check_epsilon_cycles(g)


def _check_epsilon_cycles(g: Wfst) -> None:
    # Bellman-Ford style relaxation over the epsilon subgraph: a cycle with
    # total weight <= 0 keeps lowering distances forever.
    eps = [a for a in g.arcs if a.ilabel == EPS]
    if not eps:
        return
    dist = np.zeros(g.num_states)
    for _ in range(g.num_states):
        changed = False
        for a in eps:
            if dist[a.src] + a.weight < dist[a.dst] - 1e-15:
                dist[a.dst] = dist[a.src] + a.weight
                changed = True
        if not changed:
            break
    else:
        raise ValueError("negative-weight epsilon cycle")
    # Zero-weight epsilon cycles: look for a cycle in the subgraph of
    # arcs that are tight under the potentials.
    tight = [(a.src, a.dst) for a in eps if abs(dist[a.src] + a.weight - dist[a.dst]) <= 1e-15]
    adj: dict[int, list[int]] = {}
    for s, t in tight:
        adj.setdefault(s, []).append(t)
    color = np.zeros(g.num_states, dtype=np.int8)

    def visit(s: int) -> None:
        color[s] = 1
        for t in adj.get(s, []):
            if color[t] == 1:
                raise ValueError("zero-weight epsilon cycle")
            if color[t] == 0:
                visit(t)
        color[s] = 2

    for s in list(adj):
        if color[s] == 0:
            visit(s)


# -- compiled form used by numerical kernels ---------------------------------


@dataclass(frozen=True)
class CompiledGraph:
    """Epsilon-free graph as flat arrays, arcs pre-sorted for segmented reductions."""

    num_states: int
    start: int
    src: np.ndarray
    dst: np.ndarray
    pdf: np.ndarray
    weight: np.ndarray
    final: np.ndarray
    # arcs ordered by destination / source, with segment starts for reduceat
    by_dst: np.ndarray
    dst_starts: np.ndarray
    dst_states: np.ndarray
    by_src: np.ndarray
    src_starts: np.ndarray
    src_states: np.ndarray

    @property
    def num_arcs(self) -> int:
        return len(self.src)


def _segments(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    if len(sk) == 0:
        return order, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    starts = np.concatenate([[0], np.nonzero(np.diff(sk))[0] + 1])
    return order, starts, sk[starts]


def compile_graph(g: Wfst) -> CompiledGraph:
    if not g.is_epsilon_free():
        raise ValueError("numerical kernels need an epsilon-free graph")
    if not g.arcs:
        raise ValueError("graph has no arcs")
    src = np.array([a.src for a in g.arcs], dtype=np.int64)
    dst = np.array([a.dst for a in g.arcs], dtype=np.int64)
    pdf = np.array([a.ilabel - 1 for a in g.arcs], dtype=np.int64)
    w = np.array([a.weight for a in g.arcs], dtype=np.float64)
    by_dst, dst_starts, dst_states = _segments(dst)
    by_src, src_starts, src_states = _segments(src)
    return CompiledGraph(
        num_states=g.num_states,
        start=g.start,
        src=src,
        dst=dst,
        pdf=pdf,
        weight=w,
        final=g.final_weights(),
        by_dst=by_dst,
        dst_starts=dst_starts,
        dst_states=dst_states,
        by_src=by_src,
        src_starts=src_starts,
        src_states=src_states,
    )


def accepts(g: Wfst, ilabels) -> bool:
    """Whether some successful path reads exactly ``ilabels`` (epsilons skipped)."""
    table = g.out_arcs()

    def closure(states: set[int]) -> set[int]:
        stack = list(states)
        seen = set(states)
        while stack:
            s = stack.pop()
            for a in table[s]:
                if a.ilabel == EPS and a.weight < INF and a.dst not in seen:
                    seen.add(a.dst)
                    stack.append(a.dst)
        return seen

    current = closure({g.start})
    for lab in ilabels:
        current = closure({a.dst for s in current for a in table[s] if a.ilabel == lab and a.weight < INF})
        if not current:
            return False
    return any(s in g.finals and g.finals[s] < INF for s in current)
