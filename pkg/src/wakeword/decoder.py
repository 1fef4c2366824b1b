"""Online token-passing Viterbi decoding with immortal-token backtracking.

Tokens live on graph states; every token keeps a link to its predecessor,
so the surviving hypotheses form a tree.  After each chunk the decoder
finds the most recent token shared by all active hypotheses (the immortal
token) and inspects the newly settled stretch of the best path for a
wake word.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fst import EPS, Wfst
from .lfmmi import NoPathError

log = logging.getLogger(__name__)

FRAME_SECONDS = 0.03  # one subsampled frame


class Token:
    __slots__ = ("state", "cost", "prev", "olabel", "emitting", "frame")

    def __init__(self, state: int, cost: float, prev: Token | None, olabel: int = EPS,
                 emitting: bool = True, frame: int = 0):
        self.state = state
        self.cost = cost
        self.prev = prev
        self.olabel = olabel
        self.emitting = emitting
        self.frame = frame

    def __repr__(self) -> str:
        kind = "E" if self.emitting else "N"
        return f"Token({kind} s={self.state} f={self.frame} cost={self.cost:.3f} out={self.olabel})"


def last_emitting(tok: Token | None) -> Token | None:
    while tok is not None and not tok.emitting:
        tok = tok.prev
    return tok


@dataclass
class Detection:
    word: int
    frame: int

    @property
    def time_s(self) -> float:
        return self.frame * FRAME_SECONDS


@dataclass
class DecoderGraph:
    """Decoding graph split into per-state emitting and epsilon arc lists."""

    num_states: int
    start: int
    emitting: list[list[tuple[int, int, float, int]]]  # (dst, pdf, weight, olabel)
    epsilon: list[list[tuple[int, float, int]]]  # (dst, weight, olabel)
    final: list[float]

    @classmethod
    def from_wfst(cls, g: Wfst) -> DecoderGraph:
        em = [[] for _ in range(g.num_states)]
        ep = [[] for _ in range(g.num_states)]
        for a in g.arcs:
            if a.ilabel == EPS:
                ep[a.src].append((a.dst, a.weight, a.olabel))
            else:
                em[a.src].append((a.dst, a.ilabel - 1, a.weight, a.olabel))
        final = [g.finals.get(s, math.inf) for s in range(g.num_states)]
        return cls(g.num_states, g.start, em, ep, final)


@dataclass
class DecoderState:
    graph: DecoderGraph
    active: dict[int, Token] = field(default_factory=dict)
    immortal: Token | None = None
    prev_immortal: Token | None = None
    frame_index: int = 0
    beam: float = 16.0
    chunk_frames: int = 20
    max_active: int = 2000
    terminal: bool = False


def _better(new: Token, old: Token | None) -> bool:
    if old is None or new.cost < old.cost:
        return True
    if new.cost > old.cost:
        return False
    # equal cost: the predecessor with the lower state id wins
    ns = new.prev.state if new.prev is not None else -1
    os_ = old.prev.state if old.prev is not None else -1
    return ns < os_


def _close_epsilon(st: DecoderState, tokens: dict[int, Token]) -> None:
    g = st.graph
    work = sorted(tokens)
    while work:
        s = work.pop(0)
        tok = tokens[s]
        for dst, w, olabel in g.epsilon[s]:
            cand = Token(dst, tok.cost + w, tok, olabel, False, tok.frame)
            if _better(cand, tokens.get(dst)):
                tokens[dst] = cand
                if dst not in work:
                    work.append(dst)


def _prune(st: DecoderState, tokens: dict[int, Token]) -> dict[int, Token]:
    if not tokens:
        return tokens
    best = min(t.cost for t in tokens.values())
    cutoff = best + st.beam
    kept = {s: t for s, t in tokens.items() if t.cost <= cutoff}
    if len(kept) > st.max_active:
        order = sorted(kept.items(), key=lambda kv: (kv[1].cost, kv[0]))[: st.max_active]
        kept = dict(order)
    return kept


def init_decoder(graph, beam: float = 16.0, chunk_frames: int = 20, max_active: int = 2000) -> DecoderState:
    g = graph if isinstance(graph, DecoderGraph) else DecoderGraph.from_wfst(graph)
    st = DecoderState(g, beam=beam, chunk_frames=chunk_frames, max_active=max_active)
    reset(st)
    return st


def reset(st: DecoderState) -> None:
    start = Token(st.graph.start, 0.0, None, EPS, True, 0)
    tokens = {start.state: start}
    _close_epsilon(st, tokens)
    st.active = _prune(st, tokens)
    st.immortal = start
    st.prev_immortal = start
    st.frame_index = 0
    st.terminal = False


def advance_frame(st: DecoderState, scores_row) -> None:
    """Consume one frame of scores: emitting arcs, epsilon closure, pruning."""
    row = scores_row.tolist() if isinstance(scores_row, np.ndarray) else list(scores_row)
    g = st.graph
    frame = st.frame_index + 1
    new: dict[int, Token] = {}
    for s in sorted(st.active):
        tok = st.active[s]
        for dst, pdf, w, olabel in g.emitting[s]:
            cand = Token(dst, tok.cost + w - row[pdf], tok, olabel, True, frame)
            if _better(cand, new.get(dst)):
                new[dst] = cand
    new = _prune(st, new)
    _close_epsilon(st, new)
    new = _prune(st, new)
    st.frame_index = frame
    if not new:
        log.warning("all tokens pruned at frame %d; restarting from the start state", frame)
        start = Token(g.start, 0.0, None, EPS, True, frame)
        new = {start.state: start}
        _close_epsilon(st, new)
        st.immortal = start
        st.prev_immortal = start
    st.active = new


def update_immortal_token(st: DecoderState) -> None:
    """Make ``st.immortal`` the newest common emitting ancestor of all active tokens."""
    emitting = set()
    for tok in st.active.values():
        tok = last_emitting(tok)
        if tok is not None:
            emitting.add(tok)
    token_one = None
    while True:
        if len(emitting) == 1:
            token_one = next(iter(emitting))
            break
        if not emitting:
            break
        prev_emitting = set()
        for tok in emitting:
            prev = last_emitting(tok.prev)
            if prev is None:
                continue
            prev_emitting.add(prev)
        emitting = prev_emitting
    if token_one is not None:
        st.immortal = token_one


def _segment(newest: Token | None, stop: Token | None) -> list[Token]:
    """Tokens from just after ``stop`` up to ``newest``, oldest first."""
    out = []
    tok = newest
    while tok is not None and tok is not stop:
        out.append(tok)
        tok = tok.prev
    out.reverse()
    return out


def _first_wake(tokens: list[Token], wake_words) -> Detection | None:
    for tok in tokens:
        if tok.olabel in wake_words:
            return Detection(tok.olabel, tok.frame)
    return None


class OnlineDecoder:
    """Chunked wake-word detection over rows of acoustic scores."""

    def __init__(self, graph, wake_words, beam: float = 16.0, chunk_frames: int = 20,
                 max_active: int = 2000, continuous: bool = False):
        self.state = init_decoder(graph, beam, chunk_frames, max_active)
        self.wake_words = frozenset(wake_words)
        self.continuous = continuous
        self.detections: list[Detection] = []

    def reset(self) -> None:
        reset(self.state)
        self.detections = []

    def process_chunk(self, rows) -> Detection | None:
        st = self.state
        if st.terminal:
            raise RuntimeError("decoder already triggered; call reset() first")
        for row in rows:
            advance_frame(st, row)
        update_immortal_token(st)
        seg = _segment(st.immortal, st.prev_immortal)
        if st.immortal is not st.prev_immortal:
            st.prev_immortal = st.immortal
            # older history is never inspected again
            st.immortal.prev = None
        return self._check(seg)

    def finish(self) -> Detection | None:
        """End of stream: inspect the unsettled tail of the best final hypothesis."""
        st = self.state
        if st.terminal:
            raise RuntimeError("decoder already triggered; call reset() first")
        g = st.graph
        best = None
        best_cost = math.inf
        for s in sorted(st.active):
            tok = st.active[s]
            c = tok.cost + g.final[s]
            if c < best_cost:
                best, best_cost = tok, c
        if best is None:
            best = min(st.active.values(), key=lambda t: t.cost)
        det = self._check(_segment(best, st.prev_immortal))
        st.terminal = True
        return det

    def _check(self, seg: list[Token]) -> Detection | None:
        det = _first_wake(seg, self.wake_words)
        if det is None:
            return None
        if self.continuous:
            # a settled stretch can hold several words
            self.detections += [Detection(t.olabel, t.frame) for t in seg if t.olabel in self.wake_words]
        else:
            self.detections.append(det)
            self.state.terminal = True
        return det

    def decode(self, scores: np.ndarray) -> Detection | None:
        """Run a whole score matrix chunk by chunk; first detection or None."""
        n = self.state.chunk_frames
        for i in range(0, len(scores), n):
            det = self.process_chunk(scores[i:i + n])
            if det is not None and not self.continuous:
                return det
        det = self.finish()
        if self.continuous:
            return self.detections[0] if self.detections else None
        return det


# -- offline reference ----------------------------------------------------------


@dataclass
class BestPath:
    cost: float
    states: list[int]
    olabels: list[int]
    pdfs: list[int]

    def first_wake(self, wake_words) -> int | None:
        for o in self.olabels:
            if o in wake_words:
                return o
        return None


def offline_decode(graph: Wfst, scores: np.ndarray) -> BestPath:
    """Exact Viterbi over the whole matrix, epsilon arcs included."""
    g = DecoderGraph.from_wfst(graph)
    scores = np.asarray(scores, dtype=np.float64)
    S = g.num_states
    # back[t][s] = (prev_t, prev_s, pdf, olabel) for the best way into (t, s)
    cost = [math.inf] * S
    cost[g.start] = 0.0
    back: list[list[tuple | None]] = [[None] * S]
    _relax_epsilon(g, cost, back[0], 0)
    for t in range(len(scores)):
        row = scores[t]
        new = [math.inf] * S
        bp: list[tuple | None] = [None] * S
        for s in range(S):
            if cost[s] == math.inf:
                continue
            for dst, pdf, w, olabel in g.emitting[s]:
                c = cost[s] + w - row[pdf]
                if c < new[dst]:
                    new[dst] = c
                    bp[dst] = (t, s, pdf, olabel)
        _relax_epsilon(g, new, bp, t + 1)
        cost = new
        back.append(bp)
    T = len(scores)
    finals = [cost[s] + g.final[s] for s in range(S)]
    s = int(np.argmin(finals))
    if finals[s] == math.inf:
        raise NoPathError(f"no path of length {T} through the decoding graph")
    states, olabels, pdfs = [s], [], []
    t = T
    while back[t][s] is not None:
        pt, ps, pdf, olabel = back[t][s]
        if olabel != EPS:
            olabels.append(olabel)
        if pdf is not None:
            pdfs.append(pdf)
        t, s = pt, ps
        states.append(s)
    return BestPath(finals[states[0]], states[::-1], olabels[::-1], pdfs[::-1])


def _relax_epsilon(g: DecoderGraph, cost: list[float], bp: list, t: int) -> None:
    changed = True
    while changed:
        changed = False
        for s in range(g.num_states):
            if cost[s] == math.inf:
                continue
            for dst, w, olabel in g.epsilon[s]:
                c = cost[s] + w
                if c < cost[dst]:
                    cost[dst] = c
                    bp[dst] = (t, s, None, olabel)
                    changed = True
