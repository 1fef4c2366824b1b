import math

import numpy as np
import pytest

from wakeword.decoder import (DecoderGraph, OnlineDecoder, Token, _better, advance_frame, init_decoder,
                              offline_decode, update_immortal_token)
from wakeword.fst import EPS, Wfst
from wakeword.graphs import PhoneInventory, build_decoding_graph, build_topology


def state_with(tokens):
    g = Wfst(num_states=1, start=0)
    g.set_final(0)
    st = init_decoder(g)
    st.active = {i: t for i, t in enumerate(tokens)}
    return st


class TestImmortalToken:
    def test_singleton_after_walking_back(self):
        root = Token(0, 0.0, None)
        a = Token(1, 1.0, root, frame=1)
        b = Token(2, 1.0, root, frame=1)
        st = state_with([Token(3, 2.0, a, frame=2), Token(4, 2.0, b, frame=2)])
        update_immortal_token(st)
        assert st.immortal is root

    def test_singleton_skips_non_emitting(self):
        root = Token(0, 0.0, None)
        e = Token(1, 1.0, root, frame=1)
        n1 = Token(2, 1.0, e, emitting=False, frame=1)
        n2 = Token(3, 1.5, e, emitting=False, frame=1)
        st = state_with([n1, n2])
        update_immortal_token(st)
        assert st.immortal is e

    def test_start_token_counts_as_emitting(self):
        start = Token(0, 0.0, None)
        st = state_with([Token(1, 0.0, start, emitting=False), Token(2, 0.0, start, emitting=False)])
        st.immortal = None
        update_immortal_token(st)
        assert st.immortal is start

    def test_empty_set_keeps_previous(self):
        old = Token(9, 0.0, None)
        orphan = Token(1, 0.0, None, emitting=False)
        st = state_with([orphan])
        st.immortal = old
        update_immortal_token(st)
        assert st.immortal is old

    def test_no_update_when_lineages_never_meet(self):
        old = Token(9, 0.0, None)
        a = Token(1, 0.0, Token(5, 0.0, None), frame=1)
        b = Token(2, 0.0, Token(6, 0.0, None), frame=1)
        st = state_with([a, b])
        st.immortal = old
        update_immortal_token(st)
        assert st.immortal is old


def test_tie_break_prefers_lower_predecessor_state():
    p_low = Token(1, 0.0, None)
    p_high = Token(5, 0.0, None)
    a = Token(7, 1.0, p_high)
    b = Token(7, 1.0, p_low)
    assert _better(b, a) and not _better(a, b)
    assert _better(Token(7, 0.5, p_high), b)


def test_tie_break_in_search():
    # two equal paths into state 3; the one through state 1 must win
    g = Wfst(num_states=4, start=0)
    g.add_arc(0, 2, 1)
    g.add_arc(0, 1, 1)
    g.add_arc(1, 3, 1)
    g.add_arc(2, 3, 1)
    g.set_final(3)
    st = init_decoder(g, beam=math.inf)
    advance_frame(st, np.zeros(1))
    advance_frame(st, np.zeros(1))
    assert st.active[3].prev.state == 1


def two_word_graph(cost):
    topo = build_topology(PhoneInventory(("a", "b")))
    return topo, build_decoding_graph(topo, cost)


def test_online_equals_offline_with_infinite_beam():
    rng = np.random.default_rng(0)
    topo, _ = two_word_graph(0.0)
    agree = hits = 0
    for trial in range(100):
        cost = float(rng.uniform(-2, 4))
        _, g = two_word_graph(cost)
        T = int(rng.integers(5, 60))
        scores = rng.normal(0, 1.5, size=(T, topo.num_pdfs))
        ref = offline_decode(g, scores)
        want = ref.first_wake({1, 2})
        dec = OnlineDecoder(g, {1, 2}, beam=math.inf, chunk_frames=int(rng.integers(1, 12)))
        det = dec.decode(scores)
        got = det.word if det else None
        agree += got == want
        hits += want is not None
        # continuous mode reports every wake word on the best path
        cont = OnlineDecoder(g, {1, 2}, beam=math.inf, chunk_frames=7, continuous=True)
        cont.decode(scores)
        assert [d.word for d in cont.detections] == [o for o in ref.olabels if o in (1, 2)]
    assert agree == 100
    assert 10 < hits < 90  # both outcomes are exercised


def test_offline_decode_matches_brute_force():
    g = Wfst(num_states=3, start=0)
    g.add_arc(0, 1, EPS, 7, 0.5)
    g.add_arc(1, 0, 1, EPS, 0.0)
    g.add_arc(0, 0, 2, EPS, 0.2)
    g.add_arc(0, 2, 1, EPS, 1.0)
    g.set_final(0)
    g.set_final(2)
    rng = np.random.default_rng(1)
    scores = rng.normal(size=(4, 2))
    best = offline_decode(g, scores)
    # explicit dynamic program over (state, frame) as the oracle
    table = {0: 0.0}
    for t in range(4):
        nxt = {}
        for s, c in table.items():
            moves = []
            if s == 0:
                moves += [(0, 2, 0.2), (2, 1, 1.0), (0, 1, 0.5)]  # the last is eps+arc through state 1
            for d, p, w in moves:
                v = c + w - scores[t, p - 1]
                nxt[d] = min(nxt.get(d, math.inf), v)
        table = nxt
    brute = min(table.get(0, math.inf), table.get(2, math.inf))
    assert best.cost == pytest.approx(brute)
    assert len(best.pdfs) == 4


def test_pruned_to_nothing_restarts():
    g = Wfst(num_states=2, start=0)
    g.add_arc(0, 1, 1)
    g.set_final(1)
    st = init_decoder(g)
    advance_frame(st, np.zeros(1))
    advance_frame(st, np.zeros(1))  # no arcs out of state 1
    assert list(st.active) == [0] and st.immortal.frame == 2


def test_decoder_terminal_and_reset():
    topo, g = two_word_graph(-5.0)
    wake = topo.hmm(1)
    scores = np.full((30, topo.num_pdfs), -5.0)
    for i, t in enumerate(range(5, 13, 2)):
        scores[t:t + 2, wake.fwd_pdfs[i]] = 5.0
    dec = OnlineDecoder(g, {1, 2}, chunk_frames=5)
    det = dec.decode(scores)
    assert det is not None and det.word == 1 and det.time_s == pytest.approx(det.frame * 0.03)
    with pytest.raises(RuntimeError):
        dec.process_chunk(scores[:1])
    dec.reset()
    assert dec.detections == [] and not dec.state.terminal


def test_decoder_graph_split():
    _, g = two_word_graph(1.0)
    dg = DecoderGraph.from_wfst(g)
    # SIL before, after and alone, two skips, two wake words and freetext
    assert sum(len(e) for e in dg.epsilon) == 8
    assert sum(len(e) for e in dg.emitting) == 2 * (4 + 4 + 4 + 3)
