"""HMM topologies and the graphs built from them.

Every phone is a whole-unit HMM: one per wake word, one ``freetext`` unit
for all other speech and one ``SIL`` unit for non-speech.  Emitting states
are left-to-right; each has a self-loop and a forward transition and each
transition owns its own pdf id.  The forward transition out of the last
emitting state leaves the phone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .fst import EPS, Arc, Wfst, connect, intersect, rm_epsilon, validate

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class PhoneInventory:
    wake_words: tuple[str, ...] = ("wake",)
    freetext: str = "freetext"
    sil: str = "SIL"

    def __post_init__(self):
        if not self.wake_words:
            raise ValueError("at least one wake word is required")
        names = list(self.wake_words) + [self.freetext, self.sil]
        if len(set(names)) != len(names):
            raise ValueError(f"phone names must be distinct: {names}")

    @property
    def num_wake(self) -> int:
        return len(self.wake_words)

    @property
    def names(self) -> list[str]:
        return list(self.wake_words) + [self.freetext, self.sil]

    # Phone ids double as word ids; 0 is epsilon.
    def wake_phone(self, k: int) -> int:
        if not 0 <= k < self.num_wake:
            raise ValueError(f"wake word index {k} out of range")
        return k + 1

    @property
    def freetext_phone(self) -> int:
        return self.num_wake + 1

    @property
    def sil_phone(self) -> int:
        return self.num_wake + 2

    @property
    def phones(self) -> list[int]:
        return list(range(1, self.num_wake + 3))

    def is_wake(self, phone: int) -> bool:
        return 1 <= phone <= self.num_wake

    def name(self, phone: int) -> str:
        return self.names[phone - 1]


@dataclass(frozen=True)
class PhoneHmm:
    phone: int
    self_pdfs: tuple[int, ...]
    fwd_pdfs: tuple[int, ...]

    @property
    def num_states(self) -> int:
        return len(self.self_pdfs)


@dataclass(frozen=True)
class HmmTopology:
    inventory: PhoneInventory
    hmms: tuple[PhoneHmm, ...]
    self_loop_prob: float = 0.5

    @property
    def num_pdfs(self) -> int:
        return 2 * sum(h.num_states for h in self.hmms)

    @property
    def num_emitting_states(self) -> int:
        return sum(h.num_states for h in self.hmms)

    def hmm(self, phone: int) -> PhoneHmm:
        return self.hmms[phone - 1]

    def pdf_info(self, pdf: int) -> tuple[int, int, str]:
        """(phone, emitting state, 'self' | 'fwd') for a pdf id."""
        for h in self.hmms:
            if pdf in h.self_pdfs:
                return h.phone, h.self_pdfs.index(pdf), "self"
            if pdf in h.fwd_pdfs:
                return h.phone, h.fwd_pdfs.index(pdf), "fwd"
        raise KeyError(pdf)

    def pdf_phone(self) -> list[int]:
        out = [0] * self.num_pdfs
        for h in self.hmms:
            for p in h.self_pdfs + h.fwd_pdfs:
                out[p] = h.phone
        return out

    @property
    def self_weight(self) -> float:
        return -math.log(self.self_loop_prob)

    @property
    def fwd_weight(self) -> float:
        return -math.log(1.0 - self.self_loop_prob)


def build_topology(inventory: PhoneInventory, word_states: int = 4, sil_states: int = 1) -> HmmTopology:
    if word_states < 1 or sil_states < 1:
        raise ValueError("every HMM needs at least one emitting state")
    hmms = []
    next_pdf = 0
    for phone in inventory.phones:
        n = sil_states if phone == inventory.sil_phone else word_states
        self_pdfs, fwd_pdfs = [], []
        for _ in range(n):
            self_pdfs.append(next_pdf)
            fwd_pdfs.append(next_pdf + 1)
            next_pdf += 2
        hmms.append(PhoneHmm(phone, tuple(self_pdfs), tuple(fwd_pdfs)))
    return HmmTopology(inventory, tuple(hmms))


def build_phone_lm(
    inventory: PhoneInventory,
    num_pos: int,
    num_neg: int,
    sil_only_prob: float = 0.01,
    optional_sil_prob: float = 0.5,
) -> Wfst:
    """Phone-level prior: [SIL] (wake_k | freetext) [SIL], or SIL alone.

    Branch probabilities follow the positive/negative example counts; the
    positive mass is split evenly over wake words and the SIL-only branch
    takes ``sil_only_prob`` out of the negative mass.
    """
    if num_pos < 1 or num_neg < 1:
        raise ValueError("phone LM needs at least one positive and one negative example")
    total = num_pos + num_neg
    p_neg = num_neg / total
    if not 0.0 < sil_only_prob < p_neg:
        raise ValueError("sil_only_prob must be positive and below the negative mass")
    p_wake = num_pos / total / inventory.num_wake
    p_free = p_neg - sil_only_prob
    q = optional_sil_prob
    sil = inventory.sil_phone

    g = Wfst(num_states=5, start=0)
    g.add_arc(0, 1, sil, sil, -math.log(q))
    g.add_arc(0, 1, EPS, EPS, -math.log(1 - q))
    for k in range(inventory.num_wake):
        ph = inventory.wake_phone(k)
        g.add_arc(1, 2, ph, ph, -math.log(p_wake))
    g.add_arc(1, 2, inventory.freetext_phone, inventory.freetext_phone, -math.log(p_free))
    g.add_arc(2, 3, sil, sil, -math.log(q))
    g.add_arc(2, 3, EPS, EPS, -math.log(1 - q))
    g.set_final(3)
    g.add_arc(0, 4, sil, sil, -math.log(sil_only_prob))
    g.set_final(4)
    return g


def transcript_acceptor(label, inventory: PhoneInventory) -> Wfst:
    """SIL* X SIL* where X is the label's phone; the phone LM bounds the SILs."""
    phone = label_phone(label, inventory)
    sil = inventory.sil_phone
    g = Wfst(num_states=2, start=0)
    g.add_arc(0, 0, sil, sil)
    g.add_arc(0, 1, phone, phone)
    g.add_arc(1, 1, sil, sil)
    g.set_final(1)
    return g


def label_phone(label, inventory: PhoneInventory) -> int:
    if label.is_positive:
        return inventory.wake_phone(label.wake_word)
    return inventory.freetext_phone


def expand(phone_graph: Wfst, topo: HmmTopology) -> Wfst:
    """Replace phone arcs by HMM paths (product with the HMM transducer).

    ``phone_graph`` must be epsilon-free.  HMM states are shared between
    phone arcs that have the same phone and destination, which is what a
    composition with the per-phone HMM transducer yields.  The phone-arc
    weight goes on the first pdf arc; output labels are dropped.
    """
    if not phone_graph.is_epsilon_free():
        raise ValueError("expand needs an epsilon-free phone graph")
    out = Wfst(num_states=phone_graph.num_states, start=phone_graph.start,
               finals=dict(phone_graph.finals))
    chain: dict[tuple[int, int, int], int] = {}
    sw, fw = topo.self_weight, topo.fwd_weight

    def hmm_state(dst: int, phone: int, i: int) -> int:
        n = topo.hmm(phone).num_states
        if i == n:
            return dst
        key = (dst, phone, i)
        if key not in chain:
            chain[key] = out.add_state()
            h = topo.hmm(phone)
            s = chain[key]
            out.arcs.append(Arc(s, s, h.self_pdfs[i] + 1, EPS, sw))
            out.arcs.append(Arc(s, hmm_state(dst, phone, i + 1), h.fwd_pdfs[i] + 1, EPS, fw))
        return chain[key]

    for a in phone_graph.arcs:
        h = topo.hmm(a.ilabel)
        out.arcs.append(Arc(a.src, hmm_state(a.dst, a.ilabel, 0), h.self_pdfs[0] + 1, EPS, a.weight + sw))
        out.arcs.append(Arc(a.src, hmm_state(a.dst, a.ilabel, 1), h.fwd_pdfs[0] + 1, EPS, a.weight + fw))
    return connect(out)


def build_numerator_graph(label, topo: HmmTopology, phone_lm: Wfst | None = None) -> Wfst:
    """Alignment-free numerator: the phone LM restricted to the label, self-loops intact."""
    inv = topo.inventory
    if label.is_positive and not 0 <= label.wake_word < inv.num_wake:
        raise ValueError(f"label {label} not valid for {inv.num_wake} wake word(s)")
    if phone_lm is None:
        phone_lm = build_phone_lm(inv, 1, 1)
    restricted = intersect(rm_epsilon(phone_lm), transcript_acceptor(label, inv))
    g = expand(restricted, topo)
    validate(g)
    return g


def build_denominator_graph(phone_lm: Wfst, topo: HmmTopology) -> Wfst:
    valid = set(topo.inventory.phones) | {EPS}
    if any(a.ilabel not in valid for a in phone_lm.arcs):
        raise ValueError("phone LM uses labels outside the inventory")
    g = expand(rm_epsilon(phone_lm), topo)
    if not g.finals or not g.arcs:
        raise ValueError("denominator graph is empty")
    validate(g)
    return g


def build_decoding_graph(topo: HmmTopology, positive_cost: float, sil_only_prob: float = 0.01,
                         optional_sil_prob: float = 0.5) -> Wfst:
    """The phone-LM shape with its start and final states merged into a loop.

    State 0 is both start and final.  Each pass round the loop is
    [SIL] (wake_k | freetext) [SIL], or SIL alone at the SIL-only prior.
    Wake-word entries cost ``positive_cost`` and freetext entries cost 0.
    The word id is emitted on the last forward arc of its HMM so that a
    word only shows up in a backtrace once the HMM is complete.
    """
    if not math.isfinite(positive_cost):
        raise ValueError("positive_cost must be finite")
    if not 0.0 < sil_only_prob < 1.0 or not 0.0 < optional_sil_prob < 1.0:
        raise ValueError("SIL probabilities must lie in (0, 1)")
    inv = topo.inventory
    g = Wfst(num_states=3, start=0)
    g.set_final(0)
    sw, fw = topo.self_weight, topo.fwd_weight

    def unit(src: int, dst: int, phone: int, cost: float) -> None:
        h = topo.hmm(phone)
        states = [g.add_state() for _ in range(h.num_states)]
        g.add_arc(src, states[0], EPS, EPS, cost)
        for i, s in enumerate(states):
            g.add_arc(s, s, h.self_pdfs[i] + 1, EPS, sw)
            last = i == h.num_states - 1
            g.add_arc(s, dst if last else states[i + 1], h.fwd_pdfs[i] + 1, phone if last else EPS, fw)

    q = optional_sil_prob
    sil = inv.sil_phone
    unit(0, 1, sil, -math.log(q))
    g.add_arc(0, 1, EPS, EPS, -math.log(1 - q))
    for k in range(inv.num_wake):
        unit(1, 2, inv.wake_phone(k), positive_cost)
    unit(1, 2, inv.freetext_phone, 0.0)
    unit(2, 0, sil, -math.log(q))
    g.add_arc(2, 0, EPS, EPS, -math.log(1 - q))
    unit(0, 0, sil, -math.log(sil_only_prob))
    validate(g)
    return g


def write_symbol_tables(topo: HmmTopology, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    inv = topo.inventory
    lines = ["<eps>\t0"]
    for h in topo.hmms:
        for i in range(h.num_states):
            lines.append(f"{inv.name(h.phone)}_{i}_self\t{h.self_pdfs[i] + 1}")
            lines.append(f"{inv.name(h.phone)}_{i}_fwd\t{h.fwd_pdfs[i] + 1}")
    (d / "pdf_ids.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    words = ["<eps>\t0"] + [f"{inv.name(p)}\t{p}" for p in inv.phones]
    (d / "words.txt").write_text("\n".join(words) + "\n", encoding="utf-8")
