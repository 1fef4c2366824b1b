"""Log-semiring forward-backward, the LF-MMI objective and its gradient.

Scores are unnormalized log-likelihoods indexed ``[frame, pdf]``.  Graph
weights are negative logs, so a path scores ``sum(scores) - sum(weights)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fst import CompiledGraph, Wfst, compile_graph

# -inf stand-in: sums and exp() of it stay well defined
NEG = -1e31
LOG_ZERO_THRESHOLD = -1e30


class NoPathError(ValueError):
    """The graph accepts no sequence of the requested length."""


def as_compiled(g) -> CompiledGraph:
    return g if isinstance(g, CompiledGraph) else compile_graph(g)


def _segment_lse(vals: np.ndarray, order: np.ndarray, starts: np.ndarray, states: np.ndarray,
                 num_states: int) -> np.ndarray:
    """Log-sum-exp of ``vals[..., arcs]`` grouped into states; empty groups -> NEG."""
    v = vals[..., order]
    m = np.maximum.reduceat(v, starts, axis=-1)
    counts = np.diff(np.append(starts, v.shape[-1]))
    s = np.add.reduceat(np.exp(v - np.repeat(m, counts, axis=-1)), starts, axis=-1)
    out = np.full(vals.shape[:-1] + (num_states,), NEG)
    out[..., states] = m + np.log(s)
    return out


def _lse(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


@dataclass
class FbResult:
    log_total: np.ndarray  # (B,)
    log_total_backward: np.ndarray  # (B,)
    gamma: np.ndarray  # (B, T, P)


def forward_backward_batch(g, scores: np.ndarray, lengths=None, allowed=None) -> FbResult:
    """Batched forward-backward of one graph against ``scores`` (B, T, P).

    ``lengths`` gives the valid frames per sequence (default: all).
    ``allowed`` is an optional (B, T, P) mask; masked pdfs cannot be used.
    Sequences without any surviving path get ``log_total`` below -1e30.
    """
    cg = as_compiled(g)
    scores = np.asarray(scores, dtype=np.float64)
    B, T, P = scores.shape
    if allowed is not None:
        scores = np.where(allowed, scores, NEG)
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    S = cg.num_states
    src, dst, pdf, w = cg.src, cg.dst, cg.pdf, cg.weight
    final = np.where(np.isfinite(cg.final), -cg.final, NEG)

    arc_scores = scores[:, :, pdf] - w  # (B, T, A)
    alpha = np.full((T + 1, B, S), NEG)
    alpha[0, :, cg.start] = 0.0
    for t in range(T):
        alpha[t + 1] = _segment_lse(alpha[t][:, src] + arc_scores[:, t],
                                    cg.by_dst, cg.dst_starts, cg.dst_states, S)
    ends = alpha[lengths, np.arange(B)]
    log_total = _lse(ends + final, axis=-1)

    beta = np.full((T + 1, B, S), NEG)
    beta[lengths, np.arange(B)] = final
    for t in range(T - 1, -1, -1):
        new = _segment_lse(arc_scores[:, t] + beta[t + 1][:, dst], cg.by_src, cg.src_starts, cg.src_states, S)
        active = (t < lengths)[:, None]
        beta[t] = np.where(active, new, beta[t])
    log_total_bwd = beta[0][:, cg.start]

    ok = log_total > LOG_ZERO_THRESHOLD
    post = alpha[:T][:, :, src].transpose(1, 0, 2) + arc_scores + beta[1:][:, :, dst].transpose(1, 0, 2)
    post = np.exp(post - np.where(ok, log_total, 0.0)[:, None, None])
    valid = (np.arange(T)[None, :] < lengths[:, None]) & ok[:, None]
    post *= valid[:, :, None]
    onehot = np.zeros((len(pdf), P))
    onehot[np.arange(len(pdf)), pdf] = 1.0
    gamma = post @ onehot
    return FbResult(log_total, log_total_bwd, gamma)


def forward_backward(g, scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Total log-likelihood and (T, P) pdf occupancies for one sequence."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("scores must be a (frames, pdfs) matrix")
    cg = as_compiled(g)
    if cg.num_arcs == 0:
        raise ValueError("empty graph")
    r = forward_backward_batch(cg, scores[None])
    if r.log_total[0] < LOG_ZERO_THRESHOLD:
        raise NoPathError(f"no path of length {scores.shape[0]} through the graph")
    return float(r.log_total[0]), r.gamma[0]


def lfmmi_loss_and_grad(num, den, scores: np.ndarray, utt_id: str = "") -> tuple[float, np.ndarray]:
    """Loss -(log p_num - log p_den) and its gradient gamma_den - gamma_num."""
    try:
        num_total, num_gamma = forward_backward(num, scores)
    except NoPathError:
        raise NoPathError(f"numerator has no path for utterance {utt_id!r}") from None
    den_total, den_gamma = forward_backward(den, scores)
    return den_total - num_total, den_gamma - num_gamma


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def xent_regularizer(xent_scores: np.ndarray, gamma_num: np.ndarray, weight: float = 0.1
                     ) -> tuple[float, np.ndarray]:
    """Soft-target cross-entropy against numerator occupancies.

    Returns the loss and its gradient with respect to ``xent_scores``.
    """
    if weight < 0:
        raise ValueError("cross-entropy weight must be non-negative")
    xent_scores = np.asarray(xent_scores, dtype=np.float64)
    if xent_scores.shape != np.shape(gamma_num):
        raise ValueError(f"shape mismatch {xent_scores.shape} vs {np.shape(gamma_num)}")
    if weight == 0:
        return 0.0, np.zeros_like(xent_scores)
    ls = log_softmax(xent_scores)
    loss = -weight * float(np.sum(gamma_num * ls))
    grad = -weight * (gamma_num - np.exp(ls) * np.sum(gamma_num, axis=-1, keepdims=True))
    return loss, grad


# -- best paths and tolerance bands -------------------------------------------


def viterbi(g, scores: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Best path score, its pdf sequence and its state sequence (length T + 1)."""
    cg = as_compiled(g)
    scores = np.asarray(scores, dtype=np.float64)
    T = scores.shape[0]
    S = cg.num_states
    best = np.full(S, NEG)
    best[cg.start] = 0.0
    back = np.zeros((T, S), dtype=np.int64)
    for t in range(T):
        cand = best[cg.src] + scores[t, cg.pdf] - cg.weight
        order = np.lexsort((np.arange(cg.num_arcs), -cand, cg.dst))
        first = np.ones(len(order), dtype=bool)
        first[1:] = cg.dst[order][1:] != cg.dst[order][:-1]
        win = order[first]
        new = np.full(S, NEG)
        new[cg.dst[win]] = cand[win]
        back[t, cg.dst[win]] = win
        best = new
    final = np.where(np.isfinite(cg.final), best - cg.final, NEG)
    s = int(np.argmax(final))
    if final[s] < LOG_ZERO_THRESHOLD:
        raise NoPathError(f"no path of length {T} through the graph")
    states = [s]
    pdfs = []
    for t in range(T - 1, -1, -1):
        a = back[t, s]
        pdfs.append(int(cg.pdf[a]))
        s = int(cg.src[a])
        states.append(s)
    return float(final[states[0]]), np.array(pdfs[::-1]), np.array(states[::-1])


def band_mask(alignment: np.ndarray, num_pdfs: int, tolerance: float) -> np.ndarray:
    """(T, P) mask allowing pdf p at frame t iff the alignment uses p within +-tolerance frames."""
    alignment = np.asarray(alignment, dtype=np.int64)
    T = len(alignment)
    if tolerance == np.inf or tolerance >= T:
        return np.ones((T, num_pdfs), dtype=bool)
    tol = int(tolerance)
    hits = np.zeros((T, num_pdfs), dtype=np.int64)
    hits[np.arange(T), alignment] = 1
    c = np.vstack([np.zeros((1, num_pdfs), dtype=np.int64), np.cumsum(hits, axis=0)])
    lo = np.clip(np.arange(T) - tol, 0, T)
    hi = np.clip(np.arange(T) + tol + 1, 0, T)
    return (c[hi] - c[lo]) > 0


def path_score(g: Wfst, pdfs, states, scores: np.ndarray) -> float:
    """Score of one explicit path, for checks."""
    total = 0.0
    for t, p in enumerate(pdfs):
        s, d = states[t], states[t + 1]
        ws = [a.weight for a in g.arcs if a.src == s and a.dst == d and a.ilabel == p + 1]
        total += scores[t, p] - min(ws)
    return total - g.finals[states[-1]]
