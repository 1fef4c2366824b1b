"""
Alignment-free LF-MMI on a graph small enough to check by hand
===============================================================

Build the phone LM, the numerator (one label) and the denominator (all
labels), score a random matrix against both, and compare the forward-backward
totals with brute-force path enumeration on a tiny graph.

    python demos/forward_backward_by_hand.py
"""

import math

import numpy as np

from wakeword.corpus import NEGATIVE, positive
from wakeword.fst import EPS, Wfst
from wakeword.graphs import (PhoneInventory, build_denominator_graph, build_numerator_graph,
                             build_phone_lm, build_topology)
from wakeword.lfmmi import forward_backward, lfmmi_loss_and_grad

rng = np.random.default_rng(0)

# %%
# A two-state graph over three pdfs.  Arc input labels are pdf + 1 because
# label 0 is reserved for epsilon; weights are negative log probabilities.
g = Wfst(num_states=2, start=0)
g.add_arc(0, 0, 1, EPS, 0.7)
g.add_arc(0, 1, 2, EPS, 0.7)
g.add_arc(1, 1, 3, EPS, 0.2)
g.set_final(1)

T = 4
scores = rng.normal(size=(T, 3))
total, gamma = forward_backward(g, scores)

# every pdf sequence the graph accepts: a^k b c^(T-k-1)
paths = []
for k in range(T):
    pdfs = [0] * k + [1] + [2] * (T - k - 1)
    w = 0.7 * (k + 1) + 0.2 * (T - k - 1)
    paths.append((pdfs, sum(scores[t, p] for t, p in enumerate(pdfs)) - w))
brute = math.log(sum(math.exp(s) for _, s in paths))
print(f"forward-backward log total {total:.12f}")
print(f"enumeration      log total {brute:.12f}")
print("pdf occupancies per frame (rows sum to one):")
print(np.round(gamma, 4))

# %%
# The real graphs.  One wake word, SIL and freetext give 18 pdfs; the
# phone LM priors come from the positive/negative counts.
topo = build_topology(PhoneInventory())
lm = build_phone_lm(topo.inventory, num_pos=500, num_neg=2000)
den = build_denominator_graph(lm, topo)
num_pos = build_numerator_graph(positive(0), topo, lm)
num_neg = build_numerator_graph(NEGATIVE, topo, lm)
print(f"\ndenominator: {den.num_states} states, {len(den.arcs)} arcs")
print(f"numerator (wake word): {num_pos.num_states} states, {len(num_pos.arcs)} arcs")

# %%
# Network outputs favouring the wake-word pdfs make the positive numerator
# nearly as likely as the whole denominator, so the loss is close to zero.
T = 30
scores = rng.normal(size=(T, topo.num_pdfs))
wake = topo.hmm(topo.inventory.wake_phone(0))
for t, pdf in zip(range(0, T, 8), wake.fwd_pdfs):
    scores[t, pdf] += 6
for label, num in (("wake word", num_pos), ("negative", num_neg)):
    loss, grad = lfmmi_loss_and_grad(num, den, scores)
    print(f"{label:>10}: loss {loss / T:8.4f} per frame, |grad| {np.abs(grad).sum():7.3f}")

# %%
# The gradient is gamma_den - gamma_num; spot-check one entry numerically.
t, p = 8, wake.fwd_pdfs[1]
eps = 1e-4
up, down = scores.copy(), scores.copy()
up[t, p] += eps
down[t, p] -= eps
fd = (lfmmi_loss_and_grad(num_pos, den, up)[0] - lfmmi_loss_and_grad(num_pos, den, down)[0]) / (2 * eps)
print(f"\nd loss / d score[{t},{p}]: analytic {lfmmi_loss_and_grad(num_pos, den, scores)[1][t, p]:.8f}, "
      f"finite difference {fd:.8f}")

assert abs(total - brute) < 1e-10
