import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import enumeration_oracle, random_graph
from wakeword.lfmmi import (NoPathError, band_mask, forward_backward, forward_backward_batch,
                            lfmmi_loss_and_grad, path_score, viterbi, xent_regularizer)


def random_case(rng, max_T=6, P=4):
    while True:
        g = random_graph(rng, num_pdfs=P)
        T = int(rng.integers(1, max_T + 1))
        scores = rng.normal(size=(T, P)) * 2
        ref = enumeration_oracle(g, scores)
        if ref is not None:
            return g, scores, ref


def test_forward_backward_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        g, scores, (total, gamma, _, _) = random_case(rng)
        got_total, got_gamma = forward_backward(g, scores)
        assert abs(got_total - total) < 1e-8
        assert np.max(np.abs(got_gamma - gamma)) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_and_backward_totals_agree(seed):
    rng = np.random.default_rng(seed)
    g, scores, _ = random_case(rng)
    r = forward_backward_batch(g, scores[None])
    assert r.log_total[0] == pytest.approx(r.log_total_backward[0], abs=1e-9)
    # occupancies sum to one per frame
    assert np.allclose(r.gamma[0].sum(axis=1), 1.0)


def test_no_path_raises():
    rng = np.random.default_rng(1)
    from wakeword.fst import Wfst
    g = Wfst(num_states=2, start=0)
    g.add_arc(0, 1, 1)
    g.set_final(1)
    with pytest.raises(NoPathError):
        forward_backward(g, rng.normal(size=(3, 2)))


def test_padded_batch_matches_single():
    rng = np.random.default_rng(2)
    g = random_graph(rng, max_states=3, arc_prob=0.6)
    g.set_final(0)
    lengths = [6, 3, 5]
    scores = rng.normal(size=(3, 6, 4))
    r = forward_backward_batch(g, scores, lengths)
    for b, L in enumerate(lengths):
        ref = enumeration_oracle(g, scores[b, :L])
        if ref is None:
            assert r.log_total[b] < -1e30
            continue
        assert r.log_total[b] == pytest.approx(ref[0], abs=1e-9)
        assert np.allclose(r.gamma[b, :L], ref[1], atol=1e-9)
        assert not r.gamma[b, L:].any()


def test_allowed_mask_equals_enumeration_over_allowed_paths():
    rng = np.random.default_rng(3)
    for _ in range(30):
        g, scores, _ = random_case(rng)
        allowed = rng.random(scores.shape) < 0.7
        r = forward_backward_batch(g, scores[None], allowed=allowed[None])
        masked = np.where(allowed, scores, -np.inf)
        with np.errstate(invalid="ignore"):
            ref = enumeration_oracle(g, masked)
        if ref is None or not np.isfinite(ref[0]):
            assert r.log_total[0] < -1e30
        else:
            assert r.log_total[0] == pytest.approx(ref[0], abs=1e-9)
            assert np.allclose(r.gamma[0], np.nan_to_num(ref[1]), atol=1e-9)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    eps = 1e-4
    for _ in range(50):
        num, scores, _ = random_case(rng)
        while True:
            den = random_graph(rng)
            if enumeration_oracle(den, scores) is not None:
                break
        loss, grad = lfmmi_loss_and_grad(num, den, scores)
        fd = np.zeros_like(scores)
        for idx in np.ndindex(scores.shape):
            d = np.zeros_like(scores)
            d[idx] = eps
            fd[idx] = (lfmmi_loss_and_grad(num, den, scores + d)[0]
                       - lfmmi_loss_and_grad(num, den, scores - d)[0]) / (2 * eps)
        rel = np.linalg.norm(fd - grad) / max(np.linalg.norm(grad), np.linalg.norm(fd), 1e-12)
        assert rel < 1e-4


def test_xent_gradient():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5, 6))
    gamma = rng.dirichlet(np.ones(6), size=5)
    loss, grad = xent_regularizer(x, gamma, weight=0.3)
    eps = 1e-5
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        d = np.zeros_like(x)
        d[idx] = eps
        fd[idx] = (xent_regularizer(x + d, gamma, 0.3)[0] - xent_regularizer(x - d, gamma, 0.3)[0]) / (2 * eps)
    assert np.allclose(fd, grad, atol=1e-8)
    assert xent_regularizer(x, gamma, 0.0) == (0.0, pytest.approx(np.zeros_like(x)))
    with pytest.raises(ValueError):
        xent_regularizer(x, gamma, -1.0)


def test_viterbi_matches_enumeration():
    rng = np.random.default_rng(6)
    for _ in range(100):
        g, scores, (_, _, paths, logs) = random_case(rng)
        best, pdfs, states = viterbi(g, scores)
        assert best == pytest.approx(logs.max(), abs=1e-9)
        assert len(pdfs) == scores.shape[0] and len(states) == scores.shape[0] + 1
        assert path_score(g, pdfs, states, scores) == pytest.approx(best, abs=1e-9)


def test_band_mask():
    ali = np.array([0, 0, 1, 1, 2, 2])
    m = band_mask(ali, 3, 1)
    assert m.shape == (6, 3)
    assert m[:, 0].tolist() == [True, True, True, False, False, False]
    assert m[:, 2].tolist() == [False, False, False, True, True, True]
    assert band_mask(ali, 3, 0).sum() == 6
    assert band_mask(ali, 3, math.inf).all()
