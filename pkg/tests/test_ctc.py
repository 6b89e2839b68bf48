import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunksim import ctc
from chunksim.tensor import check_gradients, log_softmax, parameter


def brute_force_nll(logp, labels):
    """Sum over every frame-level path that collapses to ``labels``."""
    T, C = logp.shape
    total = -math.inf
    for path in itertools.product(range(C), repeat=T):
        if ctc.greedy_decode(np.eye(C)[list(path)]) == list(labels):
            total = np.logaddexp(total, sum(logp[t, k] for t, k in enumerate(path)))
    return -total


def random_logp(rng, T, C):
    x = rng.normal(size=(T, C)) * 2
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def test_two_frame_uniform_case():
    logp = np.log(np.full((2, 2), 0.5))
    assert ctc.ctc_loss_value(logp, [1]) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_certain_single_frame():
    logp = np.log(np.array([[1e-300, 1.0]]))
    assert ctc.ctc_loss_value(logp, [1]) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_matches_enumeration(T, V, L, seed):
    rng = np.random.default_rng(seed)
    logp = random_logp(rng, T, V + 1)
    labels = list(rng.integers(1, V + 1, size=L))
    expected = brute_force_nll(logp, labels)
    got = ctc.ctc_loss_value(logp, labels)
    if math.isinf(expected):
        assert math.isinf(got)
    else:
        assert got == pytest.approx(expected, abs=1e-10)


def test_forward_equals_backward_total(rng):
    for _ in range(20):
        logp = random_logp(rng, 12, 5)
        lat = ctc.CtcLattice(logp, list(rng.integers(1, 5, size=4)))
        assert lat.forward_total == pytest.approx(lat.backward_total, abs=1e-8)


@pytest.mark.parametrize("labels", [[1, 2, 2], [3], [1, 2, 3, 1]])
def test_gradient_wrt_logits(rng, labels):
    x = parameter(rng.normal(size=(9, 4)))
    assert check_gradients(lambda: ctc.ctc_loss(log_softmax(x), labels), [x]) < 1e-4


def test_infeasible_gives_inf_and_zero_gradient(rng):
    x = parameter(rng.normal(size=(2, 3)))
    loss = ctc.ctc_loss(log_softmax(x), [1, 1])  # needs 3 frames
    assert math.isinf(loss.item())
    loss.backward()
    assert np.all(x.grad == 0)
    assert ctc.min_frames([1, 1]) == 3


def test_label_errors():
    logp = np.zeros((3, 3))
    with pytest.raises(ctc.LabelError):
        ctc.ctc_loss_value(logp, [])
    with pytest.raises(ctc.LabelError):
        ctc.ctc_loss_value(logp, [0, 1])
    with pytest.raises(ValueError):
        ctc.ctc_loss_value(np.zeros((0, 3)), [1])


def onehot(seq, C=4):
    return np.log(np.eye(C)[seq] + 1e-12)


def test_greedy_rules():
    assert ctc.greedy_decode(onehot([1, 1, 0, 2])) == [1, 2]
    assert ctc.greedy_decode(onehot([0, 0, 0])) == []
    assert ctc.greedy_decode(onehot([1, 0, 1])) == [1, 1]


def test_prefix_beam_on_peaked_input_equals_greedy(rng):
    for _ in range(10):
        path = rng.integers(0, 4, size=10)
        probs = np.full((10, 4), 0.002)
        probs[np.arange(10), path] = 0.994
        logp = np.log(probs)
        assert ctc.prefix_beam_decode(logp, beam=4) == ctc.greedy_decode(logp)


def best_labeling(logp, V):
    best, arg = -math.inf, None
    T = logp.shape[0]
    for L in range(0, T + 1):
        for lab in itertools.product(range(1, V + 1), repeat=L):
            if L == 0:
                score = logp[:, 0].sum()
            else:
                if ctc.min_frames(lab) > T:
                    continue
                score = -ctc.ctc_loss_value(logp, lab)
            if score > best:
                best, arg = score, list(lab)
    return arg


def test_unbounded_beam_is_exact(rng):
    for _ in range(15):
        T, V = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        logp = random_logp(rng, T, V + 1)
        assert ctc.prefix_beam_decode(logp, beam=None) == best_labeling(logp, V)


def test_prefix_beam_empty_output():
    assert ctc.prefix_beam_decode(onehot([0, 0, 0]), beam=3) == []


def test_cer_examples():
    assert ctc.cer([1, 2, 3], [1, 2, 3]) == 0
    assert ctc.cer([1, 2, 4], [1, 2, 3]) == pytest.approx(1 / 3)
    assert ctc.cer([], [1, 2]) == 1.0
    with pytest.raises(ValueError):
        ctc.cer([1], [])


def quadratic_edit_distance(a, b):
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1, -1]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 4), max_size=12), st.lists(st.integers(1, 4), min_size=1, max_size=12))
def test_cer_times_length_is_edit_distance(hyp, ref):
    assert ctc.cer(hyp, ref) * len(ref) == pytest.approx(quadratic_edit_distance(hyp, ref))


def test_scoring_report():
    rep = ctc.scoring_report(["a", "b"], [[1, 2], []], [[1, 2], [3, 4]])
    assert rep["corpus_cer"] == 0.5
    assert [u["cer"] for u in rep["utterances"]] == [0.0, 1.0]
