import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cswhisper.ctc import (
    brute_force_ctc,
    ctc_gradient,
    ctc_greedy_collapse,
    ctc_loss,
    ctc_nll_batch,
    min_frames,
)
from cswhisper.errors import FeasibilityError, InputError

from .oracles import central_difference, max_rel_err


def log_normalize(x):
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def random_instance(rng, T, C, L):
    lp = log_normalize(rng.normal(scale=2.0, size=(T, C)))
    target = rng.integers(0, C - 1, size=L).tolist()
    return lp, target


def test_single_frame_single_label():
    p = 0.3
    lp = np.log([[p, 0.5, 0.2]])
    assert ctc_loss(lp, [0]) == pytest.approx(-math.log(p), abs=1e-12)


def test_empty_target_is_all_blank_path():
    lp = log_normalize(np.random.default_rng(1).normal(size=(2, 4)))
    assert ctc_loss(lp, []) == pytest.approx(-(lp[0, 3] + lp[1, 3]), abs=1e-12)


def test_repeated_label_needs_blank_between():
    rng = np.random.default_rng(2)
    lp = log_normalize(rng.normal(size=(3, 3)))
    # the only alignment of "aa" in three frames is a, blank, a
    expected = -(lp[0, 0] + lp[1, 2] + lp[2, 0])
    assert ctc_loss(lp, [0, 0]) == pytest.approx(expected, abs=1e-9)
    assert brute_force_ctc(lp, [0, 0]) == pytest.approx(expected, abs=1e-9)


def test_uniform_two_frames_hand_enumeration():
    lp = np.log(np.full((2, 2), 0.5))
    # aa, a-blank, blank-a
    assert brute_force_ctc(lp, [0]) == pytest.approx(-math.log(0.75), abs=1e-12)
    assert ctc_loss(lp, [0]) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_infeasible_target_raises_in_both():
    lp = log_normalize(np.zeros((2, 3)))
    with pytest.raises(FeasibilityError):
        ctc_loss(lp, [0, 1, 0])
    with pytest.raises(FeasibilityError):
        brute_force_ctc(lp, [0, 1, 0])
    with pytest.raises(FeasibilityError):
        ctc_loss(lp, [1, 1])  # needs 3 frames
    with pytest.raises(FeasibilityError):
        ctc_gradient(lp, [0, 1, 0])


def test_rejects_unnormalized_rows_and_blank_in_target():
    with pytest.raises(InputError):
        ctc_loss(np.zeros((3, 3)), [0])
    with pytest.raises(InputError):
        ctc_loss(log_normalize(np.zeros((3, 3))), [2])


def test_oracle_refuses_large_instances():
    with pytest.raises(InputError):
        brute_force_ctc(log_normalize(np.zeros((9, 3))), [0])
    with pytest.raises(InputError):
        brute_force_ctc(log_normalize(np.zeros((3, 7))), [0])


def test_min_frames():
    assert min_frames([]) == 0
    assert min_frames([1, 2, 3]) == 3
    assert min_frames([1, 1, 2, 2]) == 6


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 6), C=st.integers(2, 5),
       L=st.integers(0, 3))
def test_oracle_equivalence(seed, T, C, L):
    rng = np.random.default_rng(seed)
    lp, target = random_instance(rng, T, C, L)
    if min_frames(target) > T:
        with pytest.raises(FeasibilityError):
            ctc_loss(lp, target)
        return
    assert ctc_loss(lp, target) == pytest.approx(brute_force_ctc(lp, target), abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    lp, target = random_instance(rng, 4, 4, int(rng.integers(0, 3)))
    analytic = ctc_gradient(lp, target)
    numeric = central_difference(lambda x: ctc_loss(x, target, check_norm=False), lp)
    assert max_rel_err(analytic, numeric) < 1e-4


def test_gradient_rows_sum_to_minus_one():
    rng = np.random.default_rng(5)
    lp, target = random_instance(rng, 6, 5, 3)
    np.testing.assert_allclose(ctc_gradient(lp, target).sum(axis=1), -1.0, atol=1e-12)


def test_single_frame_gradient_is_local():
    lp = np.log([[0.2, 0.5, 0.3]])
    g = ctc_gradient(lp, [0])
    assert g.shape == (1, 3)
    assert g[0, 0] == pytest.approx(-1.0)
    assert np.count_nonzero(g[0, 1:]) == 0


def test_greedy_collapse():
    a, b, blank = 0, 1, 2
    def frames(labels):
        lp = np.full((len(labels), 3), -10.0)
        lp[np.arange(len(labels)), labels] = 0.0
        return lp
    assert ctc_greedy_collapse(frames([a, a, blank, a])) == [a, a]
    assert ctc_greedy_collapse(frames([blank, blank])) == []
    assert ctc_greedy_collapse(frames([a, b, b, blank, b])) == [a, b, b]


def test_padding_with_certain_blank_frame_keeps_loss():
    rng = np.random.default_rng(3)
    lp, target = random_instance(rng, 5, 4, 2)
    padded = np.vstack([lp, np.log([[1e-300, 1e-300, 1e-300, 1.0]])])
    padded = log_normalize(padded)
    base = ctc_loss(lp, target)
    extended = ctc_loss(padded, target)
    assert math.isfinite(extended)
    assert extended <= base + abs(padded[-1, -1]) + 1e-9


def test_long_sequence_is_stable():
    rng = np.random.default_rng(4)
    T, C = 96, 41
    p = rng.dirichlet(np.ones(C), size=T)
    p = np.maximum(p, 1e-30)
    lp = np.log(p / p.sum(axis=1, keepdims=True))
    target = rng.integers(0, C - 1, size=30).tolist()
    assert math.isfinite(ctc_loss(lp, target))
    assert np.all(np.isfinite(ctc_gradient(lp, target)))


def test_batched_torch_matches_reference_and_torch_builtin():
    rng = np.random.default_rng(6)
    B, T, C = 5, 9, 5
    lps, targets, lengths, tlens = [], [], [], []
    for b in range(B):
        Tb = int(rng.integers(3, T + 1))
        Lb = int(rng.integers(0, 4))
        lp, tg = random_instance(rng, T, C, Lb)
        lps.append(lp)
        targets.append(tg + [0] * (3 - Lb))
        lengths.append(Tb)
        tlens.append(Lb)
    x = torch.tensor(np.stack(lps), requires_grad=True)
    ours = ctc_nll_batch(x, torch.tensor(lengths), torch.tensor(targets), torch.tensor(tlens))
    for b in range(B):
        ref = ctc_loss(lps[b][:lengths[b]], targets[b][:tlens[b]], check_norm=False)
        assert float(ours[b].detach()) == pytest.approx(ref, abs=1e-9)
    builtin = torch.nn.functional.ctc_loss(
        x.transpose(0, 1), torch.tensor(targets), torch.tensor(lengths), torch.tensor(tlens),
        blank=C - 1, reduction="none")
    torch.testing.assert_close(ours, builtin, atol=1e-9, rtol=1e-9)
    ours.sum().backward()
    for b in range(B):
        ref = ctc_gradient(lps[b][:lengths[b]], targets[b][:tlens[b]], check_norm=False)
        np.testing.assert_allclose(x.grad[b, :lengths[b]].numpy(), ref, atol=1e-9)
        assert torch.all(x.grad[b, lengths[b]:] == 0)
