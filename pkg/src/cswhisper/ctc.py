"""Connectionist temporal classification.

Two implementations live here:

* a float64 numpy reference (``ctc_loss``, ``ctc_gradient``) working on one
  utterance, plus an exhaustive enumeration oracle (``brute_force_ctc``);
* ``ctc_nll_batch``, a batched log-space forward recursion in torch that the
  training loop differentiates through autograd.

The blank is the appended class: for a ``[T, C]`` log-probability matrix the
blank id is ``C - 1``.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np
import torch

from .errors import FeasibilityError, InputError

NORM_TOL = 1e-6
_NEG = -1e30


def min_frames(target: Sequence[int]) -> int:
    """Smallest T for which ``target`` has at least one CTC alignment."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target, blank):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _validate(lp, target, check_norm=True):
    lp = np.asarray(lp, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] < 1 or lp.shape[1] < 2:
        raise InputError(f"log_probs must be a [T, C] matrix with C >= 2, got {lp.shape}")
    if not np.all(np.isfinite(lp)):
        raise InputError("log_probs contain non-finite values")
    if check_norm:
        row_mass = np.logaddexp.reduce(lp, axis=1)
        if np.max(np.abs(row_mass)) > NORM_TOL:
            raise InputError("log_probs rows are not log-normalized")
    blank = lp.shape[1] - 1
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if np.any(target < 0) or np.any(target >= blank):
        raise InputError("target ids must lie in [0, blank)")
    if min_frames(target) > lp.shape[0]:
        raise FeasibilityError(
            f"target needs {min_frames(target)} frames, only {lp.shape[0]} available")
    return lp, target, blank


def _log_alpha(lp, ext):
    T, S = lp.shape[0], len(ext)
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != ext[:-2]) & (np.arange(2, S) % 2 == 1)
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t, ext]
    return alpha


def _log_beta(lp, ext):
    T, S = lp.shape[0], len(ext)
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    # transition s -> s+2 is allowed when s+2 is a label differing from s
    skip = np.zeros(S, dtype=bool)
    skip[:-2] = (ext[:-2] != ext[2:]) & (np.arange(S - 2) % 2 == 1)
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + lp[t, ext]
    return beta


def _loss_from_alpha(alpha):
    last = alpha[-1]
    if len(last) == 1:
        return -last[-1]
    return -np.logaddexp(last[-1], last[-2])


def ctc_loss(log_probs, target, check_norm: bool = True) -> float:
    """Negative log-likelihood ``-log P(target | log_probs)``.

    Raises ``FeasibilityError`` when ``T`` is too short for ``target`` and
    ``InputError`` for malformed or non-normalized input.
    """
    lp, target, blank = _validate(log_probs, target, check_norm)
    return float(_loss_from_alpha(_log_alpha(lp, _extend(target, blank))))


def ctc_gradient(log_probs, target, check_norm: bool = True) -> np.ndarray:
    """Gradient of ``ctc_loss`` with respect to ``log_probs``.

    Entries of ``log_probs`` are treated as independent variables (no
    softmax Jacobian), so the result is minus the per-frame class occupancy
    posterior: ``-sum_{s: ext[s]=k} alpha_t(s) beta_t(s) / (P y_t(k))``.
    Every row sums to ``-1``.
    """
    lp, target, blank = _validate(log_probs, target, check_norm)
    ext = _extend(target, blank)
    alpha = _log_alpha(lp, ext)
    beta = _log_beta(lp, ext)
    nll = _loss_from_alpha(alpha)
    # alpha and beta both include the emission at t
    occ = np.exp(alpha + beta - lp[:, ext] + nll)
    grad = np.zeros_like(lp)
    for s, k in enumerate(ext):
        grad[:, k] -= occ[:, s]
    return grad


def collapse(labels: Sequence[int], blank: int) -> list[int]:
    out = []
    prev = None
    for k in labels:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def brute_force_ctc(log_probs, target, max_frames: int = 8, max_classes: int = 6) -> float:
    """Enumerate every frame labeling and sum those collapsing to ``target``.

    Test oracle only: refuses instances with ``T > max_frames`` or more
    than ``max_classes`` output classes.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T, C = lp.shape
    if T > max_frames or C > max_classes:
        raise InputError(f"oracle bounds exceeded: T={T}, classes={C}")
    blank = C - 1
    target = [int(k) for k in target]
    logs = []
    for path in itertools.product(range(C), repeat=T):
        if collapse(path, blank) == target:
            logs.append(lp[np.arange(T), path].sum())
    if not logs:
        raise FeasibilityError("no labeling collapses to the target")
    return float(-np.logaddexp.reduce(np.array(logs)))


def ctc_greedy_collapse(log_probs) -> list[int]:
    """Best-path decoding: per-frame argmax, merge repeats, drop blanks."""
    lp = np.asarray(log_probs)
    return collapse(np.argmax(lp, axis=-1).tolist(), lp.shape[-1] - 1)


def ctc_nll_batch(log_probs: torch.Tensor, input_lengths: torch.Tensor,
                  targets: torch.Tensor, target_lengths: torch.Tensor) -> torch.Tensor:
    """Per-utterance CTC negative log-likelihood, differentiable.

    log_probs: ``[B, T, C]`` log-softmax output, blank = ``C - 1``.
    targets: ``[B, L]`` padded label ids (padding is ignored).
    Returns a ``[B]`` tensor.
    """
    B, T, C = log_probs.shape
    blank = C - 1
    L = targets.shape[1]
    S = 2 * L + 1
    if torch.any(input_lengths < 1):
        raise InputError("every utterance needs at least one frame")
    ext = torch.full((B, S), blank, dtype=torch.long, device=log_probs.device)
    if L:
        tgt = torch.where(torch.arange(L)[None, :] < target_lengths[:, None], targets,
                          torch.full_like(targets, blank))
        ext[:, 1::2] = tgt
    skip = torch.zeros(B, S, dtype=torch.bool)
    if S > 2:
        skip[:, 2:] = (ext[:, 2:] != ext[:, :-2]) & (ext[:, 2:] != blank)
    neg = torch.tensor(_NEG, dtype=log_probs.dtype)

    emit = log_probs.gather(2, ext[:, None, :].expand(B, T, S))
    init = torch.full((B, S), _NEG, dtype=log_probs.dtype)
    init[:, 0] = 0.0
    if S > 1:
        init[:, 1] = torch.where(target_lengths > 0, torch.zeros(B, dtype=log_probs.dtype), neg)
    alpha = init + emit[:, 0]
    for t in range(1, T):
        pad1 = torch.full((B, 1), _NEG, dtype=log_probs.dtype)
        a1 = torch.cat([pad1, alpha[:, :-1]], dim=1)
        a2 = torch.cat([pad1, pad1, alpha[:, :-2]], dim=1)[:, :S]
        a2 = torch.where(skip, a2, neg)
        new = torch.logsumexp(torch.stack([alpha, a1, a2]), dim=0) + emit[:, t]
        alpha = torch.where((t < input_lengths)[:, None], new, alpha)
    end = 2 * target_lengths
    last = alpha.gather(1, end[:, None]).squeeze(1)
    prev = alpha.gather(1, (end - 1).clamp(min=0)[:, None]).squeeze(1)
    prev = torch.where(target_lengths > 0, prev, neg)
    return -torch.logaddexp(last, prev)
