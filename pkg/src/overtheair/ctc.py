"""CTC loss and gradient (log-space forward-backward) plus greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp

BLANK = 0
DEFAULT_CHARACTERS = "abcdefghijklmnopqrstuvwxyz '"


class InadmissibleTarget(ValueError):
    """The label sequence cannot be aligned within the available frames."""


@dataclass(frozen=True)
class Alphabet:
    characters: str = DEFAULT_CHARACTERS

    def __post_init__(self):
        if len(set(self.characters)) != len(self.characters):
            raise ValueError("alphabet characters must be unique")
        if "-" in self.characters:
            raise ValueError("'-' is reserved for the blank token")

    def __len__(self):
        return len(self.characters)

    @property
    def num_classes(self) -> int:
        return len(self.characters) + 1

    def encode(self, text: str) -> np.ndarray:
        bad = sorted({c for c in text if c not in self.characters})
        if bad:
            raise ValueError(f"characters not in alphabet: {bad!r}")
        return np.array([self.characters.index(c) + 1 for c in text], dtype=np.int64)

    def decode(self, ids) -> str:
        return "".join(self.characters[i - 1] for i in ids if i != BLANK)


@dataclass(frozen=True)
class TargetPhrase:
    text: str
    label_ids: np.ndarray

    @classmethod
    def from_text(cls, text: str, alphabet: Alphabet = Alphabet()) -> "TargetPhrase":
        return cls(text, alphabet.encode(text))

    def __len__(self):
        return len(self.label_ids)


def min_frames(labels) -> int:
    """Shortest input that admits an alignment: one frame per label plus a blank between repeats."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 1
    return int(labels.size + np.count_nonzero(labels[1:] == labels[:-1]))


def _labels(target) -> np.ndarray:
    return np.asarray(target.label_ids if isinstance(target, TargetPhrase) else target, dtype=np.int64)


def _extended(labels: np.ndarray):
    ext = np.full(2 * labels.size + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    # s-2 -> s skip is allowed onto a label that differs from the previous label
    skip = np.zeros(ext.size, dtype=bool)
    skip[3::2] = labels[1:] != labels[:-1]
    return ext, skip


def _check(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("logits must be [frames, classes]")
    if labels.size and (labels.min() < 1 or labels.max() >= logits.shape[1]):
        raise ValueError("label ids out of range for the logit width")
    need = min_frames(labels)
    if logits.shape[0] < need:
        raise InadmissibleTarget(f"target needs at least {need} frames, got {logits.shape[0]}")
    return logits


def _alpha_beta(logp, ext, skip):
    """Forward and backward log-variables for a batch.

    ``logp`` is [B, T, K]; ``ext`` and ``skip`` are [B, S] (all items share T and S).
    """
    B, T = logp.shape[:2]
    S = ext.shape[1]
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    alpha = np.full((B, T, S), -np.inf)
    beta = np.full((B, T, S), -np.inf)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    shift1 = np.full((B, S), -np.inf)
    shift2 = np.full((B, S), -np.inf)
    for t in range(1, T):
        a = alpha[:, t - 1]
        shift1[:, 1:] = a[:, :-1]
        shift2[:, 2:] = a[:, :-2]
        alpha[:, t] = np.logaddexp(np.logaddexp(a, shift1), np.where(skip, shift2, -np.inf)) + emit[:, t]
    beta[:, T - 1, S - 1] = emit[:, T - 1, S - 1]
    if S > 1:
        beta[:, T - 1, S - 2] = emit[:, T - 1, S - 2]
    skip_from = np.zeros((B, S), dtype=bool)
    skip_from[:, :-2] = skip[:, 2:]
    shift1[:] = -np.inf
    shift2[:] = -np.inf
    for t in range(T - 2, -1, -1):
        b = beta[:, t + 1]
        shift1[:, :-1] = b[:, 1:]
        shift2[:, :-2] = b[:, 2:]
        beta[:, t] = np.logaddexp(np.logaddexp(b, shift1), np.where(skip_from, shift2, -np.inf)) + emit[:, t]
    return alpha, beta, emit


def _log_likelihood(alpha):
    S = alpha.shape[-1]
    return logsumexp(alpha[:, -1, max(S - 2, 0):], axis=1)


def ctc_loss(logits, target) -> float:
    """Negative log-probability of ``target`` summed over all CTC alignments."""
    labels = _labels(target)
    logits = _check(logits, labels)
    ext, skip = _extended(labels)
    alpha, _, _ = _alpha_beta(log_softmax(logits, axis=1)[None], ext[None], skip[None])
    return float(-_log_likelihood(alpha)[0])


def batch_ctc_loss_and_grad(logits, labels):
    """Losses [B] and gradients [B, T, K] for equal-length label sequences."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(logits.shape[0], -1)
    for row in labels:
        _check(logits[0], row)
    B, T, K = logits.shape
    logp = log_softmax(logits, axis=2)
    pairs = [_extended(row) for row in labels]
    ext = np.stack([p[0] for p in pairs])
    skip = np.stack([p[1] for p in pairs])
    alpha, beta, emit = _alpha_beta(logp, ext, skip)
    ll = _log_likelihood(alpha)
    # alpha and beta both include the emission at t; remove one copy
    occ = np.exp(alpha + beta - emit - ll[:, None, None])
    post = np.zeros((B, T, K))
    for b in range(B):
        np.add.at(post[b].T, ext[b], occ[b].T)
    return -ll, np.exp(logp) - post


def ctc_loss_and_grad(logits, target):
    """Return ``(loss, dloss/dlogits)``."""
    labels = _labels(target)
    logits = _check(logits, labels)
    loss, grad = batch_ctc_loss_and_grad(logits[None], labels[None])
    return float(loss[0]), grad[0]


def ctc_grad(logits, target) -> np.ndarray:
    return ctc_loss_and_grad(logits, target)[1]


def greedy_path(logits) -> np.ndarray:
    return np.argmax(np.asarray(logits), axis=1)


def collapse(path) -> list[int]:
    out, prev = [], None
    for k in path:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def greedy_decode(logits, alphabet: Alphabet = Alphabet()) -> str:
    """Per-frame argmax, merge repeats, drop blanks."""
    return alphabet.decode(collapse(greedy_path(logits)))
