"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math
import zlib
from collections import Counter

import numpy as np

# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def numeric_gradient(loss_fn, array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps a gradient that is exactly zero by symmetry (for example
    an attention key bias, to which softmax is invariant) from turning
    finite-difference round-off of order 1e-10 into a large ratio.
    """
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


# ---------------------------------------------------------------------------
# table-driven stub scorers
# ---------------------------------------------------------------------------


class StubScorer:
    """Log-probabilities are a fixed pseudo-random function of the prefix.

    Implements the decoding scorer protocol: rows carry their full token
    history as the state.
    """

    def __init__(self, vocab: int, seed: int, uniform: bool = False):
        self.vocab = vocab
        self.seed = seed
        self.uniform = uniform
        self.cache: dict[tuple, np.ndarray] = {}
        self.calls = 0

    def table(self, prefix: tuple) -> np.ndarray:
        if prefix not in self.cache:
            if self.uniform:
                self.cache[prefix] = np.full(self.vocab, -math.log(self.vocab))
            else:
                rng = np.random.default_rng([self.seed, zlib.crc32(repr(prefix).encode())])
                x = rng.normal(size=self.vocab) * 2.0
                self.cache[prefix] = x - np.log(np.exp(x).sum())
        return self.cache[prefix]

    def start(self, sources, rows_per_source):
        return [() for _ in range(len(sources) * rows_per_source)]

    def step(self, state, prev):
        self.calls += 1
        state = [p + (int(t),) for p, t in zip(state, prev)]
        return np.stack([self.table(p) for p in state]), state

    def select(self, state, idx):
        return [state[i] for i in idx]

    def sequence_score(self, tokens, bos: int) -> float:
        total = 0.0
        prefix = (bos,)
        for t in tokens:
            total += float(self.table(prefix)[t])
            prefix = prefix + (t,)
        return total


def enumerate_sequences(vocab: int, max_len: int, eos: int, banned=()):
    """All token sequences ending in ``eos`` with at most ``max_len`` tokens."""
    body_tokens = [t for t in range(vocab) if t != eos and t not in banned]
    for n in range(1, max_len + 1):
        for body in itertools.product(body_tokens, repeat=n - 1):
            yield body + (eos,)


def exhaustive_argmax(mt, lm, ilm, lambda1, lambda2, vocab, max_len, eos, bos, alpha=1.0, banned=()):
    def score(seq):
        fused = mt.sequence_score(seq, bos)
        if lambda1:
            fused += lambda1 * lm.sequence_score(seq, bos)
        if lambda2:
            fused -= lambda2 * ilm.sequence_score(seq, bos)
        return fused / len(seq) ** alpha

    return max(enumerate_sequences(vocab, max_len, eos, banned), key=lambda s: (score(s), tuple(-t for t in s)))


# ---------------------------------------------------------------------------
# BPE
# ---------------------------------------------------------------------------


def naive_learn_bpe(lines, num_merges: int, eow: str = "</w>"):
    """Recount every pair from scratch before each merge."""
    freq = Counter(w for line in lines for w in line.split())
    words = {w: tuple(w[:-1]) + (w[-1] + eow,) for w in freq}
    merges = []
    for _ in range(num_merges):
        pairs = Counter()
        for w, syms in words.items():
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += freq[w]
        if not pairs:
            break
        best, count = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < 2:
            break
        merges.append(best)
        for w, syms in words.items():
            out = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                    out.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = tuple(out)
    return merges


def replay_merges(word: str, merges, eow: str = "</w>"):
    """Apply merges strictly in learned order, each left to right."""
    syms = list(word[:-1]) + [word[-1] + eow]
    for a, b in merges:
        out = []
        i = 0
        while i < len(syms):
            if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                out.append(a + b)
                i += 2
            else:
                out.append(syms[i])
                i += 1
        syms = out
    return syms


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def reference_adam(param, grads, lrs, beta1=0.9, beta2=0.98, eps=1e-9):
    """Textbook Adam with bias correction, one learning rate per step."""
    m = np.zeros_like(param)
    v = np.zeros_like(param)
    p = param.copy()
    for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p
