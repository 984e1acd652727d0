"""Corpus BLEU and perplexity."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .errors import AlignmentError, InputError

BLEU_TOKENIZER_VERSION = "ws-punct-1"
MAX_ORDER = 4
_PUNCT = re.compile(r'([.,!?;:"])')


def bleu_tokenize(line: str) -> list[str]:
    """Whitespace split with each of . , ! ? ; : " split off as its own token."""
    return _PUNCT.sub(r" \1 ", line).split()


@dataclass(frozen=True)
class BleuReport:
    bleu_percent: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_length: int
    ref_length: int
    matches: tuple[int, ...] = ()
    totals: tuple[int, ...] = ()

    def __str__(self) -> str:
        precs = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (
            f"BLEU = {self.bleu_percent:.2f} ({precs}, BP={self.brevity_penalty:.3f}, "
            f"hyp_len={self.hyp_length}, ref_len={self.ref_length})"
        )

    def as_key_values(self) -> str:
        fields = {
            "bleu": f"{self.bleu_percent:.4f}",
            **{f"p{n + 1}": f"{p:.6f}" for n, p in enumerate(self.precisions)},
            "bp": f"{self.brevity_penalty:.6f}",
            "hyp_len": str(self.hyp_length),
            "ref_len": str(self.ref_length),
            "tokenizer": BLEU_TOKENIZER_VERSION,
        }
        return " ".join(f"{k}={v}" for k, v in fields.items())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str]) -> BleuReport:
    """Single-reference corpus BLEU without smoothing."""
    if len(hypotheses) != len(references):
        raise AlignmentError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp_line, ref_line in zip(hypotheses, references):
        hyp = bleu_tokenize(hyp_line)
        ref = bleu_tokenize(ref_line)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if min(matches) == 0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(score, precisions, bp, hyp_len, ref_len, tuple(matches), tuple(totals))


def perplexity(
    step_logprobs: Callable[[Sequence[int]], Iterable[float]],
    corpus: Sequence[Sequence[int]],
) -> float:
    """exp of the mean negative log-probability per scored token.

    ``step_logprobs(sentence)`` yields one log-probability per scored token
    of the sentence, including the closing <eos>.
    """
    if len(corpus) == 0:
        raise InputError("perplexity of an empty corpus")
    total = 0.0
    count = 0
    for sentence in corpus:
        for lp in step_logprobs(sentence):
            total += lp
            count += 1
    if count == 0:
        raise InputError("corpus contains no scored tokens")
    return math.exp(-total / count)
