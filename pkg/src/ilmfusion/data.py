"""Corpora, batching and the synthetic domain-shift translation task."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AlignmentError, InputError
from .numerics.rng import stage_rng
from .tokenizer import BOS, EOS, PAD, Codec

log = logging.getLogger(__name__)


@dataclass
class ParallelCorpus:
    """Line-aligned source/target sentences (text or id sequences)."""

    src: list
    tgt: list
    domain: str = ""

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise AlignmentError(f"source has {len(self.src)} sentences, target {len(self.tgt)}")

    def __len__(self) -> int:
        return len(self.src)

    @property
    def pairs(self) -> list[tuple]:
        return list(zip(self.src, self.tgt))

    def swapped(self) -> "ParallelCorpus":
        return ParallelCorpus(list(self.tgt), list(self.src), self.domain)

    def encode(self, codec: Codec) -> "ParallelCorpus":
        src = [codec.encode(s) for s in self.src]
        tgt = [codec.encode(t) for t in self.tgt]
        for i, (s, t) in enumerate(zip(src, tgt)):
            if not s or not t:
                raise InputError(f"pair {i} is empty after tokenization")
        return ParallelCorpus(src, tgt, self.domain)


@dataclass
class MonoCorpus:
    sentences: list
    domain: str = ""

    def __len__(self) -> int:
        return len(self.sentences)

    def encode(self, codec: Codec) -> "MonoCorpus":
        out = [codec.encode(s) for s in self.sentences]
        for i, s in enumerate(out):
            if not s:
                raise InputError(f"sentence {i} is empty after tokenization")
        return MonoCorpus(out, self.domain)


def _read_lines(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def load_parallel(src_path: str | Path, tgt_path: str | Path, domain: str = "") -> ParallelCorpus:
    src = _read_lines(src_path)
    tgt = _read_lines(tgt_path)
    if len(src) != len(tgt):
        raise AlignmentError(
            f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}"
        )
    if not src:
        log.warning("parallel corpus %s / %s is empty", src_path, tgt_path)
    keep = [i for i, (s, t) in enumerate(zip(src, tgt)) if s.strip() and t.strip()]
    if len(keep) != len(src):
        log.warning("dropping %d pairs with an empty side", len(src) - len(keep))
    return ParallelCorpus([src[i].strip() for i in keep], [tgt[i].strip() for i in keep], domain)


def load_mono(
    path: str | Path,
    max_sentences: int | None = None,
    rng: np.random.Generator | None = None,
    domain: str = "",
) -> MonoCorpus:
    """Read one sentence per line; optionally subsample uniformly without replacement."""
    lines = [line.strip() for line in _read_lines(path) if line.strip()]
    if max_sentences is not None and len(lines) > max_sentences:
        if rng is None:
            raise InputError("subsampling monolingual data needs an rng")
        chosen = np.sort(rng.choice(len(lines), size=max_sentences, replace=False))
        lines = [lines[i] for i in chosen]
    return MonoCorpus(lines, domain)


def write_lines(path: str | Path, lines: Sequence[str]) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

_SRC_CONSONANTS = "bdgklmnprst"
_SRC_VOWELS = "aeiou"
_TGT_CONSONANTS = "BDFGHKLMNPRSTVZ"
_TGT_VOWELS = "AEIOU"


@dataclass
class SyntheticTaskSpec:
    """Parameters of the dictionary-plus-reordering translation task.

    Source sentences draw words i.i.d. from a domain unigram.  The target is
    the word-by-word dictionary image with every adjacent window of
    ``reorder_window`` words reversed.  Domain B's unigram is domain A's
    Zipf ranking blended with a random ranking by ``domain_shift``.
    """

    vocab_size_src: int = 1000
    vocab_size_tgt: int = 1000
    reorder_window: int = 2
    zipf_exponent: float = 1.0
    domain_shift: float = 0.7
    min_len: int = 3
    max_len: int = 20
    seed: int = 1
    dictionary: dict[str, str] = field(default=None, repr=False)
    domain_a_unigram: np.ndarray = field(default=None, repr=False)
    domain_b_unigram: np.ndarray = field(default=None, repr=False)
    source_words: list[str] = field(default=None, repr=False)

    def __post_init__(self):
        if self.vocab_size_tgt < self.vocab_size_src:
            raise InputError("an injective dictionary needs vocab_size_tgt >= vocab_size_src")
        if not 1 <= self.min_len <= self.max_len:
            raise InputError("need 1 <= min_len <= max_len")
        if self.reorder_window < 1:
            raise InputError("reorder_window must be >= 1")
        if self.dictionary is None:
            self._build_lexicon()
        for name in ("domain_a_unigram", "domain_b_unigram"):
            if not math.isclose(float(getattr(self, name).sum()), 1.0, abs_tol=1e-9):
                raise InputError(f"{name} does not sum to 1")
        if len(set(self.dictionary.values())) != len(self.dictionary):
            raise InputError("dictionary is not injective")

    def _build_lexicon(self) -> None:
        rng = stage_rng(self.seed, "synthetic.lexicon")
        src_words = _random_words(rng, self.vocab_size_src, _SRC_CONSONANTS, _SRC_VOWELS)
        tgt_words = _random_words(rng, self.vocab_size_tgt, _TGT_CONSONANTS, _TGT_VOWELS)
        image = rng.permutation(self.vocab_size_tgt)[: self.vocab_size_src]
        self.source_words = src_words
        self.dictionary = {w: tgt_words[j] for w, j in zip(src_words, image)}
        n = self.vocab_size_src
        zipf = 1.0 / np.arange(1, n + 1) ** self.zipf_exponent
        zipf /= zipf.sum()
        rank_a = rng.permutation(n)
        shuffled = rng.permutation(n)
        key = (1.0 - self.domain_shift) * rank_a + self.domain_shift * shuffled
        rank_b = np.empty(n, dtype=np.int64)
        rank_b[np.argsort(key, kind="stable")] = np.arange(n)
        self.domain_a_unigram = zipf[rank_a]
        self.domain_b_unigram = zipf[rank_b]


def _random_words(rng: np.random.Generator, n: int, consonants: str, vowels: str) -> list[str]:
    syllables = [c + v for c in consonants for v in vowels]
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        k = int(rng.integers(1, 4))
        w = "".join(syllables[i] for i in rng.integers(0, len(syllables), size=k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def reorder_windows(tokens: Sequence, window: int) -> list:
    """Reverse each adjacent non-overlapping window (a short tail window too)."""
    out: list = []
    for start in range(0, len(tokens), window):
        out.extend(reversed(tokens[start : start + window]))
    return out


def translate_synthetic(spec: SyntheticTaskSpec, words: Sequence[str]) -> list[str]:
    return reorder_windows([spec.dictionary[w] for w in words], spec.reorder_window)


def _sample_sentences(spec: SyntheticTaskSpec, unigram: np.ndarray, n: int, label: str) -> list[list[str]]:
    rng = stage_rng(spec.seed, label)
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    words = spec.source_words
    draws = rng.choice(len(words), size=int(lengths.sum()), p=unigram)
    out = []
    pos = 0
    for length in lengths:
        out.append([words[i] for i in draws[pos : pos + length]])
        pos += length
    return out


@dataclass
class SyntheticTask:
    train: ParallelCorpus
    mono: MonoCorpus
    valid: ParallelCorpus
    test: ParallelCorpus
    domain_kl: float


def target_unigram_kl(in_domain: Sequence[str], out_domain: Sequence[str]) -> float:
    """KL(in || out) between add-one smoothed target word unigrams."""
    p = Counter(w for line in in_domain for w in line.split())
    q = Counter(w for line in out_domain for w in line.split())
    support = sorted(set(p) | set(q))
    pv = np.array([p[w] + 1.0 for w in support])
    qv = np.array([q[w] + 1.0 for w in support])
    pv /= pv.sum()
    qv /= qv.sum()
    return float((pv * np.log(pv / qv)).sum())


def generate_synthetic(
    spec: SyntheticTaskSpec,
    n_pairs: int = 10_000,
    n_mono: int = 50_000,
    n_valid: int = 500,
    n_test: int = 1_000,
) -> SyntheticTask:
    """Out-of-domain (A) parallel data; in-domain (B) mono, valid and test sets."""
    if min(n_pairs, n_mono, n_valid, n_test) < 0:
        raise InputError("corpus sizes must be non-negative")

    def parallel(unigram, n, label, domain):
        src = _sample_sentences(spec, unigram, n, label)
        return ParallelCorpus(
            [" ".join(s) for s in src],
            [" ".join(translate_synthetic(spec, s)) for s in src],
            domain,
        )

    train = parallel(spec.domain_a_unigram, n_pairs, "synthetic.train", "A")
    mono_src = _sample_sentences(spec, spec.domain_b_unigram, n_mono, "synthetic.mono")
    mono = MonoCorpus([" ".join(translate_synthetic(spec, s)) for s in mono_src], "B")
    valid = parallel(spec.domain_b_unigram, n_valid, "synthetic.valid", "B")
    test = parallel(spec.domain_b_unigram, n_test, "synthetic.test", "B")
    kl = float("nan")
    if n_pairs and n_mono:
        kl = target_unigram_kl(mono.sentences, train.tgt)
        if kl <= 0.1:
            log.warning("weak domain shift: target unigram KL(B||A) = %.3f", kl)
    return SyntheticTask(train, mono, valid, test, kl)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded id matrices; pad positions hold id 0.

    ``src`` carries a trailing <eos>; the decoder reads ``tgt_in`` (<bos> + e)
    and predicts ``tgt_out`` (e + <eos>).  ``src`` is ``None`` for
    target-only (language model) batches.
    """

    indices: np.ndarray
    src: np.ndarray | None
    src_mask: np.ndarray | None
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray

    @property
    def n_target_tokens(self) -> int:
        return int(self.tgt_mask.sum())

    def __len__(self) -> int:
        return len(self.indices)


def _pad(seqs: Sequence[Sequence[int]], prefix: Sequence[int] = (), suffix: Sequence[int] = ()):
    lengths = np.array([len(s) + len(prefix) + len(suffix) for s in seqs])
    out = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for row, s in enumerate(seqs):
        full = list(prefix) + list(s) + list(suffix)
        out[row, : len(full)] = full
    mask = np.arange(out.shape[1])[None, :] < lengths[:, None]
    return out, mask


def collate(src: Sequence[Sequence[int]] | None, tgt: Sequence[Sequence[int]], indices) -> Batch:
    tgt_in, tgt_mask = _pad(tgt, prefix=(BOS,))
    tgt_out, _ = _pad(tgt, suffix=(EOS,))
    if src is None:
        return Batch(np.asarray(indices), None, None, tgt_in, tgt_out, tgt_mask)
    src_arr, src_mask = _pad(src, suffix=(EOS,))
    return Batch(np.asarray(indices), src_arr, src_mask, tgt_in, tgt_out, tgt_mask)


def _corpus_sides(corpus) -> tuple[list | None, list]:
    if isinstance(corpus, ParallelCorpus):
        return corpus.src, corpus.tgt
    if isinstance(corpus, MonoCorpus):
        return None, corpus.sentences
    raise TypeError(f"cannot batch {type(corpus).__name__}")


def make_batches(corpus, max_tokens: int, rng: np.random.Generator | None) -> list[Batch]:
    """Length-bucketed batches whose padded size (rows x width) <= max_tokens.

    With an rng, equal-length sentences are shuffled and the batch order is
    permuted; with ``rng=None`` the order is deterministic (for evaluation).
    """
    src, tgt = _corpus_sides(corpus)
    sizes = np.array(
        [
            max(len(t), len(src[i]) if src is not None else 0) + 1
            for i, t in enumerate(tgt)
        ],
        dtype=np.int64,
    )
    if len(sizes) == 0:
        return []
    too_long = np.nonzero(sizes > max_tokens)[0]
    if too_long.size:
        i = int(too_long[0])
        raise InputError(f"sentence {i} has {sizes[i]} tokens, more than max_tokens={max_tokens}")
    order = np.arange(len(sizes)) if rng is None else rng.permutation(len(sizes))
    order = order[np.argsort(sizes[order], kind="stable")]
    groups: list[list[int]] = []
    current: list[int] = []
    width = 0
    for i in order:
        w = max(width, int(sizes[i]))
        if current and (len(current) + 1) * w > max_tokens:
            groups.append(current)
            current, w = [], int(sizes[i])
        current.append(int(i))
        width = w
    if current:
        groups.append(current)
    if rng is not None:
        groups = [groups[k] for k in rng.permutation(len(groups))]
    batches = []
    for g in groups:
        batches.append(
            collate(None if src is None else [src[i] for i in g], [tgt[i] for i in g], g)
        )
    return batches
