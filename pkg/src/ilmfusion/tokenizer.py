"""Joint byte-pair encoding and vocabulary handling.

Words are split into characters with an end-of-word marker fused onto the
final character (``"ab"`` -> ``["a", "b</w>"]``).  Merges are learned greedily
by word-frequency-weighted pair counts; ties go to the lexicographically
smallest pair, which makes learning a pure function of the corpus multiset.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError, InputError

log = logging.getLogger(__name__)

EOW = "</w>"
PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
BPE_HEADER = "#version: ilmfusion-bpe 1"

Pair = tuple[str, str]


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _merge_pair(symbols: tuple[str, ...], pair: Pair) -> tuple[str, ...]:
    left, right = pair
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


@dataclass
class BpeModel:
    merges: list[Pair]
    end_of_word_marker: str = EOW
    _ranks: dict[Pair, int] = field(init=False, repr=False)
    _cache: dict[str, tuple[str, ...]] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self._ranks = {}
        for rank, pair in enumerate(self.merges):
            if pair in self._ranks:
                raise InputError(f"duplicate merge {pair}")
            self._ranks[pair] = rank

    def segment_word(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = _word_symbols(word)
        ranks = self._ranks
        while len(symbols) > 1:
            # Lowest-rank pair present: equivalent to replaying merges in order,
            # since a merge can only enable pairs that were learned after it.
            best = None
            best_rank = len(ranks)
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and r < best_rank:
                    best, best_rank = pair, r
            if best is None:
                break
            symbols = _merge_pair(symbols, best)
        self._cache[word] = symbols
        return symbols

    def save(self, path: str | Path) -> None:
        lines = [BPE_HEADER] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        text = Path(path).read_text(encoding="utf-8").splitlines()
        if not text or text[0] != BPE_HEADER:
            raise FormatError(f"{path}: missing BPE header line {BPE_HEADER!r}", offset=0)
        merges = []
        for lineno, line in enumerate(text[1:], start=2):
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise FormatError(f"{path}: line {lineno} is not 'left right'")
            merges.append((parts[0], parts[1]))
        return cls(merges)


def learn_bpe(corpus: Iterable[str], num_merges: int) -> BpeModel:
    """Learn ``num_merges`` merges (fewer if no pair occurs at least twice)."""
    if num_merges < 0:
        raise ValueError("num_merges must be non-negative")
    word_freq = Counter(w for line in corpus for w in line.split())
    if not word_freq:
        raise InputError("cannot learn BPE from an empty corpus")
    words = [[_word_symbols(w), f] for w, f in sorted(word_freq.items())]
    stats: Counter[Pair] = Counter()
    index: dict[Pair, set[int]] = defaultdict(set)
    for i, (symbols, freq) in enumerate(words):
        for pair in zip(symbols, symbols[1:]):
            stats[pair] += freq
            index[pair].add(i)

    merges: list[Pair] = []
    while len(merges) < num_merges and stats:
        pair, count = min(stats.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < 2:
            break
        merges.append(pair)
        for i in sorted(index.pop(pair, ())):
            symbols, freq = words[i]
            merged = _merge_pair(symbols, pair)
            if merged == symbols:
                continue
            for old in zip(symbols, symbols[1:]):
                stats[old] -= freq
                if stats[old] <= 0:
                    del stats[old]
            for new in zip(merged, merged[1:]):
                stats[new] += freq
                index[new].add(i)
            words[i][0] = merged
        stats.pop(pair, None)
    log.debug("learned %d merges", len(merges))
    return BpeModel(merges)


def apply_bpe(model: BpeModel, line: str) -> list[str]:
    tokens: list[str] = []
    for word in line.split():
        tokens.extend(model.segment_word(word))
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    pieces: list[str] = []
    for tok in tokens:
        if tok.endswith(EOW):
            pieces.append(tok[: -len(EOW)])
            pieces.append(" ")
        else:
            pieces.append(tok)
    return "".join(pieces).rstrip(" ")


class Vocabulary:
    """Token <-> id lookup with reserved ids 0..3."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.id_to_token: list[str] = list(RESERVED)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.token_to_id:
                raise InputError(f"duplicate vocabulary entry {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def save(self, path: str | Path) -> None:
        body = self.id_to_token[len(RESERVED):]
        Path(path).write_text("".join(t + "\n" for t in body), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(tokenized: Iterable[Sequence[str]]) -> Vocabulary:
    """Vocabulary ordered by descending frequency, ties lexicographic."""
    counts = Counter(tok for line in tokenized for tok in line)
    for reserved in RESERVED:
        counts.pop(reserved, None)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(ordered)


def encode_ids(vocab: Vocabulary, tokens: Sequence[str]) -> list[int]:
    lookup = vocab.token_to_id
    return [lookup.get(t, UNK) for t in tokens]


def decode_ids(vocab: Vocabulary, ids: Sequence[int]) -> list[str]:
    n = len(vocab)
    out = []
    for i in ids:
        if not 0 <= i < n:
            raise IndexError(f"id {i} outside vocabulary of size {n}")
        out.append(vocab.id_to_token[i])
    return out


@dataclass
class Codec:
    """A BPE model and vocabulary used together for text <-> id conversion."""

    bpe: BpeModel
    vocab: Vocabulary

    def encode(self, line: str) -> list[int]:
        return encode_ids(self.vocab, apply_bpe(self.bpe, line))

    def decode(self, ids: Sequence[int]) -> str:
        keep = [i for i in ids if i not in (PAD, BOS, EOS)]
        return detokenize(decode_ids(self.vocab, keep))

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.bpe.save(directory / "bpe.codes")
        self.vocab.save(directory / "vocab.txt")

    @classmethod
    def load(cls, directory: str | Path) -> "Codec":
        directory = Path(directory)
        return cls(BpeModel.load(directory / "bpe.codes"), Vocabulary.load(directory / "vocab.txt"))

    @classmethod
    def learn(cls, lines: Sequence[str], num_merges: int) -> "Codec":
        bpe = learn_bpe(lines, num_merges)
        return cls(bpe, build_vocab(apply_bpe(bpe, line) for line in lines))
