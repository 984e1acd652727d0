"""Beam search over the fused score log P_MT + l1 * log P_LM - l2 * log P_ILM.

The search is batched: several sentences advance together, each owning
``beam_size`` consecutive rows of the scorer states.  Every scorer follows
the same three-call protocol (``start``, ``step``, ``select``) so tests can
substitute table-driven stubs for the neural models.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .ilm import IlmVariant
from .models.transformer import EncoderOutputs, Model, encode_batch, pad_sources, start_decoding, decode_step
from .numerics import no_grad
from .tokenizer import BOS, EOS, PAD, Codec


@dataclass(frozen=True)
class FusionWeights:
    lambda1: float = 0.0
    lambda2: float = 0.0
    variant: IlmVariant | None = None

    def __post_init__(self):
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise ConfigError(f"fusion weights must be non-negative, got ({self.lambda1}, {self.lambda2})")
        if self.lambda2 > 0 and self.variant is None:
            raise ConfigError("lambda2 > 0 needs an ILM variant")

    @property
    def uses_lm(self) -> bool:
        return self.lambda1 > 0

    @property
    def uses_ilm(self) -> bool:
        return self.lambda2 > 0


@dataclass(frozen=True)
class BeamConfig:
    """Beam width, length cap ``a * J + b`` and final length-normalisation exponent."""

    beam_size: int = 12
    max_len_a: float = 2.0
    max_len_b: int = 10
    alpha: float = 1.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be at least 1")
        if self.max_len_a < 0 or self.max_len_b < 0 or (self.max_len_a == 0 and self.max_len_b == 0):
            raise ConfigError("the length cap must allow at least one token")

    def max_len(self, source_length: int) -> int:
        return max(1, int(math.floor(self.max_len_a * source_length + self.max_len_b)))


@dataclass(frozen=True)
class Hypothesis:
    """A finished translation; ``tokens`` ends with <eos> and excludes <bos>."""

    tokens: tuple[int, ...]
    log_mt: float
    log_lm: float
    log_ilm: float
    fused: float
    finished: bool = True

    def normalized(self, alpha: float) -> float:
        return self.fused / (len(self.tokens) ** alpha) if alpha else self.fused

    @property
    def content(self) -> list[int]:
        return list(self.tokens[:-1]) if self.tokens and self.tokens[-1] == EOS else list(self.tokens)


def fused_step_score(log_mt, log_lm, log_ilm, weights: FusionWeights) -> np.ndarray:
    """Elementwise log_mt + l1 * log_lm - l2 * log_ilm; a term with weight 0 is skipped."""
    out = np.asarray(log_mt, dtype=np.float64)
    for vec, coeff in ((log_lm, weights.lambda1), (log_ilm, -weights.lambda2)):
        if coeff == 0:
            continue
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != out.shape:
            raise DimensionError(f"score vectors differ in shape: {out.shape} vs {vec.shape}")
        out = out + coeff * vec
    return out


# ---------------------------------------------------------------------------
# scorers
# ---------------------------------------------------------------------------


class Scorer(Protocol):
    def start(self, sources: Sequence[Sequence[int]], rows_per_source: int): ...

    def step(self, state, prev: np.ndarray) -> tuple[np.ndarray, object]: ...

    def select(self, state, idx: np.ndarray): ...


class MtScorer:
    def __init__(self, model: Model):
        self.model = model
        self.max_positions = model.config.max_positions

    def start(self, sources, rows_per_source):
        ids, mask = pad_sources(sources)
        with no_grad():
            enc = encode_batch(self.model, ids, mask)
        memory = EncoderOutputs(enc.h.data, mask).select(np.repeat(np.arange(len(sources)), rows_per_source))
        return start_decoding(self.model, memory)

    def step(self, state, prev):
        return decode_step(self.model, state, prev)

    def select(self, state, idx):
        return state.select(idx)


class LmScorer:
    def __init__(self, lm: Model):
        self.lm = lm
        self.max_positions = lm.config.max_positions

    def start(self, sources, rows_per_source):
        return start_decoding(self.lm, None, n_rows=len(sources) * rows_per_source)

    def step(self, state, prev):
        return decode_step(self.lm, state, prev)

    def select(self, state, idx):
        return state.select(idx)


class IlmScorer:
    """Adapts an :class:`IlmVariant` (plus the translation model it ablates)."""

    def __init__(self, variant: IlmVariant, model: Model | None):
        self.variant = variant
        self.model = model

    def start(self, sources, rows_per_source):
        lengths = np.repeat([len(f) + 1 for f in sources], rows_per_source)
        return self.variant.start(self.model, lengths)

    def step(self, state, prev):
        return self.variant.step(self.model, state, prev)

    def select(self, state, idx):
        return state.select(idx)


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def search(
    sources: Sequence[Sequence[int]],
    mt: Scorer,
    lm: Scorer | None,
    ilm: Scorer | None,
    weights: FusionWeights,
    config: BeamConfig,
    *,
    eos: int = EOS,
    bos: int = BOS,
    banned: Sequence[int] = (PAD, BOS),
) -> list[list[Hypothesis]]:
    """Beam search for a batch of sources; returns each sentence's finished
    hypotheses ranked best first by length-normalised fused score.

    Per step the top candidates of every sentence are ranked by cumulative
    fused score (ties by token sequence).  Candidates ending in <eos> within
    the first ``beam_size`` ranks are finished; the beam is refilled with
    the best ``beam_size`` others.  A sentence stops once ``beam_size``
    hypotheses have finished or its length cap is hit, where only <eos> is
    allowed.
    """
    if weights.uses_lm and lm is None:
        raise ConfigError("lambda1 > 0 needs a language model")
    if weights.uses_ilm and ilm is None:
        raise ConfigError("lambda2 > 0 needs an ILM scorer")
    k = config.beam_size
    n_src = len(sources)
    if n_src == 0:
        return []
    scorers = {"mt": mt}
    if weights.uses_lm:
        scorers["lm"] = lm
    if weights.uses_ilm:
        scorers["ilm"] = ilm
    cap = min((getattr(s, "max_positions", None) or 1 << 30) for s in scorers.values())
    limits = np.array([min(config.max_len(len(f)), cap) for f in sources])
    states = {name: s.start(sources, k) for name, s in scorers.items()}

    active = np.arange(n_src)
    n_rows = n_src * k
    cum = np.full(n_rows, -np.inf)
    cum[::k] = 0.0
    parts = {name: np.zeros(n_rows) for name in ("mt", "lm", "ilm")}
    prefixes: list[tuple[int, ...]] = [()] * n_rows
    prev = np.full(n_rows, bos, dtype=np.int64)
    finished: list[list[Hypothesis]] = [[] for _ in range(n_src)]
    banned = np.asarray(sorted(set(banned) - {eos}), dtype=np.int64)
    t = 0

    while len(active):
        t += 1
        logps = {}
        for name, scorer in scorers.items():
            logps[name], states[name] = scorer.step(states[name], prev)
        vocab = logps["mt"].shape[1]
        step = fused_step_score(logps["mt"], logps.get("lm"), logps.get("ilm"), weights)
        cand = cum[:, None] + step
        if banned.size:
            cand[:, banned] = -np.inf
        at_limit = limits[active] <= t
        if at_limit.any():
            rows = np.flatnonzero(np.repeat(at_limit, k))
            keep = cand[rows, eos].copy()
            cand[rows] = -np.inf
            cand[rows, eos] = keep

        cand = cand.reshape(len(active), k * vocab)
        src_rows: list[int] = []
        new_tok: list[int] = []
        new_cum: list[float] = []
        still_active: list[int] = []
        for slot, sent in enumerate(active):
            flat = cand[slot]
            ranked = _top_candidates(flat, 2 * k, prefixes, slot * k, vocab)
            live = 0
            for rank, c in enumerate(ranked):
                row = slot * k + c // vocab
                tok = c % vocab
                if tok == eos:
                    if rank < k:
                        finished[sent].append(Hypothesis(
                            prefixes[row] + (eos,),
                            *(float(parts[n][row] + logps[n][row, tok]) if n in logps else 0.0
                              for n in ("mt", "lm", "ilm")),
                            float(flat[c]),
                        ))
                elif live < k:
                    src_rows.append(row)
                    new_tok.append(tok)
                    new_cum.append(float(flat[c]))
                    live += 1
                if live >= k and rank >= k - 1:
                    break
            if len(finished[sent]) >= k or at_limit[slot] or live == 0:
                del src_rows[len(src_rows) - live:]
                del new_tok[len(new_tok) - live:]
                del new_cum[len(new_cum) - live:]
                continue
            for _ in range(k - live):
                src_rows.append(slot * k)
                new_tok.append(eos)
                new_cum.append(-np.inf)
            still_active.append(sent)

        if not still_active:
            break
        idx = np.asarray(src_rows, dtype=np.int64)
        tok_arr = np.asarray(new_tok, dtype=np.int64)
        for name, scorer in scorers.items():
            states[name] = scorer.select(states[name], idx)
        for name in parts:
            if name in logps:
                parts[name] = parts[name][idx] + logps[name][idx, tok_arr]
            else:
                parts[name] = np.zeros(len(idx))
        cum = np.asarray(new_cum)
        prefixes = [prefixes[r] + (tok,) for r, tok in zip(src_rows, new_tok)]
        prev = tok_arr
        active = np.asarray(still_active)

    alpha = config.alpha
    return [sorted(h, key=lambda h: (-h.normalized(alpha), h.tokens)) for h in finished]


def _top_candidates(flat: np.ndarray, m: int, prefixes, row0: int, vocab: int) -> list[int]:
    """Indices of the best ``m`` finite entries (all ties at the cut included),
    sorted by score descending then by resulting token sequence."""
    finite = np.isfinite(flat)
    n_finite = int(finite.sum())
    if n_finite == 0:
        return []
    if n_finite <= m:
        pool = np.flatnonzero(finite)
    else:
        part = np.argpartition(-flat, m - 1)[:m]
        cut = flat[part].min()
        pool = np.flatnonzero(flat >= cut)
    return sorted(pool.tolist(), key=lambda c: (-flat[c], prefixes[row0 + c // vocab] + (c % vocab,)))


def _scorers(mt_model: Model, lm_model: Model | None, weights: FusionWeights):
    lm = LmScorer(lm_model) if weights.uses_lm and lm_model is not None else None
    ilm = IlmScorer(weights.variant, mt_model) if weights.uses_ilm else None
    return MtScorer(mt_model), lm, ilm


def beam_search(
    f: Sequence[int],
    mt_model: Model,
    lm_model: Model | None,
    weights: FusionWeights,
    config: BeamConfig,
) -> tuple[Hypothesis, list[Hypothesis]]:
    """Best hypothesis for one source plus the ranked n-best list."""
    if len(f) == 0:
        raise InputError("empty source sentence")
    mt, lm, ilm = _scorers(mt_model, lm_model, weights)
    nbest = search([list(f)], mt, lm, ilm, weights, config)[0]
    return nbest[0], nbest


def translate_corpus(
    sources: Sequence[Sequence[int]],
    mt_model: Model,
    lm_model: Model | None,
    weights: FusionWeights,
    config: BeamConfig,
    *,
    chunk_size: int = 64,
    workers: int = 1,
) -> list[Hypothesis]:
    """Best hypothesis per source, in input order.

    Sentences are batched in a canonical order (by length, then content), so
    the result for a sentence does not depend on where it sits in the input.
    """
    for i, f in enumerate(sources):
        if len(f) == 0:
            raise InputError(f"sentence {i}: empty source sentence")
    order = sorted(range(len(sources)), key=lambda i: (len(sources[i]), tuple(sources[i])))
    chunks = [order[i : i + chunk_size] for i in range(0, len(order), chunk_size)]
    mt, lm, ilm = _scorers(mt_model, lm_model, weights)

    def run(chunk):
        return search([list(sources[i]) for i in chunk], mt, lm, ilm, weights, config)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    out: list[Hypothesis | None] = [None] * len(sources)
    for chunk, nbests in zip(chunks, results):
        for i, nbest in zip(chunk, nbests):
            out[i] = nbest[0]
    return out


def write_hypotheses(path: str | Path, hyps: Sequence[Hypothesis], codec: Codec) -> None:
    lines = [codec.decode(h.content) for h in hyps]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def write_score_table(path: str | Path, hyps: Sequence[Hypothesis]) -> None:
    """Tab-separated fused score, log_mt, log_lm, log_ilm and length per line."""
    rows = [
        f"{h.fused!r}\t{h.log_mt!r}\t{h.log_lm!r}\t{h.log_ilm!r}\t{len(h.tokens)}"
        for h in hyps
    ]
    Path(path).write_text("".join(r + "\n" for r in rows), encoding="utf-8")


__all__ = [
    "BeamConfig",
    "FusionWeights",
    "Hypothesis",
    "IlmScorer",
    "LmScorer",
    "MtScorer",
    "Scorer",
    "beam_search",
    "fused_step_score",
    "search",
    "translate_corpus",
    "write_hypotheses",
    "write_score_table",
]
