"""Internal language model approximations of a trained translation model.

Each variant turns the translation decoder (or a stand-in) into a
source-free next-token distribution:

``separate-lm``     a language model trained on the parallel target side;
``h0``              encoder outputs replaced by zero vectors;
``havg``            encoder outputs replaced by per-position training means;
``cavg``            every layer's cross-attention output replaced by its
                    per-target-position training mean;
``mini-self-attn``  cross-attention replaced by a causal self-attention
                    module trained on target text with the rest frozen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import MonoCorpus, ParallelCorpus, make_batches
from .errors import ContractError, InputError
from .models.checkpoint import Checkpoint
from .models.train import TrainConfig, corpus_logprob, fit, model_perplexity, train
from .models.transformer import (
    ConstantEncoderOutputs,
    ContextOverride,
    DecoderStepState,
    EncoderOutputs,
    MiniSelfAttention,
    Model,
    TransformerConfig,
    batch_loss,
    decode_step,
    decoder_forward,
    encode_batch,
    start_decoding,
)
from .numerics import Tensor, no_grad
from .tokenizer import BOS, EOS

log = logging.getLogger(__name__)

VARIANT_NAMES = ("separate-lm", "h0", "havg", "cavg", "mini-self-attn")


# ---------------------------------------------------------------------------
# averaged statistics
# ---------------------------------------------------------------------------


@dataclass
class AvgStats:
    """Per-position means of encoder outputs and per-layer context vectors.

    ``h_avg[j]`` averages position j over all sentences with at least j+1
    encoder positions (``h_counts[j]`` of them).  ``c_avg[l][i]`` averages
    the layer-l cross-attention output at decoder position i.
    """

    h_avg: np.ndarray
    h_counts: np.ndarray
    c_avg: list[np.ndarray]
    c_counts: np.ndarray

    def to_checkpoint(self) -> Checkpoint:
        params = {"ilm.h_avg.mean": self.h_avg, "ilm.h_avg.counts": self.h_counts.astype(np.float64)}
        for layer, table in enumerate(self.c_avg):
            params[f"ilm.c_avg.layer{layer}.mean"] = table
        params["ilm.c_avg.counts"] = self.c_counts.astype(np.float64)
        return Checkpoint(params, {"kind": "ilm-avg-stats", "n_layers": str(len(self.c_avg))})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AvgStats":
        if ckpt.config.get("kind") != "ilm-avg-stats":
            raise ContractError("checkpoint does not hold averaged ILM statistics")
        n_layers = int(ckpt.config["n_layers"])
        return cls(
            ckpt.params["ilm.h_avg.mean"],
            ckpt.params["ilm.h_avg.counts"].astype(np.int64),
            [ckpt.params[f"ilm.c_avg.layer{k}.mean"] for k in range(n_layers)],
            ckpt.params["ilm.c_avg.counts"].astype(np.int64),
        )


class _RunningMean:
    """Position-wise running mean over sequences of varying length."""

    def __init__(self, dim: int):
        self.mean = np.zeros((0, dim))
        self.count = np.zeros(0, dtype=np.int64)

    def update(self, values: np.ndarray, mask: np.ndarray) -> None:
        # values (B, T, d), mask (B, T)
        width = values.shape[1]
        if width > self.mean.shape[0]:
            grow = width - self.mean.shape[0]
            self.mean = np.vstack([self.mean, np.zeros((grow, self.mean.shape[1]))])
            self.count = np.concatenate([self.count, np.zeros(grow, dtype=np.int64)])
        w = mask.astype(np.float64)
        batch_sum = np.einsum("bt,btd->td", w, values)
        batch_count = mask.sum(axis=0)
        new_count = self.count[:width] + batch_count
        seen = batch_count > 0
        delta = batch_sum[seen] - batch_count[seen, None] * self.mean[:width][seen]
        self.mean[:width][seen] += delta / new_count[seen, None]
        self.count[:width] = new_count


def extract_averages(model: Model, corpus: ParallelCorpus, max_tokens: int = 8192) -> AvgStats:
    """One teacher-forced pass (dropout off) accumulating h and c means."""
    if len(corpus) == 0:
        raise InputError("cannot extract averages from an empty corpus")
    d = model.config.d_model
    h_mean = _RunningMean(d)
    c_means = [_RunningMean(d) for _ in range(model.config.n_dec_layers)]
    for batch in make_batches(corpus, max_tokens, None):
        with no_grad():
            enc = encode_batch(model, batch.src, batch.src_mask)
            _, contexts = decoder_forward(model, batch.tgt_in, enc)
        h_mean.update(enc.h.data, batch.src_mask)
        for layer, c in enumerate(contexts):
            c_means[layer].update(c, batch.tgt_mask)
    return AvgStats(h_mean.mean, h_mean.count, [c.mean for c in c_means], c_means[0].count)


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------


class IlmVariant:
    """Common interface: batched incremental scoring plus teacher forcing."""

    name = ""
    uses_source_length = False

    def start(self, model: Model | None, src_lengths: np.ndarray) -> DecoderStepState:
        raise NotImplementedError

    def step(self, model: Model | None, state: DecoderStepState, prev) -> tuple[np.ndarray, DecoderStepState]:
        return decode_step(self.scoring_model(model), state, prev)

    def scoring_model(self, model: Model | None) -> Model:
        if model is None:
            raise ContractError(f"the {self.name} ILM needs the translation model")
        return model

    def cross_for_batch(self, src_lengths: np.ndarray):
        raise NotImplementedError


@dataclass
class SeparateLm(IlmVariant):
    lm: Model
    name = "separate-lm"

    def scoring_model(self, model):
        return self.lm

    def start(self, model, src_lengths):
        return start_decoding(self.lm, None, n_rows=len(src_lengths))

    def cross_for_batch(self, src_lengths):
        return None


@dataclass
class HZero(IlmVariant):
    d_model: int
    name = "h0"

    def start(self, model, src_lengths):
        return start_decoding(self.scoring_model(model), self.cross_for_batch(src_lengths))

    def cross_for_batch(self, src_lengths):
        return ConstantEncoderOutputs(np.zeros(self.d_model), np.asarray(src_lengths))


@dataclass
class HAvg(IlmVariant):
    stats: AvgStats
    name = "havg"
    uses_source_length = True

    def __post_init__(self):
        if self.stats.h_avg.shape[0] == 0:
            raise ContractError("h_avg statistics are empty")

    def start(self, model, src_lengths):
        return start_decoding(self.scoring_model(model), self.cross_for_batch(src_lengths))

    def cross_for_batch(self, src_lengths):
        lengths = np.asarray(src_lengths, dtype=np.int64)
        table = self.stats.h_avg
        width = int(lengths.max())
        pos = np.minimum(np.arange(width), table.shape[0] - 1)
        h = np.broadcast_to(table[pos], (len(lengths), width, table.shape[1])).copy()
        mask = np.arange(width)[None, :] < lengths[:, None]
        return EncoderOutputs(h, mask)


@dataclass
class CAvg(IlmVariant):
    stats: AvgStats
    name = "cavg"

    def __post_init__(self):
        if not self.stats.c_avg or self.stats.c_avg[0].shape[0] == 0:
            raise ContractError("c_avg statistics are empty")

    def start(self, model, src_lengths):
        return start_decoding(self.scoring_model(model), self.cross_for_batch(src_lengths), n_rows=len(src_lengths))

    def cross_for_batch(self, src_lengths):
        return ContextOverride(self.stats.c_avg)


@dataclass
class MiniSelfAttn(IlmVariant):
    module: MiniSelfAttention
    name = "mini-self-attn"

    def start(self, model, src_lengths):
        return start_decoding(self.scoring_model(model), self.module, n_rows=len(src_lengths))

    def cross_for_batch(self, src_lengths):
        return self.module


def ilm_score_step(
    variant: IlmVariant,
    model: Model | None,
    prefix: Sequence[int],
    prev_token: int,
    source_length: int,
) -> np.ndarray:
    """Next-token log-probabilities of a single hypothesis, computed from scratch.

    ``prefix`` lists the decoder inputs already consumed (starting with
    <bos>, empty at the first step) and ``prev_token`` is the newest input.
    """
    tokens = [*prefix, prev_token]
    if tokens[0] != BOS:
        raise ContractError("decoder inputs start with <bos>")
    state = variant.start(model, np.array([source_length]))
    logp = None
    for tok in tokens:
        logp, state = variant.step(model, state, [tok])
    return logp[0]


def _stepwise_logprob(variant: IlmVariant, model, corpus) -> tuple[float, int]:
    total = 0.0
    count = 0
    sources = corpus.src if isinstance(corpus, ParallelCorpus) else None
    for n, target in enumerate(corpus.tgt if isinstance(corpus, ParallelCorpus) else corpus.sentences):
        length = len(sources[n]) + 1 if sources is not None else len(target) + 1
        state = variant.start(model, np.array([length]))
        prev = BOS
        for tok in [*target, EOS]:
            logp, state = variant.step(model, state, [prev])
            total += float(logp[0, tok])
            prev = tok
        count += len(target) + 1
    return total, count


def ilm_perplexity(variant: IlmVariant, model: Model | None, corpus: MonoCorpus | ParallelCorpus) -> float:
    """Perplexity of the target side under the ILM, <eos> included.

    With a parallel corpus the real source lengths (plus the appended <eos>)
    are used; only ``havg`` depends on them.  For target-only text the target
    length plus one stands in.  Variants without a batched teacher-forced
    path are scored step by step.
    """
    if len(corpus) == 0:
        raise InputError("perplexity of an empty corpus")
    if isinstance(variant, SeparateLm):
        target = corpus if isinstance(corpus, MonoCorpus) else MonoCorpus(list(corpus.tgt))
        return model_perplexity(variant.lm, target)
    if not isinstance(variant, (HZero, HAvg, CAvg, MiniSelfAttn)):
        total, tokens = _stepwise_logprob(variant, model, corpus)
        return math.exp(-total / tokens)

    def cross_fn(batch):
        mask = batch.src_mask if batch.src_mask is not None else batch.tgt_mask
        return variant.cross_for_batch(mask.sum(axis=1))

    total, tokens = corpus_logprob(variant.scoring_model(model), corpus, cross_fn=cross_fn)
    return math.exp(-total / tokens)


# ---------------------------------------------------------------------------
# training the learned variants
# ---------------------------------------------------------------------------


def train_separate_lm(
    parallel: ParallelCorpus,
    lm_config: TransformerConfig,
    train_config: TrainConfig,
    rng: np.random.Generator,
    valid: MonoCorpus,
) -> tuple[Model, Checkpoint]:
    """Language model on the target side of the parallel training data."""
    lm = Model.create(lm_config, rng, kind="lm")
    ckpt = train(lm, MonoCorpus(list(parallel.tgt), parallel.domain), valid, train_config, rng)
    ckpt.config["role"] = "separate-lm"
    return lm, ckpt


def train_mini_self_attn(
    model: Model,
    target_corpus: MonoCorpus,
    train_config: TrainConfig,
    rng: np.random.Generator,
    valid: MonoCorpus,
    lr_scale: float = 0.5,
) -> MiniSelfAttention:
    """Fit replacement attention modules; the translation model stays untouched.

    The frozen view shares the translation model's arrays without recording
    gradients for them, and only the mini-module tensors are handed to the
    optimiser.
    """
    frozen = model.frozen()
    module = MiniSelfAttention.create(model.config, rng)
    config = replace(train_config, peak_lr=train_config.peak_lr * lr_scale)
    variant = MiniSelfAttn(module)

    def loss_fn(batch, batch_rng):
        return batch_loss(frozen, batch, train=True, rng=batch_rng, cross_override=module)

    def valid_ppl():
        return ilm_perplexity(variant, frozen, valid)

    result = fit(module.params, loss_fn, target_corpus, valid_ppl, config, rng)
    return MiniSelfAttention({k: Tensor(v, requires_grad=True) for k, v in result.best_params.items()})


def mini_to_checkpoint(module: MiniSelfAttention) -> Checkpoint:
    return Checkpoint({k: v.data for k, v in module.params.items()}, {"kind": "ilm-mini-self-attn"})


def mini_from_checkpoint(ckpt: Checkpoint) -> MiniSelfAttention:
    if ckpt.config.get("kind") != "ilm-mini-self-attn":
        raise ContractError("checkpoint does not hold mini self-attention parameters")
    return MiniSelfAttention({k: Tensor(v, requires_grad=True) for k, v in ckpt.params.items()})


def make_variant(
    name: str,
    model: Model,
    *,
    separate_lm: Model | None = None,
    stats: AvgStats | None = None,
    mini: MiniSelfAttention | None = None,
) -> IlmVariant:
    """Build a variant from its command-line name and the payload it needs."""
    if name == "separate-lm":
        if separate_lm is None:
            raise ContractError("separate-lm needs a language model")
        return SeparateLm(separate_lm)
    if name == "h0":
        return HZero(model.config.d_model)
    if name in ("havg", "cavg"):
        if stats is None:
            raise ContractError(f"{name} needs averaged statistics")
        return HAvg(stats) if name == "havg" else CAvg(stats)
    if name == "mini-self-attn":
        if mini is None:
            raise ContractError("mini-self-attn needs trained module parameters")
        return MiniSelfAttn(mini)
    raise ValueError(f"unknown ILM variant {name!r}; choose from {', '.join(VARIANT_NAMES)}")


__all__ = [
    "AvgStats",
    "CAvg",
    "HAvg",
    "HZero",
    "IlmVariant",
    "MiniSelfAttn",
    "SeparateLm",
    "VARIANT_NAMES",
    "extract_averages",
    "ilm_perplexity",
    "ilm_score_step",
    "make_variant",
    "mini_from_checkpoint",
    "mini_to_checkpoint",
    "train_mini_self_attn",
    "train_separate_lm",
]
