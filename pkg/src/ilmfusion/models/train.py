"""Epoch-based training with validation-perplexity checkpoint selection."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from ..data import MonoCorpus, ParallelCorpus, make_batches
from ..errors import ContractError, InputError, TrainingError
from ..numerics import (
    AdamConfig,
    AdamState,
    LrSchedule,
    Tensor,
    adam_step,
    backward,
    no_grad,
    stage_rng,
    zero_grad,
)
from .checkpoint import Checkpoint
from .transformer import Model, TransformerConfig, batch_loss, encode_batch, sequence_logprobs

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int = 20
    patience: int = 3
    max_tokens: int = 4096
    peak_lr: float = 1e-3
    warmup_steps: int = 400
    clip_norm: float | None = None
    max_steps: int | None = None
    log_every: int = 100

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: Mapping[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                raw = values[f.name]
                if raw == "None":
                    kwargs[f.name] = None
                elif f.name in ("peak_lr", "clip_norm"):
                    kwargs[f.name] = float(raw)
                else:
                    kwargs[f.name] = int(raw)
        return cls(**kwargs)


@dataclass
class FitResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_valid_ppl: float
    valid_history: list[float] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    steps: int = 0


def fit(
    params: Mapping[str, Tensor],
    loss_fn: Callable,
    train_data,
    valid_ppl: Callable[[], float],
    config: TrainConfig,
    rng: np.random.Generator,
) -> FitResult:
    """Optimise ``params`` with Adam on ``loss_fn(batch, rng) -> (summed loss, tokens)``.

    Validation perplexity is measured after every epoch; training stops
    after ``patience`` epochs without improvement and the parameters of the
    best epoch are returned (the live tensors keep their final values).
    With ``max_epochs == 0`` the initial parameters come back unchanged.
    """
    state = AdamState(schedule=LrSchedule(config.peak_lr, config.warmup_steps))
    adam_cfg = AdamConfig(clip_norm=config.clip_norm)
    result = FitResult({k: p.data for k, p in params.items()}, 0, math.inf)
    bad_epochs = 0
    for epoch in range(1, config.max_epochs + 1):
        started = time.time()
        epoch_loss = 0.0
        epoch_tokens = 0
        for batch in make_batches(train_data, config.max_tokens, rng):
            if config.max_steps is not None and result.steps >= config.max_steps:
                break
            zero_grad(params)
            loss, n_tokens = loss_fn(batch, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError("non-finite training loss", result.steps + 1)
            backward(loss * (1.0 / n_tokens))
            adam_step(params, {k: p.grad for k, p in params.items()}, state, adam_cfg)
            result.steps += 1
            epoch_loss += value
            epoch_tokens += n_tokens
            if config.log_every and result.steps % config.log_every == 0:
                log.info("step %d loss/token %.4f", result.steps, value / n_tokens)
        zero_grad(params)
        if epoch_tokens:
            result.train_losses.append(epoch_loss / epoch_tokens)
        ppl = valid_ppl()
        result.valid_history.append(ppl)
        log.info(
            "epoch %d train loss %.4f valid ppl %.3f (%.1fs)",
            epoch, result.train_losses[-1] if result.train_losses else float("nan"), ppl,
            time.time() - started,
        )
        if ppl < result.best_valid_ppl:
            result.best_valid_ppl = ppl
            result.best_epoch = epoch
            result.best_params = {k: p.data for k, p in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
        if config.max_steps is not None and result.steps >= config.max_steps:
            break
    return result


def corpus_logprob(model: Model, corpus, cross_fn=None, max_tokens: int = 8192) -> tuple[float, int]:
    """Teacher-forced total log-probability and token count (incl. <eos>)."""
    total = 0.0
    tokens = 0
    for batch in make_batches(corpus, max_tokens, None):
        if cross_fn is not None:
            cross = cross_fn(batch)
        elif model.kind == "nmt":
            with no_grad():
                cross = encode_batch(model, batch.src, batch.src_mask)
        else:
            cross = None
        total += float(sequence_logprobs(model, batch.tgt_in, batch.tgt_out, batch.tgt_mask, cross).sum())
        tokens += batch.n_target_tokens
    return total, tokens


def model_perplexity(model: Model, corpus) -> float:
    if len(corpus) == 0:
        raise InputError("perplexity of an empty corpus")
    total, tokens = corpus_logprob(model, corpus)
    return math.exp(-total / tokens)


def to_checkpoint(model: Model, params: Mapping[str, np.ndarray] | None = None, **meta) -> Checkpoint:
    arrays = dict(params) if params is not None else model.state_arrays()
    config = model.config.to_dict()
    config["kind"] = model.kind
    return Checkpoint(arrays, config, {k: str(v) for k, v in meta.items()})


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    kind = ckpt.config.get("kind")
    if kind not in ("nmt", "lm"):
        raise ContractError(f"checkpoint holds {kind!r}, not a model")
    return Model(TransformerConfig.from_dict(ckpt.config), ckpt.params, kind)


def train(
    model: Model,
    train_corpus: ParallelCorpus | MonoCorpus,
    valid_corpus: ParallelCorpus | MonoCorpus,
    config: TrainConfig,
    rng: np.random.Generator,
    evaluate: Callable[[Model], float] | None = None,
) -> Checkpoint:
    """Train ``model`` and return its best checkpoint by validation perplexity.

    On return ``model`` holds the selected parameters.  ``evaluate`` replaces
    the validation-perplexity measurement (used to test the selection rule).
    """
    expected = ParallelCorpus if model.kind == "nmt" else MonoCorpus
    if not isinstance(train_corpus, expected):
        raise ContractError(f"a {model.kind} model trains on a {expected.__name__}")

    def loss_fn(batch, batch_rng):
        return batch_loss(model, batch, train=True, rng=batch_rng)

    def valid_ppl():
        return evaluate(model) if evaluate is not None else model_perplexity(model, valid_corpus)

    result = fit(model.params, loss_fn, train_corpus, valid_ppl, config, rng)
    for name, arr in result.best_params.items():
        model.params[name].data = arr
    return to_checkpoint(
        model,
        epoch=result.best_epoch,
        valid_ppl=result.best_valid_ppl,
        steps=result.steps,
        valid_history=",".join(f"{v:.6g}" for v in result.valid_history),
    )


def train_seeded(
    kind: str,
    train_corpus: ParallelCorpus | MonoCorpus,
    valid_corpus: ParallelCorpus | MonoCorpus,
    model_config: TransformerConfig,
    train_config: TrainConfig,
    seed: int,
    label: str,
) -> tuple[Model, Checkpoint]:
    """Create and train a model with initialisation and batching streams
    derived from ``seed`` and ``label``, so identical calls agree bitwise."""
    model = Model.create(model_config, stage_rng(seed, f"{label}.init"), kind=kind)
    ckpt = train(model, train_corpus, valid_corpus, train_config, stage_rng(seed, f"{label}.train"))
    return model, ckpt
