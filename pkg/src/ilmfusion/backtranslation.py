"""Back-translation: reverse model, synthetic sources, retraining on the mix."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .data import MonoCorpus, ParallelCorpus, write_lines
from .decoding import BeamConfig, FusionWeights, translate_corpus
from .errors import ConfigError
from .models.checkpoint import Checkpoint, checkpoint_digest
from .models.train import TrainConfig, train_seeded
from .models.transformer import Model, TransformerConfig
from .numerics import stage_rng
from .tokenizer import Codec

log = logging.getLogger(__name__)


@dataclass
class BtPipelineConfig:
    reverse_model: TransformerConfig
    forward_model: TransformerConfig
    reverse_train: TrainConfig = field(default_factory=TrainConfig)
    forward_train: TrainConfig = field(default_factory=TrainConfig)
    synth_beam: BeamConfig = field(default_factory=BeamConfig)
    upsample: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.upsample < 1:
            raise ConfigError("upsample factor must be >= 1")


@dataclass
class BtResult:
    model: Model
    checkpoint: Checkpoint
    reverse_checkpoint: Checkpoint
    synthetic: ParallelCorpus
    combined_size: int


def train_reverse(
    parallel: ParallelCorpus,
    valid: ParallelCorpus,
    model_config: TransformerConfig,
    train_config: TrainConfig,
    seed: int,
) -> tuple[Model, Checkpoint]:
    """Target-to-source model on the swapped parallel data (same vocabulary)."""
    model, ckpt = train_seeded(
        "nmt", parallel.swapped(), valid.swapped(), model_config, train_config, seed, "bt.reverse"
    )
    ckpt.meta["direction"] = "reverse"
    return model, ckpt


def synthesize(
    mono: MonoCorpus,
    reverse: Model | Callable[[Sequence[Sequence[int]]], list[list[int]]],
    beam_config: BeamConfig,
    workers: int = 1,
) -> ParallelCorpus:
    """Pair every monolingual sentence (kept verbatim as the target) with a
    plain beam-search translation as its source.  ``reverse`` may also be a
    function mapping a list of sentences to their translations."""
    sentences = list(mono.sentences)
    if not sentences:
        return ParallelCorpus([], [], mono.domain)
    if isinstance(reverse, Model):
        hyps = translate_corpus(sentences, reverse, None, FusionWeights(), beam_config, workers=workers)
        sources = [h.content for h in hyps]
    else:
        sources = [list(s) for s in reverse(sentences)]
    return ParallelCorpus(sources, sentences, mono.domain)


def combine(real: ParallelCorpus, synthetic: ParallelCorpus, upsample: int, seed: int) -> ParallelCorpus:
    """Real data repeated ``upsample`` times plus the synthetic pairs, shuffled.

    With nothing to mix in (no synthetic pairs, upsample 1) the real corpus
    is returned as is, so training on it matches plain training exactly.
    """
    if upsample < 1:
        raise ConfigError("upsample factor must be >= 1")
    if len(synthetic) == 0 and upsample == 1:
        return real
    pairs = real.pairs * upsample + synthetic.pairs
    order = stage_rng(seed, "bt.mix").permutation(len(pairs))
    return ParallelCorpus([pairs[i][0] for i in order], [pairs[i][1] for i in order], real.domain)


def run_pipeline(
    parallel: ParallelCorpus,
    mono: MonoCorpus,
    valid: ParallelCorpus,
    config: BtPipelineConfig,
    seed: int,
    forward_label: str = "mt",
) -> BtResult:
    """Reverse model, synthesis, mixing, and the final forward model.

    The final model uses the same seed streams as plain forward training
    (``forward_label``), and checkpoint selection runs on the real
    validation set.
    """
    reverse, reverse_ckpt = train_reverse(parallel, valid, config.reverse_model, config.reverse_train, seed)
    log.info("reverse model: valid ppl %s", reverse_ckpt.meta.get("valid_ppl"))
    synthetic = synthesize(mono, reverse, config.synth_beam, workers=config.workers)
    combined = combine(parallel, synthetic, config.upsample, seed)
    log.info("training on %d real x%d + %d synthetic pairs", len(parallel), config.upsample, len(synthetic))
    model, ckpt = train_seeded(
        "nmt", combined, valid, config.forward_model, config.forward_train, seed, forward_label
    )
    ckpt.meta["bt_synthetic"] = str(len(synthetic))
    ckpt.meta["bt_upsample"] = str(config.upsample)
    ckpt.meta["bt_reverse_sha256"] = checkpoint_digest(reverse_ckpt)
    return BtResult(model, ckpt, reverse_ckpt, synthetic, len(combined))


def write_synthetic(
    corpus: ParallelCorpus,
    codec: Codec,
    prefix: str | Path,
    seed: int,
    reverse_checkpoint: Checkpoint,
) -> tuple[Path, Path, Path]:
    """Write ``prefix.src``/``prefix.tgt`` (detokenized) and a provenance sidecar."""
    prefix = Path(prefix)
    src_path = prefix.with_name(prefix.name + ".src")
    tgt_path = prefix.with_name(prefix.name + ".tgt")
    meta_path = prefix.with_name(prefix.name + ".provenance")
    write_lines(src_path, [codec.decode(s) for s in corpus.src])
    write_lines(tgt_path, [codec.decode(t) for t in corpus.tgt])
    meta_path.write_text(
        f"seed={seed}\nreverse_sha256={checkpoint_digest(reverse_checkpoint)}\nsentences={len(corpus)}\n",
        encoding="utf-8",
    )
    return src_path, tgt_path, meta_path


__all__ = [
    "BtPipelineConfig",
    "BtResult",
    "combine",
    "run_pipeline",
    "synthesize",
    "train_reverse",
    "write_synthetic",
]
