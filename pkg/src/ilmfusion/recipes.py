"""The desk-scale domain-adaptation experiment, end to end.

One call of :func:`run_paper_trends` performs, for a single seed:

1. generate the synthetic task (out-of-domain parallel data, in-domain
   monolingual, validation and test sets) and learn joint BPE;
2. train the baseline translation model, the external in-domain LM and the
   two learned ILMs, and extract the averaged statistics;
3. measure ILM perplexities on the in-domain validation targets;
4. grid-search the fusion weights on validation BLEU with the
   mini-self-attention ILM;
5. decode the test set as baseline, shallow fusion and fusion with ILM
   subtraction, and train plus decode a back-translation system.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .backtranslation import BtPipelineConfig, run_pipeline
from .data import MonoCorpus, SyntheticTaskSpec, generate_synthetic
from .decoding import BeamConfig, FusionWeights, translate_corpus
from .ilm import (
    CAvg,
    HAvg,
    HZero,
    MiniSelfAttn,
    SeparateLm,
    extract_averages,
    ilm_perplexity,
    train_mini_self_attn,
)
from .metrics import corpus_bleu
from .models.train import TrainConfig, train_seeded
from .models.transformer import TransformerConfig
from .numerics import stage_rng
from .tokenizer import Codec
from .tuning import GridSpec, bleu_evaluator, export_heatmap_csv, grid_search

log = logging.getLogger(__name__)


@dataclass
class TrendsConfig:
    """Scale and hyperparameters of the experiment (defaults: desk scale)."""

    n_pairs: int = 10_000
    n_mono: int = 50_000
    n_valid: int = 500
    n_test: int = 1_000
    vocab_words: int = 400
    zipf_exponent: float = 1.2
    domain_shift: float = 0.7
    max_sentence_words: int = 15
    bpe_merges: int = 500
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ffn: int = 128
    dropout: float = 0.1
    label_smoothing: float = 0.1
    peak_lr: float = 3e-3
    warmup_steps: int = 200
    max_tokens: int = 2048
    mt_epochs: int = 20
    lm_epochs: int = 8
    ilm_epochs: int = 8
    bt_epochs: int = 12
    patience: int = 3
    beam_size: int = 12
    grid_step: float = 0.1
    grid_max: float = 0.6

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, str]) -> "TrendsConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = type(f.default)(values[f.name])
        return cls(**kwargs)

    def task_spec(self, seed: int) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            vocab_size_src=self.vocab_words,
            vocab_size_tgt=self.vocab_words,
            zipf_exponent=self.zipf_exponent,
            domain_shift=self.domain_shift,
            max_len=self.max_sentence_words,
            seed=seed,
        )

    def model_config(self, vocab_size: int) -> TransformerConfig:
        return TransformerConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_enc_layers=self.n_layers,
            n_dec_layers=self.n_layers,
            d_ffn=self.d_ffn,
            dropout=self.dropout,
            label_smoothing=self.label_smoothing,
        )

    def train_config(self, epochs: int) -> TrainConfig:
        return TrainConfig(
            max_epochs=epochs,
            patience=self.patience,
            max_tokens=self.max_tokens,
            peak_lr=self.peak_lr,
            warmup_steps=self.warmup_steps,
            log_every=0,
        )

    def grid(self) -> GridSpec:
        n = int(round(self.grid_max / self.grid_step))
        axis = tuple(round(i * self.grid_step, 10) for i in range(n + 1))
        return GridSpec(axis, axis)


@dataclass
class TrendsResult:
    seed: int
    ilm_ppl: dict[str, float]
    test_bleu: dict[str, float]
    valid_bleu: dict[str, float]
    weights: dict[str, list[float]]
    domain_kl: float
    seconds: float
    stage_seconds: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrendsResult":
        return cls(**json.loads(text))

    def table1_holds(self) -> bool:
        learned = min(self.ilm_ppl["separate-lm"], self.ilm_ppl["mini-self-attn"])
        ablated = min(self.ilm_ppl["h0"], self.ilm_ppl["havg"], self.ilm_ppl["cavg"])
        return learned < ablated

    def table3_margins(self) -> dict[str, float]:
        b = self.test_bleu
        return {
            "sf-baseline": b["sf"] - b["baseline"],
            "ilm-sf": b["sf+ilm"] - b["sf"],
            "bt-ilm": b["bt"] - b["sf+ilm"],
        }


def run_paper_trends(seed: int, config: TrendsConfig | None = None, workdir: str | Path | None = None) -> TrendsResult:
    config = config or TrendsConfig()
    started = time.time()
    stages: dict[str, float] = {}
    clock = [time.time()]

    def mark(name: str) -> None:
        now = time.time()
        stages[name] = round(now - clock[0], 2)
        clock[0] = now
        log.info("stage %s done in %.1fs", name, stages[name])

    task = generate_synthetic(config.task_spec(seed), config.n_pairs, config.n_mono, config.n_valid, config.n_test)
    codec = Codec.learn(list(task.train.src) + list(task.train.tgt), config.bpe_merges)
    train = task.train.encode(codec)
    valid = task.valid.encode(codec)
    test = task.test.encode(codec)
    mono = task.mono.encode(codec)
    valid_targets = MonoCorpus(list(valid.tgt), "B")
    model_cfg = config.model_config(len(codec.vocab))
    mark("data")

    mt, _ = train_seeded("nmt", train, valid, model_cfg, config.train_config(config.mt_epochs), seed, "mt")
    mark("train-mt")
    lm, _ = train_seeded("lm", mono, valid_targets, model_cfg, config.train_config(config.lm_epochs), seed, "lm")
    mark("train-lm")
    train_targets = MonoCorpus(list(train.tgt), "A")
    separate, _ = train_seeded(
        "lm", train_targets, valid_targets, model_cfg, config.train_config(config.ilm_epochs), seed, "ilm.separate"
    )
    stats = extract_averages(mt, train)
    mini = train_mini_self_attn(
        mt, train_targets, config.train_config(config.ilm_epochs), stage_rng(seed, "ilm.mini"), valid_targets
    )
    mark("ilm")

    variants = {
        "separate-lm": SeparateLm(separate),
        "h0": HZero(model_cfg.d_model),
        "havg": HAvg(stats),
        "cavg": CAvg(stats),
        "mini-self-attn": MiniSelfAttn(mini),
    }
    ilm_ppl = {name: ilm_perplexity(v, mt, valid) for name, v in variants.items()}
    log.info("ILM perplexities: %s", ilm_ppl)
    mark("ilm-ppl")

    beam = BeamConfig(beam_size=config.beam_size)
    evaluator = bleu_evaluator(valid, task.valid.tgt, codec, mt, lm, variants["mini-self-attn"], beam)
    grid = grid_search(config.grid(), evaluator)
    if workdir is not None:
        Path(workdir).mkdir(parents=True, exist_ok=True)
        export_heatmap_csv(grid, Path(workdir) / f"heatmap.seed{seed}.csv")
    sf_l1, sf_valid = grid.best_shallow_fusion()
    best_l1, best_l2, best_valid = grid.best
    mark("tune")

    def test_bleu(model, weights: FusionWeights) -> float:
        hyps = translate_corpus(test.src, model, lm, weights, beam)
        return corpus_bleu([codec.decode(h.content) for h in hyps], task.test.tgt).bleu_percent

    bleu = {
        "baseline": test_bleu(mt, FusionWeights()),
        "sf": test_bleu(mt, FusionWeights(sf_l1, 0.0)),
        "sf+ilm": test_bleu(
            mt, FusionWeights(best_l1, best_l2, variants["mini-self-attn"] if best_l2 > 0 else None)
        ),
    }
    mark("test")

    bt_cfg = BtPipelineConfig(
        reverse_model=model_cfg,
        forward_model=model_cfg,
        reverse_train=config.train_config(config.mt_epochs),
        forward_train=config.train_config(config.bt_epochs),
        synth_beam=beam,
    )
    bt = run_pipeline(train, mono, valid, bt_cfg, seed)
    bleu["bt"] = test_bleu(bt.model, FusionWeights())
    mark("backtranslation")

    result = TrendsResult(
        seed=seed,
        ilm_ppl=ilm_ppl,
        test_bleu=bleu,
        valid_bleu={"baseline": grid.baseline(), "sf": sf_valid, "sf+ilm": best_valid},
        weights={"sf": [sf_l1, 0.0], "sf+ilm": [best_l1, best_l2]},
        domain_kl=task.domain_kl,
        seconds=round(time.time() - started, 1),
        stage_seconds=stages,
    )
    log.info("seed %d result: %s", seed, result.to_json())
    if workdir is not None:
        (Path(workdir) / f"result.seed{seed}.json").write_text(result.to_json() + "\n", encoding="utf-8")
    return result


def scaled(config: TrendsConfig, **overrides) -> TrendsConfig:
    return replace(config, **overrides)


__all__ = ["TrendsConfig", "TrendsResult", "run_paper_trends", "scaled"]
