"""Command-line front end: one subcommand per pipeline stage.

Every command accepts ``--config FILE`` (flat ``section.key=value`` lines)
and ``--seed``; explicit flags override file values.  Failures print a
single line ``ilmfusion-error kind=<Kind> message=<json string>`` on stderr
and exit nonzero (2 for usage and configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Mapping, Sequence

from .backtranslation import BtPipelineConfig, run_pipeline, write_synthetic
from .data import MonoCorpus, SyntheticTaskSpec, generate_synthetic, load_mono, load_parallel, write_lines
from .decoding import BeamConfig, FusionWeights, translate_corpus, write_hypotheses, write_score_table
from .errors import ConfigError, IlmFusionError
from .ilm import (
    VARIANT_NAMES,
    AvgStats,
    extract_averages,
    ilm_perplexity,
    make_variant,
    mini_from_checkpoint,
    mini_to_checkpoint,
    train_mini_self_attn,
)
from .metrics import corpus_bleu
from .models import (
    TrainConfig,
    TransformerConfig,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train_seeded,
)
from .numerics import stage_rng
from .recipes import TrendsConfig, run_paper_trends
from .tokenizer import Codec, apply_bpe
from .tuning import GridSpec, bleu_evaluator, export_heatmap_csv, grid_search, load_weights, save_weights

log = logging.getLogger("ilmfusion")

SECTIONS = ("data", "synthetic", "bpe", "model", "train", "lm", "ilm", "beam", "grid", "bt", "recipe")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def read_config(path: str | Path | None) -> dict[str, dict[str, str]]:
    """Parse ``section.key=value`` lines; ``#`` starts a comment."""
    config: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path is None:
        return config
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"{path}:{n}: expected section.key=value")
        if section not in config:
            raise ConfigError(f"{path}:{n}: unknown section {section!r}")
        config[section][name] = value.strip()
    return config


def _coerce(cls, values: Mapping[str, str], section: str, **fixed):
    """Build dataclass ``cls`` from strings, typed by each field's default."""
    known = {f.name: f for f in fields(cls)}
    kwargs = dict(fixed)
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        default = known[key].default
        try:
            if raw == "None":
                kwargs[key] = None
            elif default is None:
                kwargs[key] = int(raw) if raw.lstrip("-").isdigit() else float(raw)
            elif isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                kwargs[key] = raw.lower() in ("true", "1")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, tuple):
                kwargs[key] = tuple(float(x) for x in raw.split(",") if x.strip())
            else:
                kwargs[key] = float(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from exc
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


def model_config(cfg, vocab_size: int, section: str = "model") -> TransformerConfig:
    values = dict(cfg["model"])
    if section != "model":
        values.update(cfg[section])
        values = {k: v for k, v in values.items() if k in {f.name for f in fields(TransformerConfig)}}
    return _coerce(TransformerConfig, values, section, vocab_size=vocab_size)


def train_config(cfg, section: str = "train") -> TrainConfig:
    values = dict(cfg["train"])
    if section != "train":
        values.update({k[len("train_"):]: v for k, v in cfg[section].items() if k.startswith("train_")})
    return _coerce(TrainConfig, values, section)


def beam_config(cfg, args) -> BeamConfig:
    values = dict(cfg["beam"])
    if getattr(args, "beam", None) is not None:
        values["beam_size"] = str(args.beam)
    return _coerce(BeamConfig, values, "beam")


def grid_spec(cfg) -> GridSpec:
    values = dict(cfg["grid"])
    refine = None
    if "refine_radius" in values or "refine_step" in values:
        refine = (float(values.pop("refine_radius", "0.1")), float(values.pop("refine_step", "0.05")))
    spec = _coerce(GridSpec, values, "grid")
    return GridSpec(spec.lambda1_values, spec.lambda2_values, spec.shallow_fusion_extra, refine)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _codec(args) -> Codec:
    return Codec.load(args.codec)


def _model(path):
    return model_from_checkpoint(load_checkpoint(path))


def _parallel(src, tgt, codec: Codec, domain: str = ""):
    return load_parallel(src, tgt, domain).encode(codec)


def _mono(path, codec: Codec):
    return load_mono(path).encode(codec)


def _variant(args, mt):
    name = args.ilm
    if name is None:
        return None
    payload = load_checkpoint(args.ilm_model) if args.ilm_model else None
    if name != "h0" and payload is None:
        raise ConfigError(f"--ilm {name} needs --ilm-model")
    kwargs = {}
    if name == "separate-lm":
        kwargs["separate_lm"] = model_from_checkpoint(payload)
    elif name in ("havg", "cavg"):
        kwargs["stats"] = AvgStats.from_checkpoint(payload)
    elif name == "mini-self-attn":
        kwargs["mini"] = mini_from_checkpoint(payload)
    return make_variant(name, mt, **kwargs)


def cmd_make_data(args, cfg):
    spec = _coerce(SyntheticTaskSpec, cfg["synthetic"], "synthetic", seed=args.seed)
    sizes = {k: int(v) for k, v in cfg["data"].items()}
    unknown = set(sizes) - {"n_pairs", "n_mono", "n_valid", "n_test"}
    if unknown:
        raise ConfigError(f"unknown key data.{sorted(unknown)[0]}")
    task = generate_synthetic(spec, **sizes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, corpus in (("train", task.train), ("valid", task.valid), ("test", task.test)):
        write_lines(out / f"{name}.src", corpus.src)
        write_lines(out / f"{name}.tgt", corpus.tgt)
    write_lines(out / "mono.tgt", task.mono.sentences)
    print(f"domain_kl={task.domain_kl:.6f} train={len(task.train)} mono={len(task.mono)}")


def cmd_bpe_learn(args, cfg):
    lines = [ln for path in args.input for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    merges = args.merges if args.merges is not None else int(cfg["bpe"].get("merges", 500))
    codec = Codec.learn(lines, merges)
    codec.save(args.out)
    print(f"merges={len(codec.bpe.merges)} vocab={len(codec.vocab)}")


def cmd_bpe_apply(args, cfg):
    codec = _codec(args)
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    write_lines(args.out, [" ".join(apply_bpe(codec.bpe, ln)) for ln in lines])


def cmd_train_mt(args, cfg):
    codec = _codec(args)
    train = _parallel(args.train_src, args.train_tgt, codec)
    valid = _parallel(args.valid_src, args.valid_tgt, codec)
    _, ckpt = train_seeded(
        "nmt", train, valid, model_config(cfg, len(codec.vocab)), train_config(cfg), args.seed, "mt"
    )
    save_checkpoint(ckpt, args.out)
    print(f"valid_ppl={ckpt.meta['valid_ppl']} epoch={ckpt.meta['epoch']}")


def cmd_train_lm(args, cfg):
    codec = _codec(args)
    train = _mono(args.train, codec)
    valid = _mono(args.valid, codec)
    _, ckpt = train_seeded(
        "lm", train, valid, model_config(cfg, len(codec.vocab), "lm"), train_config(cfg, "lm"), args.seed, args.label
    )
    save_checkpoint(ckpt, args.out)
    print(f"valid_ppl={ckpt.meta['valid_ppl']} epoch={ckpt.meta['epoch']}")


def cmd_ilm_avg(args, cfg):
    codec = _codec(args)
    stats = extract_averages(_model(args.mt), _parallel(args.train_src, args.train_tgt, codec))
    save_checkpoint(stats.to_checkpoint(), args.out)
    print(f"source_positions={len(stats.h_counts)} target_positions={len(stats.c_counts)}")


def cmd_ilm_train_mini(args, cfg):
    codec = _codec(args)
    mt = _model(args.mt)
    module = train_mini_self_attn(
        mt, _mono(args.train, codec), train_config(cfg, "ilm"), stage_rng(args.seed, "ilm.mini"), _mono(args.valid, codec)
    )
    save_checkpoint(mini_to_checkpoint(module), args.out)


def cmd_ilm_ppl(args, cfg):
    codec = _codec(args)
    mt = _model(args.mt)
    if args.ilm is None:
        raise ConfigError("ilm-ppl needs --ilm")
    corpus = _parallel(args.src, args.input, codec) if args.src else _mono(args.input, codec)
    print(f"variant={args.ilm} ppl={ilm_perplexity(_variant(args, mt), mt, corpus):.6f}")


def _weights(args, mt) -> FusionWeights:
    lambda1, lambda2 = args.lambda1, args.lambda2
    if args.weights:
        l1, l2, variant = load_weights(args.weights)
        lambda1 = l1 if lambda1 is None else lambda1
        lambda2 = l2 if lambda2 is None else lambda2
        if args.ilm is None and variant is not None and lambda2:
            args.ilm = variant
    lambda1 = lambda1 or 0.0
    lambda2 = lambda2 or 0.0
    variant = _variant(args, mt) if lambda2 > 0 else None
    return FusionWeights(lambda1, lambda2, variant)


def cmd_decode(args, cfg):
    codec = _codec(args)
    mt = _model(args.mt)
    weights = _weights(args, mt)
    lm = _model(args.lm) if args.lm and weights.uses_lm else None
    if weights.uses_lm and lm is None:
        raise ConfigError("lambda1 > 0 needs --lm")
    sources = [codec.encode(ln) for ln in Path(args.input).read_text(encoding="utf-8").splitlines()]
    log.info("decoding %d sentences with lambda1=%g lambda2=%g", len(sources), weights.lambda1, weights.lambda2)
    hyps = translate_corpus(sources, mt, lm, weights, beam_config(cfg, args), workers=args.threads)
    write_hypotheses(args.out, hyps, codec)
    if args.scores:
        write_score_table(args.scores, hyps)


def cmd_tune(args, cfg):
    codec = _codec(args)
    mt = _model(args.mt)
    lm = _model(args.lm)
    valid_text = load_parallel(args.valid_src, args.valid_tgt)
    valid = valid_text.encode(codec)
    variant = _variant(args, mt)
    spec = grid_spec(cfg)
    if variant is None:
        spec = GridSpec(spec.lambda1_values, (0.0,), spec.shallow_fusion_extra, spec.refine)
    evaluator = bleu_evaluator(valid, valid_text.tgt, codec, mt, lm, variant, beam_config(cfg, args), args.threads)
    result = grid_search(spec, evaluator)
    if args.heatmap:
        export_heatmap_csv(result, args.heatmap)
    l1, l2, bleu = result.best
    save_weights(args.out, l1, l2, args.ilm if l2 > 0 else None)
    print(f"lambda1={l1!r} lambda2={l2!r} bleu={bleu:.4f} baseline={result.baseline():.4f}")


def cmd_backtranslate(args, cfg):
    codec = _codec(args)
    train = _parallel(args.train_src, args.train_tgt, codec)
    valid = _parallel(args.valid_src, args.valid_tgt, codec)
    mono = _mono(args.mono, codec) if args.mono else MonoCorpus([])
    mcfg = model_config(cfg, len(codec.vocab))
    bt_values = dict(cfg["bt"])
    upsample = int(bt_values.pop("upsample", "1"))
    forward_train = train_config(cfg, "bt")
    unknown = [k for k in bt_values if not k.startswith("train_")]
    if unknown:
        raise ConfigError(f"unknown key bt.{unknown[0]}")
    config = BtPipelineConfig(
        reverse_model=mcfg,
        forward_model=mcfg,
        reverse_train=train_config(cfg),
        forward_train=forward_train,
        synth_beam=beam_config(cfg, args),
        upsample=upsample,
        workers=args.threads,
    )
    result = run_pipeline(train, mono, valid, config, args.seed)
    save_checkpoint(result.checkpoint, args.out)
    if args.synthetic_prefix:
        write_synthetic(result.synthetic, codec, args.synthetic_prefix, args.seed, result.reverse_checkpoint)
    print(f"combined={result.combined_size} valid_ppl={result.checkpoint.meta['valid_ppl']}")


def cmd_evaluate(args, cfg):
    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    report = corpus_bleu(hyps, refs)
    print(report)
    print(report.as_key_values())


def cmd_paper_trends(args, cfg):
    config = _coerce(TrendsConfig, cfg["recipe"], "recipe")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        result = run_paper_trends(seed, config, out)
        print(result.to_json())


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, default=1, help="master seed (default 1)")
    common.add_argument("--threads", type=int, default=1, help="maximum worker threads")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    def codec_flag(p):
        p.add_argument("--codec", required=True, help="directory written by bpe-learn")

    def ilm_flags(p):
        p.add_argument("--ilm", choices=VARIANT_NAMES, help="internal LM approximation")
        p.add_argument("--ilm-model", help="payload: LM, averaged statistics or mini-module checkpoint")

    def parallel_flags(p, prefix):
        p.add_argument(f"--{prefix}-src", required=True)
        p.add_argument(f"--{prefix}-tgt", required=True)

    parser = _Parser(prog="ilmfusion", description="LM fusion with internal LM subtraction for NMT")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-data", parents=[common], help="write the synthetic domain-shift task")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("bpe-learn", parents=[common], help="learn joint BPE and vocabulary")
    p.add_argument("--input", nargs="+", required=True, help="text files (both languages)")
    p.add_argument("--merges", type=int)
    p.add_argument("--out", required=True, help="codec directory")
    p.set_defaults(func=cmd_bpe_learn)

    p = sub.add_parser("bpe-apply", parents=[common], help="segment a text file")
    codec_flag(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bpe_apply)

    p = sub.add_parser("train-mt", parents=[common], help="train the translation model")
    codec_flag(p)
    parallel_flags(p, "train")
    parallel_flags(p, "valid")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_mt)

    p = sub.add_parser("train-lm", parents=[common], help="train a target-side language model")
    codec_flag(p)
    p.add_argument("--train", required=True, help="target-language text")
    p.add_argument("--valid", required=True)
    p.add_argument("--label", default="lm", help="seed-stream label (use ilm.separate for the ILM)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("ilm-avg", parents=[common], help="extract averaged encoder/context statistics")
    codec_flag(p)
    p.add_argument("--mt", required=True)
    parallel_flags(p, "train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ilm_avg)

    p = sub.add_parser("ilm-train-mini", parents=[common], help="train the mini self-attention ILM")
    codec_flag(p)
    p.add_argument("--mt", required=True)
    p.add_argument("--train", required=True, help="target side of the parallel training data")
    p.add_argument("--valid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ilm_train_mini)

    p = sub.add_parser("ilm-ppl", parents=[common], help="perplexity of an ILM approximation")
    codec_flag(p)
    p.add_argument("--mt", required=True)
    ilm_flags(p)
    p.add_argument("--input", required=True, help="target text")
    p.add_argument("--src", help="aligned source text (sets source lengths)")
    p.set_defaults(func=cmd_ilm_ppl)

    p = sub.add_parser("tune", parents=[common], help="grid-search fusion weights on validation BLEU")
    codec_flag(p)
    p.add_argument("--mt", required=True)
    p.add_argument("--lm", required=True)
    ilm_flags(p)
    parallel_flags(p, "valid")
    p.add_argument("--beam", type=int)
    p.add_argument("--heatmap", help="write the lambda1,lambda2,bleu grid here")
    p.add_argument("--out", required=True, help="weights file")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("decode", parents=[common], help="translate with optional fusion")
    codec_flag(p)
    p.add_argument("--mt", required=True)
    p.add_argument("--lm")
    ilm_flags(p)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--weights", help="weights file written by tune")
    p.add_argument("--beam", type=int)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scores", help="tab-separated score side file")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("backtranslate", parents=[common], help="train a back-translation system")
    codec_flag(p)
    parallel_flags(p, "train")
    parallel_flags(p, "valid")
    p.add_argument("--mono", help="target-language monolingual text")
    p.add_argument("--beam", type=int)
    p.add_argument("--synthetic-prefix", help="write the synthetic corpus as PREFIX.src/.tgt/.provenance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backtranslate)

    p = sub.add_parser("evaluate", parents=[common], help="corpus BLEU of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("paper-trends", parents=[common], help="run the desk-scale experiment")
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.add_argument("--out", required=True, help="directory for results and heatmaps")
    p.set_defaults(func=cmd_paper_trends)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(f"ilmfusion-error kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config)
        resolved = {k: v for k, v in vars(args).items() if k != "func"}
        log.info("resolved config: %s", json.dumps({"flags": resolved, "file": cfg}, sort_keys=True))
        args.func(args, cfg)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), 2)
    except (IlmFusionError, OSError, ValueError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
