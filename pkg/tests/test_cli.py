import json
import re

import pytest

from ilmfusion.cli import main, read_config
from ilmfusion.decoding import BeamConfig, FusionWeights, translate_corpus
from ilmfusion.errors import ConfigError
from ilmfusion.models import load_checkpoint, model_from_checkpoint
from ilmfusion.tokenizer import Codec
from ilmfusion.tuning import load_weights, parse_heatmap_csv

CONFIG = """\
# tiny end-to-end run
synthetic.vocab_size_src=30
synthetic.vocab_size_tgt=30
synthetic.min_len=2
synthetic.max_len=6
data.n_pairs=160
data.n_mono=120
data.n_valid=12
data.n_test=12
bpe.merges=40
model.d_model=16
model.n_heads=2
model.n_enc_layers=1
model.n_dec_layers=1
model.d_ffn=32
model.dropout=0.0
model.label_smoothing=0.1
train.max_epochs=2
train.max_tokens=256
train.peak_lr=0.003
train.warmup_steps=10
train.log_every=0
lm.train_max_epochs=2
ilm.train_max_epochs=1
bt.train_max_epochs=1
beam.beam_size=2
grid.lambda1_values=0.0,0.3
grid.lambda2_values=0.0,0.3
grid.shallow_fusion_extra=
"""

ERROR_LINE = re.compile(r'^ilmfusion-error kind=(\w+) message=(".*")$')


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.cfg"
    cfg.write_text(CONFIG)
    d = root / "data"
    c = ["--config", cfg]
    assert run("make-data", *c, "--seed", 3, "--out", d) == 0
    assert run("bpe-learn", *c, "--input", d / "train.src", d / "train.tgt", "--out", root / "codec") == 0
    codec = ["--codec", root / "codec"]
    train = ["--train-src", d / "train.src", "--train-tgt", d / "train.tgt"]
    valid = ["--valid-src", d / "valid.src", "--valid-tgt", d / "valid.tgt"]
    assert run("train-mt", *c, *codec, *train, *valid, "--out", root / "mt.ckpt") == 0
    assert run("train-lm", *c, *codec, "--train", d / "mono.tgt", "--valid", d / "valid.tgt", "--out", root / "lm.ckpt") == 0
    assert run("ilm-train-mini", *c, *codec, "--mt", root / "mt.ckpt", "--train", d / "train.tgt",
               "--valid", d / "valid.tgt", "--out", root / "mini.ckpt") == 0
    assert run("ilm-avg", *c, *codec, "--mt", root / "mt.ckpt", *train, "--out", root / "avg.ckpt") == 0
    return {"root": root, "cfg": c, "codec": codec, "data": d, "train": train, "valid": valid}


def _decode(p, out, *extra):
    root, d = p["root"], p["data"]
    return run("decode", *p["cfg"], *p["codec"], "--mt", root / "mt.ckpt", "--lm", root / "lm.ckpt",
               "--input", d / "test.src", "--out", out, *extra)


def test_make_data_files(pipeline):
    d = pipeline["data"]
    assert len((d / "train.src").read_text().splitlines()) == 160
    assert len((d / "mono.tgt").read_text().splitlines()) == 120


def test_zero_weights_reproduce_baseline(pipeline):
    root = pipeline["root"]
    assert _decode(pipeline, root / "base.txt") == 0
    assert _decode(pipeline, root / "zero.txt", "--lambda1", 0, "--lambda2", 0, "--scores", root / "zero.tsv") == 0
    base = (root / "base.txt").read_text()
    assert (root / "zero.txt").read_text() == base
    codec = Codec.load(root / "codec")
    mt = model_from_checkpoint(load_checkpoint(root / "mt.ckpt"))
    sources = [codec.encode(x) for x in (pipeline["data"] / "test.src").read_text().splitlines()]
    hyps = translate_corpus(sources, mt, None, FusionWeights(), BeamConfig(beam_size=2))
    assert base.splitlines() == [codec.decode(h.content) for h in hyps]
    rows = (root / "zero.tsv").read_text().splitlines()
    assert len(rows) == len(sources) and all(len(r.split("\t")) == 5 for r in rows)


def test_tune_then_decode_with_weights(pipeline):
    root = pipeline["root"]
    assert run("tune", *pipeline["cfg"], *pipeline["codec"], "--mt", root / "mt.ckpt", "--lm", root / "lm.ckpt",
               "--ilm", "mini-self-attn", "--ilm-model", root / "mini.ckpt", *pipeline["valid"],
               "--heatmap", root / "heat.csv", "--out", root / "tuned.txt") == 0
    l1, l2, variant = load_weights(root / "tuned.txt")
    grid = parse_heatmap_csv(root / "heat.csv")
    assert len(grid.cells) == 4 and grid.best[:2] == (l1, l2)
    assert variant == ("mini-self-attn" if l2 > 0 else None)
    assert _decode(pipeline, root / "tuned.out", "--weights", root / "tuned.txt", "--ilm-model", root / "mini.ckpt") == 0
    explicit = ["--lambda1", l1, "--lambda2", l2]
    if l2 > 0:
        explicit += ["--ilm", "mini-self-attn", "--ilm-model", root / "mini.ckpt"]
    assert _decode(pipeline, root / "explicit.out", *explicit) == 0
    assert (root / "tuned.out").read_text() == (root / "explicit.out").read_text()


def test_fused_decoding_with_each_variant(pipeline):
    root, d = pipeline["root"], pipeline["data"]
    payloads = {"h0": None, "havg": "avg.ckpt", "cavg": "avg.ckpt", "mini-self-attn": "mini.ckpt"}
    for name, payload in payloads.items():
        extra = ["--ilm", name] + (["--ilm-model", root / payload] if payload else [])
        assert _decode(pipeline, root / f"{name}.out", "--lambda1", 0.3, "--lambda2", 0.2, *extra) == 0
        assert run("ilm-ppl", *pipeline["cfg"], *pipeline["codec"], "--mt", root / "mt.ckpt", *extra,
                   "--input", d / "valid.tgt", "--src", d / "valid.src") == 0


def test_evaluate_prints_report(pipeline, capsys):
    root, d = pipeline["root"], pipeline["data"]
    _decode(pipeline, root / "eval.txt")
    capsys.readouterr()
    assert run("evaluate", "--hyp", root / "eval.txt", "--ref", d / "test.tgt") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("BLEU = ") and out[1].startswith("bleu=")


def test_training_is_bit_reproducible(pipeline):
    root = pipeline["root"]
    args = [*pipeline["cfg"], *pipeline["codec"], *pipeline["train"], *pipeline["valid"]]
    assert run("train-mt", *args, "--out", root / "again.ckpt") == 0
    assert (root / "again.ckpt").read_bytes() == (root / "mt.ckpt").read_bytes()


def test_backtranslate_and_bpe_apply(pipeline):
    root, d = pipeline["root"], pipeline["data"]
    assert run("backtranslate", *pipeline["cfg"], *pipeline["codec"], *pipeline["train"], *pipeline["valid"],
               "--mono", d / "mono.tgt", "--synthetic-prefix", root / "synth", "--out", root / "bt.ckpt") == 0
    assert len((root / "synth.tgt").read_text().splitlines()) == 120
    assert (root / "synth.tgt").read_text() == (d / "mono.tgt").read_text()
    assert "reverse_sha256=" in (root / "synth.provenance").read_text()
    assert run("bpe-apply", *pipeline["codec"], "--input", d / "test.src", "--out", root / "test.bpe") == 0
    assert "</w>" in (root / "test.bpe").read_text()


def test_unknown_flag_is_a_usage_error(capsys):
    assert run("decode", "--no-such-flag") == 2
    line = capsys.readouterr().err.strip().splitlines()[-1]
    m = ERROR_LINE.match(line)
    assert m and m.group(1) == "UsageError"
    json.loads(m.group(2))


def test_missing_file_reports_one_line(tmp_path, capsys):
    assert run("evaluate", "--hyp", tmp_path / "nope.txt", "--ref", tmp_path / "nope.txt") == 1
    lines = capsys.readouterr().err.strip().splitlines()
    assert ERROR_LINE.match(lines[-1]).group(1) == "FileNotFoundError"


def test_bad_config_is_a_config_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model.no_such_key=3\n")
    assert run("make-data", "--config", cfg, "--out", tmp_path / "d") == 0  # model section unused here
    cfg.write_text("synthetic.no_such_key=3\n")
    assert run("make-data", "--config", cfg, "--out", tmp_path / "d") == 2
    assert ERROR_LINE.match(capsys.readouterr().err.strip().splitlines()[-1]).group(1) == "ConfigError"


def test_lambda1_without_lm_is_rejected(pipeline, capsys):
    root = pipeline["root"]
    code = run("decode", *pipeline["cfg"], *pipeline["codec"], "--mt", root / "mt.ckpt", "--lambda1", 0.2,
               "--input", pipeline["data"] / "test.src", "--out", root / "x.txt")
    assert code == 2


def test_config_reader(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nmodel.d_model = 32  # trailing\n\nbeam.beam_size=4\n")
    parsed = read_config(cfg)
    assert parsed["model"] == {"d_model": "32"} and parsed["beam"] == {"beam_size": "4"}
    cfg.write_text("nosection=1\n")
    with pytest.raises(ConfigError):
        read_config(cfg)
    cfg.write_text("mystery.key=1\n")
    with pytest.raises(ConfigError):
        read_config(cfg)


def test_paper_trends_recipe_runs_small(tmp_path, capsys):
    cfg = tmp_path / "r.cfg"
    cfg.write_text(
        "recipe.n_pairs=120\nrecipe.n_mono=120\nrecipe.n_valid=8\nrecipe.n_test=8\nrecipe.vocab_words=30\n"
        "recipe.max_sentence_words=5\nrecipe.bpe_merges=30\nrecipe.d_model=16\nrecipe.n_heads=2\n"
        "recipe.n_layers=1\nrecipe.d_ffn=32\nrecipe.mt_epochs=1\nrecipe.lm_epochs=1\nrecipe.ilm_epochs=1\n"
        "recipe.bt_epochs=1\nrecipe.beam_size=2\nrecipe.grid_max=0.2\n"
    )
    assert run("paper-trends", "--config", cfg, "--seeds", "2", "--out", tmp_path / "out") == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(result["ilm_ppl"]) == {"separate-lm", "h0", "havg", "cavg", "mini-self-attn"}
    assert set(result["test_bleu"]) == {"baseline", "sf", "sf+ilm", "bt"}
    assert (tmp_path / "out" / "heatmap.seed2.csv").exists()
    assert (tmp_path / "out" / "result.seed2.json").exists()
