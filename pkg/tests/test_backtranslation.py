import numpy as np
import pytest

import ilmfusion.backtranslation as bt
from conftest import random_sentence, tiny_config
from ilmfusion.backtranslation import BtPipelineConfig, combine, run_pipeline, synthesize, train_reverse, write_synthetic
from ilmfusion.data import MonoCorpus, ParallelCorpus
from ilmfusion.decoding import BeamConfig
from ilmfusion.errors import ConfigError
from ilmfusion.models import TrainConfig, checkpoint_digest, score_sequence, train_seeded
from ilmfusion.tokenizer import EOS, BpeModel, Codec, Vocabulary


def _quick(epochs=2):
    return TrainConfig(max_epochs=epochs, patience=100, max_tokens=64, peak_lr=3e-3, warmup_steps=10, log_every=0)


def _corpora(seed=0, n=16, n_mono=6):
    r = np.random.default_rng(seed)
    par = ParallelCorpus([random_sentence(r) for _ in range(n)], [random_sentence(r) for _ in range(n)], "A")
    mono = MonoCorpus([random_sentence(r) for _ in range(n_mono)], "B")
    valid = ParallelCorpus([random_sentence(r) for _ in range(4)], [random_sentence(r) for _ in range(4)], "B")
    return par, mono, valid


def _config(**kw):
    values = dict(
        reverse_model=tiny_config(), forward_model=tiny_config(), reverse_train=_quick(), forward_train=_quick(),
        synth_beam=BeamConfig(beam_size=2, max_len_b=4),
    )
    values.update(kw)
    return BtPipelineConfig(**values)


def test_identity_reverse_model_copies_targets():
    mono = MonoCorpus([[5, 6], [7], [8, 9, 10]])
    synth = synthesize(mono, lambda sents: [list(s) for s in sents], BeamConfig())
    assert len(synth) == len(mono)
    assert synth.src == synth.tgt == mono.sentences


def test_model_synthesis_keeps_targets_verbatim(tiny_mt):
    mono = MonoCorpus([[5, 6], [7], [8, 9, 10], [11]])
    synth = synthesize(mono, tiny_mt, BeamConfig(beam_size=2, max_len_b=4))
    assert len(synth) == 4
    assert synth.tgt == mono.sentences
    assert all(EOS not in s for s in synth.src)


def test_combine_sizes_and_determinism():
    real = ParallelCorpus([[5], [6], [7]], [[8], [9], [10]])
    synth = ParallelCorpus([[11], [12]], [[13], [14]])
    mixed = combine(real, synth, 2, seed=3)
    assert len(mixed) == 2 * 3 + 2
    assert sorted(mixed.pairs) == sorted(real.pairs * 2 + synth.pairs)
    assert combine(real, synth, 2, seed=3) == mixed
    assert combine(real, ParallelCorpus([], []), 1, seed=3) is real
    with pytest.raises(ConfigError):
        combine(real, synth, 0, seed=3)
    with pytest.raises(ConfigError):
        _config(upsample=0)


def test_reverse_model_trains_on_swapped_pairs(monkeypatch):
    par, _, valid = _corpora()
    seen = {}
    real = bt.train_seeded

    def spy(kind, corpus, valid_corpus, *args):
        seen["corpus"] = corpus
        return real(kind, corpus, valid_corpus, *args)

    monkeypatch.setattr(bt, "train_seeded", spy)
    model, ckpt = train_reverse(par, valid, tiny_config(), _quick(1), seed=1)
    assert seen["corpus"].pairs == [(t, s) for s, t in par.pairs]
    assert ckpt.meta["direction"] == "reverse"
    assert model.config.vocab_size == tiny_config().vocab_size


def test_reverse_model_overfits_a_single_pair():
    pair = ParallelCorpus([[5, 6, 7]], [[8, 9]])
    model, _ = train_reverse(pair, pair, tiny_config(), _quick(200), seed=2)
    assert score_sequence(model, [8, 9], [5, 6, 7, EOS]) > -0.5


def test_no_monolingual_data_equals_plain_training():
    par, _, valid = _corpora(1)
    result = run_pipeline(par, MonoCorpus([]), valid, _config(), seed=4)
    plain, plain_ckpt = train_seeded("nmt", par, valid, tiny_config(), _quick(), 4, "mt")
    assert result.combined_size == len(par)
    for k, v in plain_ckpt.params.items():
        assert np.array_equal(result.checkpoint.params[k], v)


def test_pipeline_is_bit_reproducible():
    par, mono, valid = _corpora(2)
    a = run_pipeline(par, mono, valid, _config(upsample=2), seed=5)
    b = run_pipeline(par, mono, valid, _config(upsample=2), seed=5)
    assert a.combined_size == 2 * len(par) + len(mono)
    assert checkpoint_digest(a.checkpoint) == checkpoint_digest(b.checkpoint)
    assert a.synthetic == b.synthetic
    assert a.checkpoint.meta["bt_reverse_sha256"] == checkpoint_digest(a.reverse_checkpoint)


def test_synthetic_files_and_provenance(tmp_path):
    codec = Codec(BpeModel([]), Vocabulary([f"t{i}</w>" for i in range(20)]))
    corpus = ParallelCorpus([[4, 5], [6]], [[7], [8, 9]])
    par, _, valid = _corpora(3)
    _, reverse_ckpt = train_reverse(par, valid, tiny_config(), _quick(0), seed=1)
    src, tgt, meta = write_synthetic(corpus, codec, tmp_path / "synth", 9, reverse_ckpt)
    assert src.read_text().splitlines() == ["t0 t1", "t2"]
    assert tgt.read_text().splitlines() == ["t3", "t4 t5"]
    text = meta.read_text()
    assert "seed=9" in text and checkpoint_digest(reverse_ckpt) in text and "sentences=2" in text
