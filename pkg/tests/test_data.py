from collections import Counter

import numpy as np
import pytest

from ilmfusion.data import (
    MonoCorpus,
    ParallelCorpus,
    SyntheticTaskSpec,
    generate_synthetic,
    load_mono,
    load_parallel,
    make_batches,
    reorder_windows,
)
from ilmfusion.errors import AlignmentError, InputError
from ilmfusion.numerics import make_rng
from ilmfusion.tokenizer import BOS, EOS, PAD


def _write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def test_load_parallel_pairs_lines(tmp_path):
    src = _write(tmp_path / "s", ["a", "b c", "d"])
    tgt = _write(tmp_path / "t", ["x", "y", "z w"])
    corpus = load_parallel(src, tgt)
    assert len(corpus) == 3
    assert corpus.pairs[1] == ("b c", "y")


def test_load_parallel_mismatch_names_both_counts(tmp_path):
    src = _write(tmp_path / "s", ["a", "b", "c"])
    tgt = _write(tmp_path / "t", ["a", "b", "c", "d"])
    with pytest.raises(AlignmentError, match="3.*4"):
        load_parallel(src, tgt)


def test_load_parallel_empty_warns(tmp_path, caplog):
    src = _write(tmp_path / "s", [])
    tgt = _write(tmp_path / "t", [])
    corpus = load_parallel(src, tgt)
    assert len(corpus) == 0
    assert any("empty" in r.message for r in caplog.records)


def test_load_mono_uniform_subsample(tmp_path):
    path = _write(tmp_path / "m", [f"line {i}" for i in range(50)])
    full = load_mono(path)
    sub = load_mono(path, max_sentences=10, rng=make_rng(3))
    assert len(full) == 50 and len(sub) == 10
    assert len(set(sub.sentences)) == 10
    assert set(sub.sentences) <= set(full.sentences)
    assert sub.sentences == load_mono(path, max_sentences=10, rng=make_rng(3)).sentences


def _identity_spec(window):
    words = ["w1", "w2", "w3", "w4"]
    uni = np.full(4, 0.25)
    return SyntheticTaskSpec(
        vocab_size_src=4,
        vocab_size_tgt=4,
        reorder_window=window,
        min_len=3,
        max_len=5,
        seed=4,
        dictionary={w: w.upper() for w in words},
        domain_a_unigram=uni,
        domain_b_unigram=uni,
        source_words=words,
    )


def test_identity_dictionary_without_reordering_relabels():
    task = generate_synthetic(_identity_spec(1), 20, 0, 0, 0)
    for s, t in task.train.pairs:
        assert t == s.upper()


def test_window_two_reorders_pairs():
    assert reorder_windows(["d1", "d2", "d3"], 2) == ["d2", "d1", "d3"]
    task = generate_synthetic(_identity_spec(2), 20, 0, 0, 0)
    for s, t in task.train.pairs:
        words = s.upper().split()
        assert t.split() == reorder_windows(words, 2)


def test_generation_is_deterministic():
    spec = SyntheticTaskSpec(vocab_size_src=50, vocab_size_tgt=60, seed=9)
    a = generate_synthetic(spec, 30, 30, 5, 5)
    b = generate_synthetic(SyntheticTaskSpec(vocab_size_src=50, vocab_size_tgt=60, seed=9), 30, 30, 5, 5)
    assert a.train == b.train and a.mono == b.mono and a.valid == b.valid and a.test == b.test
    c = generate_synthetic(SyntheticTaskSpec(vocab_size_src=50, vocab_size_tgt=60, seed=10), 30, 30, 5, 5)
    assert c.train != a.train


def test_spec_invariants():
    spec = SyntheticTaskSpec(vocab_size_src=80, vocab_size_tgt=90, seed=2)
    assert spec.domain_a_unigram.sum() == pytest.approx(1.0, abs=1e-12)
    assert spec.domain_b_unigram.sum() == pytest.approx(1.0, abs=1e-12)
    assert len(set(spec.dictionary.values())) == 80
    with pytest.raises(InputError):
        SyntheticTaskSpec(vocab_size_src=10, vocab_size_tgt=5)


def test_lengths_and_domains():
    spec = SyntheticTaskSpec(vocab_size_src=100, vocab_size_tgt=100, min_len=3, max_len=20, seed=1)
    task = generate_synthetic(spec, 200, 100, 10, 10)
    assert all(3 <= len(s.split()) <= 20 for s in task.train.src)
    assert (task.train.domain, task.mono.domain, task.valid.domain, task.test.domain) == ("A", "B", "B", "B")


def test_default_spec_has_real_domain_shift():
    task = generate_synthetic(SyntheticTaskSpec(seed=1), 2000, 2000, 0, 0)
    assert task.domain_kl > 0.1


def test_negative_sizes_rejected():
    with pytest.raises(InputError):
        generate_synthetic(SyntheticTaskSpec(vocab_size_src=10, vocab_size_tgt=10), -1, 0, 0, 0)


def _random_parallel(seed, n=80):
    r = np.random.default_rng(seed)
    src = [list(r.integers(4, 30, size=int(r.integers(1, 12)))) for _ in range(n)]
    tgt = [list(r.integers(4, 30, size=int(r.integers(1, 12)))) for _ in range(n)]
    return ParallelCorpus(src, tgt)


def test_one_sentence_one_batch():
    batches = make_batches(ParallelCorpus([[5, 6]], [[7]]), 50, make_rng(0))
    assert len(batches) == 1
    b = batches[0]
    assert b.src.tolist() == [[5, 6, EOS]]
    assert b.tgt_in.tolist() == [[BOS, 7]]
    assert b.tgt_out.tolist() == [[7, EOS]]


@pytest.mark.parametrize("seed", range(5))
def test_batches_cover_corpus_once_within_budget(seed):
    corpus = _random_parallel(seed)
    batches = make_batches(corpus, 40, make_rng(seed))
    seen = Counter()
    for b in batches:
        assert b.src.size <= 40 and b.tgt_in.size <= 40
        assert (b.tgt_in[~b.tgt_mask] == PAD).all()
        assert (b.src[~b.src_mask] == PAD).all()
        for row, i in enumerate(b.indices):
            seen[int(i)] += 1
            assert b.src[row, : len(corpus.src[i])].tolist() == list(corpus.src[i])
    assert seen == Counter(range(len(corpus)))


def test_shuffle_depends_on_rng_only():
    corpus = _random_parallel(1)
    order = lambda r: [tuple(b.indices) for b in make_batches(corpus, 40, r)]  # noqa: E731
    assert order(make_rng(5)) == order(make_rng(5))
    assert order(make_rng(5)) != order(make_rng(6))


def test_mono_batches_have_no_source():
    batches = make_batches(MonoCorpus([[4, 5], [6]]), 20, None)
    assert all(b.src is None and b.src_mask is None for b in batches)


def test_overlong_sentence_named():
    corpus = ParallelCorpus([[4], [4] * 30], [[5], [5]])
    with pytest.raises(InputError, match="sentence 1"):
        make_batches(corpus, 10, make_rng(0))
