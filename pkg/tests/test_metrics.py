import math
import random

import pytest
import sacrebleu

from ilmfusion.errors import AlignmentError, InputError
from ilmfusion.metrics import bleu_tokenize, corpus_bleu, perplexity


def test_short_hypothesis_example():
    report = corpus_bleu(["a b c d"], ["a b c d e"])
    assert report.precisions == (1.0, 1.0, 1.0, 1.0)
    assert report.brevity_penalty == pytest.approx(math.exp(1 - 5 / 4))
    assert report.bleu_percent == pytest.approx(77.88, abs=0.01)


def test_identity_is_perfect():
    lines = ["the cat sat on the mat .", "a b c d e f"]
    assert corpus_bleu(lines, lines).bleu_percent == pytest.approx(100.0, abs=1e-9)


def test_no_four_gram_overlap_is_zero():
    assert corpus_bleu(["a b c d e"], ["a b c x d e"]).bleu_percent == 0.0
    assert corpus_bleu(["a b"], ["a b"]).bleu_percent == 0.0  # no 4-grams at all


def test_line_count_mismatch():
    with pytest.raises(AlignmentError):
        corpus_bleu(["a"], ["a", "b"])


def test_punctuation_splitter():
    assert bleu_tokenize('he said: "yes!"') == ["he", "said", ":", '"', "yes", "!", '"']


def _random_corpus(seed, n=60):
    r = random.Random(seed)
    vocab = ["ka", "lo", "mi", "ne", "pu", "ri", "so", "tu", ".", ",", "!", "?"]
    refs, hyps = [], []
    for _ in range(n):
        ref = [r.choice(vocab) for _ in range(r.randint(3, 15))]
        hyp = [w if r.random() < 0.7 else r.choice(vocab) for w in ref]
        if r.random() < 0.3:
            hyp = hyp[: r.randint(1, len(hyp))]
        refs.append(" ".join(ref))
        hyps.append(" ".join(hyp))
    return hyps, refs


@pytest.mark.parametrize("seed", range(8))
def test_matches_reference_scorer_on_pretokenized_text(seed):
    hyps, refs = _random_corpus(seed)
    ours = corpus_bleu(hyps, refs).bleu_percent
    pre = lambda lines: [" ".join(bleu_tokenize(x)) for x in lines]  # noqa: E731
    theirs = sacrebleu.corpus_bleu(pre(hyps), [pre(refs)], tokenize="none", smooth_method="none", force=True).score
    assert ours == pytest.approx(theirs, abs=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_drift_against_reference_default_tokenizer_is_small(seed):
    hyps, refs = _random_corpus(seed + 50)
    ours = corpus_bleu(hyps, refs).bleu_percent
    theirs = sacrebleu.corpus_bleu(hyps, [refs], smooth_method="none").score
    assert abs(ours - theirs) < 0.3


def test_line_order_does_not_matter():
    hyps, refs = _random_corpus(3)
    order = list(range(len(hyps)))
    random.Random(1).shuffle(order)
    a = corpus_bleu(hyps, refs).bleu_percent
    b = corpus_bleu([hyps[i] for i in order], [refs[i] for i in order]).bleu_percent
    assert a == pytest.approx(b, abs=1e-12)


def test_report_formats():
    report = corpus_bleu(["a b c d"], ["a b c d e"])
    assert str(report).startswith("BLEU = 77.88 (100.0/100.0/100.0/100.0, BP=0.779, hyp_len=4, ref_len=5)")
    assert "bleu=77.8801" in report.as_key_values()


def test_uniform_scorer_perplexity():
    corpus = [[1, 2, 3], [4], [5, 6]]
    ppl = perplexity(lambda s: [-math.log(16)] * (len(s) + 1), corpus)
    assert ppl == pytest.approx(16.0, rel=1e-12)


def test_certain_scorer_perplexity_is_one():
    assert perplexity(lambda s: [0.0] * (len(s) + 1), [[7, 8]]) == 1.0


def test_hand_computed_perplexity():
    ppl = perplexity(lambda s: [-math.log(2), -math.log(8)], [[9]])
    assert ppl == pytest.approx(4.0, rel=1e-12)


def test_perplexity_ignores_grouping():
    table = {(1,): [-0.5, -1.0], (2, 3): [-0.2, -2.0, -0.1], (4,): [-3.0, -0.3]}
    scorer = lambda s: table[tuple(s)]  # noqa: E731
    a = perplexity(scorer, [[1], [2, 3], [4]])
    b = perplexity(scorer, [[4], [1], [2, 3]])
    assert a == pytest.approx(b, rel=1e-12)


def test_empty_corpus_perplexity():
    with pytest.raises(InputError):
        perplexity(lambda s: [], [])
