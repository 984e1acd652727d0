"""Language-model fusion with internal-LM subtraction for neural machine translation.

The fused decoding score is ``log P_MT + lambda1 * log P_LM - lambda2 * log P_ILM``
where the internal LM of the translation model is approximated in one of
five ways (see :mod:`ilmfusion.ilm`).
"""

from .decoding import BeamConfig, FusionWeights, Hypothesis, beam_search, fused_step_score, translate_corpus
from .ilm import CAvg, HAvg, HZero, IlmVariant, MiniSelfAttn, SeparateLm
from .metrics import BleuReport, corpus_bleu, perplexity

__version__ = "0.1.0"

__all__ = [
    "BeamConfig",
    "BleuReport",
    "CAvg",
    "FusionWeights",
    "HAvg",
    "HZero",
    "Hypothesis",
    "IlmVariant",
    "MiniSelfAttn",
    "SeparateLm",
    "beam_search",
    "corpus_bleu",
    "fused_step_score",
    "perplexity",
    "translate_corpus",
]
