from .checkpoint import Checkpoint, checkpoint_bytes, checkpoint_digest, file_digest, load_checkpoint, save_checkpoint
from .train import (
    FitResult,
    TrainConfig,
    corpus_logprob,
    fit,
    model_from_checkpoint,
    model_perplexity,
    to_checkpoint,
    train,
    train_seeded,
)
from .transformer import (
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
    encode,
    encode_batch,
    lm_score_step,
    pad_sources,
    score_sequence,
    sequence_logprobs,
    start_decoding,
)

__all__ = [
    "Checkpoint",
    "checkpoint_bytes",
    "checkpoint_digest",
    "ConstantEncoderOutputs",
    "ContextOverride",
    "DecoderStepState",
    "EncoderOutputs",
    "FitResult",
    "MiniSelfAttention",
    "Model",
    "TrainConfig",
    "TransformerConfig",
    "batch_loss",
    "corpus_logprob",
    "decode_step",
    "decoder_forward",
    "encode",
    "encode_batch",
    "file_digest",
    "fit",
    "lm_score_step",
    "load_checkpoint",
    "model_from_checkpoint",
    "model_perplexity",
    "pad_sources",
    "save_checkpoint",
    "score_sequence",
    "sequence_logprobs",
    "start_decoding",
    "to_checkpoint",
    "train",
    "train_seeded",
]
