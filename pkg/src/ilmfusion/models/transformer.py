"""Pre-norm transformer encoder-decoder and decoder-only language model.

One decoder implementation serves training (whole target sequence, causal
mask, autodiff) and search (one step at a time against cached keys/values,
under ``no_grad``).  What fills the encoder-decoder attention slot of each
decoder layer is pluggable, which is how the internal-LM approximations are
expressed:

* :class:`EncoderOutputs` -- attend over per-position encoder states (real
  outputs, or a replacement matrix such as the per-position training mean);
* :class:`ConstantEncoderOutputs` -- every source position carries the same
  vector (zeros for the h=0 approximation); attention over identical
  keys/values returns that value, so a single row is attended;
* :class:`ContextOverride` -- skip the attention and add a supplied
  per-layer, per-position context vector instead;
* :class:`MiniSelfAttention` -- a separately parameterised causal
  self-attention module in place of the cross-attention;
* ``None`` -- no cross-attention sublayer at all (the language model).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from ..errors import ContractError, LengthError
from ..numerics import (
    NEG_INF,
    Tensor,
    as_tensor,
    concat,
    dropout,
    embedding,
    label_smoothed_cross_entropy,
    layer_norm,
    linear,
    log_softmax_array,
    matmul,
    no_grad,
    relu,
    scale,
    softmax,
)
from ..tokenizer import BOS, EOS, PAD


@dataclass
class TransformerConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ffn: int = 128
    dropout: float = 0.3
    label_smoothing: float = 0.2
    max_positions: int = 256
    share_decoder_in_out_embeddings: bool = True
    share_src_tgt_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("dropout and label_smoothing must lie in [0, 1)")
        for name in ("vocab_size", "d_model", "n_heads", "d_ffn", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "TransformerConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.type in ("bool", bool):
                kwargs[f.name] = raw in ("True", "true", "1")
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _attention_params(rng, prefix: str, d: int) -> dict[str, np.ndarray]:
    out = {}
    for proj in ("q", "k", "v", "o"):
        out[f"{prefix}.{proj}.w"] = _xavier(rng, d, d)
        out[f"{prefix}.{proj}.b"] = np.zeros(d)
    return out


def _norm_params(prefix: str, d: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.g": np.ones(d), f"{prefix}.b": np.zeros(d)}


def _ffn_params(rng, prefix: str, d: int, d_ffn: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.1.w": _xavier(rng, d, d_ffn),
        f"{prefix}.1.b": np.zeros(d_ffn),
        f"{prefix}.2.w": _xavier(rng, d_ffn, d),
        f"{prefix}.2.b": np.zeros(d),
    }


def init_params(config: TransformerConfig, rng: np.random.Generator, kind: str) -> dict[str, np.ndarray]:
    d, v = config.d_model, config.vocab_size
    p: dict[str, np.ndarray] = {}
    p["tgt_embed"] = rng.normal(0.0, d**-0.5, size=(v, d))
    if kind == "nmt":
        if not config.share_src_tgt_embeddings:
            p["src_embed"] = rng.normal(0.0, d**-0.5, size=(v, d))
        for i in range(config.n_enc_layers):
            p.update(_norm_params(f"enc.{i}.ln1", d))
            p.update(_attention_params(rng, f"enc.{i}.self", d))
            p.update(_norm_params(f"enc.{i}.ln2", d))
            p.update(_ffn_params(rng, f"enc.{i}.ffn", d, config.d_ffn))
        p.update(_norm_params("enc.ln", d))
    for i in range(config.n_dec_layers):
        p.update(_norm_params(f"dec.{i}.ln1", d))
        p.update(_attention_params(rng, f"dec.{i}.self", d))
        if kind == "nmt":
            p.update(_norm_params(f"dec.{i}.ln2", d))
            p.update(_attention_params(rng, f"dec.{i}.cross", d))
        p.update(_norm_params(f"dec.{i}.ln3", d))
        p.update(_ffn_params(rng, f"dec.{i}.ffn", d, config.d_ffn))
    p.update(_norm_params("dec.ln", d))
    if not config.share_decoder_in_out_embeddings:
        p["out.w"] = _xavier(rng, d, v)
    return p


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = np.arange(n)[:, None] * freqs[None, :]
    table = np.zeros((n, d))
    table[:, :half] = np.sin(angles)
    table[:, half : 2 * half] = np.cos(angles)
    return table


class Model:
    """Named parameters plus configuration; ``kind`` is ``"nmt"`` or ``"lm"``."""

    def __init__(self, config: TransformerConfig, params: dict[str, np.ndarray | Tensor], kind: str):
        if kind not in ("nmt", "lm"):
            raise ValueError(f"unknown model kind {kind!r}")
        self.config = config
        self.kind = kind
        self.params: dict[str, Tensor] = {
            k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True) for k, v in params.items()
        }
        self._positions = sinusoidal_positions(config.max_positions, config.d_model)

    @classmethod
    def create(cls, config: TransformerConfig, rng: np.random.Generator, kind: str = "nmt") -> "Model":
        return cls(config, init_params(config, rng, kind), kind)

    def frozen(self) -> "Model":
        """A view sharing parameter arrays but recording no gradients for them."""
        return Model(self.config, {k: Tensor(v.data) for k, v in self.params.items()}, self.kind)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def src_embed(self) -> Tensor:
        return self.params.get("src_embed", self.params["tgt_embed"])


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    b, n, d = t.shape
    return t.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    scores = scale(matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + mask
    return matmul(softmax(scores, axis=-1), v)


def _proj(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return linear(x, p[name + ".w"], p[name + ".b"])


def _norm(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return layer_norm(x, p[name + ".g"], p[name + ".b"])


def _ffn(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return _proj(p, name + ".2", relu(_proj(p, name + ".1", x)))


def _causal_self_attention(p, name, x, n_heads, past, mask):
    q = _split_heads(_proj(p, name + ".q", x), n_heads)
    k = _split_heads(_proj(p, name + ".k", x), n_heads)
    v = _split_heads(_proj(p, name + ".v", x), n_heads)
    if past is not None:
        k = concat([past[0], k], axis=2)
        v = concat([past[1], v], axis=2)
    out = _proj(p, name + ".o", _merge_heads(_attend(q, k, v, mask)))
    return out, (k.data, v.data)


def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, 1)] = NEG_INF
    return m[None, None]


def key_padding_mask(mask: np.ndarray) -> np.ndarray:
    """(B, J) boolean validity -> additive (B, 1, 1, J) mask."""
    return np.where(mask, 0.0, NEG_INF)[:, None, None, :]


def _embed_target(model: Model, ids: np.ndarray, start: int, train: bool, rng) -> Tensor:
    cfg = model.config
    end = start + ids.shape[1]
    if end > cfg.max_positions:
        raise LengthError(f"target position {end} exceeds max_positions={cfg.max_positions}")
    x = scale(embedding(model.params["tgt_embed"], ids), math.sqrt(cfg.d_model))
    x = x + model._positions[start:end]
    return dropout(x, cfg.dropout, rng, train)


def _output_logits(model: Model, h: Tensor) -> Tensor:
    h = _norm(model.params, "dec.ln", h)
    if model.config.share_decoder_in_out_embeddings:
        return matmul(h, model.params["tgt_embed"].transpose(1, 0))
    return matmul(h, model.params["out.w"])


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderOutputs:
    """Per-position states ``h`` of shape (N, J, d) with validity mask (N, J)."""

    h: Tensor | np.ndarray
    mask: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def select(self, idx: np.ndarray) -> "EncoderOutputs":
        h = self.h.data if isinstance(self.h, Tensor) else self.h
        return EncoderOutputs(h[idx], self.mask[idx])


@dataclass
class ConstantEncoderOutputs:
    """``lengths[n]`` copies of the vector ``row`` for every row n."""

    row: np.ndarray
    lengths: np.ndarray

    def select(self, idx: np.ndarray) -> "ConstantEncoderOutputs":
        return ConstantEncoderOutputs(self.row, np.asarray(self.lengths)[idx])

    def as_memory(self) -> EncoderOutputs:
        n = len(self.lengths)
        return EncoderOutputs(np.broadcast_to(self.row, (n, 1, self.row.shape[0])).copy(), np.ones((n, 1), bool))


@dataclass
class ContextOverride:
    """Per decoder layer, a (T_max, d) table of context vectors by target position."""

    contexts: list[np.ndarray]

    def at(self, layer: int, start: int, length: int) -> np.ndarray:
        table = self.contexts[layer]
        pos = np.minimum(np.arange(start, start + length), table.shape[0] - 1)
        return table[pos][None]


@dataclass
class MiniSelfAttention:
    """Replacement causal self-attention parameters, one module per decoder layer."""

    params: dict[str, Tensor]

    @classmethod
    def create(cls, config: TransformerConfig, rng: np.random.Generator) -> "MiniSelfAttention":
        p = {}
        for i in range(config.n_dec_layers):
            p.update(_attention_params(rng, f"mini.{i}", config.d_model))
        return cls({k: Tensor(v, requires_grad=True) for k, v in p.items()})


def pad_sources(sources: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Append <eos> and right-pad; returns ids (N, J) and validity mask."""
    lengths = np.array([len(s) + 1 for s in sources])
    ids = np.full((len(sources), int(lengths.max())), PAD, dtype=np.int64)
    for row, s in enumerate(sources):
        ids[row, : len(s)] = s
        ids[row, len(s)] = EOS
    return ids, np.arange(ids.shape[1])[None, :] < lengths[:, None]


def encode_batch(
    model: Model, src: np.ndarray, src_mask: np.ndarray, train: bool = False, rng=None
) -> EncoderOutputs:
    cfg = model.config
    if model.kind != "nmt":
        raise ContractError("language models have no encoder")
    if src.shape[1] > cfg.max_positions:
        raise LengthError(f"source length {src.shape[1]} exceeds max_positions={cfg.max_positions}")
    p = model.params
    x = scale(embedding(model.src_embed, src), math.sqrt(cfg.d_model))
    x = dropout(x + model._positions[: src.shape[1]], cfg.dropout, rng, train)
    mask = key_padding_mask(src_mask)
    for i in range(cfg.n_enc_layers):
        pre = f"enc.{i}"
        h = _norm(p, pre + ".ln1", x)
        q = _split_heads(_proj(p, pre + ".self.q", h), cfg.n_heads)
        k = _split_heads(_proj(p, pre + ".self.k", h), cfg.n_heads)
        v = _split_heads(_proj(p, pre + ".self.v", h), cfg.n_heads)
        a = _proj(p, pre + ".self.o", _merge_heads(_attend(q, k, v, mask)))
        x = x + dropout(a, cfg.dropout, rng, train)
        x = x + dropout(_ffn(p, pre + ".ffn", _norm(p, pre + ".ln2", x)), cfg.dropout, rng, train)
    return EncoderOutputs(_norm(p, "enc.ln", x), src_mask)


def encode(model: Model, f: Sequence[int]) -> EncoderOutputs:
    """Encode one source sentence (dropout off); ``h`` has shape (1, J, d)."""
    if len(f) + 1 > model.config.max_positions:
        raise LengthError(f"source of {len(f)} tokens exceeds max_positions")
    if any(not 0 <= t < model.config.vocab_size for t in f):
        raise IndexError("source id outside the vocabulary")
    ids, mask = pad_sources([f])
    with no_grad():
        out = encode_batch(model, ids, mask)
    return EncoderOutputs(out.h.data, mask)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def _project_memory(model: Model, layer: int, memory: EncoderOutputs):
    p = model.params
    n_heads = model.config.n_heads
    h = as_tensor(memory.h)
    k = _split_heads(_proj(p, f"dec.{layer}.cross.k", h), n_heads)
    v = _split_heads(_proj(p, f"dec.{layer}.cross.v", h), n_heads)
    return k, v


def _decoder_stack(
    model: Model,
    ids: np.ndarray,
    start: int,
    cross,
    *,
    self_past: list | None,
    cross_kv: list | None,
    cross_mask: np.ndarray | None,
    mini_past: list | None,
    train: bool,
    rng,
):
    """Run all decoder layers on ``ids`` (N, T) beginning at position ``start``.

    Returns hidden states, new self-attention caches, per-layer context
    vectors (the cross slot's output) and new mini-attention caches.
    """
    cfg = model.config
    p = model.params
    n = ids.shape[1]
    x = _embed_target(model, ids, start, train, rng)
    mask = causal_mask(n) if self_past is None else None
    new_self, contexts, new_mini = [], [], []
    for i in range(cfg.n_dec_layers):
        pre = f"dec.{i}"
        past = None if self_past is None else self_past[i]
        a, kv = _causal_self_attention(p, pre + ".self", _norm(p, pre + ".ln1", x), cfg.n_heads, past, mask)
        new_self.append(kv)
        x = x + dropout(a, cfg.dropout, rng, train)
        if cross is not None:
            h = _norm(p, pre + ".ln2", x)
            if isinstance(cross, ContextOverride):
                c = Tensor(np.broadcast_to(cross.at(i, start, n), h.shape))
            elif isinstance(cross, MiniSelfAttention):
                mpast = None if mini_past is None else mini_past[i]
                c, mkv = _causal_self_attention(cross.params, f"mini.{i}", h, cfg.n_heads, mpast, mask)
                new_mini.append(mkv)
            else:
                q = _split_heads(_proj(p, pre + ".cross.q", h), cfg.n_heads)
                k, v = cross_kv[i]
                c = _proj(p, pre + ".cross.o", _merge_heads(_attend(q, k, v, cross_mask)))
            contexts.append(c.data)
            x = x + dropout(c, cfg.dropout, rng, train)
        x = x + dropout(_ffn(p, pre + ".ffn", _norm(p, pre + ".ln3", x)), cfg.dropout, rng, train)
    return x, new_self, contexts, new_mini


def _resolve_memory(cross) -> EncoderOutputs | None:
    if isinstance(cross, ConstantEncoderOutputs):
        return cross.as_memory()
    if isinstance(cross, EncoderOutputs):
        return cross
    return None


def _check_cross(model: Model, cross) -> None:
    if model.kind == "lm" and cross is not None:
        raise ContractError("a language model takes no encoder outputs")
    if model.kind == "nmt" and cross is None:
        raise ContractError("a translation model needs encoder outputs or a replacement")


def decoder_forward(
    model: Model, tgt_in: np.ndarray, cross=None, *, train: bool = False, rng=None
) -> tuple[Tensor, list[np.ndarray]]:
    """Teacher-forced logits (N, T, V) and per-layer contexts (N, T, d)."""
    _check_cross(model, cross)
    memory = _resolve_memory(cross)
    cross_kv = cross_mask = None
    if memory is not None:
        cross_kv = [_project_memory(model, i, memory) for i in range(model.config.n_dec_layers)]
        cross_mask = key_padding_mask(memory.mask)
    hidden, _, contexts, _ = _decoder_stack(
        model, tgt_in, 0, cross,
        self_past=None, cross_kv=cross_kv, cross_mask=cross_mask, mini_past=None,
        train=train, rng=rng,
    )
    return _output_logits(model, hidden), contexts


@dataclass
class DecoderStepState:
    """Incremental decoding caches for N parallel rows.

    ``self_cache[l]`` holds projected keys/values (N, H, t, d/H) of layer l,
    ``contexts[l]`` the context vectors (N, d) produced at the latest step.
    """

    cross: object
    position: int = 0
    self_cache: list | None = None
    cross_kv: list | None = None
    cross_mask: np.ndarray | None = None
    mini_cache: list | None = None
    contexts: list[np.ndarray] = field(default_factory=list)
    n_rows: int = 1

    def select(self, idx: np.ndarray) -> "DecoderStepState":
        """Rows ``idx`` of this state (beam reordering)."""
        idx = np.asarray(idx)

        def pick(pairs):
            return None if pairs is None else [(k[idx], v[idx]) for k, v in pairs]

        return DecoderStepState(
            cross=self.cross,
            position=self.position,
            self_cache=pick(self.self_cache),
            cross_kv=pick(self.cross_kv),
            cross_mask=None if self.cross_mask is None else self.cross_mask[idx],
            mini_cache=pick(self.mini_cache),
            contexts=[c[idx] for c in self.contexts],
            n_rows=len(idx),
        )


def start_decoding(model: Model, cross=None, n_rows: int | None = None) -> DecoderStepState:
    """Initial state; ``cross`` follows the conventions of the module docstring."""
    _check_cross(model, cross)
    memory = _resolve_memory(cross)
    if memory is not None:
        rows = memory.mask.shape[0]
        with no_grad():
            kv = [_project_memory(model, i, memory) for i in range(model.config.n_dec_layers)]
        return DecoderStepState(
            cross=cross,
            cross_kv=[(k.data, v.data) for k, v in kv],
            cross_mask=key_padding_mask(memory.mask),
            n_rows=rows,
        )
    return DecoderStepState(cross=cross, n_rows=1 if n_rows is None else n_rows)


def decode_step(
    model: Model, state: DecoderStepState, prev_tokens
) -> tuple[np.ndarray, DecoderStepState]:
    """Log-probabilities (N, V) of the next token and the advanced state."""
    prev = np.asarray(prev_tokens, dtype=np.int64).reshape(-1)
    if prev.shape[0] != state.n_rows:
        raise ContractError(f"state has {state.n_rows} rows but {prev.shape[0]} tokens were fed")
    if state.position == 0 and np.any(prev != BOS):
        raise ContractError("the first decoder input must be <bos>")
    if state.self_cache is not None and state.self_cache[0][0].shape[2] != state.position:
        raise ContractError("cache length disagrees with the position index")
    with no_grad():
        hidden, self_kv, contexts, mini_kv = _decoder_stack(
            model, prev[:, None], state.position, state.cross,
            self_past=state.self_cache, cross_kv=state.cross_kv, cross_mask=state.cross_mask,
            mini_past=state.mini_cache, train=False, rng=None,
        )
        logits = _output_logits(model, hidden).data[:, 0, :]
    new_state = DecoderStepState(
        cross=state.cross,
        position=state.position + 1,
        self_cache=self_kv,
        cross_kv=state.cross_kv,
        cross_mask=state.cross_mask,
        mini_cache=mini_kv or None,
        contexts=[c[:, 0, :] for c in contexts],
        n_rows=state.n_rows,
    )
    return log_softmax_array(logits), new_state


def score_sequence(model: Model, f: Sequence[int] | None, e: Sequence[int], cross=None) -> float:
    """log P(e | f) as the sum of stepwise log-probabilities; ``e`` ends with <eos>.

    For a language model pass ``f=None``.  ``cross`` overrides the encoder
    outputs (used by the internal-LM approximations).
    """
    if not e or e[-1] != EOS:
        raise ContractError("scored sequences must end with <eos>")
    if cross is None and model.kind == "nmt":
        cross = encode(model, f)
    state = start_decoding(model, cross, n_rows=1)
    total = 0.0
    prev = BOS
    for tok in e:
        logp, state = decode_step(model, state, [prev])
        total += float(logp[0, tok])
        prev = tok
    return total


def sequence_logprobs(model: Model, batch_tgt_in, batch_tgt_out, tgt_mask, cross=None) -> np.ndarray:
    """Teacher-forced per-sentence log-probabilities for a padded batch."""
    with no_grad():
        logits, _ = decoder_forward(model, batch_tgt_in, cross)
    lsm = log_softmax_array(logits.data)
    tok = np.take_along_axis(lsm, batch_tgt_out[..., None], axis=-1)[..., 0]
    return (tok * tgt_mask).sum(axis=1)


def lm_score_step(lm: Model, state: DecoderStepState, prev_tokens) -> tuple[np.ndarray, DecoderStepState]:
    """Decoder-only counterpart of :func:`decode_step`."""
    if lm.kind != "lm":
        raise ContractError("lm_score_step needs a language model")
    return decode_step(lm, state, prev_tokens)


def batch_loss(model: Model, batch, *, train: bool, rng=None, cross_override=None) -> tuple[Tensor, int]:
    """Summed label-smoothed cross-entropy of a batch and its target token count."""
    if cross_override is not None:
        cross = cross_override
    elif model.kind == "nmt":
        cross = encode_batch(model, batch.src, batch.src_mask, train=train, rng=rng)
    else:
        cross = None
    logits, _ = decoder_forward(model, batch.tgt_in, cross, train=train, rng=rng)
    eps = model.config.label_smoothing if train else 0.0
    loss = label_smoothed_cross_entropy(logits, batch.tgt_out, eps, batch.tgt_mask)
    return loss, batch.n_target_tokens


__all__ = [
    "ConstantEncoderOutputs",
    "ContextOverride",
    "DecoderStepState",
    "EncoderOutputs",
    "MiniSelfAttention",
    "Model",
    "TransformerConfig",
    "batch_loss",
    "decode_step",
    "decoder_forward",
    "encode",
    "encode_batch",
    "lm_score_step",
    "pad_sources",
    "score_sequence",
    "sequence_logprobs",
    "start_decoding",
]
