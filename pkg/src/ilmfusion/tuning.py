"""Grid search over the fusion weights (lambda1, lambda2) by validation BLEU."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import ParallelCorpus
from .decoding import BeamConfig, FusionWeights, translate_corpus
from .errors import ConfigError, FormatError, InputError
from .ilm import IlmVariant
from .metrics import corpus_bleu
from .models.transformer import Model
from .tokenizer import Codec

log = logging.getLogger(__name__)

Evaluator = Callable[[float, float], float]

_DIGITS = 10


def _key(value: float) -> float:
    return round(float(value), _DIGITS)


def _axis(values: Iterable[float], name: str) -> tuple[float, ...]:
    vals = tuple(_key(v) for v in values)
    if any(v < 0 for v in vals):
        raise ConfigError(f"{name} values must be non-negative")
    if len(set(vals)) != len(vals):
        raise ConfigError(f"{name} values must be distinct")
    if list(vals) != sorted(vals):
        raise ConfigError(f"{name} values must be ascending")
    return vals


@dataclass(frozen=True)
class GridSpec:
    lambda1_values: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(7))
    lambda2_values: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(7))
    shallow_fusion_extra: tuple[float, ...] = (0.05, 0.15)
    refine: tuple[float, float] | None = None

    def __post_init__(self):
        l1 = _axis(self.lambda1_values, "lambda1")
        l2 = _axis(self.lambda2_values, "lambda2")
        if 0.0 not in l1 or 0.0 not in l2:
            raise ConfigError("both grid axes must contain 0.0")
        object.__setattr__(self, "lambda1_values", l1)
        object.__setattr__(self, "lambda2_values", l2)
        object.__setattr__(self, "shallow_fusion_extra", tuple(_key(v) for v in self.shallow_fusion_extra))

    @classmethod
    def single(cls, lambda1: float = 0.0, lambda2: float = 0.0) -> "GridSpec":
        l1 = (0.0,) if lambda1 == 0 else (0.0, lambda1)
        l2 = (0.0,) if lambda2 == 0 else (0.0, lambda2)
        return cls(l1, l2, ())

    def cells(self) -> list[tuple[float, float]]:
        grid = [(l1, l2) for l2 in self.lambda2_values for l1 in self.lambda1_values]
        extra = [(l1, 0.0) for l1 in self.shallow_fusion_extra if l1 not in self.lambda1_values]
        return sorted(set(grid + extra), key=lambda c: (c[1], c[0]))


@dataclass
class GridResult:
    cells: dict[tuple[float, float], float] = field(default_factory=dict)

    @property
    def best(self) -> tuple[float, float, float]:
        """(lambda1, lambda2, bleu) of the best cell; ties go to smaller lambda2, then lambda1."""
        if not self.cells:
            raise InputError("grid result has no cells")
        (l1, l2), bleu = max(self.cells.items(), key=lambda kv: (kv[1], -kv[0][1], -kv[0][0]))
        return l1, l2, bleu

    def rows(self) -> list[tuple[float, float, float]]:
        return [(l1, l2, self.cells[(l1, l2)]) for l1, l2 in sorted(self.cells, key=lambda c: (c[1], c[0]))]

    def baseline(self) -> float:
        return self.cells[(0.0, 0.0)]

    def best_shallow_fusion(self) -> tuple[float, float]:
        """(lambda1, bleu) of the best cell on the lambda2 = 0 row."""
        row = {k: v for k, v in self.cells.items() if k[1] == 0.0}
        l1, _, bleu = GridResult(row).best
        return l1, bleu


def _evaluate(cells: Sequence[tuple[float, float]], evaluator: Evaluator, result: GridResult) -> GridResult:
    for l1, l2 in cells:
        key = (_key(l1), _key(l2))
        if key in result.cells:
            continue
        result.cells[key] = float(evaluator(*key))
        log.info("lambda1=%g lambda2=%g bleu=%.4f", key[0], key[1], result.cells[key])
    return result


def bleu_evaluator(
    valid: ParallelCorpus,
    references: Sequence[str],
    codec: Codec,
    mt: Model,
    lm: Model | None,
    variant: IlmVariant | None,
    beam_config: BeamConfig,
    workers: int = 1,
) -> Evaluator:
    """Decode the validation sources with the given weights and score corpus BLEU."""
    if len(valid) == 0:
        raise InputError("empty validation set")

    def evaluate(lambda1: float, lambda2: float) -> float:
        weights = FusionWeights(lambda1, lambda2, variant if lambda2 > 0 else None)
        hyps = translate_corpus(valid.src, mt, lm, weights, beam_config, workers=workers)
        return corpus_bleu([codec.decode(h.content) for h in hyps], references).bleu_percent

    return evaluate


def grid_search(spec: GridSpec, evaluator: Evaluator) -> GridResult:
    """Evaluate every grid cell (the (0, 0) baseline included), then refine if requested."""
    result = _evaluate(spec.cells(), evaluator, GridResult())
    if spec.refine is not None:
        radius, step = spec.refine
        result = refine(result, evaluator, radius, step)
    return result


def refine(result: GridResult, evaluator: Evaluator, radius: float, step: float) -> GridResult:
    """Add a finer grid of spacing ``step`` within +-radius of the current best."""
    if radius < 0 or step <= 0:
        raise ConfigError("refinement needs radius >= 0 and step > 0")
    l1, l2, _ = result.best
    n = int(np.floor(radius / step + 1e-9))
    offsets = [i * step for i in range(-n, n + 1)]
    cells = sorted({
        (_key(l1 + a), _key(l2 + b))
        for a in offsets for b in offsets
        if l1 + a >= -1e-12 and l2 + b >= -1e-12
    }, key=lambda c: (c[1], c[0]))
    cells = [(max(a, 0.0), max(b, 0.0)) for a, b in cells]
    merged = GridResult(dict(result.cells))
    return _evaluate(cells, evaluator, merged)


def export_heatmap_csv(result: GridResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda1", "lambda2", "bleu"])
        for l1, l2, bleu in result.rows():
            writer.writerow([repr(l1), repr(l2), repr(bleu)])


def parse_heatmap_csv(path: str | Path) -> GridResult:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["lambda1", "lambda2", "bleu"]:
        raise FormatError(f"{path}: missing lambda1,lambda2,bleu header")
    cells = {}
    for n, row in enumerate(rows[1:], start=2):
        try:
            l1, l2, bleu = (float(x) for x in row)
        except ValueError as exc:
            raise FormatError(f"{path}: line {n} is not three numbers") from exc
        cells[(l1, l2)] = bleu
    return GridResult(cells)


def save_weights(path: str | Path, lambda1: float, lambda2: float, variant: str | None) -> None:
    Path(path).write_text(f"lambda1={lambda1!r} lambda2={lambda2!r} variant={variant or 'none'}\n", encoding="utf-8")


def load_weights(path: str | Path) -> tuple[float, float, str | None]:
    text = Path(path).read_text(encoding="utf-8").split()
    try:
        fields = dict(item.split("=", 1) for item in text)
        variant = fields["variant"]
        return float(fields["lambda1"]), float(fields["lambda2"]), None if variant == "none" else variant
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: expected 'lambda1=.. lambda2=.. variant=..'") from exc


__all__ = [
    "Evaluator",
    "GridResult",
    "GridSpec",
    "bleu_evaluator",
    "export_heatmap_csv",
    "grid_search",
    "load_weights",
    "parse_heatmap_csv",
    "refine",
    "save_weights",
]
