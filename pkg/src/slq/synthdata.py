"""Deterministic paired image/caption data at two tiers.

Images are feature grids: each cell is empty or holds ``count`` objects of
one ``shape`` and ``color``. EXPLICIT captions list every object as
``count color shape`` joined by ``and``. REASONING captions replace one
attribute of one object with a clue that resolves to it through the
built-in fact table (or an arithmetic template for side counts); the literal
attribute token never appears in such a caption.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import GenerationError, InputError, IntegrityError

FORMAT_NAME = "slq-synthdata"
FORMAT_VERSION = 1
FACT_TABLE_VERSION = 1

SHAPES = ("triangle", "square", "pentagon", "hexagon", "heptagon", "octagon")
SIDES = {s: i + 3 for i, s in enumerate(SHAPES)}
COLORS = ("red", "orange", "yellow", "green", "blue", "purple", "black", "white")
MAX_COUNT = 9

PAD, BOS, AND, PLUS, SIDES_TOK = 0, 1, 2, 3, 4
DIGIT0 = 5
SHAPE0 = DIGIT0 + 10
COLOR0 = SHAPE0 + len(SHAPES)
CLUE0 = COLOR0 + len(COLORS)

PATCH_DIM = 1 + len(SHAPES) + len(COLORS) + MAX_COUNT


class Tier(str, Enum):
    EXPLICIT = "explicit"
    REASONING = "reasoning"


class Dimension(str, Enum):
    TOOL_UTILITY = "tool-utility"
    CONTEXTUAL_SPATIAL = "contextual-spatial"
    FUNCTIONAL = "functional"
    CULTURAL_SYMBOLIC = "cultural-symbolic"
    ENCYCLOPEDIC = "encyclopedic"
    LOGICAL_MATHEMATICAL = "logical-mathematical"


DIMENSIONS = tuple(Dimension)

# Category shares of the reasoning benchmark, in DIMENSIONS order.
KARR_MIX = {
    Dimension.TOOL_UTILITY: 0.188,
    Dimension.CONTEXTUAL_SPATIAL: 0.181,
    Dimension.FUNCTIONAL: 0.174,
    Dimension.CULTURAL_SYMBOLIC: 0.194,
    Dimension.ENCYCLOPEDIC: 0.149,
    Dimension.LOGICAL_MATHEMATICAL: 0.114,
}

# attribute kind each dimension rewrites
DIMENSION_KIND = {
    Dimension.TOOL_UTILITY: "shape",
    Dimension.CONTEXTUAL_SPATIAL: "color",
    Dimension.FUNCTIONAL: "count",
    Dimension.CULTURAL_SYMBOLIC: "shape",
    Dimension.ENCYCLOPEDIC: "color",
    Dimension.LOGICAL_MATHEMATICAL: "shape",
}

# Fact table v1: clue word -> attribute value, per dimension.
FACTS: dict[Dimension, dict[str, str | int]] = {
    Dimension.TOOL_UTILITY: {
        "setsquare": "triangle", "floortile": "square", "homeplate": "pentagon",
        "hexnut": "hexagon", "coinpress": "heptagon", "umbrella": "octagon",
    },
    Dimension.CULTURAL_SYMBOLIC: {
        "pyramid": "triangle", "chessboard": "square", "starfort": "pentagon",
        "honeycomb": "hexagon", "fiftypence": "heptagon", "stopsign": "octagon",
    },
    Dimension.CONTEXTUAL_SPATIAL: {
        "hearth": "red", "sunset": "orange", "desert": "yellow", "forest": "green",
        "ocean": "blue", "vineyard": "purple", "night": "black", "snowfield": "white",
    },
    Dimension.ENCYCLOPEDIC: {
        "blood": "red", "carrot": "orange", "banana": "yellow", "grass": "green",
        "sky": "blue", "amethyst": "purple", "coal": "black", "milk": "white",
    },
    Dimension.FUNCTIONAL: {
        "unicycle": 1, "bicycle": 2, "tricycle": 3, "car": 4, "hand": 5,
        "insect": 6, "week": 7, "spider": 8, "catlives": 9,
    },
    Dimension.LOGICAL_MATHEMATICAL: {},
}


def _build_vocab() -> dict[str, int]:
    vocab = {"<pad>": PAD, "<bos>": BOS, "and": AND, "plus": PLUS, "sides": SIDES_TOK}
    vocab.update({str(d): DIGIT0 + d for d in range(10)})
    vocab.update({s: SHAPE0 + i for i, s in enumerate(SHAPES)})
    vocab.update({c: COLOR0 + i for i, c in enumerate(COLORS)})
    nxt = CLUE0
    for dim in DIMENSIONS:
        for word in FACTS[dim]:
            vocab[word] = nxt
            nxt += 1
    return vocab


VOCAB = _build_vocab()
INV_VOCAB = {v: k for k, v in VOCAB.items()}
VOCAB_SIZE_USED = len(VOCAB)


def literal_token(kind: str, value) -> int:
    """Token that names an attribute value verbatim."""
    if kind == "count":
        return DIGIT0 + int(value)
    if kind == "shape":
        return SHAPE0 + SHAPES.index(value)
    return COLOR0 + COLORS.index(value)


def decode(tokens: Iterable[int]) -> str:
    return " ".join(INV_VOCAB.get(int(t), f"<{int(t)}>") for t in tokens)


def encode_words(text: str) -> list[int]:
    try:
        return [VOCAB[w] for w in text.split()]
    except KeyError as exc:
        raise InputError(f"unknown word {exc.args[0]!r}") from None


@dataclass(frozen=True)
class SynthImage:
    """A ``grid x grid`` array of cells; each cell is (shape, color, count) or empty.

    ``cells`` holds ``(shape_index, color_index, count)`` per cell, with
    count 0 meaning empty.
    """

    cells: tuple[tuple[tuple[int, int, int], ...], ...]

    def __post_init__(self):
        if not any(cnt > 0 for row in self.cells for (_, _, cnt) in row):
            raise InputError("image needs at least one non-empty cell")

    @property
    def grid(self) -> int:
        return len(self.cells)

    def objects(self) -> list[tuple[int, str, str]]:
        """Non-empty cells in row-major order as (count, color, shape)."""
        out = []
        for row in self.cells:
            for s, c, cnt in row:
                if cnt > 0:
                    out.append((cnt, COLORS[c], SHAPES[s]))
        return out

    def features(self) -> np.ndarray:
        """(grid*grid, PATCH_DIM) rendering: occupancy, shape, color and count one-hots."""
        g = self.grid
        out = np.zeros((g * g, PATCH_DIM), dtype=np.float64)
        for i, row in enumerate(self.cells):
            for j, (s, c, cnt) in enumerate(row):
                if cnt <= 0:
                    continue
                f = out[i * g + j]
                f[0] = 1.0
                f[1 + s] = 1.0
                f[1 + len(SHAPES) + c] = 1.0
                f[1 + len(SHAPES) + len(COLORS) + cnt - 1] = 1.0
        return out

    def to_list(self) -> list:
        return [[list(c) for c in row] for row in self.cells]

    @classmethod
    def from_list(cls, cells) -> "SynthImage":
        return cls(tuple(tuple(tuple(int(v) for v in c) for c in row) for row in cells))


@dataclass(frozen=True)
class CaptionSpec:
    tier: Tier
    tokens: tuple[int, ...]
    attributes: tuple[tuple[int, str, str], ...]
    dimension: Dimension | None = None
    target: tuple[int, str, object] | None = None  # (object index, kind, value)

    @property
    def text(self) -> str:
        return decode(self.tokens)


@dataclass(frozen=True)
class Pair:
    id: int
    image: SynthImage
    caption: CaptionSpec


@dataclass
class PairedDataset:
    pairs: list[Pair]
    seed: int
    tier: Tier
    splits: dict[int, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def ids(self) -> list[int]:
        return [p.id for p in self.pairs]

    def subset(self, split: str) -> "PairedDataset":
        if not self.splits:
            raise InputError("dataset has no split markers")
        pairs = [p for p in self.pairs if self.splits.get(p.id) == split]
        return PairedDataset(pairs, self.seed, self.tier, {p.id: split for p in pairs})

    def split_names(self) -> list[str]:
        return sorted(set(self.splits.values()))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "fact_table_version": FACT_TABLE_VERSION,
            "seed": self.seed,
            "tier": self.tier.value,
            "pairs": [
                {
                    "id": p.id,
                    "cells": p.image.to_list(),
                    "tokens": list(p.caption.tokens),
                    "tier": p.caption.tier.value,
                    "attributes": [list(a) for a in p.caption.attributes],
                    "dimension": p.caption.dimension.value if p.caption.dimension else None,
                    "target": list(p.caption.target) if p.caption.target else None,
                    "split": self.splits.get(p.id),
                }
                for p in self.pairs
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def from_dict(cls, blob: Mapping) -> "PairedDataset":
        if blob.get("format") != FORMAT_NAME:
            raise IntegrityError(f"not a {FORMAT_NAME} file")
        if blob.get("version") != FORMAT_VERSION or blob.get("fact_table_version") != FACT_TABLE_VERSION:
            raise IntegrityError(f"unsupported dataset version {blob.get('version')}/"
                                 f"{blob.get('fact_table_version')}")
        pairs, splits = [], {}
        for rec in blob["pairs"]:
            target = rec["target"]
            cap = CaptionSpec(
                Tier(rec["tier"]), tuple(rec["tokens"]),
                tuple((int(a[0]), a[1], a[2]) for a in rec["attributes"]),
                Dimension(rec["dimension"]) if rec["dimension"] else None,
                (int(target[0]), target[1], target[2]) if target else None,
            )
            pairs.append(Pair(int(rec["id"]), SynthImage.from_list(rec["cells"]), cap))
            if rec.get("split"):
                splits[int(rec["id"])] = rec["split"]
        return cls(pairs, int(blob["seed"]), Tier(blob["tier"]), splits)

    @classmethod
    def load(cls, path) -> "PairedDataset":
        try:
            blob = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"malformed dataset file: {exc}") from None
        return cls.from_dict(blob)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component derived from one seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def _random_image(rng: np.random.Generator, grid: int, min_objects: int, max_objects: int) -> SynthImage:
    k = int(rng.integers(min_objects, max_objects + 1))
    cells = [[(0, 0, 0)] * grid for _ in range(grid)]
    for flat in rng.choice(grid * grid, size=k, replace=False):
        cells[flat // grid][flat % grid] = (int(rng.integers(len(SHAPES))), int(rng.integers(len(COLORS))),
                                            int(rng.integers(1, MAX_COUNT + 1)))
    return SynthImage(tuple(tuple(r) for r in cells))


def explicit_tokens(objects: Sequence[tuple[int, str, str]]) -> list[int]:
    out: list[int] = []
    for i, (cnt, color, shape) in enumerate(objects):
        if i:
            out.append(AND)
        out += [literal_token("count", cnt), literal_token("color", color), literal_token("shape", shape)]
    return out


def _check_objects(min_objects: int, max_objects: int, grid: int) -> None:
    if not 1 <= min_objects <= max_objects <= grid * grid:
        raise InputError("need 1 <= min_objects <= max_objects <= grid^2")


def gen_explicit(n: int, seed: int, grid: int = 4, min_objects: int = 1, max_objects: int = 3,
                 id_offset: int = 0) -> PairedDataset:
    """``n`` image/caption pairs whose captions name every attribute verbatim."""
    if n < 1:
        raise InputError("n must be >= 1")
    _check_objects(min_objects, max_objects, grid)
    rng = substream(seed, "explicit")
    pairs, seen = [], set()
    attempts = 0
    while len(pairs) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise GenerationError("could not generate enough distinct captions")
        img = _random_image(rng, grid, min_objects, max_objects)
        toks = tuple(explicit_tokens(img.objects()))
        if toks in seen:
            continue
        seen.add(toks)
        cap = CaptionSpec(Tier.EXPLICIT, toks, tuple(img.objects()))
        pairs.append(Pair(id_offset + len(pairs), img, cap))
    return PairedDataset(pairs, seed, Tier.EXPLICIT)


def apportion(n: int, mix: Mapping[Dimension, float]) -> dict[Dimension, int]:
    """Largest-remainder integer counts summing to ``n``."""
    raw = {d: n * p for d, p in mix.items()}
    counts = {d: int(np.floor(v)) for d, v in raw.items()}
    left = n - sum(counts.values())
    order = sorted(mix, key=lambda d: (-(raw[d] - counts[d]), DIMENSIONS.index(d)))
    for d in order[:left]:
        counts[d] += 1
    return counts


def clue_tokens(dimension: Dimension, value, rng: np.random.Generator | None = None,
                facts: Mapping[Dimension, Mapping] = FACTS) -> list[int]:
    """Render the clue for ``value`` under ``dimension``'s template."""
    if dimension is Dimension.LOGICAL_MATHEMATICAL:
        sides = SIDES[value]
        k1 = int(rng.integers(1, sides)) if rng is not None else 1
        k2 = sides - k1
        if not (0 <= k1 <= 9 and 0 <= k2 <= 9):
            raise GenerationError(f"cannot express {sides} sides with two digits")
        return [DIGIT0 + k1, PLUS, DIGIT0 + k2, SIDES_TOK]
    words = [w for w, v in facts.get(dimension, {}).items() if v == value]
    if not words:
        raise GenerationError(f"fact table has no {dimension.value} entry for {value!r}")
    word = words[0] if rng is None or len(words) == 1 else words[int(rng.integers(len(words)))]
    if word not in VOCAB:
        raise GenerationError(f"clue word {word!r} is not in the vocabulary")
    return [VOCAB[word]]


def _reasoning_caption(img: SynthImage, dimension: Dimension, rng: np.random.Generator,
                       facts) -> CaptionSpec | None:
    objects = img.objects()
    kind = DIMENSION_KIND[dimension]
    slot = {"count": 0, "color": 1, "shape": 2}[kind]
    for idx in rng.permutation(len(objects)):
        value = objects[idx][slot]
        lit = literal_token(kind, value)
        others = [o for j, o in enumerate(objects) if j != idx]
        if any(literal_token(kind, o[slot]) == lit for o in others):
            continue
        clue = clue_tokens(dimension, value, rng, facts)
        toks: list[int] = []
        for j, (cnt, color, shape) in enumerate(objects):
            if j:
                toks.append(AND)
            parts = [[literal_token("count", cnt)], [literal_token("color", color)], [literal_token("shape", shape)]]
            if j == idx:
                parts[slot] = clue
            for p in parts:
                toks += p
        if lit in toks:
            continue
        return CaptionSpec(Tier.REASONING, tuple(toks), tuple(objects), dimension, (int(idx), kind, value))
    return None


def gen_reasoning(n: int, seed: int, dimension_mix: Mapping | None = None, grid: int = 4,
                  min_objects: int = 1, max_objects: int = 3, id_offset: int = 0,
                  facts: Mapping[Dimension, Mapping] = FACTS) -> PairedDataset:
    """``n`` pairs whose captions encode one attribute through a clue."""
    if n < 1:
        raise InputError("n must be >= 1")
    _check_objects(min_objects, max_objects, grid)
    mix = {Dimension(k): float(v) for k, v in (dimension_mix or KARR_MIX).items()}
    if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-6:
        raise InputError("dimension_mix proportions must be non-negative and sum to 1")
    for dim, p in mix.items():
        if p > 0 and dim is not Dimension.LOGICAL_MATHEMATICAL and not facts.get(dim):
            raise GenerationError(f"fact table has no entries for {dim.value}")
    counts = apportion(n, mix)
    rng = substream(seed, "reasoning")
    plan = [d for d in DIMENSIONS if d in counts for _ in range(counts[d])]
    plan = [plan[i] for i in rng.permutation(len(plan))]
    pairs, seen = [], set()
    attempts = 0
    for dim in plan:
        while True:
            attempts += 1
            if attempts > 200 * n + 1000:
                raise GenerationError("could not generate enough distinct reasoning captions")
            img = _random_image(rng, grid, min_objects, max_objects)
            cap = _reasoning_caption(img, dim, rng, facts)
            if cap is None or cap.tokens in seen:
                continue
            seen.add(cap.tokens)
            pairs.append(Pair(id_offset + len(pairs), img, cap))
            break
    return PairedDataset(pairs, seed, Tier.REASONING)


def resolve_caption(tokens: Sequence[int], facts: Mapping[Dimension, Mapping] = FACTS) -> list[tuple[Dimension, str, object]]:
    """Every (dimension, kind, value) whose clue occurs in ``tokens``.

    Brute force: renders every template expansion for every attribute value
    and scans the caption for it. A well-formed reasoning caption yields
    exactly one match.
    """
    toks = list(tokens)
    found = []
    for dim in DIMENSIONS:
        kind = DIMENSION_KIND[dim]
        if dim is Dimension.LOGICAL_MATHEMATICAL:
            candidates = [(shape, [DIGIT0 + a, PLUS, DIGIT0 + b, SIDES_TOK])
                          for shape in SHAPES for a in range(10) for b in range(10) if a + b == SIDES[shape]]
        else:
            candidates = [(v, [VOCAB[w]]) for w, v in facts.get(dim, {}).items()]
        for value, pattern in candidates:
            m = len(pattern)
            if any(toks[i:i + m] == pattern for i in range(len(toks) - m + 1)):
                found.append((dim, kind, value))
    return found


def split(dataset: PairedDataset, fractions, seed: int = 0) -> PairedDataset:
    """Assign every pair to a named split; returns a copy with split markers.

    ``fractions`` is a mapping name -> fraction, or a sequence of fractions
    named pretrain / adapt / eval in order.
    """
    if not isinstance(fractions, Mapping):
        names = ("pretrain", "adapt", "eval")
        fractions = list(fractions)
        if len(fractions) > len(names):
            raise InputError("at most three unnamed fractions")
        names = names[-len(fractions):] if len(fractions) < 3 else names
        fractions = dict(zip(names, fractions))
    if not fractions or any(not (0 < f <= 1) for f in fractions.values()):
        raise InputError("split fractions must be positive")
    if abs(sum(fractions.values()) - 1.0) > 1e-6:
        raise InputError("split fractions must sum to 1")
    n = len(dataset)
    raw = {k: n * f for k, f in fractions.items()}
    counts = {k: int(np.floor(v)) for k, v in raw.items()}
    for k in sorted(fractions, key=lambda k: -(raw[k] - counts[k]))[: n - sum(counts.values())]:
        counts[k] += 1
    if any(c == 0 for c in counts.values()):
        raise InputError("a split fraction leaves an empty split")
    order = substream(seed, "split").permutation(n)
    marks = {}
    pos = 0
    for name, c in counts.items():
        for i in order[pos:pos + c]:
            marks[dataset.pairs[i].id] = name
        pos += c
    return PairedDataset(list(dataset.pairs), dataset.seed, dataset.tier, marks)


# ---------------------------------------------------------------- pretraining corpus

DESCRIBE = BOS  # marker after which the backbone learns to emit a literal description


@dataclass(frozen=True)
class CorpusItem:
    features: np.ndarray
    caption: tuple[int, ...]
    description: tuple[int, ...]


def pretrain_corpus(datasets: Iterable[PairedDataset]) -> list[CorpusItem]:
    """Flatten datasets into (image features, caption, literal description) triples."""
    items = []
    for ds in datasets:
        for p in ds.pairs:
            items.append(CorpusItem(p.image.features(), tuple(p.caption.tokens),
                                    tuple(explicit_tokens(p.image.objects()))))
    if not items:
        raise InputError("pretraining corpus is empty")
    return items


def describe_batches(items: Sequence[CorpusItem], batch_size: int, seed: int, text_fraction: float = 0.5):
    """Endless next-token batches in the describe format.

    Image items are ``[patches; DESCRIBE; description]``; text items are
    ``[caption; DESCRIBE; description]``, so the state at the end of either
    modality has to anticipate the same literal description.
    """
    if not items:
        raise InputError("pretraining corpus is empty")
    rng = substream(seed, "pretrain-batches")
    n_text = int(round(batch_size * text_fraction))
    while True:
        batch = [(items[i].features, [DESCRIBE, *items[i].description])
                 for i in rng.integers(len(items), size=batch_size)]
        batch += [(None, [*items[i].caption, DESCRIBE, *items[i].description])
                  for i in rng.integers(len(items), size=n_text)]
        yield batch
