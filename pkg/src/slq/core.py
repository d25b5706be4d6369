"""Shared latent queries and the readout variants compared against them.

The default readout appends the same N trainable rows to every text and
image sequence, runs the frozen backbone, keeps the hidden states of those
last N positions, mean-pools them and l2-normalizes the result.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import FrozenBackbone, Modality, TokenSequence, init_block, transformer_block, attention_allowed
from .errors import InputError, StateError

DEFAULT_N_QUERIES = 20
QUERY_SWEEP = (1, 5, 10, 20, 32)


class ReadoutVariant(str, Enum):
    SHARED_QUERIES = "shared"
    SEPARATE_QUERIES = "separate"
    LINEAR_HEAD = "linear_head"
    TF_BLOCK_HEAD = "tf_block_head"
    PROMPT_PREPEND = "prompt_prepend"
    LAST_TOKEN = "last_token"

    @property
    def uses_bank(self) -> bool:
        return self in (ReadoutVariant.SHARED_QUERIES, ReadoutVariant.SEPARATE_QUERIES,
                        ReadoutVariant.PROMPT_PREPEND)

    @property
    def appends_queries(self) -> bool:
        return self in (ReadoutVariant.SHARED_QUERIES, ReadoutVariant.SEPARATE_QUERIES)


class PoolingStrategy(str, Enum):
    MEAN = "mean"
    MAX = "max"
    LAST = "last"


@dataclass(frozen=True)
class EmbeddingRecord:
    id: object
    modality: Modality
    z: np.ndarray

    def to_json(self) -> str:
        vec = [float(v) for v in np.asarray(self.z, dtype=np.float64)]
        return json.dumps({"id": self.id, "modality": Modality(self.modality).value, "vector": vec})


class QueryBank:
    """N x D trainable rows; one tensor shared by both modalities unless ``shared=False``."""

    def __init__(self, n_queries: int, d_model: int, shared: bool = True, init: str = "zeros",
                 rng: np.random.Generator | None = None, dtype=None, std: float = 0.02):
        if n_queries < 1:
            raise InputError("a query bank needs at least one query")
        dtype = dtype or ad.get_default_dtype()
        self.n_queries = n_queries
        self.d_model = d_model
        self.shared = shared

        def fresh(name):
            if init == "zeros":
                arr = np.zeros((n_queries, d_model))
            elif init == "gaussian":
                arr = (rng or np.random.default_rng(0)).normal(0, std, (n_queries, d_model))
            else:
                raise InputError(f"unknown query init {init!r}")
            return Tensor(arr, requires_grad=True, dtype=dtype, name=name)

        self.q_text = fresh("queries" if shared else "queries_text")
        self.q_image = self.q_text if shared else fresh("queries_image")

    def for_modality(self, modality: Modality) -> Tensor:
        return self.q_text if Modality(modality) is Modality.TEXT else self.q_image

    def parameters(self) -> list[Tensor]:
        return [self.q_text] if self.shared else [self.q_text, self.q_image]

    def check_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.parameters())


def build_sequence(content: TokenSequence, bank: QueryBank, max_seq_len: int | None = None) -> TokenSequence:
    """Append the bank rows for the content's modality after the content rows."""
    n = bank.n_queries
    if max_seq_len is not None and content.length + n > max_seq_len:
        raise InputError(f"{content.length} content rows + {n} queries exceed max_seq_len={max_seq_len}")
    rows = ad.concat_along_sequence([content.embeddings, bank.for_modality(content.modality)])
    return TokenSequence(content.modality, rows)


def extract_query_states(hidden: Tensor, n: int) -> Tensor:
    """The last ``n`` rows of ``hidden`` (sequence axis second to last), in order."""
    length = hidden.shape[-2]
    if n < 1 or n >= length:
        raise InputError(f"cannot extract {n} query states from a length-{length} sequence")
    return ad.slice_last_n(hidden, n, axis=-2)


def pool(states: Tensor, strategy: PoolingStrategy) -> Tensor:
    strategy = PoolingStrategy(strategy)
    if strategy is PoolingStrategy.MEAN:
        return ad.mean_over_axis(states, -2)
    if strategy is PoolingStrategy.MAX:
        return ad.max_over_axis(states, -2)
    key = (Ellipsis, -1, slice(None))
    return ad.index(states, key)


def pool_and_normalize(states: Tensor, strategy: PoolingStrategy = PoolingStrategy.MEAN) -> Tensor:
    """Pool N query states to one vector per sample and scale it to unit length.

    Raises DegenerateEmbeddingError for a zero pooled vector.
    """
    if states.shape[-2] < 1:
        raise InputError("no query states to pool")
    return ad.l2_normalize(pool(states, strategy))


def content_batch(backbone: FrozenBackbone, modality: Modality, contents: Sequence,
                  prompt_tokens: Sequence[int] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Stack content rows as (B, L, D) with left padding, plus the (B, L) validity mask.

    Text contents are token-id lists, image contents anything
    :meth:`FrozenBackbone.patch_features` accepts.
    """
    modality = Modality(modality)
    if not contents:
        raise InputError("empty batch")
    table = backbone.params["tok_emb"].data
    prefix = table[np.asarray(prompt_tokens, dtype=np.int64)] if len(prompt_tokens) else None
    rows = []
    for c in contents:
        if modality is Modality.TEXT:
            r = table[backbone._check_tokens(c)]
        else:
            r = backbone.project_patches(backbone.patch_features(c))
        if prefix is not None:
            r = np.concatenate([prefix, r], axis=0)
        rows.append(r)
    length = max(len(r) for r in rows)
    d = backbone.config.d_model
    out = np.zeros((len(rows), length, d), dtype=backbone.dtype)
    valid = np.zeros((len(rows), length), dtype=bool)
    for i, r in enumerate(rows):
        out[i, length - len(r):] = r
        valid[i, length - len(r):] = True
    return out, valid


class Readout:
    """Trainable mapping from backbone hidden states to one unit vector per sample."""

    def __init__(self, variant: ReadoutVariant = ReadoutVariant.SHARED_QUERIES, d_model: int = 64,
                 n_queries: int = DEFAULT_N_QUERIES, pooling: PoolingStrategy = PoolingStrategy.MEAN,
                 query_init: str = "zeros", seed: int = 0, dtype=None, prompt_tokens: Sequence[int] = (),
                 n_heads: int = 4, ffn_mult: int = 4):
        self.variant = ReadoutVariant(variant)
        self.pooling = PoolingStrategy(pooling)
        self.d_model = d_model
        self.n_queries = n_queries
        self.prompt_tokens = tuple(int(t) for t in prompt_tokens)
        self.n_heads = n_heads
        self.ffn_mult = ffn_mult
        self.query_init = query_init
        dtype = dtype or ad.get_default_dtype()
        rng = np.random.default_rng(seed)
        self.bank: QueryBank | None = None
        self.head: dict[str, Tensor] = {}
        if self.variant.uses_bank:
            self.bank = QueryBank(n_queries, d_model, shared=self.variant is not ReadoutVariant.SEPARATE_QUERIES,
                                  init=query_init, rng=rng, dtype=dtype)
        elif self.variant is ReadoutVariant.LINEAR_HEAD:
            self.head["w"] = Tensor(np.eye(d_model), requires_grad=True, dtype=dtype, name="head.w")
        elif self.variant is ReadoutVariant.TF_BLOCK_HEAD:
            block = init_block(rng, d_model, ffn_mult, 1, dtype, zero_out=True)
            self.head = {k: Tensor(v, requires_grad=True, dtype=dtype, name=f"head.{k}") for k, v in block.items()}

    def parameters(self) -> list[Tensor]:
        params = self.bank.parameters() if self.bank is not None else []
        return params + list(self.head.values())

    def n_trainable(self) -> int:
        return sum(p.size for p in self.parameters())

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    # ------------------------------------------------------------ encoding

    def embed_batch(self, backbone: FrozenBackbone, modality: Modality, contents: Sequence) -> Tensor:
        """(B, D) unit embeddings for a batch of same-modality contents."""
        modality = Modality(modality)
        if self.variant is not ReadoutVariant.LAST_TOKEN and not backbone.frozen:
            raise StateError("readouts with trainable parameters need a frozen backbone")
        rows, valid = content_batch(backbone, modality, contents, self.prompt_tokens)
        return self._readout(backbone, modality, Tensor(rows), valid)

    def _readout(self, backbone: FrozenBackbone, modality: Modality, content: Tensor, valid: np.ndarray) -> Tensor:
        b, length, d = content.shape
        v = self.variant
        max_len = backbone.config.max_seq_len
        if v.uses_bank:
            n = self.bank.n_queries
            if length + n > max_len:
                raise InputError(f"{length} content rows + {n} queries exceed max_seq_len={max_len}")
            q = ad.broadcast_to(self.bank.for_modality(modality), (b, n, d))
            ones = np.ones((b, n), dtype=bool)
            if v is ReadoutVariant.PROMPT_PREPEND:
                x = ad.concat([q, content], axis=1)
                hidden = backbone.forward_batch(x, np.concatenate([ones, valid], axis=1))
                return ad.l2_normalize(ad.index(hidden, (slice(None), -1)))
            x = ad.concat([content, q], axis=1)
            hidden = backbone.forward_batch(x, np.concatenate([valid, ones], axis=1))
            return pool_and_normalize(extract_query_states(hidden, n), self.pooling)
        hidden = backbone.forward_batch(content, valid)
        if v is ReadoutVariant.TF_BLOCK_HEAD:
            out = transformer_block(hidden, self.head, attention_allowed(valid), self.n_heads)
            return ad.l2_normalize(ad.index(out, (slice(None), -1)))
        last = ad.index(hidden, (slice(None), -1))
        if v is ReadoutVariant.LINEAR_HEAD:
            last = ad.matmul(last, self.head["w"])
        return ad.l2_normalize(last)

    def encode_sequence(self, content: TokenSequence, backbone: FrozenBackbone) -> Tensor:
        """Unit D-vector for one already-embedded sequence."""
        if self.variant is not ReadoutVariant.LAST_TOKEN and not backbone.frozen:
            raise StateError("readouts with trainable parameters need a frozen backbone")
        rows = content.embeddings
        if self.prompt_tokens:
            prefix = Tensor(backbone.params["tok_emb"].data[list(self.prompt_tokens)])
            rows = ad.concat_along_sequence([prefix, rows])
        x = ad.reshape(rows, (1, rows.shape[0], self.d_model))
        z = self._readout(backbone, content.modality, x, np.ones((1, rows.shape[0]), dtype=bool))
        return ad.reshape(z, (self.d_model,))

    # ------------------------------------------------------------ persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            raise InputError(f"adapter tensors {sorted(state)} do not match readout {sorted(params)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise InputError(f"shape mismatch for {name}")
            p.data[...] = state[name]

    def describe(self) -> dict:
        return {"variant": self.variant.value, "pooling": self.pooling.value, "n_queries": self.n_queries,
                "d_model": self.d_model, "query_init": self.query_init, "prompt_tokens": list(self.prompt_tokens),
                "n_heads": self.n_heads, "ffn_mult": self.ffn_mult}


def encode(content: TokenSequence, backbone: FrozenBackbone, readout: Readout, sample_id=None) -> EmbeddingRecord:
    """Embed one sequence with ``readout`` and wrap it as a record."""
    z = readout.encode_sequence(content, backbone)
    return EmbeddingRecord(sample_id, content.modality, z.data.copy())


def embed_dataset(backbone: FrozenBackbone, readout: Readout, pairs, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Image and text embeddings (each N x D, row i = pair i) without recording a tape."""
    zi, zt = [], []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        zi.append(readout.embed_batch(backbone, Modality.IMAGE, [p.image for p in chunk]).data)
        zt.append(readout.embed_batch(backbone, Modality.TEXT, [p.caption.tokens for p in chunk]).data)
    return np.concatenate(zi), np.concatenate(zt)


def dump_embeddings(records: Sequence[EmbeddingRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
