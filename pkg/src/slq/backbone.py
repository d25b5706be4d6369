"""The frozen causal multimodal transformer.

Text tokens come from an embedding table, image patches from a linear
projector (the vision stub). A learned absolute position table is added
inside :meth:`FrozenBackbone.forward_batch`, so anything appended after the
content (query rows included) is positioned like an ordinary token.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape
from .errors import InputError, StateError
from .optim import AdamW, warmup_cosine_lr

SEQ_BUCKET = 8  # sequence axis is right-padded to a multiple of this outside deterministic mode


class Modality(str, Enum):
    TEXT = "text"
    IMAGE = "image"


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 256
    max_seq_len: int = 96
    patch_grid: int = 4
    patch_dim: int = 24
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise InputError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.d_model, self.n_layers, self.n_heads, self.vocab_size, self.patch_grid,
               self.patch_dim, self.ffn_mult) < 1:
            raise InputError("backbone sizes must be positive")
        if self.max_seq_len < self.patch_grid ** 2 + 32:
            raise InputError("max_seq_len must leave room for 32 query slots after an image")

    @property
    def n_patches(self) -> int:
        return self.patch_grid ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    """Content (or content + appended rows) for one sample, before positions."""

    modality: Modality
    embeddings: Tensor

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def _param_names(cfg: BackboneConfig) -> list[str]:
    names = ["tok_emb", "pos_emb", "patch_w", "patch_b"]
    for i in range(cfg.n_layers):
        names += [f"l{i}.{n}" for n in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                                        "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")]
    names += ["lnf_g", "lnf_b"]
    return names


def block_param_shapes(d: int, ffn_mult: int) -> dict[str, tuple[int, ...]]:
    h = d * ffn_mult
    return {"ln1_g": (d,), "ln1_b": (d,), "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
            "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,), "ln2_g": (d,), "ln2_b": (d,),
            "w1": (d, h), "b1": (h,), "w2": (h, d), "b2": (d,)}


def init_block(rng: np.random.Generator, d: int, ffn_mult: int, n_layers: int, dtype,
               zero_out: bool = False) -> dict[str, np.ndarray]:
    """Fresh pre-LN block weights; ``zero_out`` zeroes both residual projections."""
    shapes = block_param_shapes(d, ffn_mult)
    out = {}
    resid_std = 0.02 / math.sqrt(2 * n_layers)
    for name, shape in shapes.items():
        if name.startswith("ln") and name.endswith("_g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        elif name in ("wo", "w2"):
            arr = np.zeros(shape) if zero_out else rng.normal(0, resid_std, shape)
        else:
            arr = rng.normal(0, 0.02, shape)
        out[name] = arr.astype(dtype)
    return out


def transformer_block(x: Tensor, p: dict[str, Tensor], allowed: np.ndarray, n_heads: int,
                      eps: float = 1e-5, attn_out: list | None = None) -> Tensor:
    """Pre-LN block: x + Attn(LN(x)), then + MLP(LN(.)). ``allowed`` is (B,1,L,L)."""
    b, length, d = x.shape
    dh = d // n_heads
    h = ad.layer_norm(x, p["ln1_g"], p["ln1_b"], eps)

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, length, n_heads, dh)), (0, 2, 1, 3))

    q = heads(ad.add(ad.matmul(h, p["wq"]), p["bq"]))
    k = heads(ad.add(ad.matmul(h, p["wk"]), p["bk"]))
    v = heads(ad.add(ad.matmul(h, p["wv"]), p["bv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    probs = ad.softmax_lastdim(ad.causal_mask_fill(scores, allowed))
    if attn_out is not None:
        attn_out.append(probs.data)
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, length, d))
    x = ad.add(x, ad.add(ad.matmul(ctx, p["wo"]), p["bo"]))
    h = ad.layer_norm(x, p["ln2_g"], p["ln2_b"], eps)
    h = ad.gelu(ad.add(ad.matmul(h, p["w1"]), p["b1"]))
    return ad.add(x, ad.add(ad.matmul(h, p["w2"]), p["b2"]))


def attention_allowed(valid: np.ndarray) -> np.ndarray:
    """(B,L) validity -> (B,1,L,L) mask: causal, valid keys only, diagonal always on."""
    length = valid.shape[1]
    causal = np.tril(np.ones((length, length), dtype=bool))
    allowed = causal[None] & valid[:, None, :]
    allowed |= np.eye(length, dtype=bool)[None]
    return allowed[:, None]


def positions_from_valid(valid: np.ndarray) -> np.ndarray:
    """Position id of each row: the count of valid rows before it (pads get 0)."""
    return np.maximum(np.cumsum(valid, axis=1) - 1, 0) * valid


class FrozenBackbone:
    """Causal decoder transformer plus a linear patch projector.

    Parameters live in ``self.params`` (name -> Tensor). After
    :meth:`freeze` every parameter is immutable from the package's point of
    view and :meth:`verify_frozen` compares against the stored checksum.
    """

    def __init__(self, config: BackboneConfig | None = None, seed: int = 0, dtype=None,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config or BackboneConfig()
        dtype = np.dtype(dtype or ad.get_default_dtype()).type
        self.dtype = dtype
        self.deterministic = False
        self._checksum: str | None = None
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        missing = set(_param_names(self.config)) - set(params)
        if missing:
            raise InputError(f"missing backbone parameters: {sorted(missing)}")
        self.params: dict[str, Tensor] = {
            name: Tensor(np.array(params[name], dtype=dtype), requires_grad=True, name=name)
            for name in _param_names(self.config)
        }
        self._layers = [
            {k: self.params[f"l{i}.{k}"] for k in block_param_shapes(self.config.d_model, self.config.ffn_mult)}
            for i in range(self.config.n_layers)
        ]

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        p = {
            "tok_emb": rng.normal(0, 0.02, (c.vocab_size, c.d_model)),
            "pos_emb": rng.normal(0, 0.02, (c.max_seq_len, c.d_model)),
            "patch_w": rng.normal(0, 0.02, (c.patch_dim, c.d_model)),
            "patch_b": np.zeros(c.d_model),
            "lnf_g": np.ones(c.d_model),
            "lnf_b": np.zeros(c.d_model),
        }
        for i in range(c.n_layers):
            for k, v in init_block(rng, c.d_model, c.ffn_mult, c.n_layers, self.dtype).items():
                p[f"l{i}.{k}"] = v
        return {k: np.asarray(v, dtype=self.dtype) for k, v in p.items()}

    # ------------------------------------------------------------ state

    @property
    def frozen(self) -> bool:
        return self._checksum is not None

    def freeze(self) -> None:
        """Make every parameter non-trainable and record the content checksum."""
        for t in self.params.values():
            t.requires_grad = False
        if self._checksum is None:
            self._checksum = self.checksum()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in _param_names(self.config):
            arr = np.ascontiguousarray(self.params[name].data)
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    @property
    def recorded_checksum(self) -> str | None:
        return self._checksum

    def verify_frozen(self) -> bool:
        return self.frozen and self.checksum() == self._checksum

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in _param_names(self.config)]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: self.params[n].data for n in _param_names(self.config)}

    # ------------------------------------------------------------ embeddings

    def embed_text(self, tokens: Sequence[int]) -> TokenSequence:
        ids = self._check_tokens(tokens)
        rows = self.params["tok_emb"].data[ids]
        return TokenSequence(Modality.TEXT, Tensor(rows, dtype=self.dtype))

    def _check_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        ids = np.asarray(list(tokens), dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise InputError("token sequence must be a nonempty 1-d list")
        if ids.size > self.config.max_seq_len:
            raise InputError(f"{ids.size} tokens exceed max_seq_len={self.config.max_seq_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise InputError(f"token id out of vocabulary [0, {self.config.vocab_size})")
        return ids

    def patch_features(self, image) -> np.ndarray:
        """Coerce an image (object with ``features()`` or array) to (patches, patch_dim)."""
        feats = image.features() if hasattr(image, "features") else np.asarray(image)
        c = self.config
        feats = np.asarray(feats, dtype=self.dtype)
        if feats.shape == (c.patch_grid, c.patch_grid, c.patch_dim):
            feats = feats.reshape(c.n_patches, c.patch_dim)
        if feats.shape != (c.n_patches, c.patch_dim):
            raise InputError(f"image features {feats.shape} do not match a {c.patch_grid}x{c.patch_grid} grid "
                             f"of {c.patch_dim}-d patches")
        return feats

    def project_patches(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.params["patch_w"].data + self.params["patch_b"].data

    def embed_image(self, image) -> TokenSequence:
        rows = self.project_patches(self.patch_features(image))
        return TokenSequence(Modality.IMAGE, Tensor(rows, dtype=self.dtype))

    # ------------------------------------------------------------ forward

    def forward_hidden(self, seq: TokenSequence, attn_out: list | None = None) -> Tensor:
        """Final-layer hidden states (L x D) after the final layer norm."""
        if seq.length > self.config.max_seq_len:
            raise InputError(f"sequence length {seq.length} exceeds max_seq_len={self.config.max_seq_len}")
        x = ad.reshape(seq.embeddings, (1, seq.length, self.config.d_model))
        hidden = self.forward_batch(x, None, attn_out=attn_out)
        return ad.reshape(hidden, (seq.length, self.config.d_model))

    def forward_batch(self, x: Tensor, valid: np.ndarray | None, attn_out: list | None = None) -> Tensor:
        """Run (B, L, D) input rows through every block.

        ``valid`` marks real rows (pads are excluded as attention keys and get
        position 0); ``None`` means all rows are real. The sequence axis is
        right-padded with invalid rows: to ``max_seq_len`` in deterministic
        mode, so every call runs identical kernel shapes and prefixes are
        bit-exact, and otherwise to a multiple of ``SEQ_BUCKET``.
        """
        c = self.config
        b, length, d = x.shape
        if length > c.max_seq_len:
            raise InputError(f"sequence length {length} exceeds max_seq_len={c.max_seq_len}")
        if valid is None:
            valid = np.ones((b, length), dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        if self.deterministic:
            full = c.max_seq_len
        else:
            # BLAS results for a row can depend on the row count; aligned buckets keep prefixes stable
            full = min(-(-length // SEQ_BUCKET) * SEQ_BUCKET, c.max_seq_len)
        if full != length:
            x = ad.concat([x, Tensor(np.zeros((b, full - length, d), dtype=x.dtype))], axis=1)
            valid = np.concatenate([valid, np.zeros((b, full - length), dtype=bool)], axis=1)
        pos = ad.embedding_lookup(self.params["pos_emb"], positions_from_valid(valid))
        h = ad.add(x, pos)
        allowed = attention_allowed(valid)
        for layer in self._layers:
            h = transformer_block(h, layer, allowed, c.n_heads, c.ln_eps, attn_out)
        h = ad.layer_norm(h, self.params["lnf_g"], self.params["lnf_b"], c.ln_eps)
        if full != length:
            h = ad.index(h, (slice(None), slice(0, length)))
        return h

    def logits(self, hidden: Tensor) -> Tensor:
        """Next-token logits from hidden states (LM head tied to the token table)."""
        return ad.matmul(hidden, ad.transpose(self.params["tok_emb"], (1, 0)))

    # ------------------------------------------------------------ pretraining

    def lm_loss(self, batch: Sequence[tuple[np.ndarray | None, Sequence[int]]]) -> Tensor:
        """Next-token cross-entropy over caption tokens.

        Each item is ``(patch_features or None, caption_tokens)``. With an image
        the sequence is ``[patches; caption]`` and every caption token is
        scored (the first from the last patch); text-only items score tokens
        after the first.
        """
        c = self.config
        if not batch:
            raise InputError("empty pretraining batch")
        lengths = []
        for feats, toks in batch:
            n_img = c.n_patches if feats is not None else 0
            lengths.append(n_img + len(toks))
        length = max(lengths)
        if length > c.max_seq_len:
            raise InputError("pretraining sequence exceeds max_seq_len")
        b = len(batch)
        tok_grid = np.zeros((b, length), dtype=np.int64)
        img_rows = np.zeros((b, length), dtype=bool)
        patches = np.zeros((b, c.n_patches, c.patch_dim), dtype=self.dtype)
        valid = np.zeros((b, length), dtype=bool)
        targets = np.full((b, length), -1, dtype=np.int64)
        for i, (feats, toks) in enumerate(batch):
            toks = self._check_tokens(toks)
            start = 0
            if feats is not None:
                patches[i] = self.patch_features(feats)
                img_rows[i, :c.n_patches] = True
                start = c.n_patches
            tok_grid[i, start:start + len(toks)] = toks
            valid[i, :start + len(toks)] = True
            first = start - 1 if feats is not None else start
            for j in range(max(first, 0), start + len(toks) - 1):
                targets[i, j] = tok_grid[i, j + 1]
        tok = ad.embedding_lookup(self.params["tok_emb"], tok_grid)
        img = ad.add(ad.matmul(Tensor(patches), self.params["patch_w"]), self.params["patch_b"])
        if length > c.n_patches:
            pad = Tensor(np.zeros((b, length - c.n_patches, c.d_model), dtype=self.dtype))
            img = ad.concat([img, pad], axis=1)
        else:
            img = ad.index(img, (slice(None), slice(0, length)))
        m = img_rows[..., None].astype(self.dtype)
        x = ad.add(ad.mul(tok, 1 - m), ad.mul(img, m))
        hidden = self.forward_batch(x, valid)
        return ad.cross_entropy(self.logits(hidden), targets)

    def pretrain_step(self, batch, optimizer: AdamW, lr: float | None = None) -> float:
        """One AdamW step of next-token training on all backbone parameters."""
        if self.frozen:
            raise StateError("pretrain_step called on a frozen backbone")
        with Tape() as tape:
            loss = self.lm_loss(batch)
        tape.backward(loss)
        optimizer.step(lr)
        return float(loss.data)

    def make_optimizer(self, lr: float = 3e-3, weight_decay: float = 0.01) -> AdamW:
        params = self.parameters()
        decay = [weight_decay if p.data.ndim == 2 and p.name != "pos_emb" else 0.0 for p in params]
        return AdamW(params, lr=lr, weight_decay=decay)


def pretrain(backbone: FrozenBackbone, batches, total_steps: int, peak_lr: float = 3e-3,
             warmup_ratio: float = 0.03, weight_decay: float = 0.01, log=None) -> list[float]:
    """Run ``total_steps`` pretraining steps drawing from the ``batches`` iterator."""
    opt = backbone.make_optimizer(peak_lr, weight_decay)
    losses = []
    for step in range(total_steps):
        lr = warmup_cosine_lr(step, total_steps, peak_lr, warmup_ratio)
        loss = backbone.pretrain_step(next(batches), opt, lr)
        losses.append(loss)
        if log is not None:
            log(step, loss, lr)
    return losses
