"""Symmetric InfoNCE with a learnable temperature, and the adaptation loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape
from .backbone import FrozenBackbone, Modality
from .core import Readout
from .errors import ContractError, InputError, NumericError, StateError
from .optim import AdamW, warmup_cosine_lr
from .synthdata import PairedDataset, substream

TAU_MIN = 1e-3
TAU_MAX = 1.0
TAU_INIT = 0.07


class Temperature:
    """Softmax temperature stored as log(tau); tau is kept inside [1e-3, 1]."""

    def __init__(self, tau: float = TAU_INIT, dtype=None):
        if not TAU_MIN <= tau <= TAU_MAX:
            raise InputError(f"initial tau {tau} outside [{TAU_MIN}, {TAU_MAX}]")
        self.raw = Tensor(np.log(tau), requires_grad=True, dtype=dtype or ad.get_default_dtype(),
                          name="log_tau")

    @property
    def tau(self) -> float:
        return float(np.exp(self.raw.data))

    def inverse(self) -> Tensor:
        """1 / tau as a differentiable scalar."""
        return ad.exp(ad.scale(self.raw, -1.0))

    def clamp(self) -> None:
        self.raw.data[...] = np.clip(self.raw.data, math.log(TAU_MIN), math.log(TAU_MAX))


@dataclass
class PairBatch:
    ids: list
    images: list
    texts: list

    def __post_init__(self):
        if not (len(self.ids) == len(self.images) == len(self.texts)):
            raise InputError("batch fields differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("ids must be unique within a batch")
        if not self.ids:
            raise InputError("empty batch")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class TrainerConfig:
    learning_rate: float = 5e-4
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    total_steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None
    init_tau: float = TAU_INIT

    def __post_init__(self):
        if not 0 <= self.warmup_ratio < 1:
            raise InputError("warmup_ratio must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be positive")
        if self.schedule != "cosine":
            raise InputError(f"unsupported schedule {self.schedule!r}")
        if self.total_steps < 0 or self.batch_size < 1:
            raise InputError("total_steps must be >= 0 and batch_size >= 1")
        self.betas = tuple(self.betas)

    def lr_at(self, step: int) -> float:
        return warmup_cosine_lr(step, self.total_steps, self.learning_rate, self.warmup_ratio)


def _as_unit_rows(z, name: str) -> Tensor:
    z = ad.as_tensor(z)
    if z.data.ndim != 2:
        raise ContractError(f"{name} must be a 2-d matrix")
    norms = np.linalg.norm(z.data.astype(np.float64), axis=1)
    if np.abs(norms - 1).max(initial=0) > 1e-4:
        raise ContractError(f"{name} rows are not unit-norm (max deviation {np.abs(norms - 1).max():.2e})")
    return z


def similarity_matrix(z_image, z_text) -> Tensor:
    """Cosine similarities: entry (i, j) = <z_image_i, z_text_j>."""
    zi = _as_unit_rows(z_image, "z_image")
    zt = _as_unit_rows(z_text, "z_text")
    if zi.shape[1] != zt.shape[1]:
        raise ContractError("embedding widths differ")
    return ad.matmul(zi, ad.transpose(zt))


def _logits(s, tau) -> Tensor:
    s = ad.as_tensor(s)
    if not np.isfinite(s.data).all():
        raise NumericError("similarity matrix contains non-finite values")
    if s.data.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError("similarity matrix must be square")
    if isinstance(tau, Temperature):
        return ad.mul(s, tau.inverse())
    if isinstance(tau, Tensor):
        if not (tau.data > 0).all():
            raise InputError("tau must be positive")
        return ad.mul(s, ad.exp(ad.scale(_log(tau), -1.0)))
    if not tau > 0:
        raise InputError("tau must be positive")
    return ad.scale(s, 1.0 / tau)


def _log(t: Tensor) -> Tensor:
    out = np.log(t.data)
    return ad._result(out, (t,), lambda g: (g / t.data,))


def info_nce_i2t(s, tau) -> Tensor:
    """Image-to-text InfoNCE: rows of S are softmaxed, the diagonal is the target."""
    logits = _logits(s, tau)
    return ad.cross_entropy(logits, np.arange(logits.shape[0]))


def info_nce_t2i(s, tau) -> Tensor:
    """Text-to-image InfoNCE: columns of S are softmaxed."""
    logits = _logits(s, tau)
    return ad.cross_entropy(ad.transpose(logits), np.arange(logits.shape[0]))


def symmetric_loss(s, tau) -> Tensor:
    """Mean of the two directional InfoNCE losses."""
    return ad.scale(ad.add(info_nce_i2t(s, tau), info_nce_t2i(s, tau)), 0.5)


@dataclass
class StepReport:
    step: int
    loss: float
    tau: float
    lr: float
    grad_norms: dict[str, float] = field(default_factory=dict)

    @property
    def grad_norm(self) -> float:
        return self.grad_norms.get("total", 0.0)

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "loss": self.loss, "tau": self.tau, "lr": self.lr,
                           "grad_norm": self.grad_norm})


class Trainer:
    """Owns the readout parameters, temperature and AdamW state for one adaptation run."""

    def __init__(self, backbone: FrozenBackbone, readout: Readout, config: TrainerConfig | None = None):
        self.backbone = backbone
        self.readout = readout
        self.config = config or TrainerConfig()
        self.temperature = Temperature(self.config.init_tau, dtype=backbone.dtype)
        self.params = readout.parameters() + [self.temperature.raw]
        self.optimizer = AdamW(self.params, lr=self.config.learning_rate, betas=self.config.betas,
                               eps=self.config.eps,
                               weight_decay=[self.config.weight_decay if p.name.startswith("head.") else 0.0
                                             for p in self.params])
        self.step_count = 0

    def trainable_census(self) -> int:
        return sum(p.size for p in self.params)

    def loss(self, batch: PairBatch) -> Tensor:
        zi = self.readout.embed_batch(self.backbone, Modality.IMAGE, batch.images)
        zt = self.readout.embed_batch(self.backbone, Modality.TEXT, batch.texts)
        return symmetric_loss(similarity_matrix(zi, zt), self.temperature)

    def train_step(self, batch: PairBatch) -> StepReport:
        if not self.backbone.frozen:
            raise StateError("train_step needs a frozen backbone")
        lr = self.config.lr_at(self.step_count)
        with Tape() as tape:
            loss = self.loss(batch)
        tape.backward(loss)
        norms = {p.name: float(np.linalg.norm(p.grad.astype(np.float64))) for p in self.params}
        norms["total"] = math.sqrt(sum(v * v for v in norms.values()))
        if self.config.grad_clip:
            self.optimizer.clip_grad_norm(self.config.grad_clip)
        self.optimizer.step(lr)
        self.temperature.clamp()
        report = StepReport(self.step_count, float(loss.data), self.temperature.tau, lr, norms)
        self.step_count += 1
        return report

    def fit(self, dataset: PairedDataset, steps: int | None = None,
            log: Callable[[StepReport], None] | None = None) -> list[StepReport]:
        steps = self.config.total_steps if steps is None else steps
        reports = []
        for batch in iterate_batches(dataset, self.config.batch_size, self.config.seed, steps):
            rep = self.train_step(batch)
            reports.append(rep)
            if log is not None:
                log(rep)
        return reports


def iterate_batches(dataset: PairedDataset, batch_size: int, seed: int, steps: int):
    """``steps`` batches drawn epoch by epoch without replacement."""
    pairs = dataset.pairs
    if len(pairs) < 2:
        raise InputError("training needs at least two pairs")
    batch_size = min(batch_size, len(pairs))
    rng = substream(seed, "adapt-batches")
    feats = {}
    order: list[int] = []
    for _ in range(steps):
        if len(order) < batch_size:
            order = list(rng.permutation(len(pairs)))
        idx, order = order[:batch_size], order[batch_size:]
        chosen = [pairs[i] for i in idx]
        for p in chosen:
            if p.id not in feats:
                feats[p.id] = p.image.features()
        yield PairBatch([p.id for p in chosen], [feats[p.id] for p in chosen], [p.caption.tokens for p in chosen])
