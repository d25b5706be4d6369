"""Retrieval recall, embedding-space geometry, PCA, and report serialization."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError

DEFAULT_KS = (1, 5, 10)


class Direction(str, Enum):
    I2T = "i2t"
    T2I = "t2i"


@dataclass
class EmbeddingSet:
    """Image and text populations with row i of each describing the same pair."""

    image: np.ndarray
    text: np.ndarray
    ids: list = field(default_factory=list)
    split: str = "eval"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        if self.image.ndim != 2 or self.text.ndim != 2:
            raise InputError("embedding populations must be 2-d")
        if self.image.shape[1] != self.text.shape[1]:
            raise InputError("image and text widths differ")
        if not self.ids:
            self.ids = list(range(len(self.image)))
        if len(set(self.ids)) != len(self.ids):
            raise InputError("ids must be unique")
        for name, z in (("image", self.image), ("text", self.text)):
            if len(z) and np.abs(np.linalg.norm(z, axis=1) - 1).max() > 1e-6:
                raise InputError(f"{name} embeddings are not unit-norm")

    @property
    def paired(self) -> int:
        return min(len(self.image), len(self.text), len(self.ids))


def _alignment_array(alignment, n_queries: int, n_gallery: int) -> np.ndarray:
    if alignment is None:
        alignment = np.arange(n_queries)
    if isinstance(alignment, Mapping):
        missing = [i for i in range(n_queries) if i not in alignment]
        if missing:
            raise InputError(f"query {missing[0]} has no aligned gallery item")
        alignment = [alignment[i] for i in range(n_queries)]
    target = np.asarray(alignment)
    if target.shape != (n_queries,):
        raise InputError("alignment map must cover every query")
    if (target < 0).any() or (target >= n_gallery).any():
        raise InputError("query has no aligned gallery item")
    return target.astype(np.int64)


def ranks(queries, gallery, alignment=None) -> np.ndarray:
    """0-based rank of each query's aligned item; ties go to the lower gallery index."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if len(g) == 0:
        raise InputError("gallery is empty")
    target = _alignment_array(alignment, len(q), len(g))
    return ranks_from_scores(q @ g.T, target)


def ranks_from_scores(scores: np.ndarray, target: np.ndarray) -> np.ndarray:
    pos = scores[np.arange(len(scores)), target][:, None]
    better = scores > pos
    tied_before = (scores == pos) & (np.arange(scores.shape[1])[None, :] < target[:, None])
    return (better | tied_before).sum(axis=1)


def recall_at_k(queries, gallery, alignment=None, k: int = 1) -> float:
    """Fraction of queries whose aligned gallery item lands in the top ``k`` by cosine."""
    if k < 1:
        raise InputError("k must be >= 1")
    r = ranks(queries, gallery, alignment)
    return float(np.mean(r < k)) if len(r) else 0.0


@dataclass
class RetrievalReport:
    direction: Direction
    recall: dict[int, float]
    n_queries: int
    n_gallery: int

    def __post_init__(self):
        vals = [self.recall[k] for k in sorted(self.recall)]
        if any(not 0 <= v <= 1 for v in vals) or any(a > b for a, b in zip(vals, vals[1:])):
            raise InputError("recall values must be in [0, 1] and non-decreasing in k")

    @property
    def mean_recall(self) -> float:
        return float(np.mean(list(self.recall.values())))


def retrieval_reports(emb: EmbeddingSet, ks: Sequence[int] = DEFAULT_KS) -> list[RetrievalReport]:
    """I2T and T2I reports over the paired rows of ``emb``."""
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise InputError("k list must be non-empty and positive")
    out = []
    for direction, q, g in ((Direction.I2T, emb.image, emb.text), (Direction.T2I, emb.text, emb.image)):
        r = ranks(q, g)
        out.append(RetrievalReport(direction, {k: float(np.mean(r < k)) for k in ks}, len(q), len(g)))
    return out


def mean_recall(reports: Sequence[RetrievalReport]) -> float:
    return float(np.mean([r.mean_recall for r in reports]))


def top1_margins(queries, gallery) -> np.ndarray:
    """Per-query gap between the best and second-best gallery similarity."""
    s = np.asarray(queries, dtype=np.float64) @ np.asarray(gallery, dtype=np.float64).T
    if s.shape[1] < 2:
        raise InputError("margins need at least two gallery items")
    top = np.sort(s, axis=1)[:, ::-1]
    return top[:, 0] - top[:, 1]


# ---------------------------------------------------------------- geometry

def modality_gap(emb: EmbeddingSet) -> float:
    if len(emb.image) == 0 or len(emb.text) == 0:
        raise InputError("both modalities need at least one embedding")
    return float(np.linalg.norm(emb.image.mean(axis=0) - emb.text.mean(axis=0)))


def alignment_metric(emb: EmbeddingSet, alpha: float = 2.0) -> float:
    """Mean of ||z_I - z_T||^alpha over positive pairs."""
    n = emb.paired
    if n == 0:
        raise InputError("alignment needs at least one positive pair")
    d = np.linalg.norm(emb.image[:n] - emb.text[:n], axis=1)
    return float(np.mean(d ** alpha))


def uniformity_metric(vectors, t: float = 2.0) -> float:
    """log mean exp(-t ||z_i - z_j||^2) over distinct ordered pairs."""
    z = np.asarray(vectors, dtype=np.float64)
    if z.ndim != 2 or len(z) < 2:
        raise InputError("uniformity needs at least two vectors")
    sq = np.sum(z * z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * z @ z.T, 0.0)
    off = ~np.eye(len(z), dtype=bool)
    vals = -t * d2[off]
    m = vals.max()
    return float(m + np.log(np.mean(np.exp(vals - m))))


def jacobi_eigh(a: np.ndarray, tol: float = 1e-13, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and column eigenvectors of a symmetric matrix by cyclic Jacobi."""
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError("jacobi_eigh needs a square matrix")
    if not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max(initial=0))):
        raise InputError("matrix is not symmetric")
    a = (a + a.T) / 2
    n = len(a)
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = math.sqrt(max(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * apq)
                t = np.sign(theta) / (abs(theta) + math.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


@dataclass
class PCAResult:
    components: np.ndarray       # dims x D, orthonormal rows
    points: np.ndarray           # n x dims
    explained_variance: np.ndarray
    mean: np.ndarray
    rank_deficient: bool = False


def _canonical_sign(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each component is positive, for reproducible plots
    idx = np.argmax(np.abs(vecs), axis=1)
    signs = np.sign(vecs[np.arange(len(vecs)), idx])
    signs[signs == 0] = 1
    return vecs * signs[:, None]


def pca_project(vectors, dims: int = 2) -> PCAResult:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < dims + 1:
        raise InputError(f"PCA to {dims} dims needs at least {dims + 1} vectors")
    if dims < 1 or dims > x.shape[1]:
        raise InputError("dims out of range")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    w, v = jacobi_eigh(cov)
    w = np.maximum(w, 0.0)
    total = w.sum()
    comps = _canonical_sign(v[:, :dims].T)
    ratio = w[:dims] / total if total > 0 else np.zeros(dims)
    deficient = bool(total <= 0 or w[dims - 1] <= 1e-12 * total)
    return PCAResult(comps, xc @ comps.T, ratio, mean, deficient)


@dataclass
class GeometryReport:
    gap: float
    alignment: float
    uniformity_image: float
    uniformity_text: float
    pca: PCAResult | None = None
    split: str = "eval"

    def __post_init__(self):
        if self.gap < 0 or self.alignment < 0:
            raise InputError("gap and alignment are non-negative")


def geometry_report(emb: EmbeddingSet, with_pca: bool = True) -> GeometryReport:
    pca = pca_project(np.concatenate([emb.image, emb.text])) if with_pca else None
    return GeometryReport(modality_gap(emb), alignment_metric(emb), uniformity_metric(emb.image),
                          uniformity_metric(emb.text), pca, emb.split)


# ---------------------------------------------------------------- writers

def _fmt(x: float) -> str:
    return f"{x:.6f}"


def retrieval_csv(reports: Sequence[RetrievalReport], split: str = "eval", label: str | None = None) -> str:
    ks = sorted(reports[0].recall)
    buf = io.StringIO()
    buf.write(f"# split={split}\n")
    w = csv.writer(buf, lineterminator="\n")
    head = (["setting"] if label is not None else []) + ["direction", "n_queries", "n_gallery"]
    w.writerow(head + [f"R@{k}" for k in ks])
    for r in reports:
        row = ([label] if label is not None else []) + [r.direction.value, r.n_queries, r.n_gallery]
        w.writerow(row + [_fmt(r.recall[k]) for k in ks])
    return buf.getvalue()


GEOMETRY_COLUMNS = ("gap", "alignment", "uniformity_image", "uniformity_text", "pc1_explained", "pc2_explained")


def geometry_csv(reports: Sequence[tuple[str, GeometryReport]], split: str = "eval") -> str:
    """One row per (stage label, report)."""
    buf = io.StringIO()
    buf.write(f"# split={split}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("stage",) + GEOMETRY_COLUMNS)
    for label, g in reports:
        ev = list(g.pca.explained_variance) if g.pca is not None else [float("nan")] * 2
        ev = (ev + [0.0, 0.0])[:2]
        w.writerow([label] + [_fmt(v) for v in (g.gap, g.alignment, g.uniformity_image, g.uniformity_text, *ev)])
    return buf.getvalue()


def pca_svg(pca: PCAResult, n_image: int, title: str = "PCA of embeddings", size: int = 480) -> str:
    """Scatter of the first two components; the first ``n_image`` points are images."""
    pts = pca.points[:, :2] if pca.points.shape[1] >= 2 else np.hstack([pca.points, np.zeros((len(pca.points), 1))])
    pad = 48
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = pad + (pts - lo) / span * (size - 2 * pad)
    xy[:, 1] = size - xy[:, 1]
    ev = list(pca.explained_variance) + [0.0, 0.0]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<text x="{size / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
           f'<text x="{size / 2:.1f}" y="{size - 12}" text-anchor="middle" font-size="12">'
           f'PC1 ({100 * ev[0]:.1f}% var)</text>',
           f'<text x="14" y="{size / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 14 {size / 2:.1f})">PC2 ({100 * ev[1]:.1f}% var)</text>']
    for i, (x, y) in enumerate(xy):
        color = "#1f77b4" if i < n_image else "#d62728"
        shape = (f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{color}" fill-opacity="0.7"/>' if i < n_image
                 else f'<rect x="{x - 2.5:.2f}" y="{y - 2.5:.2f}" width="5" height="5" fill="{color}" fill-opacity="0.7"/>')
        out.append(shape)
    lx = size - pad - 90
    out += [f'<circle cx="{lx}" cy="{pad}" r="4" fill="#1f77b4"/>',
            f'<text x="{lx + 10}" y="{pad + 4}" font-size="12">image</text>',
            f'<rect x="{lx - 4}" y="{pad + 14}" width="8" height="8" fill="#d62728"/>',
            f'<text x="{lx + 10}" y="{pad + 22}" font-size="12">text</text>',
            "</svg>"]
    return "\n".join(out) + "\n"
