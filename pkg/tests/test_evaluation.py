import csv
import io
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slq.errors import InputError
from slq.evaluation import (GEOMETRY_COLUMNS, Direction, EmbeddingSet, RetrievalReport, alignment_metric,
                            geometry_csv, geometry_report, jacobi_eigh, mean_recall, modality_gap, pca_project,
                            pca_svg, ranks, recall_at_k, retrieval_csv, retrieval_reports, top1_margins,
                            uniformity_metric)


def unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_recall(q, g, k):
    """Per-query loop: count strictly better items plus ties that come earlier."""
    hits = 0
    for i in range(len(q)):
        sims = [float(np.dot(q[i], g[j])) for j in range(len(g))]
        rank = sum(1 for j, s in enumerate(sims) if s > sims[i] or (s == sims[i] and j < i))
        hits += rank < k
    return hits / len(q)


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class TestRecall:
    def test_identity_alignment(self):
        z = np.eye(3)
        assert recall_at_k(z, z, k=1) == 1.0

    def test_swapped_gallery(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        g = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert recall_at_k(q, g, k=1) == 0.0
        assert recall_at_k(q, g, k=2) == 1.0

    def test_alignment_map(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        g = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert recall_at_k(q, g, {0: 1, 1: 0}, k=1) == 1.0
        with pytest.raises(InputError):
            recall_at_k(q, g, {0: 1}, k=1)

    def test_ties_go_to_lower_index(self):
        q = np.array([[1.0, 0.0], [1.0, 0.0]])
        g = np.array([[1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(ranks(q, g), [0, 1])

    def test_brute_force_oracle(self, rng):
        q = unit_rows(rng.normal(size=(16, 6)))
        g = unit_rows(q + 0.8 * rng.normal(size=q.shape))
        for k in (1, 2, 5, 10, 16):
            assert recall_at_k(q, g, k=k) == pytest.approx(brute_recall(q, g, k))

    def test_invalid_k_and_gallery(self):
        with pytest.raises(InputError):
            recall_at_k(np.eye(2), np.eye(2), k=0)
        with pytest.raises(InputError):
            recall_at_k(np.eye(2), np.zeros((0, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(2, 12), st.floats(0.1, 5))
    def test_invariant_under_monotone_rescaling(self, seed, n, scale):
        r = np.random.default_rng(seed)
        q, g = unit_rows(r.normal(size=(n, 4))), unit_rows(r.normal(size=(n, 4)))
        for k in (1, 3):
            assert recall_at_k(scale * q, g, k=k) == recall_at_k(q, g, k=k)

    def test_orthogonal_invariance(self, rng):
        q = unit_rows(rng.normal(size=(20, 8)))
        g = unit_rows(q + rng.normal(size=q.shape))
        o = random_orthogonal(rng, 8)
        np.testing.assert_array_equal(ranks(q @ o, g @ o), ranks(q, g))

    def test_reports(self, rng):
        z = unit_rows(rng.normal(size=(12, 5)))
        emb = EmbeddingSet(z, unit_rows(z + 0.3 * rng.normal(size=z.shape)))
        reps = retrieval_reports(emb, (10, 1, 5))
        assert [r.direction for r in reps] == [Direction.I2T, Direction.T2I]
        assert list(reps[0].recall) == [1, 5, 10]
        assert reps[1].recall[1] == recall_at_k(emb.text, emb.image, k=1)
        assert mean_recall(reps) == pytest.approx(np.mean([v for r in reps for v in r.recall.values()]))

    def test_report_validation(self):
        with pytest.raises(InputError):
            RetrievalReport(Direction.I2T, {1: 0.5, 5: 0.4}, 10, 10)
        with pytest.raises(InputError):
            RetrievalReport(Direction.I2T, {1: 1.5}, 10, 10)

    def test_margins(self):
        q = np.array([[1.0, 0.0]])
        g = unit_rows([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
        np.testing.assert_allclose(top1_margins(q, g), [0.4])


class TestEmbeddingSet:
    def test_rejects_unnormalized(self):
        with pytest.raises(InputError):
            EmbeddingSet(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]))

    def test_rejects_duplicate_ids(self):
        with pytest.raises(InputError):
            EmbeddingSet(np.eye(2), np.eye(2), ids=[3, 3])


class TestGeometry:
    def test_gap_of_orthogonal_populations(self):
        emb = EmbeddingSet([[1.0, 0.0]], [[0.0, 1.0]])
        assert modality_gap(emb) == pytest.approx(math.sqrt(2))

    def test_alignment_of_antipodal_pair(self):
        emb = EmbeddingSet([[1.0, 0.0]], [[-1.0, 0.0]])
        assert alignment_metric(emb) == pytest.approx(4.0)

    def test_uniformity_of_antipodal_pair(self):
        assert uniformity_metric([[1.0, 0.0], [-1.0, 0.0]]) == pytest.approx(-8.0)

    def test_identical_points_have_zero_uniformity(self):
        assert uniformity_metric([[0.6, 0.8]] * 5) == pytest.approx(0.0)

    def test_spread_beats_cluster(self):
        angles = 2 * np.pi * np.arange(8) / 8
        spread = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        cluster = unit_rows(np.stack([np.ones(8), 0.1 * np.arange(8)], axis=1))
        assert uniformity_metric(spread) < uniformity_metric(cluster)

    def test_uniformity_brute_force(self, rng):
        z = unit_rows(rng.normal(size=(9, 4)))
        vals = [math.exp(-2 * np.sum((z[i] - z[j]) ** 2)) for i in range(9) for j in range(9) if i != j]
        assert uniformity_metric(z) == pytest.approx(math.log(np.mean(vals)), rel=1e-12)

    def test_rotation_invariance(self, rng):
        zi = unit_rows(rng.normal(size=(10, 6)))
        zt = unit_rows(zi + rng.normal(size=zi.shape))
        o = random_orthogonal(rng, 6)
        a, b = geometry_report(EmbeddingSet(zi, zt), False), geometry_report(EmbeddingSet(zi @ o, zt @ o), False)
        for name in ("gap", "alignment", "uniformity_image", "uniformity_text"):
            assert getattr(a, name) == pytest.approx(getattr(b, name), rel=1e-9, abs=1e-12)

    def test_empty_inputs(self):
        with pytest.raises(InputError):
            uniformity_metric([[1.0, 0.0]])
        with pytest.raises(InputError):
            modality_gap(EmbeddingSet(np.zeros((0, 2)), np.zeros((0, 2))))


class TestPCA:
    def test_jacobi_against_eigh(self, rng):
        a = rng.normal(size=(12, 12))
        a = a + a.T
        w, v = jacobi_eigh(a)
        ref = np.linalg.eigh(a)[0][::-1]
        np.testing.assert_allclose(w, ref, atol=1e-10)
        np.testing.assert_allclose(a @ v, v * w, atol=1e-10)
        np.testing.assert_allclose(v.T @ v, np.eye(12), atol=1e-10)

    def test_components_match_eigh_up_to_sign(self, rng):
        x = rng.normal(size=(10, 4)) * [3.0, 2.0, 1.0, 0.5]
        res = pca_project(x, dims=2)
        xc = x - x.mean(axis=0)
        w, v = np.linalg.eigh(xc.T @ xc / 9)
        for k in range(2):
            ref = v[:, -1 - k]
            assert min(np.abs(res.components[k] - ref).max(), np.abs(res.components[k] + ref).max()) < 1e-6
        np.testing.assert_allclose(res.explained_variance, w[::-1][:2] / w.sum(), atol=1e-9)

    def test_rank_one(self):
        x = np.outer(np.arange(5.0), [1.0, 2.0, 2.0]) / 3
        res = pca_project(x, dims=2)
        assert res.rank_deficient
        assert res.explained_variance[0] == pytest.approx(1.0)
        np.testing.assert_allclose(np.abs(res.components[0]), [1 / 3, 2 / 3, 2 / 3], atol=1e-9)

    def test_two_dimensional_data_is_an_isometry(self, rng):
        x = rng.normal(size=(15, 2))
        res = pca_project(x, dims=2)
        d_in = np.linalg.norm(x[:, None] - x[None], axis=-1)
        d_out = np.linalg.norm(res.points[:, None] - res.points[None], axis=-1)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)

    def test_canonical_sign_is_reproducible(self, rng):
        x = rng.normal(size=(8, 3))
        a, b = pca_project(x), pca_project(-x)
        for k in range(2):
            c = a.components[k]
            assert c[np.argmax(np.abs(c))] > 0
        np.testing.assert_allclose(a.components, b.components, atol=1e-9)

    def test_too_few_points(self):
        with pytest.raises(InputError):
            pca_project(np.eye(2), dims=2)


class TestWriters:
    def make_emb(self, rng, n=10):
        z = unit_rows(rng.normal(size=(n, 6)))
        return EmbeddingSet(z, unit_rows(z + 0.5 * rng.normal(size=z.shape)))

    def test_retrieval_csv(self, rng):
        text = retrieval_csv(retrieval_reports(self.make_emb(rng)), split="eval")
        lines = text.splitlines()
        assert lines[0] == "# split=eval"
        rows = list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))
        assert [r["direction"] for r in rows] == ["i2t", "t2i"]
        assert set(rows[0]) == {"direction", "n_queries", "n_gallery", "R@1", "R@5", "R@10"}

    def test_geometry_csv(self, rng):
        g = geometry_report(self.make_emb(rng))
        lines = geometry_csv([("init", g), ("adapted", g)]).splitlines()
        assert lines[0] == "# split=eval"
        assert lines[1] == ",".join(("stage",) + GEOMETRY_COLUMNS)
        assert lines[2].startswith("init,") and lines[3].startswith("adapted,")

    def test_svg(self, rng):
        emb = self.make_emb(rng)
        g = geometry_report(emb)
        root = ET.fromstring(pca_svg(g.pca, n_image=len(emb.image)))
        ns = "{http://www.w3.org/2000/svg}"
        circles = root.findall(f"{ns}circle")
        squares = [r for r in root.findall(f"{ns}rect") if r.get("width") == "5"]
        assert len(circles) == 10 + 1 and len(squares) == 10
        labels = [t.text for t in root.findall(f"{ns}text")]
        assert "image" in labels and "text" in labels
        assert any(t.startswith("PC1") for t in labels) and any(t.startswith("PC2") for t in labels)
