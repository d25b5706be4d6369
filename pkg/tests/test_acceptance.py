"""Acceptance suite. Each test prints one PASS/FAIL line at the stated tolerance.

The desk backbone is pretrained once per session from configs/reference.toml
and shared by the criteria that need a trained model.
"""

import dataclasses
import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

from slq import autodiff as ad
from slq import pipeline
from slq.autodiff import Tape
from slq.backbone import BackboneConfig, FrozenBackbone
from slq.cli import main
from slq.config import RunConfig, load_config
from slq.core import QueryBank, Readout, ReadoutVariant, build_sequence
from slq.evaluation import (EmbeddingSet, alignment_metric, mean_recall, modality_gap, retrieval_reports, top1_margins,
                            uniformity_metric)
from slq.synthdata import gen_explicit
from slq.train import PairBatch, Trainer, TrainerConfig, info_nce_i2t, info_nce_t2i, symmetric_loss

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parent.parent
REFERENCE = ROOT / "configs" / "reference.toml"
ABLATION_STEPS = 400  # shared budget for every ablation setting
SEEDS = (0, 1, 2)


def tensor_digests(backbone):
    return {k: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest()
            for k, v in backbone.state_dict().items()}


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    cfg = load_config(REFERENCE)
    cfg.output = dataclasses.replace(cfg.output, dir=str(tmp_path_factory.mktemp("reference")))
    t0 = time.perf_counter()
    backbone = pipeline.run_pretrain(cfg)
    return cfg, backbone, time.perf_counter() - t0


@pytest.fixture(scope="module")
def adapted(reference):
    cfg, backbone, pretrain_seconds = reference
    t0 = time.perf_counter()
    trainer = pipeline.run_adapt(cfg, backbone)
    train_ids = pipeline.adapt_eval_data(cfg)[0].ids
    result = pipeline.run_eval(cfg, backbone, trainer.readout, train_ids)
    return trainer, result, pretrain_seconds + time.perf_counter() - t0


@pytest.fixture(scope="module")
def ablation_cfg(reference):
    cfg, _, _ = reference
    return dataclasses.replace(cfg, trainer=dataclasses.replace(cfg.trainer, total_steps=ABLATION_STEPS))


def seed_mean_recall(cfg, backbone, overrides, data):
    return float(np.mean([mean_recall(pipeline.run_ablation_setting(cfg, backbone, overrides, s, data))
                          for s in SEEDS]))


def test_criterion_01_gradient_check(f64, criterion):
    t0 = time.perf_counter()
    bb = FrozenBackbone(BackboneConfig(d_model=16, n_layers=2, n_heads=2, max_seq_len=64), seed=11,
                        dtype=np.float64)
    bb.freeze()
    r = Readout(ReadoutVariant.SHARED_QUERIES, d_model=16, n_queries=2, query_init="gaussian", seed=11,
                n_heads=2, dtype=np.float64)
    trainer = Trainer(bb, r, TrainerConfig(batch_size=4))
    pairs = gen_explicit(4, 13).pairs
    batch = PairBatch([p.id for p in pairs], [p.image.features() for p in pairs], [p.caption.tokens for p in pairs])
    with Tape() as tape:
        loss = trainer.loss(batch)
    tape.backward(loss)
    worst = 0.0
    for p in trainer.params:
        num = ad.numerical_gradient(lambda: float(trainer.loss(batch).data), p, h=1e-5)
        worst = max(worst, ad.relative_error(p.grad, num))
    seconds = time.perf_counter() - t0
    ok = worst < 1e-5 and seconds < 60
    assert criterion(1, "gradient check", ok, f"max relative error {worst:.2e} (< 1e-5), {seconds:.1f}s (< 60s)")


def test_criterion_02_freeze_contract(reference, tmp_path, criterion):
    _, backbone, _ = reference
    default = RunConfig()
    cfg = dataclasses.replace(default, trainer=dataclasses.replace(default.trainer, total_steps=500),
                              output=dataclasses.replace(default.output, dir=str(tmp_path)))
    before = tensor_digests(backbone)
    t0 = time.perf_counter()
    trainer = pipeline.run_adapt(cfg, backbone)
    seconds = time.perf_counter() - t0
    unchanged = tensor_digests(backbone) == before
    n, d = cfg.readout.n_queries, backbone.config.d_model
    shared = trainer.trainable_census()
    separate = Trainer(backbone, Readout(ReadoutVariant.SEPARATE_QUERIES, d, n_queries=n)).trainable_census()
    ok = unchanged and shared == n * d + 1 and separate == 2 * n * d + 1 and seconds < 120
    assert criterion(2, "freeze contract", ok,
                     f"tensors bit-identical={unchanged}, census shared={shared} (N*D+1={n * d + 1}) "
                     f"separate={separate} (2*N*D+1={2 * n * d + 1}), {len(trainer.readout.parameters())} tensor(s), "
                     f"{seconds:.0f}s for 500 steps (< 120s)")


def test_criterion_03_prefix_invariance(reference, criterion):
    _, backbone, _ = reference
    rng = np.random.default_rng(3)
    worst, exact = 0.0, True
    det = FrozenBackbone(backbone.config, params=backbone.state_dict())
    det.deterministic = True
    for i in range(100):
        n_queries = int(rng.integers(1, 33))
        if i % 2:
            seq = backbone.embed_image(gen_explicit(1, i).pairs[0].image)
        else:
            seq = backbone.embed_text(rng.integers(0, 256, size=int(rng.integers(1, 60))))
        bank = QueryBank(n_queries, 64, init="gaussian", rng=rng)
        full = build_sequence(seq, bank)
        worst = max(worst, float(np.abs(backbone.forward_hidden(full).data[:seq.length]
                                        - backbone.forward_hidden(seq).data).max()))
        exact &= det.forward_hidden(full).data[:seq.length].tobytes() == det.forward_hidden(seq).data.tobytes()
    ok = worst <= 1e-6 and exact
    assert criterion(3, "prefix invariance", ok, f"max abs diff {worst:.2e} (<= 1e-6), bit-exact deterministic={exact}")


def test_criterion_04_loss_closed_forms(f64, criterion):
    rng = np.random.default_rng(4)
    single = float(symmetric_loss([[0.37]], 0.07).data)
    uniform = max(abs(float(symmetric_loss(np.full((b, b), 0.2), 0.05).data) - math.log(b)) for b in (2, 4, 9, 32))
    transpose = 0.0
    for _ in range(50):
        b = int(rng.integers(1, 12))
        s = rng.uniform(-1, 1, size=(b, b))
        tau = float(rng.uniform(0.01, 1))
        transpose = max(transpose, abs(float(info_nce_t2i(s, tau).data) - float(info_nce_i2t(s.T, tau).data)))
    ok = single == 0.0 and uniform <= 1e-9 and transpose <= 1e-9
    assert criterion(4, "loss closed forms", ok,
                     f"B=1 loss {single!r} (== 0), |uniform - ln B| {uniform:.1e} (<= 1e-9), "
                     f"|t2i(S) - i2t(S^T)| {transpose:.1e} (<= 1e-9)")


def test_criterion_05_desk_adaptation(reference, adapted, criterion):
    cfg, backbone, _ = reference
    _, result, seconds = adapted
    i2t, t2i = (r.recall[1] for r in result.reports)
    _, ev = pipeline.adapt_eval_data(cfg)
    untrained = pipeline.make_readout(cfg)
    base = retrieval_reports(pipeline.embeddings(backbone, untrained, ev), [1])
    b_i2t, b_t2i = (r.recall[1] for r in base)
    ok = min(i2t, t2i) >= 0.80 and max(b_i2t, b_t2i) <= 0.15 and seconds < 600
    assert criterion(5, "desk-scale adaptation", ok,
                     f"adapted R@1 i2t={i2t:.3f} t2i={t2i:.3f} (>= 0.80); zero-init R@1 i2t={b_i2t:.3f} "
                     f"t2i={b_t2i:.3f} (<= 0.15); pretrain+adapt+eval {seconds:.0f}s (< 600s)")


def test_criterion_06_pooling_and_variant_trend(reference, ablation_cfg, criterion):
    _, backbone, _ = reference
    data = pipeline.adapt_eval_data(ablation_cfg)
    m = {k: seed_mean_recall(ablation_cfg, backbone, ov, data) for k, ov in {
        "mean": {}, "max": {"pooling": "max"}, "last": {"pooling": "last"},
        "separate": {"variant": "separate"}, "linear_head": {"variant": "linear_head"}}.items()}
    pooling_ok = m["mean"] >= m["max"] and m["mean"] >= m["last"]
    variant_ok = m["mean"] >= m["separate"] >= m["linear_head"]
    assert criterion(6, "pooling and variant ordering", pooling_ok and variant_ok,
                     f"seed-mean recall mean={m['mean']:.3f} max={m['max']:.3f} last={m['last']:.3f} "
                     f"(pooling ok={pooling_ok}); shared={m['mean']:.3f} separate={m['separate']:.3f} "
                     f"linear_head={m['linear_head']:.3f} (variant ok={variant_ok})")


def test_criterion_07_query_count_sweep(reference, ablation_cfg, criterion):
    _, backbone, _ = reference
    cfg = dataclasses.replace(ablation_cfg, data=dataclasses.replace(ablation_cfg.data, tier="reasoning"))
    data = pipeline.adapt_eval_data(cfg)
    curve = {n: mean_recall(pipeline.run_ablation_setting(cfg, backbone, {"n_queries": n}, 0, data))
             for n in cfg.ablate.query_counts}
    ok = curve[20] >= curve[1]
    assert criterion(7, "query-count sweep", ok,
                     "reasoning-tier mean recall " + " ".join(f"N={n}:{v:.3f}" for n, v in curve.items())
                     + " (N=20 >= N=1)")


def test_criterion_08_geometry(adapted, criterion):
    _, result, _ = adapted
    g0, g1 = result.geometry_init, result.geometry_adapted
    antipodal = EmbeddingSet([[1.0, 0.0]], [[-1.0, 0.0]])
    same = EmbeddingSet([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]])
    fixtures = (alignment_metric(antipodal) == pytest.approx(4.0)
                and uniformity_metric([[1.0, 0.0], [-1.0, 0.0]]) == pytest.approx(-8.0)
                and modality_gap(same) == 0.0)
    ok = (fixtures and g1.gap < g0.gap and g1.alignment < g0.alignment
          and g1.uniformity_image <= g0.uniformity_image and g1.uniformity_text <= g0.uniformity_text)
    assert criterion(8, "geometry trend", ok,
                     f"gap {g0.gap:.4f}->{g1.gap:.4f}, alignment {g0.alignment:.4f}->{g1.alignment:.4f}, "
                     f"uniformity image {g0.uniformity_image:.3f}->{g1.uniformity_image:.3f} "
                     f"text {g0.uniformity_text:.3f}->{g1.uniformity_text:.3f}, fixtures ok={fixtures}")


def test_criterion_09_pilot_margin(reference, criterion):
    cfg, backbone, _ = reference
    ds = pipeline.diagnose_tier(cfg, "logical")
    margins = {}
    for name, readout in pipeline.pilot_readouts(cfg).items():
        emb = pipeline.embeddings(backbone, readout, ds)
        margins[name] = float(top1_margins(emb.text, emb.image).mean())
    ok = margins["query"] >= margins["last_token"]
    assert criterion(9, "pilot margin", ok,
                     f"logical tier mean top-1 margin query={margins['query']:.5f} "
                     f"last_token={margins['last_token']:.5f} (query >= last_token)")


DETERMINISM = """\
seed = 9
[pretrain]
steps = 60
n_explicit = 300
n_reasoning = 300
[data]
n_train = 128
n_eval = 64
[trainer]
total_steps = 40
learning_rate = 0.005
[readout]
n_queries = 8
[output]
dir = "{out}"
"""


def test_criterion_10_determinism(tmp_path, criterion):
    outs = []
    for run in ("a", "b"):
        cfg = tmp_path / f"{run}.toml"
        cfg.write_text(DETERMINISM.format(out=tmp_path / run))
        for cmd in ("pretrain", "adapt", "eval"):
            assert main([cmd, "--config", str(cfg), "--quiet"]) == 0
        outs.append(tmp_path / run)
    names = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".csv", ".svg", ".slq"))
    differing = [n for n in names if (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
    ok = len(names) >= 6 and not differing
    assert criterion(10, "determinism", ok,
                     f"{len(names) - len(differing)}/{len(names)} artifacts byte-identical ({', '.join(names)})")
