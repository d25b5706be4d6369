"""pretrain -> freeze -> adapt -> evaluate, plus ablation and zero-shot diagnosis.

Every function is a pure function of the config, its input artifacts and the
seed; nothing written here carries a timestamp, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from .backbone import FrozenBackbone, pretrain
from .config import RunConfig, write_resolved
from .core import PoolingStrategy, Readout, ReadoutVariant, embed_dataset
from .errors import ContaminationError, InputError, StateError
from .evaluation import (EmbeddingSet, geometry_csv, geometry_report, mean_recall, pca_svg, retrieval_csv,
                         retrieval_reports, top1_margins)
from .synthdata import (KARR_MIX, Dimension, PairedDataset, Tier, describe_batches, gen_explicit, gen_reasoning,
                        pretrain_corpus, split, substream)
from .train import StepReport, Trainer

TIER_ID_OFFSET = {Tier.EXPLICIT: 0, Tier.REASONING: 1_000_000}
DIAGNOSE_TIERS = ("explicit", "knowledge", "logical")

Log = Callable[[str], None]


def _quiet(_msg: str) -> None:
    pass


def derived_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2 ** 31 - 1))


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- data

def generate(tier: Tier, n: int, seed: int, cfg: RunConfig, mix=None, id_offset: int | None = None) -> PairedDataset:
    if n < 1:
        raise InputError(f"dataset size must be positive, got {n}")
    off = TIER_ID_OFFSET[tier] if id_offset is None else id_offset
    kw = dict(min_objects=cfg.data.min_objects, max_objects=cfg.data.max_objects, id_offset=off,
              grid=cfg.backbone.patch_grid)
    if tier is Tier.EXPLICIT:
        return gen_explicit(n, seed, **kw)
    return gen_reasoning(n, seed, mix if mix is not None else cfg.data.mix(), **kw)


def adapt_eval_data(cfg: RunConfig) -> tuple[PairedDataset, PairedDataset]:
    """Disjoint adaptation and evaluation splits of one generated pool."""
    tier = Tier(cfg.data.tier)
    n_train, n_eval = cfg.data.n_train, cfg.data.n_eval
    if n_train < 1 or n_eval < 1:
        raise InputError("data.n_train and data.n_eval must be positive")
    pool = generate(tier, n_train + n_eval, derived_seed(cfg.seed, f"data-{tier.value}"), cfg)
    total = n_train + n_eval
    marked = split(pool, {"adapt": n_train / total, "eval": n_eval / total}, derived_seed(cfg.seed, "split"))
    return marked.subset("adapt"), marked.subset("eval")


# ---------------------------------------------------------------- pretrain

def run_pretrain(cfg: RunConfig, log: Log = _quiet) -> FrozenBackbone:
    p = cfg.pretrain
    if p.n_explicit + p.n_reasoning < 1:
        raise InputError("pretraining corpus is empty")
    datasets = []
    if p.n_explicit > 0:
        datasets.append(generate(Tier.EXPLICIT, p.n_explicit, derived_seed(cfg.seed, "pretrain-explicit"), cfg))
    if p.n_reasoning > 0:
        datasets.append(generate(Tier.REASONING, p.n_reasoning, derived_seed(cfg.seed, "pretrain-reasoning"),
                                 cfg, mix=KARR_MIX))
    items = pretrain_corpus(datasets)
    backbone = FrozenBackbone(cfg.backbone, seed=derived_seed(cfg.seed, "backbone-init"))
    out = _out(cfg)
    lines = []

    def record(step, loss, lr):
        lines.append(json.dumps({"step": step, "loss": round(float(loss), 6), "lr": lr}))
        if step % 100 == 0 or step == p.steps - 1:
            log(f"pretrain step {step} loss {loss:.4f}")

    pretrain(backbone, describe_batches(items, p.batch_size, derived_seed(cfg.seed, "pretrain-batches"),
                                        p.text_fraction),
             p.steps, p.learning_rate, p.warmup_ratio, p.weight_decay, log=record)
    backbone.freeze()
    (out / "pretrain_log.jsonl").write_text("".join(line + "\n" for line in lines))
    ckpt.save_backbone(out / "backbone.slq", backbone, {"steps": p.steps, "seed": cfg.seed})
    write_resolved(cfg, out)
    return backbone


# ---------------------------------------------------------------- adapt

def make_readout(cfg: RunConfig, variant=None, n_queries=None, pooling=None, seed=None) -> Readout:
    return Readout(variant or cfg.readout.variant, d_model=cfg.backbone.d_model,
                   n_queries=n_queries or cfg.readout.n_queries, pooling=pooling or cfg.readout.pooling,
                   query_init=cfg.readout.query_init,
                   seed=derived_seed(cfg.seed if seed is None else seed, "readout-init"),
                   n_heads=cfg.backbone.n_heads, ffn_mult=cfg.backbone.ffn_mult,
                   prompt_tokens=cfg.readout.prompt_tokens)


def adapt(cfg: RunConfig, backbone: FrozenBackbone, train: PairedDataset, readout: Readout,
          seed: int | None = None, log: Callable[[StepReport], None] | None = None) -> Trainer:
    tc = cfg.trainer
    seed = cfg.seed if seed is None else seed
    tc = dataclasses.replace(tc, seed=derived_seed(seed, "adapt-batches"))
    trainer = Trainer(backbone, readout, tc)
    trainer.fit(train, log=log)
    return trainer


def run_adapt(cfg: RunConfig, backbone: FrozenBackbone, log: Log = _quiet) -> Trainer:
    out = _out(cfg)
    train, _ = adapt_eval_data(cfg)
    readout = make_readout(cfg)
    lines = []
    n_train = readout.n_trainable() + 1
    header = {"trainable_parameters": n_train, "variant": readout.variant.value,
              "n_queries": readout.n_queries, "backbone_checksum": backbone.recorded_checksum}
    lines.append(json.dumps(header))
    log(f"adapting {readout.variant.value} readout with {n_train} trainable parameters")
    metrics = io.StringIO()
    w = csv.writer(metrics, lineterminator="\n")
    w.writerow(["epoch", "last_step", "mean_loss", "tau", "lr"])
    steps_per_epoch = max(len(train) // min(cfg.trainer.batch_size, len(train)), 1)
    window: list[float] = []

    def record(rep: StepReport):
        lines.append(rep.to_json())
        window.append(rep.loss)
        last = rep.step == cfg.trainer.total_steps - 1
        if (rep.step + 1) % steps_per_epoch == 0 or last:
            w.writerow([rep.step // steps_per_epoch, rep.step, f"{np.mean(window):.6f}", f"{rep.tau:.6f}",
                        f"{rep.lr:.8f}"])
            window.clear()
        if rep.step % 100 == 0 or last:
            log(f"adapt step {rep.step} loss {rep.loss:.4f} tau {rep.tau:.4f}")

    trainer = adapt(cfg, backbone, train, readout, log=record)
    if not backbone.verify_frozen():
        raise StateError("backbone changed during adaptation")
    (out / "adapt_log.jsonl").write_text("".join(line + "\n" for line in lines))
    (out / "adapt_metrics.csv").write_text(metrics.getvalue())
    ckpt.save_adapter(out / "adapter.slq", readout, float(trainer.temperature.raw.data),
                      {"train_ids": train.ids, "tier": cfg.data.tier, "seed": cfg.seed,
                       "steps": cfg.trainer.total_steps, "backbone_checksum": backbone.recorded_checksum})
    write_resolved(cfg, out)
    return trainer


# ---------------------------------------------------------------- eval

def embeddings(backbone: FrozenBackbone, readout: Readout, ds: PairedDataset, batch_size: int = 128,
               split_name: str = "eval") -> EmbeddingSet:
    zi, zt = embed_dataset(backbone, readout, ds.pairs, batch_size)
    return EmbeddingSet(zi, zt, ds.ids, split_name)


def check_contamination(train_ids, eval_ids) -> None:
    seen = set(train_ids) & set(eval_ids)
    if seen:
        raise ContaminationError(f"{len(seen)} evaluation ids were used in adaptation (e.g. {min(seen)})")


@dataclass
class EvalResult:
    reports: list
    geometry_init: object
    geometry_adapted: object


def run_eval(cfg: RunConfig, backbone: FrozenBackbone, readout: Readout, train_ids, log: Log = _quiet) -> EvalResult:
    out = _out(cfg)
    _, ev = adapt_eval_data(cfg)
    check_contamination(train_ids, ev.ids)
    emb = embeddings(backbone, readout, ev, cfg.eval.batch_size)
    reports = retrieval_reports(emb, cfg.eval.ks)
    (out / "retrieval.csv").write_text(retrieval_csv(reports, "eval"))
    for r in reports:
        log(f"{r.direction.value} " + " ".join(f"R@{k}={v:.3f}" for k, v in sorted(r.recall.items())))
    g0 = g1 = None
    if cfg.eval.geometry:
        init = make_readout(cfg, readout.variant, readout.n_queries, readout.pooling)
        g0 = geometry_report(embeddings(backbone, init, ev, cfg.eval.batch_size))
        g1 = geometry_report(emb)
        (out / "geometry.csv").write_text(geometry_csv([("init", g0), ("adapted", g1)], "eval"))
        (out / "pca.svg").write_text(pca_svg(g1.pca, len(emb.image), "PCA of adapted eval embeddings"))
        log(f"gap {g0.gap:.4f} -> {g1.gap:.4f}, alignment {g0.alignment:.4f} -> {g1.alignment:.4f}")
    write_resolved(cfg, out)
    return EvalResult(reports, g0, g1)


# ---------------------------------------------------------------- ablate

ABLATION_COLUMNS = ("axis", "setting", "seed", "data_seed", "i2t_R@1", "t2i_R@1", "mean_recall")


def ablation_settings(cfg: RunConfig) -> list[tuple[str, str, dict]]:
    rows = []
    for axis in cfg.ablate.axes:
        if axis == "query_count":
            rows += [(axis, str(n), {"n_queries": n}) for n in cfg.ablate.query_counts]
        elif axis == "pooling":
            rows += [(axis, p, {"pooling": p}) for p in cfg.ablate.poolings]
        elif axis == "variant":
            rows += [(axis, v, {"variant": v}) for v in cfg.ablate.variants]
    return rows


def run_ablation_setting(cfg: RunConfig, backbone: FrozenBackbone, overrides: dict, seed: int,
                         data=None) -> list:
    train, ev = data or adapt_eval_data(cfg)
    readout = make_readout(cfg, seed=seed, **overrides)
    if readout.variant is not ReadoutVariant.LAST_TOKEN:  # tau alone cannot change a ranking
        adapt(cfg, backbone, train, readout, seed=seed)
    return retrieval_reports(embeddings(backbone, readout, ev, cfg.eval.batch_size), cfg.eval.ks)


def run_ablate(cfg: RunConfig, backbone: FrozenBackbone, log: Log = _quiet) -> list[dict]:
    out = _out(cfg)
    data = adapt_eval_data(cfg)
    data_seed = derived_seed(cfg.seed, f"data-{cfg.data.tier}")
    rows = []
    for axis, label, overrides in ablation_settings(cfg):
        per_seed = []
        for seed in cfg.ablate.seeds:
            reps = run_ablation_setting(cfg, backbone, overrides, seed, data)
            row = {"axis": axis, "setting": label, "seed": str(seed), "data_seed": data_seed,
                   "i2t_R@1": reps[0].recall.get(1, float("nan")), "t2i_R@1": reps[1].recall.get(1, float("nan")),
                   "mean_recall": mean_recall(reps)}
            rows.append(row)
            per_seed.append(row)
            log(f"{axis}={label} seed={seed} mean_recall={row['mean_recall']:.4f}")
        if len(per_seed) > 1:
            rows.append({"axis": axis, "setting": label, "seed": "mean", "data_seed": data_seed,
                         **{k: float(np.mean([r[k] for r in per_seed])) for k in ABLATION_COLUMNS[4:]}})
    buf = io.StringIO()
    buf.write(f"# split=eval tier={cfg.data.tier}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r[c] if not isinstance(r[c], float) else f"{r[c]:.6f}" for c in ABLATION_COLUMNS])
    (out / "ablation.csv").write_text(buf.getvalue())
    write_resolved(cfg, out)
    return rows


# ---------------------------------------------------------------- diagnose

def diagnose_tier(cfg: RunConfig, tier: str) -> PairedDataset:
    n = cfg.diagnose.n_per_tier
    seed = derived_seed(cfg.seed, f"diagnose-{tier}")
    if tier == "explicit":
        return generate(Tier.EXPLICIT, n, seed, cfg, id_offset=2_000_000)
    if tier == "logical":
        return generate(Tier.REASONING, n, seed, cfg, mix={Dimension.LOGICAL_MATHEMATICAL: 1.0}, id_offset=3_000_000)
    if tier == "knowledge":
        rest = {d: p for d, p in KARR_MIX.items() if d is not Dimension.LOGICAL_MATHEMATICAL}
        total = sum(rest.values())
        return generate(Tier.REASONING, n, seed, cfg, mix={d: p / total for d, p in rest.items()},
                        id_offset=4_000_000)
    raise InputError(f"unknown diagnosis tier {tier!r}")


def pilot_readouts(cfg: RunConfig) -> dict[str, Readout]:
    d = cfg.backbone
    return {"query": Readout(ReadoutVariant.SHARED_QUERIES, d.d_model, n_queries=1, pooling=PoolingStrategy.MEAN,
                             query_init="zeros", n_heads=d.n_heads),
            "last_token": Readout(ReadoutVariant.LAST_TOKEN, d.d_model, n_heads=d.n_heads)}


def run_diagnose(cfg: RunConfig, backbone: FrozenBackbone, log: Log = _quiet) -> dict:
    """Zero-shot text-to-image retrieval with a single zero query versus the last token."""
    out = _out(cfg)
    summary = {}
    margins_rows = []
    for tier in DIAGNOSE_TIERS:
        ds = diagnose_tier(cfg, tier)
        for name, readout in pilot_readouts(cfg).items():
            emb = embeddings(backbone, readout, ds, cfg.eval.batch_size, tier)
            reps = retrieval_reports(emb, [1])
            m = top1_margins(emb.text, emb.image)
            summary[(tier, name)] = {"t2i_R@1": reps[1].recall[1], "mean_margin": float(m.mean())}
            margins_rows += [(tier, name, pid, f"{v:.6f}") for pid, v in zip(ds.ids, m)]
            log(f"{tier:9s} {name:10s} R@1={reps[1].recall[1]:.3f} margin={m.mean():.5f}")
    buf = io.StringIO()
    buf.write("# split=diagnose\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tier", "readout", "t2i_R@1", "mean_margin"])
    for (tier, name), v in summary.items():
        w.writerow([tier, name, f"{v['t2i_R@1']:.6f}", f"{v['mean_margin']:.6f}"])
    (out / "diagnose.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    buf.write("# split=diagnose\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tier", "readout", "id", "margin"])
    w.writerows(margins_rows)
    (out / "diagnose_margins.csv").write_text(buf.getvalue())
    write_resolved(cfg, out)
    return summary
