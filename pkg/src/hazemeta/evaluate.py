"""Held-out evaluation and the ablation protocol.

Full-reference PSNR/SSIM are available because evaluation domains are
synthetic. The dark-channel mean is a no-reference haze-density proxy:
airlight raises the per-patch channel minimum, so dehazing should lower it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from hazemeta.datagen import DomainSpec, GenConfig, SceneBank, augment_pair, haze_scene, make_task
from hazemeta.losses import ssim as ssim_batch
from hazemeta.model import HazeMetaModel, to_tensor
from hazemeta.trainer import TrainConfig, fit, load_model

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
EVAL_STREAM = 0x5EED  # keeps evaluation scenes disjoint from training scenes


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def ssim_metric(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two (H, W, 3) images in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ta = torch.from_numpy(np.ascontiguousarray(a)).movedim(-1, -3)
    tb = torch.from_numpy(np.ascontiguousarray(b)).movedim(-1, -3)
    return float(ssim_batch(ta, tb)[0])


def dark_channel(img: np.ndarray, patch: int = 15) -> np.ndarray:
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch must be odd and >= 1, got {patch}")
    img = np.asarray(img, dtype=np.float64)
    size = (min(patch, img.shape[0]), min(patch, img.shape[1]))
    return ndimage.minimum_filter(img.min(axis=2), size=size, mode="nearest")


def dark_channel_mean(img: np.ndarray, patch: int = 15) -> float:
    return float(dark_channel(img, patch).mean())


@dataclass
class EvalReport:
    domains: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"domains": {str(k): v for k, v in self.domains.items()}, "metadata": self.metadata}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def eval_set(domain: DomainSpec, n_images: int, seed: int, context_k: int = 4, size: int = 64):
    """n_images (hazy, clear, context) triples; context holds context_k - 1 other hazy
    images from the same domain."""
    ss = np.random.SeedSequence([seed, domain.rng_seed, EVAL_STREAM])
    scene_ss, haze_ss = ss.spawn(2)
    n_ctx = max(context_k - 1, 0)
    bank = SceneBank.procedural(n_images * (1 + n_ctx), GenConfig(height=size, width=size),
                                seed=int(scene_ss.generate_state(1)[0]))
    rng = np.random.default_rng(haze_ss)
    out = []
    for i in range(n_images):
        pairs = [haze_scene(domain, *bank[j], rng) for j in range(i * (1 + n_ctx), (i + 1) * (1 + n_ctx))]
        out.append((pairs[0].hazy, pairs[0].clear, [p.hazy for p in pairs[1:]]))
    return out


def evaluate_model(model: HazeMetaModel, domains: Sequence[DomainSpec], n_images: int = 16, seed: int = 0,
                   context_k: int = 4, size: int = 64, patch: int = 15) -> dict:
    per_domain = {}
    for dom in domains:
        rows = []
        for hazy, clear, ctx in eval_set(dom, n_images, seed, context_k, size):
            out = model.restore(hazy, ctx)
            rows.append((psnr(out, clear), ssim_metric(out, clear), dark_channel_mean(out, patch),
                         psnr(hazy, clear), ssim_metric(hazy, clear), dark_channel_mean(hazy, patch),
                         dark_channel_mean(clear, patch)))
        r = np.asarray(rows)
        per_domain[dom.id] = {
            "psnr_mean": float(r[:, 0].mean()),
            "ssim_mean": float(r[:, 1].mean()),
            "dark_channel_mean": float(r[:, 2].mean()),
            "hazy_psnr_mean": float(r[:, 3].mean()),
            "hazy_ssim_mean": float(r[:, 4].mean()),
            "hazy_dark_channel_mean": float(r[:, 5].mean()),
            "clear_dark_channel_mean": float(r[:, 6].mean()),
            "n_images": n_images,
        }
    return per_domain


def evaluate_checkpoint(checkpoint, domains: Sequence[DomainSpec], n_images: int = 16, seed: int = 0,
                        context_k: int = 4, size: int = 64, patch: int = 15) -> EvalReport:
    if isinstance(checkpoint, HazeMetaModel):
        model, ckpt_id, cfg = checkpoint, "<in-memory>", {}
    else:
        from hazemeta.checkpoint import load_container
        blob = load_container(checkpoint)
        model, ckpt_id, cfg = load_model(checkpoint), str(checkpoint), blob["config"]
    per_domain = evaluate_model(model, domains, n_images, seed, context_k, size, patch)
    meta = {"checkpoint": ckpt_id, "seed": seed, "config_hash": config_hash(cfg), "n_images": n_images,
            "context_k": context_k, "image_size": size, "dark_channel_patch": patch}
    return EvalReport(per_domain, meta)


@torch.no_grad()
def domain_accuracy(model: HazeMetaModel, domains: Sequence[DomainSpec], n_tasks: int = 100, K: int = 4,
                    crop: int = 32, scene_size: int = 48, seed: int = 0) -> float:
    """Share of fresh tasks whose task parameter the classifier assigns to the right domain.

    ``domains`` must be in the order used for the classifier labels during training.
    """
    if not model.conditioned:
        raise ValueError("model has no adaptation network or classifier")
    ss = np.random.SeedSequence([seed, EVAL_STREAM, 7])
    scene_ss, task_ss = ss.spawn(2)
    bank = SceneBank.procedural(max(4 * K, 16), GenConfig(height=scene_size, width=scene_size),
                                seed=int(scene_ss.generate_state(1)[0]))
    rng = np.random.default_rng(task_ss)
    was_training = model.training
    model.eval()
    hits = total = 0
    try:
        for label, dom in enumerate(domains):
            for _ in range(n_tasks):
                task = make_task(dom, bank, K, rng)
                hazy = np.stack([augment_pair(p.hazy, p.clear, crop, rng)[0] for p in task.pairs])
                phi, _ = model.task_params(to_tensor(hazy)[None])
                hits += int(model.classifier(phi).argmax(1).item() == label)
                total += 1
    finally:
        model.train(was_training)
    return hits / total


# -- ablation -----------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    overrides: dict


ABLATION_VARIANTS = (
    Variant("baseline", {"adapt_net": "none", "dcr_enabled": False}),
    Variant("an_cnn+mean", {"adapt_net": "plain_conv", "aggregator": "average", "dcr_enabled": False}),
    Variant("an_cg+mean", {"adapt_net": "cg_conv", "aggregator": "average", "dcr_enabled": False}),
    Variant("an_cg+daa", {"adapt_net": "cg_conv", "aggregator": "distance_aware", "dcr_enabled": False}),
    Variant("full", {"adapt_net": "cg_conv", "aggregator": "distance_aware", "dcr_enabled": True}),
)


@dataclass
class AblationResult:
    rows: list            # one dict per (variant, seed)
    summary: list         # one dict per variant, in variant order
    table_path: Path
    summary_path: Path
    plot_paths: list

    def median_psnr(self, variant: str) -> float:
        for s in self.summary:
            if s["variant"] == variant:
                return s["psnr_median"]
        raise KeyError(variant)


def run_ablation(base: TrainConfig, variants: Sequence[Variant], domains: Sequence[DomainSpec],
                 heldout: Sequence[int], seeds: Sequence[int], workdir, n_images: int = 16,
                 context_k: int = 4, eval_size: int = 64, eval_seed: int = 0) -> AblationResult:
    """Train each variant under each seed with identical data streams, then score the held-out domains."""
    from hazemeta.report import plot_ablation

    workdir = Path(workdir)
    by_id = {d.id: d for d in domains}
    if len(base.train_domains) < 2:
        raise ValueError("ablation needs at least 2 training domains")
    if not heldout:
        raise ValueError("ablation needs at least 1 held-out domain")
    held = [by_id[i] for i in heldout]
    rows = []
    for v in variants:
        for seed in seeds:
            # same pairing pattern for every variant so their data streams match
            cfg = replace(base, **v.overrides, seed=seed, pair_sampling=True)
            run_dir = workdir / v.name / f"seed{seed}"
            row = {"variant": v.name, "seed": seed, "status": "ok", "checkpoint": ""}
            try:
                ckpt = fit(cfg, domains, run_dir)
                report = evaluate_checkpoint(ckpt, held, n_images, eval_seed, context_k, eval_size)
                report.save(run_dir / "eval.json")
                m = report.domains[held[0].id] if len(held) == 1 else _pool(report.domains)
                row.update(checkpoint=str(ckpt), psnr=m["psnr_mean"], ssim=m["ssim_mean"],
                           dark_channel=m["dark_channel_mean"], hazy_psnr=m["hazy_psnr_mean"])
            except Exception as exc:  # a failed variant must not sink the whole table
                logger.exception("variant %s seed %s failed", v.name, seed)
                row.update(status=f"failed: {type(exc).__name__}: {exc}", psnr=float("nan"),
                           ssim=float("nan"), dark_channel=float("nan"), hazy_psnr=float("nan"))
            rows.append(row)

    summary = []
    for v in variants:
        ok = [r for r in rows if r["variant"] == v.name and r["status"] == "ok"]
        ps = [r["psnr"] for r in ok]
        summary.append({
            "variant": v.name,
            "psnr_median": float(np.median(ps)) if ps else float("nan"),
            "ssim_median": float(np.median([r["ssim"] for r in ok])) if ok else float("nan"),
            "n_ok": len(ok),
            "n_failed": sum(1 for r in rows if r["variant"] == v.name) - len(ok),
        })
    finite = sorted((s for s in summary if np.isfinite(s["psnr_median"])), key=lambda s: -s["psnr_median"])
    ranks = {s["variant"]: i + 1 for i, s in enumerate(finite)}
    for s in summary:
        s["rank"] = ranks.get(s["variant"], "")

    table_path = _write_csv(workdir / "ablation_runs.csv", rows,
                            ["variant", "seed", "status", "psnr", "ssim", "dark_channel", "hazy_psnr", "checkpoint"])
    summary_path = _write_csv(workdir / "ablation_summary.csv", summary,
                              ["variant", "psnr_median", "ssim_median", "rank", "n_ok", "n_failed"])
    plots = plot_ablation(rows, summary, workdir / "ablation_psnr")
    return AblationResult(rows, summary, table_path, summary_path, plots)


def _pool(per_domain: dict) -> dict:
    keys = ("psnr_mean", "ssim_mean", "dark_channel_mean", "hazy_psnr_mean")
    return {k: float(np.mean([v[k] for v in per_domain.values()])) for k in keys}


def _write_csv(path: Path, rows: list, columns: list) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path
