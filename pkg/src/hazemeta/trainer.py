"""Episodic meta-training.

Each step samples N tasks of K pairs. With the domain-relevant contrastive
term enabled, exactly one domain contributes two tasks (anchor and positive)
and the rest come from other domains (negatives). All networks share a single
Adam optimizer.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from hazemeta import ConfigError, NumericalError
from hazemeta.checkpoint import load_container, save_container
from hazemeta.datagen import DomainSpec, SceneBank, GenConfig, Task, SamplePair, augment_pair, make_task
from hazemeta.dcr import dcr_loss, select_positive
from hazemeta.losses import (FrozenPyramid, LossBreakdown, LossWeights, ce_loss, cr_loss,
                             pixel_loss, ssim_loss, weighted_total)
from hazemeta.model import ADAPT_CHOICES, AGGREGATOR_CHOICES, HazeMetaModel, to_tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    num_tasks_per_batch: int = 3
    samples_per_task: int = 4
    crop_size: int = 64
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    max_steps: int = 2000
    seed: int = 0
    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 1.0
    lambda4: float = 0.5
    aggregator: str = "distance_aware"
    distance_reduction: str = "mean"
    dcr_enabled: bool = True
    pair_sampling: bool | None = None  # None: constrained pairing iff dcr_enabled
    adapt_net: str = "cg_conv"
    cx_bandwidth: float = 0.5
    cx_normalize: bool = True
    sigma: float = 1e-7
    pixel_reduction: str = "mean"
    train_domains: list = field(default_factory=lambda: [0, 1])
    scene_bank_size: int = 256
    scene_size: int = 80
    extractor_seed: int = 1234
    extractor_weights: str | None = None
    checkpoint_every: int = 500
    deterministic: bool = True

    def validate(self) -> "TrainConfig":
        if self.samples_per_task < 1:
            raise ConfigError("train.samples_per_task: must be >= 1")
        if self.num_tasks_per_batch < 1:
            raise ConfigError("train.num_tasks_per_batch: must be >= 1")
        if not self.lr > 0:
            raise ConfigError("train.lr: must be > 0")
        if self.max_steps < 0:
            raise ConfigError("train.max_steps: must be >= 0")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigError("train.adam_beta1/adam_beta2: must lie in [0, 1)")
        if self.adapt_net not in ADAPT_CHOICES:
            raise ConfigError(f"train.adapt_net: must be one of {ADAPT_CHOICES}")
        if self.aggregator not in AGGREGATOR_CHOICES:
            raise ConfigError(f"train.aggregator: must be one of {AGGREGATOR_CHOICES}")
        if self.distance_reduction not in ("mean", "sum"):
            raise ConfigError("train.distance_reduction: must be 'mean' or 'sum'")
        if self.pixel_reduction not in ("mean", "sum"):
            raise ConfigError("train.pixel_reduction: must be 'mean' or 'sum'")
        if self.crop_size < 16 or self.crop_size % 8:
            raise ConfigError("train.crop_size: must be a multiple of 8 and >= 16")
        if self.scene_size < self.crop_size:
            raise ConfigError("train.scene_size: must be >= crop_size")
        if not self.sigma > 0:
            raise ConfigError("train.sigma: must be > 0")
        if not self.cx_bandwidth > 0:
            raise ConfigError("train.cx_bandwidth: must be > 0")
        try:
            LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)
        except ValueError as exc:
            raise ConfigError(f"train.{exc}") from exc
        if self.dcr_enabled:
            if self.adapt_net == "none":
                raise ConfigError("train.dcr_enabled: needs an adaptation network (adapt_net != 'none')")
            if len(self.train_domains) < 2:
                raise ConfigError("train.dcr_enabled: needs at least 2 training domains")
            if self.num_tasks_per_batch < 3:
                warnings.warn("contrastive term needs N >= 3 tasks per batch; disabling it for N = "
                              f"{self.num_tasks_per_batch}", stacklevel=2)
                self.dcr_enabled = False
        return self

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def build_model(config: TrainConfig) -> HazeMetaModel:
    return HazeMetaModel(adapt_net=config.adapt_net, aggregator=config.aggregator,
                         num_domains=len(config.train_domains), distance_reduction=config.distance_reduction)


def build_extractor(config: TrainConfig) -> FrozenPyramid:
    ext = FrozenPyramid(seed=config.extractor_seed)
    if config.extractor_weights:
        ext.load_weights(config.extractor_weights)
    return ext


def build_scene_bank(config: TrainConfig) -> SceneBank:
    gen = GenConfig(height=config.scene_size, width=config.scene_size)
    return SceneBank.procedural(config.scene_bank_size, gen, seed=config.seed)


# -- sampling -----------------------------------------------------------------

def sample_batch(domains: Sequence[DomainSpec], config: TrainConfig, rng: np.random.Generator,
                 clear_source: Sequence) -> list[Task]:
    """N augmented tasks; with the contrastive term on, one domain appears twice."""
    N, K = config.num_tasks_per_batch, config.samples_per_task
    n_dom = len(domains)
    if n_dom == 0:
        raise ConfigError("no training domains")
    paired = config.dcr_enabled if config.pair_sampling is None else config.pair_sampling
    if paired:
        if n_dom < 2:
            raise ConfigError("contrastive sampling needs at least 2 domains")
        if N < 3:
            raise ConfigError("contrastive sampling needs at least 3 tasks per batch")
        pair = int(rng.integers(n_dom))
        others = [j for j in range(n_dom) if j != pair]
        rng.shuffle(others)
        chosen = [pair, pair] + [others[i % len(others)] for i in range(N - 2)]
        chosen = [chosen[i] for i in rng.permutation(N)]
    else:
        chosen = [int(j) for j in rng.integers(n_dom, size=N)]

    tasks = []
    for j in chosen:
        task = make_task(domains[j], clear_source, K, rng)
        pairs = []
        for p in task.pairs:
            hz, cl = augment_pair(p.hazy, p.clear, config.crop_size, rng)
            pairs.append(SamplePair(hz, cl, p.domain_id))
        tasks.append(Task(pairs, task.domain_id))
    return tasks


def batch_tensors(batch: Sequence[Task]):
    hazy = to_tensor(np.stack([t.hazy for t in batch]))
    clear = to_tensor(np.stack([t.clear for t in batch]))
    return hazy, clear


# -- state --------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    domains: list
    model: HazeMetaModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, config: TrainConfig, domains: Sequence[DomainSpec]) -> "TrainState":
        config.validate()
        torch.manual_seed(config.seed)
        model = build_model(config)
        opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(config.adam_beta1, config.adam_beta2))
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        return cls(config, list(domains), model, opt, rng)

    def to_blob(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "domains": [d.to_dict() for d in self.domains],
            "weights": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": {"numpy": _jsonable_state(self.rng.bit_generator.state), "torch": torch.get_rng_state()},
            "step": self.step,
        }

    def save(self, path) -> Path:
        return save_container(self.to_blob(), path)

    @classmethod
    def load(cls, path) -> "TrainState":
        blob = load_container(path)
        config = TrainConfig.from_dict(blob["config"])
        domains = [DomainSpec.from_dict(d) for d in blob["domains"]]
        model = build_model(config)
        model.load_state_dict(blob["weights"])
        opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(config.adam_beta1, config.adam_beta2))
        opt.load_state_dict(blob["optimizer"])
        rng = np.random.default_rng()
        rng.bit_generator.state = blob["rng"]["numpy"]
        torch.set_rng_state(blob["rng"]["torch"])
        return cls(config, domains, model, opt, rng, int(blob["step"]))


def _jsonable_state(state: dict) -> dict:
    return json.loads(json.dumps(state))


def load_model(path) -> HazeMetaModel:
    blob = load_container(path)
    model = build_model(TrainConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["weights"])
    return model.eval()


# -- training -----------------------------------------------------------------

def compute_losses(model: HazeMetaModel, batch: Sequence[Task], config: TrainConfig, extractor) -> dict:
    hazy, clear = batch_tensors(batch)
    N, K = hazy.shape[:2]
    preds, phi = model(hazy)
    x = hazy.reshape(N * K, *hazy.shape[2:])
    y = clear.reshape(N * K, *clear.shape[2:])
    comps = {
        "pixel": pixel_loss(preds, y, config.pixel_reduction),
        "ssim": ssim_loss(preds, y),
        "cr": cr_loss(preds, y, x, extractor),
    }
    zero = preds.new_zeros(())
    if config.dcr_enabled and phi is not None:
        labels = [config.train_domains.index(t.domain_id) for t in batch]
        probs = model.classifier(phi)
        comps["ce"] = ce_loss(probs, labels)
        conf = probs.detach()[torch.arange(N), torch.as_tensor(labels)].tolist()
        sel = select_positive([t.domain_id for t in batch], conf)
        comps["dcr"] = dcr_loss(sel, list(phi), config.cx_bandwidth, config.sigma, config.cx_normalize)
    else:
        comps["ce"] = zero
        comps["dcr"] = zero
    return comps


def train_step(state: TrainState, batch: Sequence[Task], extractor) -> tuple[TrainState, LossBreakdown]:
    """One optimizer step over all trainable weights. Mutates and returns ``state``."""
    config = state.config
    if config.dcr_enabled:
        doms = [t.domain_id for t in batch]
        if len(set(doms)) == len(doms) or len(set(doms)) < 2:
            raise ValueError(f"batch domains {doms} violate the pairing constraint")
    state.model.train()
    comps = compute_losses(state.model, batch, config, extractor)
    snapshot = {k: float(v.detach()) for k, v in comps.items()}
    try:
        total = weighted_total(comps, config.loss_weights)
    except NumericalError as exc:
        raise NumericalError(f"step {state.step}: {exc}", snapshot) from exc
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    return state, LossBreakdown(total=float(total.detach()), **snapshot)


def fit(config: TrainConfig, domains: Sequence[DomainSpec], workdir, clear_source: Sequence | None = None,
        resume=None) -> Path:
    """Train for ``config.max_steps`` steps; returns the path of the last checkpoint written.

    Writes ``checkpoints/step_XXXXXX.pt`` at start and every ``checkpoint_every``
    steps, ``checkpoints/final.pt`` at the end, and one JSON line per step to
    ``metrics.jsonl``.
    """
    workdir = Path(workdir)
    ckpt_dir = workdir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    config.validate()
    set_deterministic(config.deterministic)
    by_id = {d.id: d for d in domains}
    missing = [i for i in config.train_domains if i not in by_id]
    if missing:
        raise ConfigError(f"train.train_domains: no domain spec for ids {missing}")
    train_doms = [by_id[i] for i in config.train_domains]

    if resume is not None:
        state = TrainState.load(resume)
        mode = "a"
    else:
        state = TrainState.create(config, train_doms)
        mode = "w"
    if clear_source is None:
        clear_source = build_scene_bank(state.config)
    extractor = build_extractor(state.config)

    last = None
    if state.step == 0:
        last = state.save(ckpt_dir / "step_000000.pt")
    metrics_path = workdir / "metrics.jsonl"
    with open(metrics_path, mode) as fh:
        while state.step < state.config.max_steps:
            batch = sample_batch(train_doms, state.config, state.rng, clear_source)
            state, br = train_step(state, batch, extractor)
            fh.write(json.dumps({"step": state.step, **br.as_dict()}) + "\n")
            if state.step % 50 == 0:
                fh.flush()
                logger.info("step %d total %.4f pixel %.4f dcr %.4f", state.step, br.total, br.pixel, br.dcr)
            if state.config.checkpoint_every and state.step % state.config.checkpoint_every == 0:
                last = state.save(ckpt_dir / f"step_{state.step:06d}.pt")
    if state.config.max_steps > 0 or last is None:
        last = state.save(ckpt_dir / "final.pt")
    return last


# -- inference ----------------------------------------------------------------

def infer(checkpoint, hazy: np.ndarray, context: Sequence[np.ndarray] = ()) -> np.ndarray:
    """Dehaze a single image without any gradient computation or weight update."""
    model = checkpoint if isinstance(checkpoint, HazeMetaModel) else load_model(checkpoint)
    return model.restore(hazy, context)
