"""Synthetic multi-domain haze data.

Hazy images follow the atmospheric scattering model

    I = J * t + A * (1 - t),    t = exp(-beta * d)

with clear radiance J, depth d, scattering coefficient beta and airlight A.
Each domain draws (beta, A) from its own ranges and scales depth by a bias
factor, which stands in for per-dataset depth estimation error.

Images are float32 numpy arrays shaped (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from hazemeta import DataError

logger = logging.getLogger(__name__)

MIN_SIDE = 16
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class DomainSpec:
    id: int
    beta_range: tuple[float, float]
    A_range: tuple[float, float]
    depth_bias: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        b0, b1 = self.beta_range
        a0, a1 = self.A_range
        if not (0 < b0 <= b1):
            raise ValueError(f"domain {self.id}: beta_range must satisfy 0 < min <= max, got {self.beta_range}")
        if not (0 < a0 <= a1 <= 1.0):
            raise ValueError(f"domain {self.id}: A_range must lie in (0, 1], got {self.A_range}")
        if not self.depth_bias > 0:
            raise ValueError(f"domain {self.id}: depth_bias must be > 0, got {self.depth_bias}")

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(
            id=int(d["id"]),
            beta_range=tuple(float(v) for v in d["beta_range"]),
            A_range=tuple(float(v) for v in d["A_range"]),
            depth_bias=float(d.get("depth_bias", 1.0)),
            rng_seed=int(d.get("rng_seed", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "beta_range": list(self.beta_range),
            "A_range": list(self.A_range),
            "depth_bias": self.depth_bias,
            "rng_seed": self.rng_seed,
        }


def default_domains() -> list[DomainSpec]:
    """Two training domains and one held-out domain (index 2)."""
    return [
        DomainSpec(0, (0.4, 0.8), (0.8, 1.0), 1.0, rng_seed=100),
        DomainSpec(1, (1.0, 1.6), (0.7, 0.9), 1.3, rng_seed=101),
        DomainSpec(2, (1.8, 2.4), (0.85, 1.0), 0.8, rng_seed=102),
    ]


@dataclass
class SamplePair:
    hazy: np.ndarray
    clear: np.ndarray
    domain_id: int = 0

    def __post_init__(self):
        if self.hazy.shape != self.clear.shape:
            raise ValueError(f"hazy {self.hazy.shape} and clear {self.clear.shape} differ in shape")


@dataclass
class Task:
    pairs: list[SamplePair]
    domain_id: int

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("a task needs at least one pair")
        if any(p.domain_id != self.domain_id for p in self.pairs):
            raise ValueError("all pairs of a task must share its domain_id")

    def __len__(self):
        return len(self.pairs)

    @property
    def hazy(self) -> np.ndarray:
        return np.stack([p.hazy for p in self.pairs])

    @property
    def clear(self) -> np.ndarray:
        return np.stack([p.clear for p in self.pairs])


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must be shaped (H, W, 3), got {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ValueError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError(f"{name} values must be finite and in [0, 1]")
    return img


def transmission_map(depth: np.ndarray, beta: float) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth map contains non-finite entries")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return np.exp(-beta * depth)


def synthesize_hazy(clear: np.ndarray, depth: np.ndarray, beta: float, A) -> np.ndarray:
    """Render haze over ``clear`` and clip to [0, 1].

    ``A`` is a scalar airlight or a per-channel triple.
    """
    clear = np.asarray(clear)
    depth = np.asarray(depth)
    if clear.shape[:2] != depth.shape:
        raise ValueError(f"clear {clear.shape[:2]} and depth {depth.shape} must share H x W")
    A_arr = np.asarray(A, dtype=np.float64)
    if np.any(A_arr <= 0) or np.any(A_arr > 1):
        raise ValueError(f"airlight must lie in (0, 1], got {A}")
    t = transmission_map(depth, beta)[..., None]
    hazy = clear.astype(np.float64) * t + A_arr * (1.0 - t)
    return np.clip(hazy, 0.0, 1.0).astype(clear.dtype if clear.dtype.kind == "f" else np.float32)


def invert_hazy(hazy: np.ndarray, depth: np.ndarray, beta: float, A) -> np.ndarray:
    """Analytic inverse J = (I - A(1 - t)) / t. Unclipped."""
    t = transmission_map(depth, beta)[..., None]
    return (np.asarray(hazy, dtype=np.float64) - np.asarray(A, dtype=np.float64) * (1.0 - t)) / t


# -- procedural scenes ---------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    height: int = 80
    width: int = 80
    base_sigma: float = 10.0      # smoothness of the large-scale colour field (pixels)
    texture_sigma: float = 1.5
    texture_amp: float = 0.12
    n_objects: int = 4
    depth_near: float = 0.3
    depth_far: float = 1.5
    depth_noise: float = 0.15


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    sigmas = (sigma, sigma) + (0,) * (len(shape) - 2)
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigmas, mode="wrap")
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo + 1e-12)


def procedural_clear_and_depth(config: GenConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random outdoor-like scene: sky-to-ground depth ramp, smooth colour field,
    fine texture and a few nearer rectangular objects."""
    h, w = config.height, config.width
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"scene must be at least {MIN_SIDE}x{MIN_SIDE}")

    rows = np.linspace(0.0, 1.0, h)[:, None]
    horizon = rng.uniform(0.2, 0.5)
    # far at the top of the frame, near at the bottom
    ramp = np.clip((1.0 - rows) / (1.0 - horizon), 0.0, 1.0) ** rng.uniform(0.8, 1.6)
    depth = config.depth_near + (config.depth_far - config.depth_near) * np.broadcast_to(ramp, (h, w))
    depth = depth + config.depth_noise * (_smooth_noise(rng, (h, w), config.base_sigma) - 0.5)

    palette = rng.uniform(0.1, 0.9, size=(2, 3))
    mix = _smooth_noise(rng, (h, w), config.base_sigma)[..., None]
    clear = palette[0] * (1 - mix) + palette[1] * mix
    clear = clear + config.texture_amp * (_smooth_noise(rng, (h, w, 3), config.texture_sigma) - 0.5)

    for _ in range(config.n_objects):
        oh = int(rng.integers(h // 8, h // 3 + 1))
        ow = int(rng.integers(w // 8, w // 3 + 1))
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow + 1))
        colour = rng.uniform(0.05, 0.95, size=3)
        shade = 0.85 + 0.3 * _smooth_noise(rng, (oh, ow), 2.0)[..., None]
        clear[top:top + oh, left:left + ow] = colour * shade
        obj_depth = depth[top + oh - 1, left:left + ow].mean() * rng.uniform(0.6, 0.95)
        depth[top:top + oh, left:left + ow] = np.minimum(depth[top:top + oh, left:left + ow], obj_depth)

    depth = np.maximum(ndimage.gaussian_filter(depth, 1.0, mode="nearest"), 0.0)
    clear = np.clip(clear, 0.02, 0.98)
    return clear.astype(np.float32), depth.astype(np.float32)


class SceneBank(Sequence):
    """Read-only collection of (clear, depth) scenes used as the haze-free source."""

    def __init__(self, scenes: Iterable[tuple[np.ndarray, np.ndarray]]):
        self._scenes = [(np.asarray(c, dtype=np.float32), np.asarray(d, dtype=np.float32)) for c, d in scenes]
        for c, _ in self._scenes:
            c.setflags(write=False)

    @classmethod
    def procedural(cls, n: int, config: GenConfig = GenConfig(), seed: int = 0) -> "SceneBank":
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
        return cls(procedural_clear_and_depth(config, r) for r in rngs)

    def __len__(self):
        return len(self._scenes)

    def __getitem__(self, i):
        return self._scenes[i]


def make_task(domain: DomainSpec, clear_source: Sequence, K: int, rng: np.random.Generator) -> Task:
    """Draw K hazy/clear pairs from ``domain``; haze parameters are drawn per pair."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if len(clear_source) == 0:
        raise DataError("clear source is empty")
    replace = K > len(clear_source)
    idx = rng.choice(len(clear_source), size=K, replace=replace)
    pairs = [haze_scene(domain, *clear_source[int(i)], rng) for i in idx]
    return Task(pairs, domain.id)


def haze_scene(domain: DomainSpec, clear: np.ndarray, depth: np.ndarray, rng: np.random.Generator) -> SamplePair:
    """Haze one scene with parameters drawn from the domain's ranges."""
    beta = rng.uniform(*domain.beta_range)
    A = rng.uniform(*domain.A_range)
    hazy = synthesize_hazy(clear, depth * domain.depth_bias, beta, A)
    return SamplePair(hazy, clear, domain.id)


def augment_pair(hazy: np.ndarray, clear: np.ndarray, crop: int, rng: np.random.Generator):
    """Random crop, flip and 90-degree rotation applied identically to both images."""
    h, w = hazy.shape[:2]
    if crop > min(h, w):
        raise ValueError(f"crop {crop} exceeds image size {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    hz = hazy[top:top + crop, left:left + crop]
    cl = clear[top:top + crop, left:left + crop]
    if rng.random() < 0.5:
        hz, cl = hz[:, ::-1], cl[:, ::-1]
    k = int(rng.integers(0, 4))
    hz, cl = np.rot90(hz, k), np.rot90(cl, k)
    return np.ascontiguousarray(hz), np.ascontiguousarray(cl)


# -- file IO ------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def save_image(img: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="RGB").save(path)


def _try_load(path: Path):
    try:
        img = load_image(path)
    except Exception as exc:  # undecodable files are skipped, not fatal
        logger.warning("skipping %s: %s", path, exc)
        return None
    if min(img.shape[:2]) < MIN_SIDE:
        logger.warning("skipping %s: smaller than %dx%d", path, MIN_SIDE, MIN_SIDE)
        return None
    return img


def _image_files(folder: Path):
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def ingest_image_folder(path, paired: bool = True, domain_id: int = 0,
                        hazy_dir: str = "hazy", clear_dir: str = "clear"):
    """Load a folder of 8-bit RGB images.

    In paired mode ``path`` must contain ``hazy/`` and ``clear/`` subfolders and
    images are matched by filename stem; a list of SamplePair is returned.
    Otherwise every image directly inside ``path`` is returned as a hazy-only
    list of arrays.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")

    if not paired:
        images = [img for img in map(_try_load, _image_files(root)) if img is not None]
        if not images:
            raise DataError(f"no usable images in {root}")
        return images

    hz_root, cl_root = root / hazy_dir, root / clear_dir
    if not hz_root.is_dir() or not cl_root.is_dir():
        raise DataError(f"paired mode expects {hazy_dir}/ and {clear_dir}/ under {root}")
    clear_by_stem = {p.stem: p for p in _image_files(cl_root)}
    pairs = []
    for hp in _image_files(hz_root):
        cp = clear_by_stem.get(hp.stem)
        if cp is None:
            logger.warning("no clear counterpart for %s", hp.name)
            continue
        hz, cl = _try_load(hp), _try_load(cp)
        if hz is None or cl is None:
            continue
        if hz.shape != cl.shape:
            logger.warning("skipping %s: hazy %s vs clear %s", hp.stem, hz.shape, cl.shape)
            continue
        pairs.append(SamplePair(hz, cl, domain_id))
    if not pairs:
        raise DataError(f"no usable hazy/clear pairs in {root}")
    return pairs


def write_manifest(records: Iterable[dict], path) -> None:
    """JSON-lines manifest, one ``{hazy_path, clear_path, domain_id}`` per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"hazy_path": str(r["hazy_path"]), "clear_path": str(r["clear_path"]),
                                 "domain_id": int(r["domain_id"])}) + "\n")


def read_manifest(path) -> list[SamplePair]:
    path = Path(path)
    base = path.parent
    pairs = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            hz = load_image(base / rec["hazy_path"])
            cl = load_image(base / rec["clear_path"])
            pairs.append(SamplePair(hz, cl, int(rec["domain_id"])))
    if not pairs:
        raise DataError(f"manifest {path} lists no pairs")
    return pairs


def synthesize_split(out_dir, domains: Sequence[DomainSpec], n_per_domain: int, split: str,
                     config: GenConfig = GenConfig(), seed: int = 0) -> Path:
    """Render ``n_per_domain`` pairs per domain to PNG and write ``<split>.jsonl``."""
    out_dir = Path(out_dir)
    records = []
    for dom in domains:
        ss = np.random.SeedSequence([seed, dom.rng_seed, zlib.crc32(split.encode())])
        scene_seed, haze_seed = ss.spawn(2)
        bank = SceneBank.procedural(n_per_domain, config, seed=int(scene_seed.generate_state(1)[0]))
        rng = np.random.default_rng(haze_seed)
        for i in range(n_per_domain):
            pair = haze_scene(dom, *bank[i], rng)
            stem = f"d{dom.id}_{i:05d}"
            hz_rel = os.path.join(split, "hazy", stem + ".png")
            cl_rel = os.path.join(split, "clear", stem + ".png")
            save_image(pair.hazy, out_dir / hz_rel)
            save_image(pair.clear, out_dir / cl_rel)
            records.append({"hazy_path": hz_rel, "clear_path": cl_rel, "domain_id": dom.id})
    manifest = out_dir / f"{split}.jsonl"
    write_manifest(records, manifest)
    return manifest
