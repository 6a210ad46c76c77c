"""Procedural blob-crowd scenes with exactly known dot annotations.

Each scene is a tag-dependent background (flat gray, gradient, checker, or
low-frequency noise) with anti-aliased bright discs whose centers are the
annotation ground truth.  Scenes are pure functions of their seed, so whole
corpora are reproducible from one master seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import annotations as ann
from .errors import ConfigError
from .rng import child_seed, make_rng

NUM_TAGS = 4
MIN_SEPARATION = 2.0
BORDER_MARGIN = 6.0  # keeps density kernels fully interior
DISC_RADIUS_RANGE = (1.5, 3.0)
CONTRAST_RANGE = (0.45, 0.7)


@dataclass(frozen=True)
class SceneSpec:
    n: int
    tag: int
    seed: int
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.n < 0:
            raise ConfigError(f"object count must be >= 0, got {self.n}")
        if not 0 <= self.tag < NUM_TAGS:
            raise ConfigError(f"tag {self.tag} outside 0..{NUM_TAGS - 1}")


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.tag == 0:  # flat gray
        return np.full((h, w), rng.uniform(-0.4, 0.1), dtype=np.float64)
    if spec.tag == 1:  # linear gradient along a random direction
        v0, v1 = sorted(rng.uniform(-0.5, 0.2, size=2))
        theta = rng.uniform(0.0, 2.0 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        proj = np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1)
        lo, hi = proj.min(), proj.max()
        unit = (proj - lo) / (hi - lo) if hi > lo else np.zeros_like(proj)
        return v0 + (v1 - v0) * unit
    if spec.tag == 2:  # checkerboard
        cell = int(rng.integers(6, 13))
        a, b = rng.uniform(-0.5, -0.25), rng.uniform(-0.15, 0.1)
        yy, xx = np.mgrid[0:h, 0:w]
        return np.where(((xx // cell) + (yy // cell)) % 2 == 0, a, b).astype(np.float64)
    # low-frequency noise: bilinear upsample of a coarse random field
    coarse = rng.uniform(-0.5, 0.2, size=(8, 8))
    ys = np.linspace(0, coarse.shape[0] - 1, h)
    xs = np.linspace(0, coarse.shape[1] - 1, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, coarse.shape[0] - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, coarse.shape[1] - 2)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx


def _place_dots(spec: SceneSpec, rng: np.random.Generator) -> list[tuple[float, float]]:
    lo_x, hi_x = BORDER_MARGIN, spec.width - 1 - BORDER_MARGIN
    lo_y, hi_y = BORDER_MARGIN, spec.height - 1 - BORDER_MARGIN
    if spec.n > 0 and (hi_x <= lo_x or hi_y <= lo_y):
        raise ConfigError(f"scene {spec.width}x{spec.height} too small for interior dots")
    points: list[tuple[float, float]] = []
    attempts = 0
    while len(points) < spec.n:
        attempts += 1
        if attempts > 1000 * max(spec.n, 1):
            raise ConfigError(f"cannot place {spec.n} dots with separation {MIN_SEPARATION}")
        # quantize to the 0.1 px placement grid used by the annotation contract
        x = round(rng.uniform(lo_x, hi_x), 1)
        y = round(rng.uniform(lo_y, hi_y), 1)
        if all((x - px) ** 2 + (y - py) ** 2 >= MIN_SEPARATION**2 for px, py in points):
            points.append((x, y))
    return points


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, ann.DotMap]:
    """Render one scene; deterministic for a fixed spec."""
    rng = make_rng(spec.seed)
    background = _background(spec, rng)
    points = _place_dots(spec, rng)
    img = background.copy()
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    for x, y in points:
        radius = rng.uniform(*DISC_RADIUS_RANGE)
        contrast = rng.uniform(*CONTRAST_RANGE)
        dist = np.sqrt((xx - x) ** 2 + (yy - y) ** 2)
        alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)  # anti-aliased edge
        local = background[int(round(y)), int(round(x))]  # contrast vs the scene, not other discs
        img = img * (1.0 - alpha) + alpha * min(local + contrast, 1.0)
    dots = ann.DotMap(points=tuple(points), width=spec.width, height=spec.height)
    return np.clip(img, -1.0, 1.0).astype(np.float32), dots


@dataclass
class CorpusConfig:
    train_scenes: int = 200
    test_scenes: int = 50
    width: int = 64
    height: int = 64
    max_count: int = 30
    kernel_variance: float = ann.DEFAULT_KERNEL_VARIANCE
    seed: int = 0


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    split: str
    n: int
    tag: int
    seed: int


def generate_corpus(config: CorpusConfig, root: Path) -> list[SceneRecord]:
    """Write train/test scene triples (.pgm, .dots, .dmap) plus a manifest."""
    root = Path(root)
    records = []
    index = 0
    for split, total in (("train", config.train_scenes), ("test", config.test_scenes)):
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i in range(total):
            scene_seed = child_seed(config.seed, index)
            rng = make_rng(child_seed(scene_seed, 0))
            spec = SceneSpec(
                n=int(rng.integers(0, config.max_count + 1)),
                tag=int(rng.integers(0, NUM_TAGS)),
                seed=child_seed(scene_seed, 1),
                width=config.width,
                height=config.height,
            )
            img, dots = generate_scene(spec)
            scene_id = f"{split}_{i:04d}"
            (split_dir / f"{scene_id}.pgm").write_bytes(ann.write_pgm(img))
            (split_dir / f"{scene_id}.dots").write_text(ann.write_dots(dots))
            dmap = ann.render_density(dots, config.kernel_variance)
            (split_dir / f"{scene_id}.dmap").write_bytes(ann.write_density(dmap))
            records.append(SceneRecord(scene_id, split, spec.n, spec.tag, spec.seed))
            index += 1
    manifest = [r.__dict__ for r in records]
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return records


@dataclass
class Scene:
    """One loaded scene triple."""

    scene_id: str
    image: np.ndarray
    dots: ann.DotMap
    dmap: ann.DensityMap
    tag: int


def load_split(root: Path, split: str) -> list[Scene]:
    """Load every scene of a split, ordered by scene id."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    scenes = []
    for entry in manifest:
        if entry["split"] != split:
            continue
        base = root / split / entry["scene_id"]
        scenes.append(
            Scene(
                scene_id=entry["scene_id"],
                image=ann.read_pgm(base.with_suffix(".pgm").read_bytes()),
                dots=ann.parse_dots(base.with_suffix(".dots").read_text()),
                dmap=ann.read_density(base.with_suffix(".dmap").read_bytes()),
                tag=entry["tag"],
            )
        )
    return scenes


def mixed_sampler(real: list, synthetic: list, ratio: float, seed: int):
    """Endless stream drawing synthetic items with probability `ratio`,
    then uniformly within the chosen set; deterministic per seed."""
    if not 0 <= ratio <= 1:
        raise ConfigError(f"ratio must lie in [0, 1], got {ratio}")
    if not real:
        raise ConfigError("real set must be nonempty")
    if ratio > 0 and not synthetic:
        raise ConfigError("synthetic set must be nonempty when ratio > 0")
    rng = make_rng(seed)
    while True:
        take_synthetic = rng.random() < ratio
        if take_synthetic:
            yield synthetic[int(rng.integers(0, len(synthetic)))]
        else:
            yield real[int(rng.integers(0, len(real)))]
