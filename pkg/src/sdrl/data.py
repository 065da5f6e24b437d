"""Synthetic bitemporal dataset: scene generation, tiling, splits, manifests.

Scenes are value-noise terrain with rectangular "buildings" in a distinct
texture. The second epoch re-renders the same terrain under a global
photometric drift, drops some buildings, and adds others; the change mask
is exactly the symmetric difference of the two epochs' building rasters.
Everything is deterministic given (config, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigInvalid, DataMissing, EmptyDataset, SceneTooSmall


@dataclass
class GeneratorConfig:
    size: int = 256
    building_count: Tuple[int, int] = (8, 16)
    building_size: Tuple[int, int] = (10, 28)
    rotation_prob: float = 0.5
    appearance_shift: float = 0.12
    change_rate: float = 0.3
    noise_octaves: int = 3

    def validate(self) -> None:
        if self.size < 8:
            raise ConfigInvalid(f"scene size {self.size} too small")
        lo, hi = self.building_count
        slo, shi = self.building_size
        if not (0 <= lo <= hi) or not (2 <= slo <= shi):
            raise ConfigInvalid(f"bad building ranges: count={self.building_count} size={self.building_size}")
        if shi >= self.size // 2:
            raise ConfigInvalid(f"buildings of size {shi} do not fit a {self.size} scene")
        for name in ("rotation_prob", "appearance_shift", "change_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigInvalid(f"{name} must be in [0,1], got {v}")
        if self.noise_octaves < 1:
            raise ConfigInvalid("noise_octaves must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["building_count"] = list(self.building_count)
        d["building_size"] = list(self.building_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["building_count"] = tuple(d["building_count"])
        d["building_size"] = tuple(d["building_size"])
        return cls(**d)


@dataclass
class BuildingSpec:
    cx: float
    cy: float
    w: float
    h: float
    angle: float
    albedo: Tuple[float, float, float]
    present_t1: bool
    present_t2: bool
    texture_seed: int = 0

    @property
    def changed(self) -> bool:
        return self.present_t1 != self.present_t2


@dataclass
class Scene:
    image_t1: np.ndarray  # (H, W, 3) float32 in [0,1]
    image_t2: np.ndarray
    building_mask: np.ndarray  # (H, W) uint8, registered to t1
    change_mask: np.ndarray  # (H, W) uint8
    buildings: List[BuildingSpec]


def value_noise(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    """Multi-octave bilinear value noise in [0,1], (size, size) float32."""
    out = np.zeros((size, size), dtype=np.float64)
    amp_total = 0.0
    for o in range(octaves):
        cells = min(4 * (2 ** o), size)
        amp = 0.5 ** o
        grid = rng.random((cells + 1, cells + 1))
        pos = np.linspace(0.0, cells, size, endpoint=False)
        i0 = pos.astype(int)
        frac = pos - i0
        # bilinear interpolation of the coarse grid
        top = grid[np.ix_(i0, i0)] * np.outer(1 - frac, 1 - frac) \
            + grid[np.ix_(i0, i0 + 1)] * np.outer(1 - frac, frac) \
            + grid[np.ix_(i0 + 1, i0)] * np.outer(frac, 1 - frac) \
            + grid[np.ix_(i0 + 1, i0 + 1)] * np.outer(frac, frac)
        out += amp * top
        amp_total += amp
    return (out / amp_total).astype(np.float32)


def rasterize_rect(size: int, b: BuildingSpec) -> np.ndarray:
    """Boolean (size, size) footprint of a rotated rectangle, pixel centres."""
    half_diag = 0.5 * math.hypot(b.w, b.h)
    y0 = max(0, int(b.cy - half_diag) - 1)
    y1 = min(size, int(b.cy + half_diag) + 2)
    x0 = max(0, int(b.cx - half_diag) - 1)
    x1 = min(size, int(b.cx + half_diag) + 2)
    out = np.zeros((size, size), dtype=bool)
    if y0 >= y1 or x0 >= x1:
        return out
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs + 0.5 - b.cx
    dy = ys + 0.5 - b.cy
    c, s = math.cos(b.angle), math.sin(b.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    out[y0:y1, x0:x1] = (np.abs(u) <= b.w / 2) & (np.abs(v) <= b.h / 2)
    return out


def _render_background(rng: np.random.Generator, cfg: GeneratorConfig) -> np.ndarray:
    base = np.array([0.34, 0.40, 0.30], dtype=np.float32)
    terrain = value_noise(rng, cfg.size, cfg.noise_octaves)
    img = base[None, None, :] + 0.25 * (terrain[:, :, None] - 0.5)
    img += 0.03 * rng.standard_normal((cfg.size, cfg.size, 3)).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _paint_building(img: np.ndarray, footprint: np.ndarray, b: BuildingSpec,
                    gains: Optional[np.ndarray] = None, offset: float = 0.0) -> None:
    """Render a building with its own frozen texture so both epochs agree."""
    albedo = np.asarray(b.albedo, dtype=np.float32)
    tex_rng = np.random.default_rng(b.texture_seed)
    texture = 0.05 * tex_rng.standard_normal((int(footprint.sum()), 3)).astype(np.float32)
    pixels = albedo[None, :] + texture
    if gains is not None:
        pixels = pixels * gains[None, :] + np.float32(offset)
    img[footprint] = np.clip(pixels, 0.0, 1.0)


def generate_scene(cfg: GeneratorConfig, rng: np.random.Generator) -> Scene:
    cfg.validate()
    n = int(rng.integers(cfg.building_count[0], cfg.building_count[1] + 1))
    margin = cfg.building_size[1]
    buildings: List[BuildingSpec] = []
    for _ in range(n):
        w = float(rng.uniform(*cfg.building_size))
        h = float(rng.uniform(*cfg.building_size))
        angle = float(rng.uniform(0, math.pi / 2)) if rng.random() < cfg.rotation_prob else 0.0
        cx = float(rng.uniform(margin, cfg.size - margin))
        cy = float(rng.uniform(margin, cfg.size - margin))
        brightness = float(rng.uniform(0.55, 0.82))
        albedo = (brightness * 1.05, brightness * 0.92, brightness * 0.88)
        removed = rng.random() < cfg.change_rate / 2
        buildings.append(BuildingSpec(cx, cy, w, h, angle, albedo,
                                      present_t1=True, present_t2=not removed,
                                      texture_seed=int(rng.integers(2 ** 31))))
    n_added = int(rng.binomial(max(n, 1), cfg.change_rate / 2)) if cfg.change_rate > 0 else 0
    for _ in range(n_added):
        w = float(rng.uniform(*cfg.building_size))
        h = float(rng.uniform(*cfg.building_size))
        angle = float(rng.uniform(0, math.pi / 2)) if rng.random() < cfg.rotation_prob else 0.0
        cx = float(rng.uniform(margin, cfg.size - margin))
        cy = float(rng.uniform(margin, cfg.size - margin))
        brightness = float(rng.uniform(0.55, 0.82))
        albedo = (brightness * 1.05, brightness * 0.92, brightness * 0.88)
        buildings.append(BuildingSpec(cx, cy, w, h, angle, albedo,
                                      present_t1=False, present_t2=True,
                                      texture_seed=int(rng.integers(2 ** 31))))

    background = _render_background(rng, cfg)
    footprints = [rasterize_rect(cfg.size, b) for b in buildings]

    s = cfg.appearance_shift
    gains = rng.uniform(1 - s, 1 + s, size=3).astype(np.float32)
    offset = float(rng.uniform(-0.4 * s, 0.4 * s))

    image_t1 = background.copy()
    for b, fp in zip(buildings, footprints):
        if b.present_t1:
            _paint_building(image_t1, fp, b)

    image_t2 = np.clip(background * gains[None, None, :] + offset, 0.0, 1.0)
    for b, fp in zip(buildings, footprints):
        if b.present_t2:
            _paint_building(image_t2, fp, b, gains=gains, offset=offset)

    # independent per-epoch sensor noise so a raw pixel diff is never clean
    image_t1 = np.clip(image_t1 + 0.01 * rng.standard_normal(image_t1.shape).astype(np.float32), 0.0, 1.0)
    image_t2 = np.clip(image_t2 + 0.01 * rng.standard_normal(image_t2.shape).astype(np.float32), 0.0, 1.0)

    raster_t1 = np.zeros((cfg.size, cfg.size), dtype=bool)
    raster_t2 = np.zeros((cfg.size, cfg.size), dtype=bool)
    for b, fp in zip(buildings, footprints):
        if b.present_t1:
            raster_t1 |= fp
        if b.present_t2:
            raster_t2 |= fp

    return Scene(
        image_t1=image_t1,
        image_t2=image_t2,
        building_mask=raster_t1.astype(np.uint8),
        change_mask=(raster_t1 ^ raster_t2).astype(np.uint8),
        buildings=buildings,
    )


# ---------------------------------------------------------------------------
# tiling, splits, subsets


@dataclass
class PatchRecord:
    patch_id: str
    scene_id: str
    y: int
    x: int
    split: str = ""
    image_t1: str = ""
    image_t2: str = ""
    mask: str = ""
    change: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PatchRecord":
        return cls(**d)


def tile_and_filter(scene: Scene, scene_id: str, patch_size: int,
                    require_foreground: bool) -> List[PatchRecord]:
    """Non-overlapping grid records; partial edge tiles dropped."""
    h, w = scene.building_mask.shape
    if h < patch_size or w < patch_size:
        raise SceneTooSmall(f"scene {scene_id} is {h}x{w}, smaller than patch {patch_size}")
    records = []
    for y in range(0, h - patch_size + 1, patch_size):
        for x in range(0, w - patch_size + 1, patch_size):
            if require_foreground and not scene.building_mask[y : y + patch_size, x : x + patch_size].any():
                continue
            records.append(PatchRecord(
                patch_id=f"{scene_id}_y{y}_x{x}",
                scene_id=scene_id,
                y=y, x=x,
                image_t1=f"scenes/{scene_id}/t1.png",
                image_t2=f"scenes/{scene_id}/t2.png",
                mask=f"scenes/{scene_id}/mask.png",
                change=f"scenes/{scene_id}/change.png",
            ))
    return records


def split(records: Sequence[PatchRecord], fractions: Dict[str, float],
          rng: np.random.Generator) -> List[PatchRecord]:
    """Assign split labels by seeded shuffle; counts track fraction*N within 1."""
    if not records:
        raise EmptyDataset("no records to split")
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigInvalid(f"split fractions sum to {total}, expected 1")
    order = list(records)
    rng.shuffle(order)
    n = len(order)
    cum = 0.0
    start = 0
    for name, frac in fractions.items():
        cum += frac
        stop = round(cum * n)
        for rec in order[start:stop]:
            rec.split = name
        start = stop
    return order


def label_fraction_subset(records: Sequence[PatchRecord], fraction: float,
                          seed: int) -> List[PatchRecord]:
    """First ceil(fraction*N) of one seeded shuffle; subsets nest across fractions."""
    if not records:
        raise EmptyDataset("no records to subset")
    if not 0.0 < fraction <= 1.0:
        raise ConfigInvalid(f"label fraction must be in (0,1], got {fraction}")
    order = sorted(records, key=lambda r: r.patch_id)
    np.random.default_rng(seed).shuffle(order)
    keep = math.ceil(fraction * len(order))
    return order[:keep]


# ---------------------------------------------------------------------------
# storage


@dataclass
class Manifest:
    name: str
    patch_size: int
    seed: int
    generator: dict
    records: List[PatchRecord] = field(default_factory=list)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            header = {"kind": "header", "name": self.name, "patch_size": self.patch_size,
                      "seed": self.seed, "generator": self.generator}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps({"kind": "patch", **rec.to_dict()}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataMissing(f"manifest not found: {path}")
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or lines[0].get("kind") != "header":
            raise DataMissing(f"{path}: missing manifest header line")
        head = lines[0]
        records = []
        for doc in lines[1:]:
            doc = dict(doc)
            doc.pop("kind", None)
            records.append(PatchRecord.from_dict(doc))
        return cls(name=head["name"], patch_size=head["patch_size"], seed=head["seed"],
                   generator=head["generator"], records=records)


def _save_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.ndim == 3:
        img = Image.fromarray(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8), mode="RGB")
    else:
        img = Image.fromarray((arr * 255).astype(np.uint8), mode="L")
    img.save(path)


def save_scene(root, scene_id: str, scene: Scene) -> None:
    base = Path(root) / "scenes" / scene_id
    _save_png(base / "t1.png", scene.image_t1)
    _save_png(base / "t2.png", scene.image_t2)
    _save_png(base / "mask.png", scene.building_mask)
    _save_png(base / "change.png", scene.change_mask)


@lru_cache(maxsize=64)
def _load_scene_arrays(root: str, scene_id: str) -> Tuple[np.ndarray, ...]:
    base = Path(root) / "scenes" / scene_id
    if not (base / "t1.png").exists():
        raise DataMissing(f"scene files missing under {base}")
    t1 = np.asarray(Image.open(base / "t1.png"), dtype=np.float32) / 255.0
    t2 = np.asarray(Image.open(base / "t2.png"), dtype=np.float32) / 255.0
    mask = (np.asarray(Image.open(base / "mask.png")) > 127).astype(np.uint8)
    change = (np.asarray(Image.open(base / "change.png")) > 127).astype(np.uint8)
    return t1, t2, mask, change


def load_patch(root, record: PatchRecord, patch_size: int) -> dict:
    t1, t2, mask, change = _load_scene_arrays(str(root), record.scene_id)
    sl = np.s_[record.y : record.y + patch_size, record.x : record.x + patch_size]
    return {
        "image_t1": t1[sl],
        "image_t2": t2[sl],
        "mask": mask[sl],
        "change": change[sl],
    }


def generate_dataset(
    root,
    name: str,
    n_scenes: int,
    patch_size: int,
    seed: int,
    generator: Optional[GeneratorConfig] = None,
    fractions: Optional[Dict[str, float]] = None,
    require_foreground: bool = True,
) -> Manifest:
    """Generate scenes, tile them, split, and persist everything under root."""
    cfg = generator or GeneratorConfig()
    cfg.validate()
    if n_scenes < 1:
        raise ConfigInvalid("n_scenes must be >= 1")
    fractions = fractions or {"train": 0.8, "val": 0.2}
    rng = np.random.default_rng(seed)
    records: List[PatchRecord] = []
    for idx in range(n_scenes):
        scene_id = f"s{idx:04d}"
        scene = generate_scene(cfg, np.random.default_rng(rng.integers(2 ** 63)))
        save_scene(root, scene_id, scene)
        records.extend(tile_and_filter(scene, scene_id, patch_size, require_foreground))
    if not records:
        raise EmptyDataset("no patches survived tiling/filtering")
    records = split(records, fractions, np.random.default_rng(seed + 1))
    manifest = Manifest(name=name, patch_size=patch_size, seed=seed,
                        generator=cfg.to_dict(), records=records)
    manifest.save(Path(root) / "manifest.jsonl")
    return manifest
