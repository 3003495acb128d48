"""Synthetic fundus-like corpora with known class cues.

Every image shows a dark circular fundus field with a bright optic disc at
a random position and a paler inner cup.  DR images additionally carry a
few small lesion blobs that are visible in the green channel only.
Glaucoma images have a cup-to-disc diameter ratio of at least 0.7; the
other classes stay at or below 0.4.  Generation is a pure function of
``(config, index)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .datahub import TARGET_CLASSES, ImageRecord, LabelSpace, PooledDataset, count_strata, write_manifest

PAPER_RATIO = {"Healthy": 2185, "DR": 727, "Glaucoma": 199}

FIELD_RADIUS = 0.46  # fraction of side
DISC_RADIUS = 0.09
BACKGROUND_RGB = np.array([0.62, 0.24, 0.10])
DISC_RGB = np.array([0.93, 0.70, 0.42])
CUP_RGB = np.array([0.99, 0.90, 0.80])
CUP_RATIO = {"normal": (0.25, 0.40), "glaucoma": (0.70, 0.85)}
LESION_COUNT = (3, 8)
LESION_GREEN = 0.45
PIXEL_NOISE = 0.01


@dataclass(frozen=True)
class SynthConfig:
    side: int = 128
    n_per_class: tuple[int, int, int] = (50, 50, 50)
    seed: int = 0
    imbalance: str = "balanced"  # or "paper-ratio"
    base: int = 100  # Healthy count in paper-ratio mode
    source: str = "synth"

    def __post_init__(self):
        object.__setattr__(self, "n_per_class", tuple(int(n) for n in self.n_per_class))
        if self.side < 64:
            raise ValueError("side must be >= 64")
        if self.imbalance not in ("balanced", "paper-ratio"):
            raise ValueError(f"unknown imbalance mode {self.imbalance!r}")
        if len(self.n_per_class) != 3 or any(n <= 0 for n in self.counts()):
            raise ValueError("need three positive class counts")

    def counts(self) -> tuple[int, int, int]:
        if self.imbalance == "paper-ratio":
            h = PAPER_RATIO["Healthy"]
            return tuple(max(1, round(self.base * PAPER_RATIO[c] / h)) for c in TARGET_CLASSES)
        return self.n_per_class

    def labels(self) -> list[str]:
        return [c for c, n in zip(TARGET_CLASSES, self.counts()) for _ in range(n)]


@dataclass(frozen=True)
class SampleGeometry:
    label: str
    disc_center: tuple[float, float]
    disc_radius: float
    cup_ratio: float
    lesions: tuple[tuple[float, float, float], ...]  # (cx, cy, sigma)


def _soft_disc(dist: np.ndarray, radius: float, edge: float = 0.8) -> np.ndarray:
    return 1.0 / (1.0 + np.exp((dist - radius) / edge))


def sample_geometry(cfg: SynthConfig, index: int, label: str) -> SampleGeometry:
    rng = np.random.default_rng([cfg.seed, index, 0])
    side = cfg.side
    c = side / 2
    field_r = FIELD_RADIUS * side
    disc_r = DISC_RADIUS * side * rng.uniform(0.9, 1.1)
    angle = rng.uniform(0, 2 * np.pi)
    dist = rng.uniform(0.15, 0.5) * field_r
    disc = (c + dist * np.cos(angle), c + dist * np.sin(angle))
    lo, hi = CUP_RATIO["glaucoma" if label == "Glaucoma" else "normal"]
    cup_ratio = rng.uniform(lo, hi)
    lesions = []
    if label == "DR":
        lrng = np.random.default_rng([cfg.seed, index, 1])
        n = lrng.integers(LESION_COUNT[0], LESION_COUNT[1] + 1)
        while len(lesions) < n:
            a = lrng.uniform(0, 2 * np.pi)
            r = field_r * np.sqrt(lrng.uniform(0, 0.8**2))
            x, y = c + r * np.cos(a), c + r * np.sin(a)
            if np.hypot(x - disc[0], y - disc[1]) < disc_r + 0.05 * side:
                continue
            lesions.append((x, y, side / 128 * lrng.uniform(1.2, 2.0)))
    return SampleGeometry(label, (float(disc[0]), float(disc[1])), float(disc_r), float(cup_ratio), tuple(lesions))


def render_base(cfg: SynthConfig, index: int, geom: SampleGeometry) -> np.ndarray:
    """The lesion-free image of a sample (its Healthy template)."""
    rng = np.random.default_rng([cfg.seed, index, 2])
    side = cfg.side
    rows, cols = np.mgrid[:side, :side].astype(np.float64)
    c = side / 2
    field_r = FIELD_RADIUS * side
    r_field = np.hypot(cols - c, rows - c)
    tint = BACKGROUND_RGB * rng.uniform(0.9, 1.1, size=3)
    vignette = 1.0 - 0.3 * (r_field / field_r) ** 2
    img = tint[None, None, :] * vignette[..., None]
    d = np.hypot(cols - geom.disc_center[0], rows - geom.disc_center[1])
    disc_w = _soft_disc(d, geom.disc_radius)[..., None]
    img = img * (1 - disc_w) + DISC_RGB * disc_w
    cup_w = _soft_disc(d, geom.cup_ratio * geom.disc_radius)[..., None]
    img = img * (1 - cup_w) + CUP_RGB * cup_w
    img = img + rng.normal(0.0, PIXEL_NOISE, size=img.shape)
    img = img * _soft_disc(r_field, field_r, edge=1.0)[..., None]
    return np.clip(img, 0.0, 1.0)


def add_lesions(base: np.ndarray, geom: SampleGeometry) -> np.ndarray:
    img = base.copy()
    side = img.shape[0]
    rows, cols = np.mgrid[:side, :side].astype(np.float64)
    green = np.zeros((side, side))
    for x, y, s in geom.lesions:
        green += LESION_GREEN * np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / (2 * s * s))
    img[..., 1] = np.clip(img[..., 1] + green, 0.0, 1.0)
    return img


def render(cfg: SynthConfig, index: int, label: str) -> tuple[np.ndarray, SampleGeometry]:
    geom = sample_geometry(cfg, index, label)
    base = render_base(cfg, index, geom)
    return (add_lesions(base, geom) if geom.lesions else base), geom


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255).astype(np.uint8)


def generate(cfg: SynthConfig, out_dir) -> tuple[PooledDataset, Path]:
    """Render every sample as a PNG and write ``manifest.csv`` next to them."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, label in enumerate(cfg.labels()):
        img, geom = render(cfg, i, label)
        path = out_dir / "images" / f"{label.lower()}_{i:05d}.png"
        Image.fromarray(to_uint8(img)).save(path)
        records.append(ImageRecord(path, label, cfg.source, geom.disc_center))
    manifest = write_manifest(records, out_dir / "manifest.csv")
    return PooledDataset(records, LabelSpace.target(), count_strata(records)), manifest


def probe_features(pixels: np.ndarray, disc_center: tuple[float, float]) -> tuple[float, float]:
    """Hand-crafted ``(lesion_energy, cup_disc_ratio)`` for a rendered image.

    Lesion energy sums positive green-minus-red-trend residue away from the
    disc; the cup/disc ratio is the equivalent-diameter ratio of the pale
    (high blue) region to the whole disc.
    """
    from scipy import ndimage

    px = np.asarray(pixels, dtype=np.float64)
    side = px.shape[0]
    rows, cols = np.mgrid[:side, :side]
    d = np.hypot(cols - disc_center[0], rows - disc_center[1])
    green = px[..., 1]
    residue = np.clip(green - ndimage.median_filter(green, size=max(7, side // 16)), 0, None)
    far = d > DISC_RADIUS * side * 1.1 + 0.05 * side
    lesion_energy = float(residue[far].sum())
    near = d < DISC_RADIUS * side * 1.5
    blue = px[..., 2]
    disc_area = np.count_nonzero(near & (blue > (BACKGROUND_RGB[2] + DISC_RGB[2]) / 2 * 1.1))
    cup_area = np.count_nonzero(near & (blue > (DISC_RGB[2] + CUP_RGB[2]) / 2))
    ratio = float(np.sqrt(cup_area / disc_area)) if disc_area else 0.0
    return lesion_energy, ratio
