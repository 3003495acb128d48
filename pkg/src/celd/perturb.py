"""Controlled test-time perturbations of fundus images.

Every operator is a pure function ``ImageTensor -> ImageTensor``: the input
is never modified and the output stays in [0, 1] with the input's shape.
Pixel-size defaults are given for a 256-pixel image and scale linearly with
the image side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .datahub import ImageTensor

REFERENCE_SIDE = 256

KINDS = ("NONE", "RG", "RGR", "RC", "GN", "ES", "ODC")

# Per-kind parameter defaults.  ``None`` means "derive from the image side".
DEFAULTS: dict[str, dict[str, float | int | None]] = {
    "NONE": {},
    "RG": {"alpha": 0.2},
    "RGR": {"patch_side": None, "n_patches": 12},
    "RC": {"beta": 0.3},
    "GN": {"sigma": 0.05},
    "ES": {"lam": 1.5, "blur_sigma": 2.0},
    "ODC": {"radius": None, "cx": None, "cy": None},
}
INT_PARAMS = {"patch_side", "n_patches"}
SEEDED = {"RGR", "GN"}


def _scaled(value: float, side: int) -> float:
    return value * side / REFERENCE_SIDE


@dataclass(frozen=True)
class PerturbationSpec:
    """One perturbation kind, its explicit parameter overrides and a seed."""

    kind: str = "NONE"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        params = dict(self.params)
        unknown = set(params) - set(DEFAULTS[kind])
        if unknown:
            raise ValueError(f"{kind} does not take parameter(s) {sorted(unknown)}")
        for k, v in params.items():
            params[k] = int(v) if k in INT_PARAMS else float(v)
        object.__setattr__(self, "params", params)
        _validate(kind, params)

    def resolved(self, side: int) -> dict:
        """Defaults merged with the overrides, pixel sizes scaled to ``side``."""
        out = {**DEFAULTS[self.kind], **self.params}
        if self.kind == "RGR" and out["patch_side"] is None:
            out["patch_side"] = max(1, round(_scaled(32, side)))
        if self.kind == "ODC" and out["radius"] is None:
            out["radius"] = _scaled(30, side)
        return out

    def label(self) -> str:
        if not self.params:
            return self.kind
        return self.kind + ":" + ",".join(f"{k}={v!r}" for k, v in sorted(self.params.items()))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSpec":
        return cls(d["kind"], d.get("params", {}), int(d.get("seed", 0)))


def _validate(kind: str, p: dict) -> None:
    def unit(name):
        if name in p and not 0.0 <= p[name] <= 1.0:
            raise ValueError(f"{kind}: {name} must lie in [0, 1], got {p[name]}")

    def nonneg(name):
        if name in p and p[name] < 0:
            raise ValueError(f"{kind}: {name} must be >= 0, got {p[name]}")

    def positive(name):
        if name in p and p[name] <= 0:
            raise ValueError(f"{kind}: {name} must be > 0, got {p[name]}")

    unit("alpha")
    unit("beta")
    nonneg("sigma")
    nonneg("lam")
    nonneg("n_patches")
    positive("blur_sigma")
    positive("patch_side")
    positive("radius")
    if ("cx" in p) != ("cy" in p):
        raise ValueError("ODC: cx and cy must be given together")


def parse_perturb(text: str) -> PerturbationSpec:
    """Parse ``KIND[:name=value,...]``; ``seed`` is accepted as a parameter.

    >>> parse_perturb("RG:alpha=0.5").params
    {'alpha': 0.5}
    """
    kind, _, rest = text.strip().partition(":")
    params = {}
    seed = 0
    for item in filter(None, (s.strip() for s in rest.split(","))):
        name, eq, value = item.partition("=")
        if not eq:
            raise ValueError(f"bad perturbation parameter {item!r}; expected name=value")
        name = name.strip()
        if name == "seed":
            seed = int(value)
        else:
            try:
                params[name] = float(value)
            except ValueError:
                raise ValueError(f"parameter {name} needs a number, got {value!r}") from None
    return PerturbationSpec(kind, params, seed)


def _check(img: ImageTensor) -> np.ndarray:
    px = img.pixels
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {px.shape}")
    return px


def reduce_green(img: ImageTensor, alpha: float = 0.2) -> ImageTensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    out = _check(img).copy()
    if alpha != 1.0:
        out[..., 1] = out[..., 1] * np.float32(alpha)
    return img.with_pixels(out)


def random_green_removal(
    img: ImageTensor, patch_side: int | None = None, n_patches: int = 12, seed: int = 0
) -> ImageTensor:
    """Zero the green channel inside ``n_patches`` random square patches.

    Top-left corners are uniform over all valid positions; patches may
    overlap.
    """
    px = _check(img)
    h, w, _ = px.shape
    if patch_side is None:
        patch_side = max(1, round(_scaled(32, h)))
    if patch_side <= 0 or patch_side > min(h, w):
        raise ValueError(f"patch_side {patch_side} does not fit a {h}x{w} image")
    if n_patches < 0:
        raise ValueError("n_patches must be >= 0")
    out = px.copy()
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, h - patch_side + 1, size=n_patches)
    cols = rng.integers(0, w - patch_side + 1, size=n_patches)
    for r, c in zip(rows, cols):
        out[r : r + patch_side, c : c + patch_side, 1] = 0.0
    return img.with_pixels(out)


def reduce_contrast(img: ImageTensor, beta: float = 0.3) -> ImageTensor:
    """Pull every channel towards its own mean: ``m + beta * (x - m)``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    px = _check(img)
    if beta == 1.0:
        return img.with_pixels(px.copy())
    mean = px.mean(axis=(0, 1), dtype=np.float64, keepdims=True)
    out = mean + beta * (px - mean)
    return img.with_pixels(np.clip(out, 0.0, 1.0).astype(px.dtype))


def add_gaussian_noise(img: ImageTensor, sigma: float = 0.05, seed: int = 0) -> ImageTensor:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    px = _check(img)
    if sigma == 0:
        return img.with_pixels(px.copy())
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=px.shape)
    return img.with_pixels(np.clip(px + noise, 0.0, 1.0).astype(px.dtype))


def gaussian_blur(channel: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 4 sigma, edge-replicated."""
    return ndimage.gaussian_filter(channel, sigma=sigma, mode="nearest", truncate=4.0)


def sharpen_edges(img: ImageTensor, lam: float = 1.5, blur_sigma: float = 2.0) -> ImageTensor:
    """Unsharp mask ``x + lam * (x - blur(x))`` per channel, clamped."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if blur_sigma <= 0:
        raise ValueError("blur_sigma must be > 0")
    px = _check(img)
    if lam == 0:
        return img.with_pixels(px.copy())
    x = px.astype(np.float64)
    blurred = np.stack([gaussian_blur(x[..., c], blur_sigma) for c in range(3)], axis=-1)
    out = x + lam * (x - blurred)
    return img.with_pixels(np.clip(out, 0.0, 1.0).astype(px.dtype))


def locate_optic_disc(img: ImageTensor, blur_sigma: float | None = None) -> tuple[float, float]:
    """Return the disc center ``(cx, cy)``.

    Metadata on the tensor wins.  Otherwise the brightest location of the
    heavily blurred grayscale image is used; ties resolve to the first
    maximum in row-major order.
    """
    if img.disc_center is not None:
        return img.disc_center
    px = _check(img)
    if blur_sigma is None:
        blur_sigma = _scaled(15.0, px.shape[0])
    gray = px.astype(np.float64).mean(axis=2)
    smooth = gaussian_blur(gray, blur_sigma)
    row, col = np.unravel_index(int(np.argmax(smooth)), smooth.shape)
    return (float(col), float(row))


def disc_mask(shape: tuple[int, int], center: tuple[float, float], radius: float) -> np.ndarray:
    """Boolean mask of pixels at Euclidean distance <= ``radius`` from ``center``."""
    h, w = shape
    cx, cy = center
    rows, cols = np.ogrid[:h, :w]
    return (cols - cx) ** 2 + (rows - cy) ** 2 <= radius**2


def occlude_optic_disc(
    img: ImageTensor, center: tuple[float, float] | None = None, radius: float | None = None
) -> ImageTensor:
    """Black out a disc of ``radius`` pixels around ``center`` in all channels."""
    px = _check(img)
    h, w, _ = px.shape
    if center is None:
        center = locate_optic_disc(img)
    cx, cy = center
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"center {center} outside the {w}x{h} image")
    if radius is None:
        radius = _scaled(30.0, h)
    if radius <= 0:
        raise ValueError("radius must be > 0")
    out = px.copy()
    out[disc_mask((h, w), center, radius)] = 0.0
    return img.with_pixels(out)


def apply(spec: PerturbationSpec, img: ImageTensor, seed: int | None = None) -> ImageTensor:
    """Apply ``spec`` to ``img``.  ``seed`` overrides ``spec.seed`` when given."""
    seed = spec.seed if seed is None else seed
    p = spec.resolved(img.side)
    kind = spec.kind
    if kind == "NONE":
        return img.with_pixels(_check(img).copy())
    if kind == "RG":
        return reduce_green(img, p["alpha"])
    if kind == "RGR":
        return random_green_removal(img, p["patch_side"], p["n_patches"], seed)
    if kind == "RC":
        return reduce_contrast(img, p["beta"])
    if kind == "GN":
        return add_gaussian_noise(img, p["sigma"], seed)
    if kind == "ES":
        return sharpen_edges(img, p["lam"], p["blur_sigma"])
    if kind == "ODC":
        center = (p["cx"], p["cy"]) if p["cx"] is not None else locate_optic_disc(img)
        return occlude_optic_disc(img, center, p["radius"])
    raise AssertionError(kind)
