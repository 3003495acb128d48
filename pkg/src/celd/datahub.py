"""Dataset manifests, pooling, stratified splitting and image loading.

Manifests are CSV files with the header ``image_path,label,source`` and the
optional trailing columns ``disc_cx,disc_cy``.  Relative image paths are
resolved against the manifest's directory.
"""

from __future__ import annotations

import csv
import json
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SOURCE_CLASSES = ("Healthy", "DR")
TARGET_CLASSES = ("Healthy", "DR", "Glaucoma")

MANIFEST_COLUMNS = ("image_path", "label", "source")
DISC_COLUMNS = ("disc_cx", "disc_cy")

SPLIT_FORMAT_VERSION = 1


class ManifestError(ValueError):
    """Raised for missing, malformed or inconsistent manifests."""


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class vocabulary."""

    classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"duplicate classes in label space: {self.classes}")
        if not self.classes:
            raise ValueError("label space must not be empty")

    def __len__(self) -> int:
        return len(self.classes)

    def __iter__(self):
        return iter(self.classes)

    def __contains__(self, label) -> bool:
        return label in self.classes

    def index(self, label: str) -> int:
        return self.classes.index(label)

    def is_prefix_of(self, other: "LabelSpace") -> bool:
        return other.classes[: len(self.classes)] == self.classes

    @classmethod
    def source(cls) -> "LabelSpace":
        return cls(SOURCE_CLASSES)

    @classmethod
    def target(cls) -> "LabelSpace":
        return cls(TARGET_CLASSES)


@dataclass(frozen=True)
class ImageRecord:
    image_path: Path
    label: str
    source: str
    disc_center: tuple[float, float] | None = None


@dataclass
class ImageTensor:
    """An RGB image with intensities in [0, 1], stored as ``(H, W, 3)``.

    ``disc_center`` is ``(column, row)`` in this tensor's pixel space.
    """

    pixels: np.ndarray
    disc_center: tuple[float, float] | None = None

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels: np.ndarray) -> "ImageTensor":
        return ImageTensor(pixels, self.disc_center)


@dataclass
class PooledDataset:
    records: list[ImageRecord]
    labelspace: LabelSpace
    per_source_counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.per_source_counts and self.records:
            self.per_source_counts = count_strata(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def class_totals(self) -> dict[str, int]:
        totals: Counter = Counter()
        for (_, label), n in self.per_source_counts.items():
            totals[label] += n
        return dict(totals)


@dataclass(frozen=True)
class SplitManifest:
    train: tuple[ImageRecord, ...]
    val: tuple[ImageRecord, ...]
    test: tuple[ImageRecord, ...]
    ratios: tuple[float, float, float]
    seed: int
    labelspace: LabelSpace

    def partitions(self) -> dict[str, tuple[ImageRecord, ...]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def all_records(self) -> list[ImageRecord]:
        return [*self.train, *self.val, *self.test]


def count_strata(records: Iterable[ImageRecord]) -> dict[tuple[str, str], int]:
    return dict(Counter((r.source, r.label) for r in records))


def load_manifest(path, labelspace: LabelSpace | None = None) -> PooledDataset:
    """Read a manifest CSV into a :class:`PooledDataset`.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    ManifestError
        On a bad header, a malformed row or a label outside ``labelspace``.
        Row numbers count the header as row 1.
    """
    path = Path(path)
    labelspace = labelspace or LabelSpace.target()
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        if tuple(header) not in (MANIFEST_COLUMNS, MANIFEST_COLUMNS + DISC_COLUMNS):
            raise ManifestError(
                f"{path}: header must be {','.join(MANIFEST_COLUMNS)}[,disc_cx,disc_cy], got {','.join(header)}"
            )
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}: row {rowno}: expected {len(header)} fields, got {len(row)}")
            image_path, label, source = (c.strip() for c in row[:3])
            if not image_path or not source:
                raise ManifestError(f"{path}: row {rowno}: empty image_path or source")
            if label not in labelspace:
                raise ManifestError(
                    f"{path}: row {rowno}: label {label!r} not in label space {list(labelspace.classes)}"
                )
            disc = None
            if len(row) == 5 and (row[3].strip() or row[4].strip()):
                try:
                    disc = (float(row[3]), float(row[4]))
                except ValueError:
                    raise ManifestError(f"{path}: row {rowno}: non-numeric disc center") from None
            p = Path(image_path)
            if not p.is_absolute():
                p = root / p
            records.append(ImageRecord(p, label, source, disc))
    return PooledDataset(records, labelspace, count_strata(records))


def write_manifest(records: Sequence[ImageRecord], path) -> Path:
    """Write records as a manifest; paths are stored relative to the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with_disc = any(r.disc_center is not None for r in records)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS + (DISC_COLUMNS if with_disc else ()))
        for r in records:
            row = [_relative(r.image_path, path.parent), r.label, r.source]
            if with_disc:
                row += [repr(r.disc_center[0]), repr(r.disc_center[1])] if r.disc_center else ["", ""]
            writer.writerow(row)
    return path


def pool(datasets: Sequence[PooledDataset]) -> PooledDataset:
    """Concatenate datasets and add up their stratum counts.

    Each input label space must be a subset of the widest one, which becomes
    the pooled label space.
    """
    if not datasets:
        raise ValueError("nothing to pool")
    space = max((d.labelspace for d in datasets), key=len)
    for d in datasets:
        if not set(d.labelspace.classes) <= set(space.classes):
            raise ValueError(f"label space {d.labelspace.classes} is not a subset of {space.classes}")
    records: list[ImageRecord] = []
    counts: Counter = Counter()
    for d in datasets:
        records.extend(d.records)
        counts.update(d.per_source_counts)
    return PooledDataset(records, space, dict(counts))


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Allocate ``n`` items to ``ratios`` by the largest-remainder rule.

    Ties on the remainder go to the earlier partition (train before val
    before test).
    """
    fracs = [Fraction(r).limit_denominator(10**9) for r in ratios]
    quotas = [n * f for f in fracs]
    alloc = [int(q) for q in quotas]  # floor, quotas are nonnegative
    leftover = n - sum(alloc)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[:leftover]:
        alloc[i] += 1
    return alloc


def stratified_split(pooled: PooledDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    """Split independently inside each (source, class) stratum.

    Strata are shuffled with a generator seeded by ``seed`` and the
    stratum's rank in sorted (source, class) order, so the result depends
    only on the records, the ratios and the seed.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if not pooled.records:
        raise ValueError("cannot split an empty dataset")
    strata: dict[tuple[str, str], list[ImageRecord]] = defaultdict(list)
    for r in pooled.records:
        strata[(r.source, r.label)].append(r)
    parts: list[list[ImageRecord]] = [[], [], []]
    for rank, key in enumerate(sorted(strata)):
        members = strata[key]
        rng = np.random.default_rng([seed, rank])
        perm = rng.permutation(len(members))
        n_train, n_val, _ = largest_remainder(len(members), ratios)
        shuffled = [members[i] for i in perm]
        parts[0].extend(shuffled[:n_train])
        parts[1].extend(shuffled[n_train : n_train + n_val])
        parts[2].extend(shuffled[n_train + n_val :])
    return SplitManifest(tuple(parts[0]), tuple(parts[1]), tuple(parts[2]), ratios, seed, pooled.labelspace)


def restrict_to_source(split: SplitManifest, source_space: LabelSpace) -> SplitManifest:
    """Keep only records whose label is in ``source_space``; no re-splitting."""
    if not source_space.is_prefix_of(split.labelspace):
        raise ValueError(f"{source_space.classes} is not a prefix of {split.labelspace.classes}")

    def keep(records):
        return tuple(r for r in records if r.label in source_space)

    return SplitManifest(keep(split.train), keep(split.val), keep(split.test), split.ratios, split.seed, source_space)


def _relative(p: Path, root: Path) -> str:
    try:
        return Path(os.path.relpath(p, root)).as_posix()
    except ValueError:  # different drives
        return Path(p).as_posix()


def _record_to_json(r: ImageRecord, root: Path) -> dict:
    d = {"image_path": _relative(r.image_path, root), "label": r.label, "source": r.source}
    if r.disc_center is not None:
        d["disc_center"] = list(r.disc_center)
    return d


def _record_from_json(d: dict, root: Path) -> ImageRecord:
    p = Path(d["image_path"])
    if not p.is_absolute():
        p = Path(os.path.normpath(root / p))
    disc = tuple(d["disc_center"]) if d.get("disc_center") is not None else None
    return ImageRecord(p, d["label"], d["source"], disc)


def save_split(split: SplitManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()
    doc = {
        "format_version": SPLIT_FORMAT_VERSION,
        "ratios": list(split.ratios),
        "seed": split.seed,
        "labelspace": list(split.labelspace.classes),
        **{name: [_record_to_json(r, root) for r in recs] for name, recs in split.partitions().items()},
    }
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return path


def load_split(path) -> SplitManifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format_version") != SPLIT_FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported split format {doc.get('format_version')!r}")
    root = path.parent.resolve()
    parts = {name: tuple(_record_from_json(d, root) for d in doc[name]) for name in ("train", "val", "test")}
    return SplitManifest(
        parts["train"], parts["val"], parts["test"], tuple(doc["ratios"]), doc["seed"], LabelSpace(doc["labelspace"])
    )


def load_image(record: ImageRecord, side: int = 256) -> ImageTensor:
    """Decode, convert to RGB, bilinearly resize to ``side`` x ``side``.

    Grayscale images are replicated across the three channels.  The record's
    disc center, if any, is rescaled into the resized pixel grid.
    """
    if side <= 0:
        raise ValueError("side must be positive")
    try:
        with Image.open(record.image_path) as im:
            im.load()
            width, height = im.size
            if im.mode != "RGB":
                im = im.convert("RGB")
            if im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            pixels = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as exc:
        raise OSError(f"cannot decode image {record.image_path}: {exc}") from exc
    disc = None
    if record.disc_center is not None:
        cx, cy = record.disc_center
        disc = (cx * side / width, cy * side / height)
    return ImageTensor(pixels, disc)
