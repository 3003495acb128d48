import csv
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from celd.datahub import ImageTensor

# Table 1 of the pooled corpus: (source, class) -> count
TABLE1 = {
    ("messidor2", "DR"): 727,
    ("messidor2", "Healthy"): 1017,
    ("lesav", "Healthy"): 11,
    ("lesav", "Glaucoma"): 11,
    ("chaksu", "Healthy"): 1157,
    ("chaksu", "Glaucoma"): 188,
}


def write_dummy_manifest(path: Path, counts: dict, with_disc=False) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_path", "label", "source"] + (["disc_cx", "disc_cy"] if with_disc else []))
        for (source, label), n in counts.items():
            for i in range(n):
                row = [f"img/{source}_{label}_{i:05d}.png", label, source]
                w.writerow(row + (["10.0", "12.0"] if with_disc else []))
    return path


@pytest.fixture
def table1_manifests(tmp_path):
    by_source = {}
    for (source, label), n in TABLE1.items():
        by_source.setdefault(source, {})[(source, label)] = n
    return {s: write_dummy_manifest(tmp_path / f"{s}.csv", c) for s, c in by_source.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_image(rng):
    return ImageTensor(rng.random((64, 64, 3), dtype=np.float32))


def save_png(path: Path, arr: np.ndarray) -> Path:
    Image.fromarray(arr).save(path)
    return path


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
