import csv
from pathlib import Path

import numpy as np
import pytest

from dynafed.harness.data import write_idx_images, write_idx_labels

TINY_YAML = """\
seed: 3
task:
  kind: blobs
  blobs: {K: 3, d: 2, per_class: 30, test_per_class: 20}
partition: {kind: dirichlet, alpha: 0.5}
run: {rounds: 5, clients: 4, ratio: 0.5, local_epochs: 1, L: 3, hidden: [8]}
local_opt: {name: sgd, lr: 0.3, batch_size: 16}
synth: {s: 2, s_prime: 2, N: 6, eta_inner: 0.1, n: 6, target_avg_count: 1}
finetune: {steps: 3, lr: 0.1}
theory: {d: 5, cond: 5, T: 400, seeds: 2, probes: 12}
"""


@pytest.fixture
def tiny_config(tmp_path) -> Path:
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY_YAML)
    return p


@pytest.fixture
def idx_fixture(tmp_path):
    """2 images of 2x2 pixels with values (0, 255, 0, 255) and labels (1, 0)."""
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    write_idx_images(img, np.array([[[0, 255], [0, 255]]] * 2))
    write_idx_labels(lab, [1, 0])
    return img, lab


def read_csv_without(path, drop="wall_ms"):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if drop in rows[0]:
        k = rows[0].index(drop)
        rows = [r[:k] + r[k + 1:] for r in rows]
    return rows


def compare_run_dirs(a: Path, b: Path) -> list:
    """Names of output files that differ between two runs, wall clock column excluded."""
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    bad = []
    for name in names:
        if name == "metrics.csv":
            same = read_csv_without(a / name) == read_csv_without(b / name)
        else:
            same = (a / name).read_bytes() == (b / name).read_bytes()
        if not same:
            bad.append(name)
    return bad
