"""Dataset I/O: ratings CSVs for the recommender and a flat binary
format for fixed-point feature vectors."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from ..fxp import FxpSpec, FxpTensor, quantize

FXV_MAGIC = b"FXV1"


def load_ratings_csv(path) -> list[tuple[int, int, float]]:
    """Rows of (user_id, item_id, rating); a header row is skipped if present."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                out.append((int(row[0]), int(row[1]), float(row[2])))
            except ValueError:
                if not out:
                    continue  # header
                raise
    return out


def save_ratings_csv(path, ratings):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "item_id", "rating"])
        writer.writerows(ratings)


def ratings_to_examples(ratings, spec: FxpSpec):
    """Quantize ratings into ((user, item), (raw,)) training examples."""
    return [((u, i), (quantize(r, spec).raw,)) for u, i, r in ratings]


def synthetic_ratings(n_users: int, n_items: int, count: int, seed: int = 0,
                      noise: float = 0.05) -> list[tuple[int, int, float]]:
    """Bias-model ratings in [0, 5]: mean + user offset + item offset + noise."""
    rng = np.random.RandomState(seed)
    bu = rng.uniform(-1.0, 1.0, size=n_users)
    bi = rng.uniform(-1.0, 1.0, size=n_items)
    users = rng.randint(0, n_users, size=count)
    items = rng.randint(0, n_items, size=count)
    scores = 2.5 + bu[users] + bi[items] + noise * rng.randn(count)
    scores = np.clip(scores, 0.0, 5.0)
    return [(int(u), int(i), float(round(s, 3))) for u, i, s in zip(users, items, scores)]


# ---------------------------------------------------------------------------
# Flat binary vectors: magic, rank, dims, little-endian int64 raws


def write_fxv(path, tensor: FxpTensor):
    with open(path, "wb") as fh:
        fh.write(FXV_MAGIC)
        fh.write(struct.pack("<I", len(tensor.shape)))
        for d in tensor.shape:
            fh.write(struct.pack("<Q", d))
        for v in tensor.data:
            fh.write(struct.pack("<q", v))


def read_fxv(path, spec: FxpSpec) -> FxpTensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FXV_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
        n = 1
        for d in shape:
            n *= d
        payload = fh.read(8 * n)
        if len(payload) != 8 * n:
            raise ValueError(f"{path}: truncated payload")
        data = struct.unpack(f"<{n}q", payload)
    return FxpTensor(shape, data, spec)


def unit_feature(values, spec: FxpSpec) -> FxpTensor:
    """Quantize a feature vector after normalizing it to unit length."""
    arr = np.asarray(list(values), dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero feature vector")
    return FxpTensor.from_reals((len(arr),), (arr / norm).tolist(), spec)


def read_feature_dir(directory, spec: FxpSpec) -> list[tuple[str, FxpTensor]]:
    """All .fxv vectors in a directory, sorted by filename."""
    directory = Path(directory)
    out = []
    for path in sorted(directory.glob("*.fxv")):
        out.append((path.stem, read_fxv(path, spec)))
    return out
