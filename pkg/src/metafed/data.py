"""Synthetic federated datasets, Dirichlet label-shift partitioning, CSV I/O."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, PartitionError


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    # position of each sample in the pool it was drawn from; used to check disjointness
    index: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"samples {self.x.shape} and labels {self.y.shape} disagree")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.index is None:
            self.index = np.arange(len(self.y))

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.index[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass
class FederationData:
    train: Dataset
    valid: Dataset
    test: Dataset

    def parts(self):
        return (self.train, self.valid, self.test)

    def __len__(self):
        return sum(len(p) for p in self.parts())


@dataclass
class FederatedSplit:
    federations: list[FederationData]

    def __len__(self):
        return len(self.federations)

    def __iter__(self):
        return iter(self.federations)

    def __getitem__(self, i):
        return self.federations[i]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for fed in self.federations:
            for part in fed.parts():
                h.update(np.ascontiguousarray(part.x, dtype="<f8").tobytes())
                h.update(np.ascontiguousarray(part.y, dtype="<i8").tobytes())
                h.update(b"|")
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class PartitionSpec:
    federations: int
    alpha: float = 0.5
    fractions: tuple[float, float, float] = (0.4, 0.3, 0.3)
    seed: int = 0

    def __post_init__(self):
        if self.federations < 1:
            raise ConfigError("need at least one federation")
        if not self.alpha > 0:
            raise ConfigError(f"Dirichlet alpha must be positive, got {self.alpha}")
        if len(self.fractions) != 3 or min(self.fractions) <= 0 or abs(sum(self.fractions) - 1) > 1e-12:
            raise ConfigError(f"fractions must be three positive numbers summing to 1, got {self.fractions}")


def _stratified_split(ds_idx, labels, fractions, rng):
    """Split positions ``ds_idx`` three ways, class by class."""
    cuts = np.cumsum(fractions)[:2]
    out = ([], [], [])
    for c in np.unique(labels[ds_idx]):
        members = ds_idx[labels[ds_idx] == c]
        members = members[rng.permutation(len(members))]
        a, b = np.round(cuts * len(members)).astype(int)
        out[0].append(members[:a])
        out[1].append(members[a:b])
        out[2].append(members[b:])
    return [np.concatenate(p) if p else np.empty(0, dtype=np.intp) for p in out]


def _too_small(parts, min_valid, min_test):
    return len(parts[0]) < 1 or len(parts[1]) < min_valid or len(parts[2]) < min_test


def gen_label_shift(pool: Dataset, spec: PartitionSpec, *, min_valid: int = 2, min_test: int = 2,
                    max_tries: int = 100) -> FederatedSplit:
    """Allocate each class across federations with proportions drawn from
    ``Dirichlet(alpha * 1_N)``, then split every federation into train/valid/test.

    Draws are repeated (up to ``max_tries``) until every federation has at
    least one training sample and the requested valid/test minimums.
    """
    rng = np.random.default_rng(spec.seed)
    n_fed = spec.federations
    for _ in range(max_tries):
        owner = [[] for _ in range(n_fed)]
        for c in range(pool.num_classes):
            members = np.flatnonzero(pool.y == c)
            members = members[rng.permutation(len(members))]
            p = rng.dirichlet(np.full(n_fed, spec.alpha))
            bounds = (np.cumsum(p)[:-1] * len(members)).astype(int)
            for i, chunk in enumerate(np.split(members, bounds)):
                owner[i].append(chunk)
        feds = []
        ok = True
        for i in range(n_fed):
            mine = np.sort(np.concatenate(owner[i]))
            parts = _stratified_split(mine, pool.y, spec.fractions, rng)
            if _too_small(parts, min_valid, min_test):
                ok = False
                break
            feds.append(FederationData(*(pool.subset(p) for p in parts)))
        if ok:
            return FederatedSplit(feds)
    raise PartitionError(f"no valid Dirichlet allocation after {max_tries} draws (alpha={spec.alpha})")


def _class_means(num_classes, dim, separation, rng):
    means = rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return separation * means


def gaussian_pool(n: int, num_classes: int, dim: int, seed: int, separation: float = 2.0) -> Dataset:
    """Unit-covariance Gaussian blobs with class means on a sphere of radius ``separation``.

    Labels are balanced up to rounding.
    """
    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, dim, separation, rng)
    y = rng.permutation(np.arange(n) % num_classes)
    x = means[y] + rng.standard_normal((n, dim))
    return Dataset(x, y, num_classes)


def feature_shift_transforms(dim: int, federations: int, shift_scale: float, rng: np.random.Generator):
    """Per-federation affine maps ``x -> A x + b`` with ``A - I`` and ``b`` proportional to ``shift_scale``."""
    out = []
    for _ in range(federations):
        a = np.eye(dim) + shift_scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
        b = shift_scale * rng.standard_normal(dim)
        out.append((a, b))
    return out


def gen_feature_shift(num_classes: int, dim: int, federations: int, shift_scale: float, seed: int, *,
                      n_per_federation: int = 1000, keep: tuple[float, float, float] = (0.1, 0.1, 0.2),
                      separation: float = 2.0) -> FederatedSplit:
    """Shared class-conditional Gaussians pushed through a per-federation affine map.

    Of the ``n_per_federation`` generated samples, the fractions in ``keep``
    go to train/valid/test and the remainder is dropped.
    """
    if num_classes < 2 or dim < 2 or federations < 2 or shift_scale < 0:
        raise ConfigError("need num_classes >= 2, dim >= 2, federations >= 2, shift_scale >= 0")
    if min(keep) <= 0 or sum(keep) > 1 + 1e-12:
        raise ConfigError(f"keep fractions must be positive and sum to at most 1, got {keep}")
    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, dim, separation, rng)
    transforms = feature_shift_transforms(dim, federations, shift_scale, rng)
    total = sum(keep)
    fractions = tuple(k / total for k in keep)
    n_keep = int(round(total * n_per_federation))
    feds = []
    offset = 0
    for a, b in transforms:
        y = rng.permutation(np.arange(n_keep) % num_classes)
        z = means[y] + rng.standard_normal((n_keep, dim))
        x = z @ a.T + b
        ds = Dataset(x, y, num_classes, np.arange(offset, offset + n_keep))
        offset += n_keep
        parts = _stratified_split(np.arange(n_keep), y, fractions, rng)
        feds.append(FederationData(*(ds.subset(p) for p in parts)))
    return FederatedSplit(feds)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(path) -> Dataset:
    """Read feature columns followed by one integer label column.

    A first row that is not entirely numeric is treated as a header.
    """
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if not rows and width is None and not all(_is_number(c) for c in row):
                width = len(row)
                continue
            if width is None:
                width = len(row)
            if len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", lineno)
            if width < 2:
                raise ParseError("need at least one feature column and a label column", lineno)
            try:
                feats = [float(c) for c in row[:-1]]
                label_f = float(row[-1])
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", lineno) from None
            if label_f != int(label_f) or label_f < 0:
                raise ParseError(f"label must be a non-negative integer, got {row[-1]!r}", lineno)
            rows.append((feats, int(label_f)))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    x = np.array([r[0] for r in rows], dtype=np.float64)
    y = np.array([r[1] for r in rows], dtype=np.int64)
    return Dataset(x, y, int(y.max()) + 1)


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        for row, label in zip(ds.x, ds.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def export_split(split: FederatedSplit, out_dir) -> list[Path]:
    """Write ``fed{i}_{train,valid,test}.csv`` for every federation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, fed in enumerate(split):
        for name, part in zip(("train", "valid", "test"), fed.parts()):
            p = out_dir / f"fed{i}_{name}.csv"
            save_csv(part, p)
            written.append(p)
    return written
