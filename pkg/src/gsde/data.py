"""Synthetic domain-shift datasets, CSV persistence and minibatch streams."""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .diffcore import make_rng

NO_LABEL = -1


class Domain(enum.IntEnum):
    SOURCE = 0
    TARGET = 1
    PSEUDO = 2

    @property
    def tag(self) -> str:
        return _DOMAIN_TAGS[self]


_DOMAIN_TAGS = {Domain.SOURCE: "source", Domain.TARGET: "target", Domain.PSEUDO: "pseudo"}
_TAG_DOMAINS = {v: k for k, v in _DOMAIN_TAGS.items()}


class DatasetError(ValueError):
    pass


class DatasetParseError(DatasetError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class LabeledSample:
    features: tuple
    label: Optional[int]
    domain: Domain


class Dataset:
    """Immutable collection of samples stored column-wise.

    ``labels`` uses ``NO_LABEL`` (-1) for rows without a label.
    """

    def __init__(self, features, labels, domains, num_classes: int, name: str = ""):
        x = np.array(features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(len(x), -1) if x.size else x.reshape(0, 0)
        y = np.array(labels, dtype=np.int64).reshape(-1)
        dom = np.array(domains, dtype=np.int8).reshape(-1)
        if not (x.shape[0] == y.shape[0] == dom.shape[0]):
            raise DatasetError("features, labels and domains must have equal length")
        if num_classes < 0 or (y.size and y.max() >= num_classes):
            raise DatasetError(f"class ids must lie in [0, {num_classes})")
        if np.any(y < NO_LABEL):
            raise DatasetError("negative class id")
        labelled_domain = dom != Domain.TARGET
        if np.any(labelled_domain & (y == NO_LABEL)):
            raise DatasetError("source and pseudo-source samples must carry a label")
        for a in (x, y, dom):
            a.setflags(write=False)
        self.features = x
        self.labels = y
        self.domains = dom
        self.num_classes = int(num_classes)
        self.name = name

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample], num_classes: int,
                     feature_dim: int, name: str = "") -> "Dataset":
        x = np.array([s.features for s in samples], dtype=np.float64).reshape(len(samples), feature_dim)
        y = [NO_LABEL if s.label is None else s.label for s in samples]
        d = [int(s.domain) for s in samples]
        return cls(x, y, d, num_classes, name)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        lab = int(self.labels[i])
        return LabeledSample(tuple(float(v) for v in self.features[i]),
                             None if lab == NO_LABEL else lab, Domain(int(self.domains[i])))

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list[LabeledSample]:
        return list(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.domains, other.domains))

    __hash__ = None

    def __repr__(self) -> str:
        return f"Dataset(name={self.name!r}, n={len(self)}, d={self.feature_dim}, K={self.num_classes})"

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.domains[idx],
                       self.num_classes, self.name)

    def with_domain(self, domain: Domain) -> "Dataset":
        return Dataset(self.features, self.labels, np.full(len(self), int(domain)),
                       self.num_classes, self.name)

    def concat(self, other: "Dataset") -> "Dataset":
        if len(other) == 0:
            return self
        if other.feature_dim != self.feature_dim or other.num_classes != self.num_classes:
            raise DatasetError("cannot concatenate datasets of different shape")
        return Dataset(np.vstack([self.features, other.features]),
                       np.concatenate([self.labels, other.labels]),
                       np.concatenate([self.domains, other.domains]),
                       self.num_classes, self.name)


class LabelVault:
    """Holds withheld target labels and counts who reads them.

    Reads are only legitimate inside :meth:`evaluation`; any other read is
    tallied in ``leaked_reads`` so that an experiment can be audited.
    """

    def __init__(self, labels: np.ndarray):
        self._labels = np.array(labels, dtype=np.int64)
        self._labels.setflags(write=False)
        self._eval_depth = 0
        self.eval_reads = 0
        self.leaked_reads = 0

    def __len__(self) -> int:
        return len(self._labels)

    def evaluation(self):
        vault = self

        class _Ctx:
            def __enter__(self):
                vault._eval_depth += 1
                return vault

            def __exit__(self, *exc):
                vault._eval_depth -= 1
                return False

        return _Ctx()

    def labels(self) -> np.ndarray:
        if self._eval_depth > 0:
            self.eval_reads += 1
        else:
            self.leaked_reads += 1
        return self._labels


def hide_labels(target: Dataset) -> tuple[Dataset, LabelVault]:
    """Split a labelled target set into a label-free view plus its vault."""
    vault = LabelVault(target.labels)
    unlabeled = Dataset(target.features, np.full(len(target), NO_LABEL),
                        np.full(len(target), int(Domain.TARGET)), target.num_classes, target.name)
    return unlabeled, vault


# ---------------------------------------------------------------- generators

def _class_counts(n: int, num_classes: int) -> list[int]:
    base, extra = divmod(n, num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


def gen_two_moons(n: int, noise_sd: float, seed: int, domain: Domain = Domain.SOURCE,
                  name: str = "two-moons") -> Dataset:
    """Two interleaving half circles of radius 1.

    Class 0 is the upper arc centred at the origin, class 1 the lower arc
    centred at (1, 0.5). Arc positions are evenly spaced, noise is Gaussian.
    """
    if n <= 0:
        raise DatasetError("two-moons dataset needs n >= 1 samples")
    if noise_sd < 0:
        raise DatasetError("noise_sd must be non-negative")
    rng = make_rng(seed, 0x6D6F6F6E)
    n0, n1 = _class_counts(n, 2)
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise_sd > 0:
        x = x + rng.normal(0.0, noise_sd, size=x.shape)
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], np.full(n, int(domain)), 2, name)


def gen_blobs(n: int, num_classes: int, centers, spread: float, seed: int,
              proportions: Optional[Sequence[float]] = None, domain: Domain = Domain.SOURCE,
              name: str = "blobs") -> Dataset:
    """Isotropic Gaussian clusters, one per class.

    With ``proportions`` the per-class counts are ``floor(n * p_c)`` with the
    remainder handed out to the lowest class ids; otherwise classes are
    balanced.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] != num_classes:
        raise DatasetError(f"need exactly {num_classes} centers, got {centers.shape[0] if centers.ndim else 0}")
    if spread < 0:
        raise DatasetError("spread must be non-negative")
    if n <= 0:
        raise DatasetError("blobs dataset needs n >= 1 samples")
    if proportions is None:
        counts = _class_counts(n, num_classes)
    else:
        p = np.asarray(proportions, dtype=np.float64)
        if p.shape != (num_classes,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0):
            raise DatasetError("proportions must be a probability vector of length num_classes")
        counts = [int(math.floor(n * pc)) for pc in p]
        for c in range(n - sum(counts)):
            counts[c % num_classes] += 1
    rng = make_rng(seed, 0x626C6F62)
    y = np.repeat(np.arange(num_classes), counts)
    x = centers[y] + rng.normal(0.0, 1.0, size=(n, centers.shape[1])) * spread
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], np.full(n, int(domain)), num_classes, name)


def shift_domain(d: Dataset, rotation_deg: float = 0.0, translation=None, scale: float = 1.0,
                 noise_sd: float = 0.0, seed: int = 0, domain: Optional[Domain] = None) -> Dataset:
    """``x -> scale * R(rotation) x + translation + noise``; labels untouched."""
    if scale <= 0:
        raise DatasetError("scale must be positive")
    if noise_sd < 0:
        raise DatasetError("noise_sd must be non-negative")
    x = d.features
    if rotation_deg % 360.0 != 0.0:
        if d.feature_dim != 2:
            raise DatasetError("rotation is only supported for 2-D features")
        th = math.radians(rotation_deg)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        x = x @ rot.T
    x = scale * x
    if translation is not None:
        t = np.asarray(translation, dtype=np.float64).reshape(-1)
        if t.shape[0] != d.feature_dim:
            raise DatasetError("translation dimension does not match features")
        x = x + t
    if noise_sd > 0:
        x = x + make_rng(seed, 0x7368696674).normal(0.0, noise_sd, size=x.shape)
    doms = d.domains if domain is None else np.full(len(d), int(domain))
    return Dataset(x, d.labels, doms, d.num_classes, d.name)


# ---------------------------------------------------------------- CSV

def dumps_csv(d: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{j}" for j in range(d.feature_dim)] + ["label", "domain"])
    for i in range(len(d)):
        lab = int(d.labels[i])
        w.writerow([format(float(v), ".17g") for v in d.features[i]]
                   + ["" if lab == NO_LABEL else str(lab), Domain(int(d.domains[i])).tag])
    return buf.getvalue()


def save_csv(d: Dataset, path) -> None:
    Path(path).write_text(dumps_csv(d), encoding="utf-8", newline="\n")


def loads_csv(text: str, name: str = "", num_classes: Optional[int] = None) -> Dataset:
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise DatasetParseError("missing header", 1) from None
    if len(header) < 2 or header[-2:] != ["label", "domain"]:
        raise DatasetParseError("header must end with 'label,domain'", 1)
    dim = len(header) - 2
    if header[:-2] != [f"f{j}" for j in range(dim)]:
        raise DatasetParseError("feature columns must be named f0..f{d-1}", 1)
    feats, labels, doms = [], [], []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != dim + 2:
            raise DatasetParseError(f"expected {dim + 2} fields, got {len(row)}", lineno)
        try:
            x = [float(v) for v in row[:dim]]
        except ValueError:
            raise DatasetParseError("non-numeric feature value", lineno) from None
        if not all(math.isfinite(v) for v in x):
            raise DatasetParseError("non-finite feature value", lineno)
        tag = row[-1].strip()
        if tag not in _TAG_DOMAINS:
            raise DatasetParseError(f"unknown domain tag {tag!r}", lineno)
        dom = _TAG_DOMAINS[tag]
        lab_s = row[-2].strip()
        if lab_s == "":
            if dom != Domain.TARGET:
                raise DatasetParseError(f"{tag} row is missing its label", lineno)
            lab = NO_LABEL
        else:
            try:
                lab = int(lab_s)
            except ValueError:
                raise DatasetParseError(f"label {lab_s!r} is not an integer", lineno) from None
            if lab < 0:
                raise DatasetParseError("negative label", lineno)
        feats.append(x)
        labels.append(lab)
        doms.append(int(dom))
    k = num_classes if num_classes is not None else (max(labels) + 1 if labels else 0)
    x = np.array(feats, dtype=np.float64).reshape(len(feats), dim)
    try:
        return Dataset(x, labels, doms, max(k, 0), name)
    except DatasetError as e:
        raise DatasetParseError(str(e), 1) from None


def load_csv(path, num_classes: Optional[int] = None) -> Dataset:
    p = Path(path)
    return loads_csv(p.read_text(encoding="utf-8"), name=p.stem, num_classes=num_classes)


# ---------------------------------------------------------------- sampling

def _index_stream(n: int, rng: np.random.Generator) -> Iterator[int]:
    while True:
        yield from rng.permutation(n).tolist()


def minibatch_indices(n_source: int, n_target: int, batch: int, seed: int
                      ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless stream of index batches over back-to-back reshuffled epochs.

    Batches may straddle an epoch boundary, so the first ``n`` indices drawn
    from a stream are always a permutation of ``range(n)``.
    """
    if batch <= 0:
        raise DatasetError("batch size must be positive")
    if batch > min(n_source, n_target):
        raise DatasetError(f"batch {batch} exceeds dataset size {min(n_source, n_target)}")
    src = _index_stream(n_source, make_rng(seed, 0x535243))
    tgt = _index_stream(n_target, make_rng(seed, 0x544754))
    while True:
        yield (np.fromiter((next(src) for _ in range(batch)), dtype=np.int64, count=batch),
               np.fromiter((next(tgt) for _ in range(batch)), dtype=np.int64, count=batch))


def minibatch_iter(source: Dataset, target: Dataset, batch: int, seed: int
                   ) -> Iterator[tuple[Dataset, Dataset]]:
    for si, ti in minibatch_indices(len(source), len(target), batch, seed):
        yield source.take(si), target.take(ti)


def reference_benchmark(n: int = 1000, noise_sd: float = 0.15, rotation_deg: float = 30.0,
                        seed: int = 0) -> tuple[Dataset, Dataset]:
    """Two-moons source and an independently drawn, rotated two-moons target.

    The target keeps its labels for evaluation; pass it through
    :func:`hide_labels` before training.
    """
    source = gen_two_moons(n, noise_sd, seed=1000 + seed, name="moons-source")
    drawn = gen_two_moons(n, noise_sd, seed=2000 + seed, domain=Domain.TARGET, name="moons-target")
    return source, shift_domain(drawn, rotation_deg=rotation_deg)
