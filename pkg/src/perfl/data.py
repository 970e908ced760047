"""LIBSVM-format ingestion, client splitting, and the row normalization used
by the logistic experiments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .losses import LogisticLoss

__all__ = [
    "Dataset",
    "ClientSplit",
    "parse_libsvm",
    "serialize_libsvm",
    "split",
    "normalize",
    "dense",
    "client_losses",
    "synthetic_logistic",
]


@dataclass
class Dataset:
    """Sparse rows as (index, value) pairs with 1-based, strictly increasing
    indices; labels live in {-1, +1}; d is the largest index seen."""

    rows: list
    labels: np.ndarray
    d: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=float)
        if len(self.rows) != self.labels.size or self.labels.size < 1:
            raise ValueError("need one label per row and at least one row")

    @property
    def size(self) -> int:
        return len(self.rows)


def parse_libsvm(source) -> Dataset:
    """Parse LIBSVM text: "<label> <idx>:<val> ...". Any positive label maps
    to +1, everything else to -1. Blank lines and #-comments are skipped."""
    text = source.read() if hasattr(source, "read") else str(source)
    rows, labels = [], []
    d = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            lab = float(parts[0])
        except ValueError:
            raise ValueError(f"line {lineno}: label {parts[0]!r} is not numeric") from None
        feats = []
        prev = 0
        for tok in parts[1:]:
            try:
                idx_s, val_s = tok.split(":", 1)
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise ValueError(f"line {lineno}: malformed feature {tok!r}") from None
            if idx <= prev:
                raise ValueError(
                    f"line {lineno}: indices must be strictly increasing, "
                    f"got {idx} after {prev}"
                )
            prev = idx
            feats.append((idx, val))
            d = max(d, idx)
        rows.append(feats)
        labels.append(1.0 if lab > 0 else -1.0)
    if not rows:
        raise ValueError("no data lines found")
    return Dataset(rows, np.array(labels), d)


def serialize_libsvm(data: Dataset) -> str:
    lines = []
    for feats, lab in zip(data.rows, data.labels):
        head = "+1" if lab > 0 else "-1"
        lines.append(" ".join([head] + [f"{i}:{v!r}" for i, v in feats]))
    return "\n".join(lines) + "\n"


@dataclass
class ClientSplit:
    assignment: List[np.ndarray]
    n: int
    m: int
    dropped: int

    def manifest_csv(self) -> str:
        lines = ["client_id,row_index"]
        for cid, idxs in enumerate(self.assignment):
            lines.extend(f"{cid},{int(r)}" for r in idxs)
        return "\n".join(lines) + "\n"


def split(data: Dataset, n: int, mode: str, seed: int = 0) -> ClientSplit:
    """Equal-size client assignment; the rows mod n remainder is dropped.

    heterogeneous: stable sort by label (-1 first), contiguous chunks, so
    clients end up label-pure whenever counts divide evenly. homogeneous:
    seeded uniform permutation, contiguous chunks.
    """
    if n < 1:
        raise ValueError("need at least one client")
    if n > data.size:
        raise ValueError(f"cannot split {data.size} rows across {n} clients")
    if mode not in ("homogeneous", "heterogeneous"):
        raise ValueError(f"unknown split mode {mode!r}")
    m = data.size // n
    if mode == "heterogeneous":
        order = np.argsort(data.labels, kind="stable")
    else:
        order = np.random.default_rng(np.random.SeedSequence(seed)).permutation(data.size)
    assignment = [order[i * m:(i + 1) * m] for i in range(n)]
    return ClientSplit(assignment, n, m, data.size - n * m)


def normalize(data: Dataset) -> Dataset:
    """Rescale each nonzero row to Euclidean norm 2, making the logistic
    summand curvature bound (1/4)||a||^2 exactly 1. Zero rows pass through."""
    new_rows = []
    for feats in data.rows:
        nrm = np.sqrt(sum(v * v for _, v in feats))
        if nrm == 0:
            new_rows.append(list(feats))
        else:
            s = 2.0 / nrm
            new_rows.append([(i, v * s) for i, v in feats])
    return Dataset(new_rows, data.labels.copy(), data.d)


def dense(data: Dataset, indices: Optional[np.ndarray] = None):
    """Materialize (rows, labels) as dense arrays, optionally a row subset."""
    idxs = np.arange(data.size) if indices is None else np.asarray(indices)
    X = np.zeros((len(idxs), data.d))
    for out_i, row_i in enumerate(idxs):
        for j, v in data.rows[int(row_i)]:
            X[out_i, j - 1] = v
    return X, data.labels[idxs]


def client_losses(data: Dataset, sp: ClientSplit, reg: float) -> List[LogisticLoss]:
    out = []
    for idxs in sp.assignment:
        X, y = dense(data, idxs)
        out.append(LogisticLoss(X, y, reg=reg))
    return out


def synthetic_logistic(rows: int, dim: int, seed: int = 0) -> Dataset:
    """Dense synthetic stand-in for a LIBSVM file: Gaussian features with
    labels from a random hyperplane. Rows are not yet normalized."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    w0 = rng.normal(size=dim)
    X = rng.normal(size=(rows, dim))
    labels = np.where(X @ w0 >= 0, 1.0, -1.0)
    data_rows = [[(j + 1, float(X[i, j])) for j in range(dim)] for i in range(rows)]
    return Dataset(data_rows, labels, dim)
