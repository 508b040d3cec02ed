"""Pseudo-label scoring of target samples and top-fraction selection."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational

import numpy as np

_EPS = 1e-12


@dataclass(frozen=True)
class ScoreTable:
    p: np.ndarray
    p_na: np.ndarray
    p_lp: np.ndarray
    p_all: np.ndarray

    @property
    def pseudo_label(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class id on ties
        return np.argmax(self.p_all, axis=1)

    @property
    def confidence(self) -> np.ndarray:
        return np.max(self.p_all, axis=1)

    def __len__(self) -> int:
        return self.p_all.shape[0]

    def save_csv(self, path) -> None:
        K = self.p_all.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "confidence", "pseudo_label"] + [f"p_{c}" for c in range(K)])
            for i, (conf, lab, row) in enumerate(zip(self.confidence, self.pseudo_label, self.p_all)):
                w.writerow([i, format(conf, ".17g"), int(lab)] + [format(v, ".17g") for v in row])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _EPS)


def cosine_similarity_matrix(x: np.ndarray) -> np.ndarray:
    u = _unit_rows(np.asarray(x, dtype=np.float64))
    return u @ u.T


def neighborhood_scores(target_features: np.ndarray, target_probs: np.ndarray, m: int) -> np.ndarray:
    """Mean class probabilities of each sample's ``m`` nearest other targets.

    Distance is cosine distance; ties go to the lower index.
    """
    n = target_features.shape[0]
    if m <= 0:
        raise ValueError("number of neighbours must be positive")
    if m > n - 1:
        raise ValueError(f"cannot take {m} neighbours among {n - 1} other samples")
    dist = 1.0 - cosine_similarity_matrix(target_features)
    np.fill_diagonal(dist, np.inf)
    nbrs = np.argsort(dist, axis=1, kind="stable")[:, :m]
    return target_probs[nbrs].mean(axis=1)


def knn_affinity(features: np.ndarray, num_neighbors: int, mutual: bool = True) -> np.ndarray:
    """Sparsified cosine affinity; negative similarities are clamped to 0.

    An edge survives if each endpoint is among the other's ``num_neighbors``
    most similar samples (``mutual``) or if either is (``mutual=False``).
    """
    n = features.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    k = min(num_neighbors, n - 1)
    sim = cosine_similarity_matrix(features)
    np.fill_diagonal(sim, -np.inf)
    keep = np.zeros((n, n), dtype=bool)
    if k > 0:
        nbrs = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        keep[np.repeat(np.arange(n), k), nbrs.ravel()] = True
    keep = (keep & keep.T) if mutual else (keep | keep.T)
    np.fill_diagonal(sim, 0.0)
    return np.where(keep, np.maximum(sim, 0.0), 0.0)


def normalized_laplacian(affinity: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` with isolated nodes given degree 1."""
    deg = affinity.sum(axis=1)
    deg = np.where(deg > 0, deg, 1.0)
    s = 1.0 / np.sqrt(deg)
    lap = -(s[:, None] * affinity * s[None, :])
    lap[np.diag_indices_from(lap)] += (affinity.sum(axis=1) > 0).astype(np.float64)
    return lap


def conjugate_gradient(matvec, b: np.ndarray, tol: float = 1e-12, max_iter: int | None = None) -> np.ndarray:
    """Solve ``A X = B`` column by column for symmetric positive-definite ``A``.

    Stops once ``||A x - b|| <= tol * ||b||`` for every column.
    """
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 1
    B = b.reshape(len(b), -1)
    X = np.zeros_like(B)
    R = B - matvec(X)
    P = R.copy()
    rs = np.sum(R * R, axis=0)
    bnorm = np.linalg.norm(B, axis=0)
    target = (tol * np.maximum(bnorm, _EPS)) ** 2
    max_iter = max_iter or 10 * len(B) + 10
    for _ in range(max_iter):
        active = rs > target
        if not active.any():
            break
        AP = matvec(P)
        pap = np.sum(P * AP, axis=0)
        alpha = np.where(active, rs / np.where(pap > 0, pap, 1.0), 0.0)
        X += alpha * P
        R -= alpha * AP
        rs_new = np.sum(R * R, axis=0)
        beta = np.where(active, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        P = R + beta * P
        rs = rs_new
    return X.ravel() if squeeze else X


def propagate(affinity: np.ndarray, anchors: np.ndarray, lam: float, tol: float = 1e-12) -> np.ndarray:
    """Raw minimiser of ``||P - Y||^2 + lam * tr(P^T L_sym P)``: solves ``(I + lam L_sym) P = Y``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    anchors = np.asarray(anchors, dtype=np.float64)
    if lam == 0:
        return anchors.copy()
    lap = normalized_laplacian(affinity)
    return conjugate_gradient(lambda v: v + lam * (lap @ v), anchors, tol=tol)


def to_simplex(raw: np.ndarray, fallback: np.ndarray | None = None) -> np.ndarray:
    """Clamp at zero and renormalise rows; all-zero rows take ``fallback`` (default uniform)."""
    clipped = np.maximum(raw, 0.0)
    s = clipped.sum(axis=1, keepdims=True)
    K = raw.shape[1]
    fb = np.full_like(raw, 1.0 / K) if fallback is None else fallback
    return np.where(s > _EPS, clipped / np.where(s > _EPS, s, 1.0), fb)


def label_propagation(all_features: np.ndarray, source_onehots: np.ndarray, target_probs: np.ndarray,
                      lam: float = 1.0, num_neighbors: int = 10, target_anchor: str = "probs",
                      mutual: bool = True) -> np.ndarray:
    """Propagated class distributions for the target rows.

    ``all_features`` stacks source rows first, then target rows, matching
    ``source_onehots`` and ``target_probs``.
    """
    ns = source_onehots.shape[0]
    if all_features.shape[0] != ns + target_probs.shape[0]:
        raise ValueError("feature rows must equal source rows plus target rows")
    if target_anchor == "probs":
        t_anchor = target_probs
    elif target_anchor == "zero":
        t_anchor = np.zeros_like(target_probs)
    else:
        raise ValueError(f"unknown target anchor {target_anchor!r}")
    if lam == 0:
        # no smoothing: probs anchors come back unchanged, zero anchors fall back to probs
        return np.array(target_probs, dtype=np.float64)
    anchors = np.vstack([source_onehots, t_anchor])
    raw = propagate(knn_affinity(all_features, num_neighbors, mutual), anchors, lam)
    return to_simplex(raw[ns:], fallback=target_probs)


def combined_scores(p: np.ndarray, p_na: np.ndarray, p_lp: np.ndarray) -> ScoreTable:
    if not (p.shape == p_na.shape == p_lp.shape):
        raise ValueError(f"score shapes differ: {p.shape}, {p_na.shape}, {p_lp.shape}")
    return ScoreTable(p, p_na, p_lp, (p + p_na + p_lp) / 3.0)


def selection_size(fraction, n_t: int) -> int:
    """``floor(fraction * n_t)``, exact for rationals and robust to float round-off."""
    if isinstance(fraction, Rational):
        f = Fraction(fraction)
        if not 0 <= f <= 1:
            raise ValueError("fraction must lie in [0, 1]")
        return (f.numerator * n_t) // f.denominator
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    return min(n_t, int(math.floor(fraction * n_t + 1e-9)))


def select_top_fraction(table: ScoreTable, fraction) -> list[tuple[int, int]]:
    """Most confident ``floor(fraction * n_t)`` targets as ``(index, pseudo_label)`` pairs."""
    n = selection_size(fraction, len(table))
    if n == 0:
        return []
    order = np.lexsort((np.arange(len(table)), -table.confidence))[:n]
    labels = table.pseudo_label
    return [(int(i), int(labels[i])) for i in order]

