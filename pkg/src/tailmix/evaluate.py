"""Zero-shot scoring, rank-based ROC AUC and base/rare macro aggregation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyTestSplit, NotNormalized, ValidationError

logger = logging.getLogger(__name__)

MIMIC_THRESHOLDS = (1000, 10000)
SYNTHETIC_THRESHOLDS = (50, 500)
TIERS = ("common", "medium", "rare")


def zero_shot_scores(image_emb, prototypes, *, tol: float = 1e-6) -> np.ndarray:
    """Cosine similarity of every image to every class prototype, (n, C)."""
    img = np.atleast_2d(np.asarray(image_emb, dtype=np.float64))
    proto = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    for name, M in (("image", img), ("prototype", proto)):
        if M.size and np.abs(np.linalg.norm(M, axis=1) - 1.0).max() > tol:
            raise NotNormalized(f"{name} rows must be unit norm")
    return img @ proto.T


def roc_auc(scores, positives) -> Optional[float]:
    """Mann-Whitney AUC with midranks; ``None`` when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(positives, dtype=bool).ravel()
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ClassGroups:
    tiers: list  # "common" | "medium" | "rare" per class
    thresholds: tuple

    @property
    def base(self) -> np.ndarray:
        return np.array([t != "rare" for t in self.tiers])

    @property
    def rare(self) -> np.ndarray:
        return np.array([t == "rare" for t in self.tiers])

    def tier_counts(self) -> dict:
        return {t: self.tiers.count(t) for t in TIERS}


def bin_classes_by_frequency(counts, thresholds: Sequence[int] = MIMIC_THRESHOLDS) -> ClassGroups:
    """Rare below ``thresholds[0]``, common above ``thresholds[1]``, medium otherwise."""
    low, high = thresholds
    if low > high:
        raise ValidationError(f"thresholds must be ordered, got {thresholds}")
    tiers = []
    for c in counts:
        if c < low:
            tiers.append("rare")
        elif c > high:
            tiers.append("common")
        else:
            tiers.append("medium")
    return ClassGroups(tiers, (low, high))


def _mean_defined(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class AucReport:
    classes: list
    per_class: list
    counts: list
    tiers: list
    total: Optional[float]
    base: Optional[float]
    rare: Optional[float]
    undefined: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "macro": {"total": self.total, "base": self.base, "rare": self.rare},
            "classes": [
                {
                    "name": name,
                    "count": int(count),
                    "tier": tier,
                    "group": "rare" if tier == "rare" else "base",
                    "auc": auc,
                }
                for name, count, tier, auc in zip(self.classes, self.counts, self.tiers, self.per_class)
            ],
            "undefined": list(self.undefined),
        }

    def write_json(self, path, extra: Optional[dict] = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "count", "group", "auc"])
            for name, count, tier, auc in zip(self.classes, self.counts, self.tiers, self.per_class):
                w.writerow([name, int(count), "rare" if tier == "rare" else "base", "" if auc is None else repr(auc)])


def macro_auc_report(scores, positives, groups: ClassGroups, classes: Sequence[str], counts=None) -> AucReport:
    """Per-class AUCs over the evaluated rows and their macro means.

    Classes whose AUC is undefined (no positives or no negatives among the
    rows) are excluded from every macro and listed in ``undefined``.

    Args:
        scores: (n, C) score matrix in vocabulary order.
        positives: (n, C) boolean ground truth for the same rows.
        groups: frequency tiers, one per class.
        classes: class names, vocabulary order.
        counts: per-class counts to echo in the report (defaults to the
            positives among the evaluated rows).
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    positives = np.atleast_2d(np.asarray(positives, dtype=bool))
    if scores.shape[0] == 0:
        raise EmptyTestSplit("no rows to evaluate")
    if scores.shape != positives.shape or scores.shape[1] != len(classes) or len(groups.tiers) != len(classes):
        raise ValidationError("scores, positives, groups and classes are misaligned")
    per_class = [roc_auc(scores[:, j], positives[:, j]) for j in range(len(classes))]
    undefined = [name for name, auc in zip(classes, per_class) if auc is None]
    if undefined:
        logger.info("%d class(es) without a defined AUC: %s", len(undefined), ", ".join(undefined))
    base, rare = groups.base, groups.rare
    counts = positives.sum(axis=0) if counts is None else np.asarray(counts)
    return AucReport(
        classes=list(classes),
        per_class=per_class,
        counts=[int(c) for c in counts],
        tiers=list(groups.tiers),
        total=_mean_defined(per_class),
        base=_mean_defined(a for a, b in zip(per_class, base) if b),
        rare=_mean_defined(a for a, r in zip(per_class, rare) if r),
        undefined=undefined,
    )


def _top_eigenvector(C: np.ndarray, rng, tol: float, max_iter: int):
    v = rng.standard_normal(C.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    scale = max(float(np.abs(np.diag(C)).max()), 1e-300)
    for _ in range(max_iter):
        w = C @ v
        lam = float(v @ w)
        norm = np.linalg.norm(w)
        if norm <= 1e-14 * scale:
            return v, 0.0
        resid = np.linalg.norm(w - lam * v)
        v = w / norm
        if resid <= tol * scale:
            break
    return v, float(v @ C @ v)


def pca_2d_projection(emb, seed: int = 0, *, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Coordinates on the top two principal axes, (n, 2).

    Axes come from seeded power iteration with deflation on the covariance;
    each axis is signed so that its largest-magnitude entry is positive.  A
    rank-deficient second axis yields a zero second coordinate.
    """
    X = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    if X.shape[0] < 2:
        raise ValidationError("projection needs at least 2 points")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / X.shape[0]
    C = 0.5 * (C + C.T)
    rng = np.random.default_rng(seed)
    axes = np.zeros((2, X.shape[1]))
    top = None
    for j in range(min(2, X.shape[1])):
        v, lam = _top_eigenvector(C, rng, tol, max_iter)
        if top is None:
            top = lam
        if lam <= 1e-12 * max(top, 1e-300):
            break
        i = int(np.argmax(np.abs(v)))
        axes[j] = v if v[i] > 0 else -v
        C = C - lam * np.outer(v, v)
    return Xc @ axes.T
