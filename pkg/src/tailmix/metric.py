"""Contrastive and triplet objectives with analytic gradients.

All functions are pure numpy on float64 arrays.  Gradients are taken with
respect to the raw embedding matrices (and the logit scale multiplier), so
they can be checked directly against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import NotNormalized, ValidationError

NORM_TOL = 1e-6


class Triplet(NamedTuple):
    a: int
    p: int
    n: int


@dataclass
class LossBundle:
    value: float
    grad_image: np.ndarray
    grad_text: np.ndarray
    grad_logit_scale: float = 0.0
    parts: dict = field(default_factory=dict)


def pairwise_distances(emb) -> np.ndarray:
    """Euclidean distance matrix via the Gram expansion, clamped at zero."""
    X = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    gram = X @ X.T
    gram = 0.5 * (gram + gram.T)
    sq = np.diag(gram)
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def triplet_mask(pseudo_labels) -> np.ndarray:
    """Boolean (n, n, n) mask of valid (anchor, positive, negative) index triples."""
    labels = np.asarray(pseudo_labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    return pos[:, :, None] & ~same[:, None, :]


def mine_triplets(pseudo_labels) -> list[Triplet]:
    """Every valid triplet of the batch, in lexicographic (a, p, n) order."""
    idx = np.argwhere(triplet_mask(pseudo_labels))
    return [Triplet(int(a), int(p), int(n)) for a, p, n in idx]


def triplet_loss(emb, pseudo_labels, margin: float = 0.2) -> LossBundle:
    """Batch-all hinge loss ``max(0, d(a,p) - d(a,n) + margin)``.

    The value is averaged over all valid triplets (active or not), 0 when the
    batch has none.  The subgradient is 0 at the hinge kink and wherever a
    pairwise distance is exactly 0.
    """
    if margin < 0:
        raise ValidationError(f"margin must be >= 0, got {margin}")
    X = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    mask = triplet_mask(pseudo_labels)
    count = int(mask.sum())
    zeros = np.zeros_like(X)
    if count == 0:
        return LossBundle(0.0, zeros, zeros.copy())
    dist = pairwise_distances(X)
    hinge = dist[:, :, None] - dist[:, None, :] + margin
    active = mask & (hinge > 0)
    value = float(np.sum(hinge, where=active)) / count

    # d(a,p) enters with +1 per active triplet, d(a,n) with -1
    pair_w = (active.sum(axis=2) - active.sum(axis=1)) / count
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(dist > 0, pair_w / dist, 0.0)
    sym = coef + coef.T
    grad = sym.sum(axis=1)[:, None] * X - sym @ X
    return LossBundle(value, grad, zeros.copy())


def _check_normalized(name: str, M: np.ndarray) -> None:
    dev = np.abs(np.linalg.norm(M, axis=1) - 1.0).max()
    if dev > NORM_TOL:
        raise NotNormalized(f"{name} rows must be unit norm (max deviation {dev:.3g})")


def contrastive_loss(img, txt, logit_scale: float, *, check: bool = True) -> LossBundle:
    """Symmetric InfoNCE over ``logit_scale * img @ txt.T`` with diagonal targets.

    Args:
        img: (bs, d) unit-norm image embeddings.
        txt: (bs, d) unit-norm text embeddings paired row by row with ``img``.
        logit_scale: the temperature multiplier applied to cosine similarities.
        check: verify the unit-norm precondition.

    Returns:
        LossBundle with gradients for both embedding sets and the multiplier.
    """
    img = np.atleast_2d(np.asarray(img, dtype=np.float64))
    txt = np.atleast_2d(np.asarray(txt, dtype=np.float64))
    bs = img.shape[0]
    if bs < 2 or txt.shape != img.shape:
        raise ValidationError(f"need matching (bs >= 2, d) inputs, got {img.shape} and {txt.shape}")
    if check:
        _check_normalized("image", img)
        _check_normalized("text", txt)
    sim = img @ txt.T
    logits = logit_scale * sim
    diag = np.diag(logits)
    row_loss = np.mean(logsumexp(logits, axis=1) - diag)
    col_loss = np.mean(logsumexp(logits, axis=0) - diag)
    value = 0.5 * (row_loss + col_loss)

    eye = np.eye(bs)
    dlogits = 0.5 * ((softmax(logits, axis=1) - eye) + (softmax(logits, axis=0) - eye)) / bs
    return LossBundle(
        value=float(value),
        grad_image=logit_scale * dlogits @ txt,
        grad_text=logit_scale * dlogits.T @ img,
        grad_logit_scale=float(np.sum(dlogits * sim)),
    )


def combined_loss(img, txt, pseudo_labels, margin: float, logit_scale: float, *, check: bool = True) -> LossBundle:
    """``L_c + L_m`` with equal weights; the triplet term sees image embeddings only."""
    c = contrastive_loss(img, txt, logit_scale, check=check)
    m = triplet_loss(img, pseudo_labels, margin)
    return LossBundle(
        value=c.value + m.value,
        grad_image=c.grad_image + m.grad_image,
        grad_text=c.grad_text,
        grad_logit_scale=c.grad_logit_scale,
        parts={"contrastive": c.value, "triplet": m.value},
    )
