"""Projection-head training with the combined contrastive + triplet objective.

A linear head maps frozen image embeddings into the text prototype space.
Pseudo-labels for triplet mining come from a mixture fitted to the projected
training embeddings, refreshed every ``refit_every`` epochs.  Optimization is
Adam with a reduce-on-plateau schedule driven by validation macro AUC.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from . import metric
from .data import LabeledDataset, class_prototypes, generate_meta_text, prototype_encode
from .errors import NonFiniteGradient, ValidationError
from .evaluate import ClassGroups, macro_auc_report, zero_shot_scores
from .mixture import MixtureConfig, e_step, gmm_em_fit, hard_assignments, t_mixture_refine

logger = logging.getLogger(__name__)

LOSS_MODES = ("contrastive_only", "combined")
REFINE_MODES = ("gmm_only", "t_refine")
INIT_LOGIT_SCALE = math.log(1.0 / 0.07)
MAX_LOGIT_SCALE = math.log(100.0)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 10
    margin: float = 0.2
    dof: float = 4.0
    n_components: int = 40
    seed: int = 0
    lr_factor: float = 0.1
    lr_patience: int = 2
    lr_threshold: float = 1e-4
    loss_mode: str = "combined"
    refine: str = "t_refine"
    refit_every: int = 1
    d_out: Optional[int] = None
    covariance_type: str = "diag"
    refit_max_iter: int = 200
    refit_tol: float = 1e-5
    text_seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 2 or self.epochs < 1:
            raise ValidationError("need batch_size >= 2 and epochs >= 1")
        if not 0 < self.lr_factor < 1 or self.lr_patience < 0 or self.lr <= 0:
            raise ValidationError("need 0 < lr_factor < 1, lr_patience >= 0, lr > 0")
        if self.loss_mode not in LOSS_MODES or self.refine not in REFINE_MODES:
            raise ValidationError(f"loss_mode in {LOSS_MODES}, refine in {REFINE_MODES}")
        if self.refit_every < 1 or self.n_components < 1 or self.margin < 0:
            raise ValidationError("need refit_every >= 1, n_components >= 1, margin >= 0")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["betas"] = list(self.betas)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


# ---------------------------------------------------------------------------
# head


@dataclass
class Head:
    weight: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)

    @classmethod
    def init(cls, d_in: int, d_out: Optional[int] = None, seed: int = 0) -> "Head":
        """Identity when the dimensions agree, otherwise a seeded Gaussian map."""
        d_out = d_in if d_out is None else d_out
        if d_out == d_in:
            weight = np.eye(d_in)
        else:
            weight = np.random.default_rng([seed, 0xEAD]).standard_normal((d_in, d_out)) / math.sqrt(d_in)
        return cls(weight, np.zeros(d_out))


def head_forward(head: Head, emb, *, return_norms: bool = False):
    """Project and L2-normalize rows; zero rows map to ``e1``."""
    X = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    Y = X @ head.weight + head.bias
    norms = np.linalg.norm(Y, axis=1)
    zero = norms == 0.0
    Z = Y / np.where(zero, 1.0, norms)[:, None]
    if zero.any():
        logger.warning("%d projected row(s) are zero; mapping to e1", int(zero.sum()))
        Z[zero] = 0.0
        Z[zero, 0] = 1.0
    return (Z, norms) if return_norms else Z


def head_backward(head: Head, emb, Z, norms, grad_out):
    """Gradients of a loss w.r.t. ``(weight, bias)`` given dL/dZ.

    Rows that were mapped to ``e1`` contribute no gradient.
    """
    X = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    G = np.asarray(grad_out, dtype=np.float64)
    radial = np.sum(Z * G, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, np.inf)[:, None]
    dY = (G - Z * radial) / safe
    return X.T @ dY, dY.sum(axis=0)


# ---------------------------------------------------------------------------
# optimizer and scheduler


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, adam: AdamState, grads: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns new ``(params, adam)``.

    Raises:
        NonFiniteGradient: any gradient entry is NaN or infinite; inputs are
            left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
    b1, b2 = betas
    t = adam.t + 1
    new_params, m, v = dict(params), {}, {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m[name] = b1 * adam.m.get(name, 0.0) + (1 - b1) * g
        v[name] = b2 * adam.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1**t)
        v_hat = v[name] / (1 - b2**t)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


@dataclass
class PlateauState:
    lr: float
    best: float = -math.inf
    bad_epochs: int = 0


def scheduler_step(state: PlateauState, metric_value: float, *, factor: float = 0.1, patience: int = 2,
                   threshold: float = 1e-4) -> PlateauState:
    """Reduce-on-plateau for a higher-is-better metric.

    An epoch improves when the metric beats the best so far by more than
    ``threshold``.  After ``patience + 1`` consecutive non-improving epochs
    the learning rate is multiplied by ``factor`` and the counter resets.
    """
    if not math.isfinite(metric_value):
        raise ValidationError(f"scheduler metric must be finite, got {metric_value}")
    if metric_value > state.best + threshold:
        return PlateauState(state.lr, metric_value, 0)
    bad = state.bad_epochs + 1
    if bad > patience:
        return PlateauState(state.lr * factor, state.best, 0)
    return PlateauState(state.lr, state.best, bad)


# ---------------------------------------------------------------------------
# state, reports, checkpoints


@dataclass
class TrainState:
    head: Head
    logit_scale: float
    adam: AdamState
    plateau: PlateauState
    epoch: int = 0
    seed: int = 0
    pseudo_labels: Optional[np.ndarray] = None

    @classmethod
    def init(cls, d_in: int, config: TrainConfig) -> "TrainState":
        return cls(
            head=Head.init(d_in, config.d_out, config.seed),
            logit_scale=INIT_LOGIT_SCALE,
            adam=AdamState(),
            plateau=PlateauState(config.lr),
            seed=config.seed,
        )

    @property
    def params(self) -> dict:
        return {"weight": self.head.weight, "bias": self.head.bias, "logit_scale": np.float64(self.logit_scale)}

    def to_dict(self) -> dict:
        def arr(a):
            return np.asarray(a, dtype=np.float64).tolist()

        return {
            "weight": arr(self.head.weight),
            "bias": arr(self.head.bias),
            "logit_scale": float(self.logit_scale),
            "adam": {
                "t": self.adam.t,
                "m": {k: arr(v) for k, v in sorted(self.adam.m.items())},
                "v": {k: arr(v) for k, v in sorted(self.adam.v.items())},
            },
            "lr": self.plateau.lr,
            "best": None if math.isinf(self.plateau.best) else self.plateau.best,
            "bad_epochs": self.plateau.bad_epochs,
            "epoch": self.epoch,
            "seed": self.seed,
            "pseudo_labels": None if self.pseudo_labels is None else [int(x) for x in self.pseudo_labels],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainState":
        def arr(name, src):
            a = np.asarray(src, dtype=np.float64)
            return a if name != "logit_scale" else np.float64(a)

        adam = doc["adam"]
        return cls(
            head=Head(np.asarray(doc["weight"], dtype=np.float64), np.asarray(doc["bias"], dtype=np.float64)),
            logit_scale=float(doc["logit_scale"]),
            adam=AdamState(
                {k: arr(k, v) for k, v in adam["m"].items()},
                {k: arr(k, v) for k, v in adam["v"].items()},
                int(adam["t"]),
            ),
            plateau=PlateauState(
                float(doc["lr"]),
                -math.inf if doc["best"] is None else float(doc["best"]),
                int(doc["bad_epochs"]),
            ),
            epoch=int(doc["epoch"]),
            seed=int(doc["seed"]),
            pseudo_labels=None if doc["pseudo_labels"] is None else np.asarray(doc["pseudo_labels"], dtype=np.int64),
        )


@dataclass
class EpochReport:
    epoch: int
    loss: float
    contrastive: float
    triplet: float
    auc_total: Optional[float]
    auc_base: Optional[float]
    auc_rare: Optional[float]
    lr: float
    refit_loglik: Optional[float] = None
    n_batches: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def save_checkpoint(path, state: TrainState, config: TrainConfig, reports: list) -> None:
    """Atomically write the checkpoint JSON (write to a temp file, then rename)."""
    doc = {
        "format": "tailmix-checkpoint/1",
        "config": config.to_dict(),
        "state": state.to_dict(),
        "reports": [r.to_dict() for r in reports],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "tailmix-checkpoint/1":
        raise ValidationError(f"{path}: not a tailmix checkpoint")
    return (
        TrainState.from_dict(doc["state"]),
        TrainConfig.from_dict(doc["config"]),
        [EpochReport(**r) for r in doc["reports"]],
    )


# ---------------------------------------------------------------------------
# training


def refit_pseudolabels(state: TrainState, train_emb, config: TrainConfig):
    """Cluster the projected training embeddings; returns (labels, loglik)."""
    Z = head_forward(state.head, train_emb)
    mcfg = MixtureConfig(covariance_type=config.covariance_type, tol=config.refit_tol, max_iter=config.refit_max_iter)
    seed = config.seed * 100_003 + state.epoch
    model, trace = gmm_em_fit(Z, config.n_components, seed, mcfg)
    if config.refine == "t_refine":
        model, trace = t_mixture_refine(Z, model, config.dof, mcfg)
    resp, _ = e_step(Z, model)
    return hard_assignments(resp), trace.loglik[-1]


@dataclass
class TrainingData:
    """Arrays the training loop needs, aligned by row."""

    train_emb: np.ndarray
    train_text: np.ndarray
    val_emb: np.ndarray
    val_positives: np.ndarray
    prototypes: np.ndarray
    groups: ClassGroups
    classes: list
    counts: np.ndarray


def prepare_training_data(dataset: LabeledDataset, embeddings, groups: ClassGroups, config: TrainConfig) -> TrainingData:
    """Split rows, build paired meta-text prototypes and zero-shot prompts."""
    tr = dataset.indices("train")
    va = dataset.indices("test")
    X = embeddings.aligned_to(dataset.ids)
    d_out = config.d_out or X.shape[1]
    cache = {}
    text = np.empty((len(tr), d_out))
    for r, i in enumerate(tr):
        caption = generate_meta_text(dataset.label_sets[i], dataset.vocabulary)
        if caption not in cache:
            cache[caption] = prototype_encode(caption, d_out, config.text_seed)
        text[r] = cache[caption]
    return TrainingData(
        train_emb=X[tr],
        train_text=text,
        val_emb=X[va],
        val_positives=dataset.label_matrix(va),
        prototypes=class_prototypes(dataset.vocabulary, d_out, config.text_seed),
        groups=groups,
        classes=list(dataset.vocabulary),
        counts=dataset.counts(),
    )


def evaluate_state(state: TrainState, data: TrainingData):
    """Validation macro AUC report for a snapshot of ``state`` (no mutation)."""
    Z = head_forward(state.head, data.val_emb)
    scores = zero_shot_scores(Z, data.prototypes)
    return macro_auc_report(scores, data.val_positives, data.groups, data.classes, data.counts)


def _batch_loss(state: TrainState, X, T, labels, config: TrainConfig):
    Z, norms = head_forward(state.head, X, return_norms=True)
    scale = math.exp(state.logit_scale)
    if config.loss_mode == "combined":
        bundle = metric.combined_loss(Z, T, labels, config.margin, scale, check=False)
    else:
        bundle = metric.contrastive_loss(Z, T, scale, check=False)
        bundle.parts = {"contrastive": bundle.value, "triplet": 0.0}
    gw, gb = head_backward(state.head, X, Z, norms, bundle.grad_image)
    grads = {"weight": gw, "bias": gb, "logit_scale": np.float64(bundle.grad_logit_scale * scale)}
    return bundle, grads


def train_epoch(state: TrainState, data: TrainingData, config: TrainConfig,
                on_batch: Optional[Callable] = None) -> tuple[TrainState, EpochReport]:
    """Run one epoch (refit, shuffled batches, validation, scheduler)."""
    refit_ll = None
    labels = state.pseudo_labels
    if config.loss_mode == "combined" and (labels is None or state.epoch % config.refit_every == 0):
        labels, refit_ll = refit_pseudolabels(state, data.train_emb, config)
    n = data.train_emb.shape[0]
    order = np.random.default_rng([config.seed, state.epoch]).permutation(n)
    params, adam = state.params, state.adam
    totals = np.zeros(3)
    n_batches = 0
    for start in range(0, n, config.batch_size):
        rows = order[start : start + config.batch_size]
        if rows.size < 2:
            continue
        current = replace(state, head=Head(params["weight"], params["bias"]), logit_scale=float(params["logit_scale"]))
        batch_labels = None if labels is None else labels[rows]
        bundle, grads = _batch_loss(current, data.train_emb[rows], data.train_text[rows], batch_labels, config)
        params, adam = adam_step(params, adam, grads, state.plateau.lr, config.betas, config.adam_eps)
        params["logit_scale"] = np.float64(min(float(params["logit_scale"]), MAX_LOGIT_SCALE))
        parts = (bundle.value, bundle.parts["contrastive"], bundle.parts["triplet"])
        totals += parts
        if on_batch is not None:
            on_batch(state.epoch, n_batches, *parts)
        n_batches += 1
    new = replace(
        state,
        head=Head(params["weight"], params["bias"]),
        logit_scale=float(params["logit_scale"]),
        adam=adam,
        pseudo_labels=labels,
    )
    report = evaluate_state(new, data)
    metric_value = report.total if report.total is not None else 0.5
    plateau = scheduler_step(new.plateau, metric_value, factor=config.lr_factor,
                             patience=config.lr_patience, threshold=config.lr_threshold)
    means = totals / max(n_batches, 1)
    epoch_report = EpochReport(
        epoch=state.epoch,
        loss=float(means[0]),
        contrastive=float(means[1]),
        triplet=float(means[2]),
        auc_total=report.total,
        auc_base=report.base,
        auc_rare=report.rare,
        lr=plateau.lr,
        refit_loglik=refit_ll,
        n_batches=n_batches,
    )
    return replace(new, plateau=plateau, epoch=state.epoch + 1), epoch_report


def train(data: TrainingData, config: TrainConfig, state: Optional[TrainState] = None,
          reports: Optional[list] = None, on_epoch: Optional[Callable] = None,
          on_batch: Optional[Callable] = None):
    """Train until ``config.epochs``; resumes from ``state`` when given.

    ``on_epoch(state, reports)`` runs after every epoch (used for
    checkpointing).  Returns ``(state, reports)``.
    """
    state = state or TrainState.init(data.train_emb.shape[1], config)
    reports = list(reports or [])
    while state.epoch < config.epochs:
        state, report = train_epoch(state, data, config, on_batch)
        reports.append(report)
        logger.info(
            "epoch %d loss %.4f (c %.4f, m %.4f) auc total %s rare %s lr %.2g",
            report.epoch, report.loss, report.contrastive, report.triplet,
            _fmt(report.auc_total), _fmt(report.auc_rare), report.lr,
        )
        if on_epoch is not None:
            on_epoch(state, reports)
    return state, reports


def _fmt(x):
    return "n/a" if x is None else f"{x:.4f}"
