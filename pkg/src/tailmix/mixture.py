"""Gaussian and Student-t mixture models fitted by EM.

The Gaussian fit is seeded with k-means++; the Student-t refinement is warm
started from a fitted Gaussian mixture and runs the classical t-EM with the
latent precision scale ``u_ik = (nu + d) / (nu + delta2_ik)``.  The degrees of
freedom are a fixed hyperparameter shared by all components and are never
re-estimated.

Example:
    >>> model, trace = gmm_em_fit(X, K=3, seed=0)
    >>> refined, _ = t_mixture_refine(X, model, dof=4.0)
    >>> labels = hard_assignments(e_step(X, refined)[0])
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from .errors import InvalidDof, NonSPD, TooFewPoints, ValidationError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
COVARIANCE_TYPES = ("full", "diag")


@dataclass(frozen=True)
class MixtureConfig:
    """EM settings shared by the Gaussian fit and the t refinement.

    Attributes:
        reg: covariance regularizer ``eps``, as a fraction of the mean
            diagonal of the global data covariance.
        reg_mode: ``"floor"`` clips covariance eigenvalues at ``eps``, which
            keeps every M-step an exact constrained maximizer (monotone
            log-likelihood); ``"ridge"`` adds ``eps * I`` to the scatter.
        tol: convergence threshold on the relative log-likelihood change.
        max_iter: maximum number of M-steps.
        covariance_type: ``"full"`` or ``"diag"``.
        empty_mass: components whose total responsibility falls below this
            are re-seeded instead of updated.
    """

    reg: float = 1e-4
    reg_mode: str = "floor"
    tol: float = 1e-6
    max_iter: int = 200
    covariance_type: str = "full"
    empty_mass: float = 1e-6

    def __post_init__(self):
        if self.covariance_type not in COVARIANCE_TYPES:
            raise ValidationError(f"covariance_type must be one of {COVARIANCE_TYPES}")
        if self.reg_mode not in ("floor", "ridge"):
            raise ValidationError("reg_mode must be 'floor' or 'ridge'")
        if self.reg < 0 or self.tol < 0 or self.max_iter < 1:
            raise ValidationError("reg and tol must be >= 0 and max_iter >= 1")


@dataclass
class MixtureModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    dof: float = math.inf
    covariance_type: str = "full"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        self.dof = float(self.dof)
        K, d = self.means.shape
        if K < 1 or d < 1:
            raise ValidationError("mixture needs K >= 1 and d >= 1")
        if self.weights.shape != (K,) or self.covariances.shape != (K, d, d):
            raise ValidationError(
                f"inconsistent shapes: weights {self.weights.shape}, means {self.means.shape}, "
                f"covariances {self.covariances.shape}"
            )
        if self.covariance_type not in COVARIANCE_TYPES:
            raise ValidationError(f"covariance_type must be one of {COVARIANCE_TYPES}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValidationError("mixture weights must lie on the simplex")
        if not (self.dof > 1.0):
            raise InvalidDof(f"degrees of freedom must be > 1 or inf, got {self.dof}")
        asym = np.abs(self.covariances - self.covariances.transpose(0, 2, 1)).max()
        if asym > 1e-9:
            raise ValidationError(f"covariances not symmetric (max deviation {asym:.3g})")
        self.cholesky  # factorization doubles as the SPD check

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def is_gaussian(self) -> bool:
        return math.isinf(self.dof)

    @cached_property
    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factors, shape (K, d, d)."""
        if self.covariance_type == "diag":
            diag = np.diagonal(self.covariances, axis1=1, axis2=2)
            if np.any(diag <= 0):
                raise NonSPD("diagonal covariance has a non-positive entry")
            return np.stack([np.diag(np.sqrt(v)) for v in diag])
        return np.stack([_cholesky(c) for c in self.covariances])

    @cached_property
    def log_dets(self) -> np.ndarray:
        return 2.0 * np.log(np.diagonal(self.cholesky, axis1=1, axis2=2)).sum(axis=1)

    def with_dof(self, dof: float) -> "MixtureModel":
        return replace(self, dof=dof)

    def permuted(self, order: Sequence[int]) -> "MixtureModel":
        order = np.asarray(order)
        return replace(
            self,
            weights=self.weights[order],
            means=self.means[order],
            covariances=self.covariances[order],
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.weights, self.means, self.covariances):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.dof, self.covariance_type)).encode())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "dim": self.dim,
            "dof": "inf" if self.is_gaussian else self.dof,
            "covariance_type": self.covariance_type,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixtureModel":
        dof = doc["dof"]
        model = cls(
            weights=doc["weights"],
            means=doc["means"],
            covariances=doc["covariances"],
            dof=math.inf if dof == "inf" else float(dof),
            covariance_type=doc.get("covariance_type", "full"),
        )
        if model.k != doc["k"] or model.dim != doc["dim"]:
            raise ValidationError("k/dim header disagrees with parameter arrays")
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MixtureModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Responsibilities:
    """Posterior component memberships, one row per point."""

    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class FitTrace:
    loglik: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    gap: float = math.inf
    rescued: int = 0


def _as_matrix(data) -> np.ndarray:
    X = getattr(data, "matrix", data)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(cov, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NonSPD(f"covariance is not positive definite: {exc}") from None


def ridge(data, reg: float = 1e-4) -> float:
    """Covariance ridge: ``reg`` times the mean per-dimension variance."""
    X = _as_matrix(data)
    scale = float(X.var(axis=0).mean())
    if scale <= 0.0:
        logger.warning("data has zero variance in every dimension; using an absolute ridge")
        scale = 1.0
    return reg * scale


def eigenvalue_floor(S: np.ndarray, eps: float) -> np.ndarray:
    """Closest-in-likelihood SPD matrix to ``S`` with all eigenvalues >= eps."""
    vals, vecs = np.linalg.eigh(S)
    if vals.min() >= eps:
        return S
    out = (vecs * np.maximum(vals, eps)) @ vecs.T
    return 0.5 * (out + out.T)


def _global_covariance(X: np.ndarray, covariance_type: str) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    if covariance_type == "diag":
        return np.diag((Xc * Xc).mean(axis=0))
    cov = Xc.T @ Xc / X.shape[0]
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# densities


def _mahalanobis(X: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    Y = linalg.solve_triangular(chol, (X - mean).T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", Y, Y)


def _gaussian_from_delta(delta2, log_det, d):
    return -0.5 * (d * LOG_2PI + log_det + delta2)


def _student_from_delta(delta2, log_det, d, dof):
    const = (
        gammaln(0.5 * (dof + d))
        - gammaln(0.5 * dof)
        - 0.5 * d * math.log(dof * math.pi)
        - 0.5 * log_det
    )
    return const - 0.5 * (dof + d) * np.log1p(delta2 / dof)


def _prepare(z, mean, cov):
    z = np.asarray(z, dtype=np.float64)
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    single = z.ndim <= 1
    Z = z.reshape(1, -1) if single else z
    d = mean.shape[0]
    if Z.shape[1] != d or cov.shape != (d, d):
        raise ValidationError(f"dimension mismatch: z {z.shape}, mean {mean.shape}, cov {cov.shape}")
    chol = _cholesky(cov)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    return Z, mean, chol, log_det, d, single


def gaussian_logpdf(z, mean, cov):
    """Log density of a multivariate normal; ``z`` may be one point or a batch."""
    Z, mean, chol, log_det, d, single = _prepare(z, mean, cov)
    out = _gaussian_from_delta(_mahalanobis(Z, mean, chol), log_det, d)
    return float(out[0]) if single else out


def student_t_logpdf(z, mean, cov, dof, *, allow_boundary: bool = False):
    """Log density of a multivariate Student-t with scale matrix ``cov``.

    ``dof = inf`` dispatches to :func:`gaussian_logpdf`.  ``dof = 1`` (the
    Cauchy case) is rejected unless ``allow_boundary`` is set.
    """
    dof = float(dof)
    if math.isinf(dof):
        return gaussian_logpdf(z, mean, cov)
    if dof < 1.0 or (dof == 1.0 and not allow_boundary) or math.isnan(dof):
        raise InvalidDof(f"degrees of freedom must be > 1, got {dof}")
    Z, mean, chol, log_det, d, single = _prepare(z, mean, cov)
    out = _student_from_delta(_mahalanobis(Z, mean, chol), log_det, d, dof)
    return float(out[0]) if single else out


def component_logpdf(data, model: MixtureModel):
    """Per-component log densities and squared Mahalanobis distances, both (n, K)."""
    X = _as_matrix(data)
    if X.shape[1] != model.dim:
        raise ValidationError(f"data has dimension {X.shape[1]}, model {model.dim}")
    n, d = X.shape
    if model.covariance_type == "diag":
        prec = 1.0 / np.diagonal(model.covariances, axis1=1, axis2=2)
        delta2 = (
            (X * X) @ prec.T
            - 2.0 * X @ (model.means * prec).T
            + np.sum(model.means**2 * prec, axis=1)
        )
        np.maximum(delta2, 0.0, out=delta2)
    else:
        delta2 = np.empty((n, model.k))
        for k in range(model.k):
            delta2[:, k] = _mahalanobis(X, model.means[k], model.cholesky[k])
    if model.is_gaussian:
        logp = _gaussian_from_delta(delta2, model.log_dets, d)
    else:
        logp = _student_from_delta(delta2, model.log_dets, d, model.dof)
    return logp, delta2


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.log(np.exp(a - top[:, None]).sum(axis=1)) + top


def _posterior(X: np.ndarray, model: MixtureModel):
    logp, delta2 = component_logpdf(X, model)
    with np.errstate(divide="ignore"):
        joint = logp + np.log(model.weights)
    norm = _logsumexp_rows(joint)
    resp = np.exp(joint - norm[:, None])
    u = None if model.is_gaussian else (model.dof + X.shape[1]) / (model.dof + delta2)
    return resp, u, float(norm.sum())


def mixture_loglik(data, model: MixtureModel) -> float:
    """Total log-likelihood ``sum_i log sum_k pi_k f_k(z_i)``."""
    logp, _ = component_logpdf(data, model)
    with np.errstate(divide="ignore"):
        joint = logp + np.log(model.weights)
    return float(_logsumexp_rows(joint).sum())


# ---------------------------------------------------------------------------
# EM steps


def kmeans_pp_init(data, K: int, seed: int, config: Optional[MixtureConfig] = None) -> MixtureModel:
    """Seed a Gaussian mixture with greedy k-means++ means and the global covariance.

    Each new center is the best of ``2 + floor(ln K)`` D^2-sampled candidates
    (the one leaving the smallest total squared distance), which keeps
    isolated outliers from claiming components.
    """
    config = config or MixtureConfig()
    X = _as_matrix(data)
    n = X.shape[0]
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    if n < K:
        raise TooFewPoints(f"need at least K={K} points, got {n}")
    rng = np.random.default_rng(seed)
    trials = 2 + int(math.log(K))
    chosen = [int(rng.integers(n))]
    closest = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            cands = rng.choice(n, size=trials, p=closest / total)
        else:
            # duplicated points: fall back to uniform over the unchosen ones
            cands = rng.choice(np.setdiff1d(np.arange(n), chosen), size=1)
        dists = [np.minimum(closest, np.sum((X - X[c]) ** 2, axis=1)) for c in cands]
        best = int(np.argmin([d.sum() for d in dists]))
        idx = int(cands[best])
        chosen.append(idx)
        closest = dists[best]
        closest[chosen] = 0.0
    eps = ridge(X, config.reg)
    cov = _global_covariance(X, config.covariance_type) + eps * np.eye(X.shape[1])
    return MixtureModel(
        weights=np.full(K, 1.0 / K),
        means=X[chosen].copy(),
        covariances=np.repeat(cov[None], K, axis=0),
        dof=math.inf,
        covariance_type=config.covariance_type,
    )


def e_step(data, model: MixtureModel):
    """Responsibilities and, for finite dof, the latent scales ``u`` (n, K)."""
    resp, u, _ = _posterior(_as_matrix(data), model)
    return Responsibilities(resp, model.fingerprint()), u


def _m_step(X, resp, u, config, dof, eps):
    n, d = X.shape
    K = resp.shape[1]
    mass = resp.sum(axis=0)
    empty = np.flatnonzero(mass < config.empty_mass)
    if empty.size:
        mass = mass.copy()
        mass[empty] = 1.0
    w = resp if u is None else resp * u
    wsum = w.sum(axis=0)
    wsum[empty] = 1.0
    means = (w.T @ X) / wsum[:, None]
    ridge_eye = eps * np.eye(d)
    covs = np.empty((K, d, d))
    if config.covariance_type == "diag":
        sq = (w.T @ (X * X)) - 2.0 * means * (w.T @ X) + wsum[:, None] * means**2
        var = np.maximum(sq, 0.0) / mass[:, None]
        var = var + eps if config.reg_mode == "ridge" else np.maximum(var, eps)
        for k in range(K):
            covs[k] = np.diag(var[k])
    else:
        for k in range(K):
            Xc = X - means[k]
            S = (Xc * w[:, k : k + 1]).T @ Xc / mass[k]
            S = 0.5 * (S + S.T)
            covs[k] = S + ridge_eye if config.reg_mode == "ridge" else eigenvalue_floor(S, eps)
    if empty.size:
        # re-seed starving components at the worst-explained points
        order = np.argsort(resp.max(axis=1), kind="stable")
        global_cov = _global_covariance(X, config.covariance_type) + ridge_eye
        for slot, k in enumerate(empty):
            means[k] = X[order[slot % n]]
            covs[k] = global_cov
            mass[k] = 1.0
        logger.warning("re-seeded %d empty mixture component(s)", empty.size)
    return MixtureModel(
        weights=mass / mass.sum(),
        means=means,
        covariances=covs,
        dof=dof,
        covariance_type=config.covariance_type,
    ), int(empty.size)


def m_step(
    data,
    responsibilities,
    scale_weights=None,
    config: Optional[MixtureConfig] = None,
    *,
    dof: float = math.inf,
) -> MixtureModel:
    """Weighted mean/covariance update; ``scale_weights`` switches on t-EM.

    For t-EM the means and scatter use weights ``r_ik * u_ik`` while the
    covariance normalizer stays ``sum_i r_ik``.
    """
    config = config or MixtureConfig()
    X = _as_matrix(data)
    resp = getattr(responsibilities, "values", responsibilities)
    resp = np.asarray(resp, dtype=np.float64)
    if scale_weights is not None and math.isinf(dof):
        raise InvalidDof("scale weights given but dof is infinite")
    model, _ = _m_step(X, resp, scale_weights, config, dof, ridge(X, config.reg))
    return model


def _run_em(X, model, config):
    eps = ridge(X, config.reg)
    trace = FitTrace()
    resp, u, ll = _posterior(X, model)
    trace.loglik.append(ll)
    for _ in range(config.max_iter):
        candidate, rescued = _m_step(X, resp, u, config, model.dof, eps)
        c_resp, c_u, c_ll = _posterior(X, candidate)
        model, resp, u = candidate, c_resp, c_u
        trace.loglik.append(c_ll)
        trace.n_iter += 1
        trace.rescued += rescued
        trace.gap = abs(c_ll - ll) / max(abs(c_ll), 1.0)
        ll = c_ll
        if trace.gap < config.tol and not rescued:
            trace.converged = True
            break
    return model, trace


def gmm_em_fit(data, K: int, seed: int = 0, config: Optional[MixtureConfig] = None):
    """Fit a Gaussian mixture by EM from a k-means++ start.

    Returns:
        (model, trace).  ``trace.loglik[0]`` is the log-likelihood of the
        initial model and ``trace.loglik[-1]`` that of the returned one.
    """
    config = config or MixtureConfig()
    X = _as_matrix(data)
    init = kmeans_pp_init(X, K, seed, config)
    return _run_em(X, init, config)


def t_mixture_refine(data, init: MixtureModel, dof: float = 4.0, config: Optional[MixtureConfig] = None):
    """Refit ``init`` as a Student-t mixture with fixed degrees of freedom."""
    config = config or MixtureConfig(covariance_type=init.covariance_type)
    dof = float(dof)
    if math.isinf(dof) or not dof > 1.0:
        raise InvalidDof(f"refinement needs finite dof > 1, got {dof}")
    if config.covariance_type != init.covariance_type:
        config = replace(config, covariance_type=init.covariance_type)
    return _run_em(_as_matrix(data), init.with_dof(dof), config)


def hard_assignments(responsibilities) -> np.ndarray:
    """Argmax component per row; ties go to the lowest index."""
    values = getattr(responsibilities, "values", responsibilities)
    return np.argmax(np.asarray(values), axis=1)
