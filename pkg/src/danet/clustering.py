"""Inference-time clustering: k-means (Lloyd, ++ seeding) and full-covariance
GMM fitted by EM. Cluster centers become the attractors at test time."""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

KMEANS_RESTARTS = 5
EM_TOL = 1e-6
EM_MAX_ITER = 100
LL_SLACK = 1e-9


@dataclass
class KMeansResult:
    centers: np.ndarray          # (k, dim)
    assignments: np.ndarray      # (n_points,)
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


@dataclass
class GmmModel:
    weights: np.ndarray          # (k,) on the simplex
    means: np.ndarray            # (k, dim)
    covariances: np.ndarray      # (k, dim, dim) symmetric positive-definite
    log_likelihood: float        # mean per-point log-likelihood at convergence
    ll_history: list[float] = field(default_factory=list)


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (np.sum(points * points, axis=1)[:, None]
          + np.sum(centers * centers, axis=1)[None, :]
          - 2.0 * points @ centers.T)
    return np.maximum(d2, 0.0)


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = _squared_distances(points, centers[:1]).ravel()
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = points[rng.integers(n)]
        else:
            centers[c] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, _squared_distances(points, centers[c:c + 1]).ravel())
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = _squared_distances(points, centers)
        labels = np.argmin(d2, axis=1)
        # Re-seed empty clusters to the point farthest from its center.
        for c in range(centers.shape[0]):
            if not np.any(labels == c):
                far = np.argmax(d2[np.arange(points.shape[0]), labels])
                labels[far] = c
        new_centers = np.stack([points[labels == c].mean(axis=0)
                                for c in range(centers.shape[0])])
        inertia = float(np.sum((points - new_centers[labels]) ** 2))
        history.append(inertia)
        converged = np.allclose(new_centers, centers, rtol=0, atol=tol)
        centers = new_centers
        if converged:
            break
    return centers, labels, history[-1], history


def kmeans(points: np.ndarray, k: int, max_iter: int = 100, tol: float = 1e-10,
           restarts: int = KMEANS_RESTARTS, seed: int = 0) -> KMeansResult:
    """Best-of-restarts Lloyd iterations from k-means++ seeding."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be (n, dim), got {points.shape}")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n_points, got k={k}, n_points={n}")

    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centers0 = _kmeans_pp_seed(points, k, rng)
        centers, labels, inertia, history = _lloyd(points, centers0, max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(centers, labels, inertia, history)
    return best


def _chol_logdet(cov: np.ndarray) -> tuple[np.ndarray, float]:
    chol = np.linalg.cholesky(cov)
    return chol, 2.0 * float(np.sum(np.log(np.diag(chol))))


def _log_densities(points: np.ndarray, model: GmmModel) -> np.ndarray:
    """(n_points, k) log of weight * gaussian density."""
    n, dim = points.shape
    out = np.empty((n, model.weights.size))
    for c in range(model.weights.size):
        chol, logdet = _chol_logdet(model.covariances[c])
        solved = solve_triangular(chol, (points - model.means[c]).T, lower=True)
        maha = np.sum(solved * solved, axis=0)
        out[:, c] = (np.log(model.weights[c]) - 0.5 * maha
                     - 0.5 * (dim * np.log(2.0 * np.pi) + logdet))
    return out


def _log_norm(log_dens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    top = log_dens.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.sum(np.exp(log_dens - top), axis=1))
    return log_dens - lse[:, None], lse


def default_regularization(points: np.ndarray) -> float:
    """1e-6 of the average global variance per dimension, floored to stay positive."""
    global_cov_trace = float(np.sum(np.var(points, axis=0)))
    return max(1e-6 * global_cov_trace / points.shape[1], 1e-10)


def _regularize(cov: np.ndarray, reg: float) -> np.ndarray:
    """Symmetrize and lift eigenvalues to at least reg."""
    cov = 0.5 * (cov + cov.T)
    eigmin = float(np.linalg.eigvalsh(cov)[0])
    if eigmin < 0.0:
        cov = cov + (-eigmin) * np.eye(cov.shape[0])
    return cov + reg * np.eye(cov.shape[0])


def gmm_fit(points: np.ndarray, k: int, max_iter: int = EM_MAX_ITER,
            tol: float = EM_TOL, reg: float | None = None,
            seed: int = 0) -> GmmModel:
    """EM with one full covariance matrix per component.

    Initialized from a k-means run; stops when the mean log-likelihood gain
    drops below tol. The likelihood is checked to be non-decreasing at every
    iteration (1e-9 slack).
    """
    points = np.asarray(points, dtype=np.float64)
    n, dim = points.shape
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available points")
    if reg is None:
        reg = default_regularization(points)
    if reg <= 0:
        raise ValueError(f"reg must be positive, got {reg}")

    km = kmeans(points, k, seed=seed)
    weights = np.array([np.mean(km.assignments == c) for c in range(k)])
    means = km.centers.copy()
    covariances = np.empty((k, dim, dim))
    for c in range(k):
        member = points[km.assignments == c]
        diff = member - means[c]
        covariances[c] = _regularize(diff.T @ diff / member.shape[0], reg)
    model = GmmModel(weights, means, covariances, -np.inf)

    prev_ll = -np.inf
    for _ in range(max_iter):
        log_resp, lse = _log_norm(_log_densities(points, model))
        ll = float(np.mean(lse))
        if ll + LL_SLACK * max(1.0, abs(prev_ll)) < prev_ll:
            raise FloatingPointError(
                f"EM log-likelihood decreased: {prev_ll} -> {ll}")
        model.ll_history.append(ll)
        model.log_likelihood = ll

        resp = np.exp(log_resp)
        mass = resp.sum(axis=0) + 1e-300
        model.weights = mass / mass.sum()
        model.means = (resp.T @ points) / mass[:, None]
        for c in range(k):
            diff = points - model.means[c]
            cov = (resp[:, c][:, None] * diff).T @ diff / mass[c]
            model.covariances[c] = _regularize(cov, reg)

        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll

    _, lse = _log_norm(_log_densities(points, model))
    model.log_likelihood = float(np.mean(lse))
    return model


def gmm_posterior(model: GmmModel, points: np.ndarray) -> np.ndarray:
    """Responsibility matrix (rows on the simplex), log-sum-exp stabilized."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    log_resp, _ = _log_norm(_log_densities(points, model))
    return np.exp(log_resp)


def cluster_attractors(V: np.ndarray, n_speakers: int, algo: str = "gmm",
                       seed: int = 0) -> np.ndarray:
    """Cluster embedding columns; cluster centers become attractor rows.

    Rows are ordered by descending cluster mass so outputs are deterministic
    for a fixed seed.
    """
    if n_speakers < 1:
        raise ValueError(f"n_speakers must be >= 1, got {n_speakers}")
    points = np.asarray(V, dtype=np.float64).T
    if algo == "kmeans":
        result = kmeans(points, n_speakers, seed=seed)
        centers = result.centers
        mass = np.array([np.sum(result.assignments == c) for c in range(n_speakers)],
                        dtype=np.float64)
    elif algo == "gmm":
        model = gmm_fit(points, n_speakers, seed=seed)
        centers = model.means
        mass = model.weights
    else:
        raise ValueError(f"unknown clustering algorithm {algo!r}")
    order = np.argsort(-mass, kind="stable")
    return centers[order]
