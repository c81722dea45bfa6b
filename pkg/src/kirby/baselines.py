"""Post-hoc OOD scores on a frozen classifier: MSP, energy, Mahalanobis."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .tensor import softmax

log = logging.getLogger(__name__)


def msp_score(logits: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if logits.shape[1] < 2:
        raise ValueError("MSP needs at least two classes")
    return softmax(logits).max(axis=1)


def energy_score(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """T * logsumexp(logits / T); higher means more ID."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return temperature * logsumexp(logits / temperature, axis=1)


@dataclass
class GaussianFit:
    means: np.ndarray       # K x C'
    covariance: np.ndarray  # C' x C', pooled within-class
    eps: float
    chol: tuple             # Cholesky factor of covariance + eps I

    @classmethod
    def from_moments(cls, means: np.ndarray, covariance: np.ndarray, eps: float = 0.0) -> "GaussianFit":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        covariance = np.asarray(covariance, dtype=np.float64)
        chol = cho_factor(covariance + eps * np.eye(len(covariance)), lower=True)
        return cls(means, covariance, eps, chol)

    def distances(self, features: np.ndarray) -> np.ndarray:
        """Squared Mahalanobis distance to every class mean, N x K."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        out = np.empty((len(features), len(self.means)))
        for c, mu in enumerate(self.means):
            d = features - mu
            out[:, c] = np.einsum("ij,ij->i", d, cho_solve(self.chol, d.T).T)
        return out


def mahalanobis_fit(features: np.ndarray, labels: np.ndarray, num_classes: int | None = None,
                    eps_scale: float = 1e-3) -> GaussianFit:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.arange(num_classes) if num_classes is not None else np.unique(labels)
    width = features.shape[1]
    means, centered = [], []
    for c in classes:
        rows = features[labels == c]
        if len(rows) == 0:
            raise ValueError(f"class {c} has no samples")
        if len(rows) < width + 1:
            log.warning("class %d has %d samples for %d-dim features; relying on regularization", c, len(rows), width)
        means.append(rows.mean(axis=0))
        centered.append(rows - means[-1])
    centered = np.concatenate(centered)
    cov = centered.T @ centered / len(centered)
    cov = 0.5 * (cov + cov.T)
    eps = eps_scale * np.trace(cov) / width
    try:
        chol = cho_factor(cov + eps * np.eye(width), lower=True)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f"covariance not positive definite after eps={eps:.3g}") from err
    return GaussianFit(np.stack(means), cov, eps, chol)


def mahalanobis_score(fit: GaussianFit, features: np.ndarray) -> np.ndarray:
    """Negative distance to the closest class mean; at most 0."""
    return -fit.distances(features).min(axis=1)
