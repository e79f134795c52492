"""Dataset-wide confidence refinement and centroid-based pseudo-labeling.

The refinement divides every confidence by the square root of its class's
total mass over the whole dataset, then renormalizes each row. This damps
classes that soak up most of the assignments. Pseudo-labels are then read off
by cosine distance to confidence-weighted feature centroids.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_confidences
from .network import extract_features, predict_logits, softmax

COLUMN_EPS = 1e-12
EMPTY_MASS = 1e-12
# distances closer than this to the minimum count as ties
TIE_TOL = 1e-9


def depict_refine(p):
    """Refine a row-stochastic confidence matrix ``p`` of shape (n, K).

    Column sums are taken over all rows, so the result for one sample depends on
    every other sample passed in the same call.
    """
    p = check_confidences(p)
    col = p.sum(axis=0)
    col = np.where(col > 0, col, COLUMN_EPS)
    w = p / np.sqrt(col)
    return w / w.sum(axis=1, keepdims=True)


@dataclass
class Centroids:
    rho: np.ndarray  # (K, F)
    empty: np.ndarray  # (K,) bool

    @property
    def num_classes(self):
        return len(self.rho)


def weighted_centroids(features, q_hat):
    features = np.asarray(features, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    if features.ndim != 2 or q_hat.ndim != 2 or len(features) != len(q_hat):
        raise ValueError(
            f"features {features.shape} and refined confidences {q_hat.shape} do not match"
        )
    mass = q_hat.sum(axis=0)
    empty = mass < EMPTY_MASS
    rho = q_hat.T @ features
    rho = np.divide(rho, mass[:, None], out=np.zeros_like(rho), where=~empty[:, None])
    return Centroids(rho, empty)


def cosine_assign(features, centroids, q_hat=None):
    """Nearest centroid by cosine distance ``1 - cos(f, rho_k)``.

    Empty centroids are skipped. Near-ties are resolved by the larger refined
    confidence when ``q_hat`` is given, then by the smallest class index.
    Zero-norm feature rows fall back to the argmax of their ``q_hat`` row
    (class 0 of the non-empty ones without ``q_hat``).
    """
    f = np.asarray(features, dtype=np.float64)
    if np.all(centroids.empty):
        raise ValueError("all centroids are empty")
    f_norm = np.linalg.norm(f, axis=1)
    r_norm = np.linalg.norm(centroids.rho, axis=1)
    dead = centroids.empty | (r_norm == 0)
    if np.all(dead):
        raise ValueError("all centroids are empty or zero")
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (f @ centroids.rho.T) / (f_norm[:, None] * r_norm[None, :])
    dist = 1.0 - cos
    dist[:, dead] = np.inf
    dmin = dist.min(axis=1, keepdims=True)
    near = dist <= dmin + TIE_TOL
    if q_hat is not None:
        q = np.asarray(q_hat, dtype=np.float64)
        score = np.where(near, q, -np.inf)
        labels = np.argmax(score, axis=1)
    else:
        labels = np.argmax(near, axis=1)
    zero = f_norm == 0
    if np.any(zero):
        if q_hat is not None:
            labels[zero] = np.argmax(np.asarray(q_hat)[zero], axis=1)
        else:
            labels[zero] = int(np.flatnonzero(~dead)[0])
    return labels


def _cluster(features, q_hat, iterations):
    weights = q_hat
    for _ in range(max(1, int(iterations))):
        centroids = weighted_centroids(features, weights)
        labels = cosine_assign(features, centroids, q_hat)
        weights = np.eye(q_hat.shape[1])[labels]
    return labels, centroids


def centroid_pseudo_labels(features, confidences, iterations=1):
    """Refine ``confidences``, then alternate centroid estimation and cosine assignment.

    The first pass weights samples by refined confidence; later passes use the
    one-hot assignments of the previous pass.
    """
    return _cluster(features, depict_refine(confidences), iterations)[0]


def pseudo_label_target(model, target, iterations=1):
    """Pseudo-labels for an unlabeled target set from a trained target model."""
    images = getattr(target, "images", target)
    p = softmax(predict_logits(model, images))
    return centroid_pseudo_labels(extract_features(model, images), p, iterations)


class DepictRefiner(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapper around :func:`depict_refine`."""

    def fit(self, X, y=None):
        check_confidences(X)
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        return depict_refine(X)

    def predict(self, X):
        return np.argmax(depict_refine(X), axis=1)


class CentroidPseudoLabeler(ClusterMixin, BaseEstimator):
    """Fit on (features, confidences); ``labels_`` holds the pseudo-labels."""

    def __init__(self, iterations=1):
        self.iterations = iterations

    def fit(self, X, confidences):
        self.labels_, self.centroids_ = _cluster(
            np.asarray(X, dtype=np.float64), depict_refine(confidences), self.iterations
        )
        return self

    def fit_predict(self, X, confidences):
        return self.fit(X, confidences).labels_

    def predict(self, X):
        check_is_fitted(self, "centroids_")
        return cosine_assign(X, self.centroids_)
