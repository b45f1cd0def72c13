"""Accept/exclude decisions over detector-subspace embeddings.

The rule: score each window by cosine similarity between its detector embedding
and the unit centroid of the in-distribution training embeddings, then accept
iff the score is at or above a threshold calibrated as a low percentile of
the training scores. Ties at the threshold accept.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

_EPS = 1e-12


class Decision(str, Enum):
    ACCEPT = "accept"
    EXCLUDE = "exclude"


@dataclass(frozen=True)
class DetectorState:
    """Fitted detector: unit reference centroid plus calibrated threshold."""

    reference_centroid: np.ndarray
    threshold: float
    calibration_percentile: float
    n_calibration: int

    def __post_init__(self):
        centroid = np.array(self.reference_centroid, dtype=np.float64, copy=True)
        centroid.setflags(write=False)
        object.__setattr__(self, "reference_centroid", centroid)
        norm = np.linalg.norm(centroid)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"reference centroid must be unit length, got norm {norm}")
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [-1, 1], got {self.threshold}")
        if not 0 < self.calibration_percentile <= 50:
            raise ValueError(
                f"calibration percentile must be in (0, 50], got {self.calibration_percentile}"
            )
        if self.n_calibration < 1:
            raise ValueError(f"n_calibration must be positive, got {self.n_calibration}")

    @property
    def detector_dim(self) -> int:
        return self.reference_centroid.shape[0]


def fit_reference(embeddings: np.ndarray) -> np.ndarray:
    """Unit centroid of unit-normalized embeddings (direction of the
    in-distribution cluster)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise ValueError(f"expected [N x k] embeddings with N >= 1, got shape {emb.shape}")
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    unit = emb / (norms + _EPS)
    mean = unit.mean(axis=0)
    mean_norm = np.linalg.norm(mean)
    if mean_norm < 1e-9:
        raise ValueError("embeddings are zero or cancel out; no reference direction exists")
    return mean / mean_norm


def detector_score(embedding: np.ndarray, state: DetectorState) -> float:
    """Cosine similarity of one embedding to the reference centroid."""
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != (state.detector_dim,):
        raise ValueError(f"embedding shape {e.shape} != detector dim ({state.detector_dim},)")
    denom = (np.linalg.norm(e) + _EPS) * (np.linalg.norm(state.reference_centroid) + _EPS)
    return float(e @ state.reference_centroid / denom)


def detector_scores(embeddings: np.ndarray, state: DetectorState) -> np.ndarray:
    """Vectorized detector_score over [N x k] embeddings."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != state.detector_dim:
        raise ValueError(f"expected [N x {state.detector_dim}] embeddings, got shape {emb.shape}")
    denom = (np.linalg.norm(emb, axis=1) + _EPS) * (np.linalg.norm(state.reference_centroid) + _EPS)
    return emb @ state.reference_centroid / denom


def calibrate_threshold(scores: np.ndarray, percentile: float) -> float:
    """Threshold := the given percentile of in-distribution training scores
    (linear interpolation). Requires enough scores for a stable estimate."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"expected a score vector, got shape {scores.shape}")
    if scores.shape[0] < 20:
        raise ValueError(
            f"need at least 20 calibration scores for a stable percentile, got {scores.shape[0]}"
        )
    if not 0 < percentile <= 50:
        raise ValueError(f"percentile must be in (0, 50], got {percentile}")
    return float(np.percentile(scores, percentile))


def fit_detector(train_embeddings: np.ndarray, percentile: float) -> DetectorState:
    """Fit centroid and threshold from in-distribution training embeddings."""
    centroid = fit_reference(train_embeddings)
    provisional = DetectorState(
        reference_centroid=centroid, threshold=0.0,
        calibration_percentile=percentile, n_calibration=train_embeddings.shape[0],
    )
    scores = detector_scores(train_embeddings, provisional)
    tau = calibrate_threshold(scores, percentile)
    return DetectorState(
        reference_centroid=centroid, threshold=tau,
        calibration_percentile=percentile, n_calibration=int(scores.shape[0]),
    )


def decide(embedding: np.ndarray, state: DetectorState) -> Decision:
    """ACCEPT iff the embedding scores at or above the threshold."""
    if state is None:
        raise ValueError("detector state is not fitted")
    score = detector_score(embedding, state)
    return Decision.ACCEPT if score >= state.threshold else Decision.EXCLUDE


def decide_batch(embeddings: np.ndarray, state: DetectorState) -> np.ndarray:
    """Boolean accept mask over [N x k] embeddings."""
    if state is None:
        raise ValueError("detector state is not fitted")
    return detector_scores(embeddings, state) >= state.threshold
