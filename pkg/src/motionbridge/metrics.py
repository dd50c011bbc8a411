"""Evaluation metrics: FID on classifier features, AF, min-ADE, APD, foot skate."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import MotionSequence
from .skeleton import ANKLES, forward_kinematics

SYM_TOL = 1e-9
CONTACT_MARGIN = 0.02


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via an eigendecomposition."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.size and w.min() < -1e-9 * scale:
        raise ValueError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    s = (v * np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)


@dataclass
class FeatureDistribution:
    mu: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.n < 2:
            raise ValueError("a feature distribution needs at least two samples")


class RunningMoments:
    """Streaming mean / unbiased covariance (pairwise-merge updates)."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, x: np.ndarray) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        nb = len(x)
        if nb == 0:
            return
        mb = x.mean(axis=0)
        xc = x - mb
        m2b = xc.T @ xc
        delta = mb - self.mean
        total = self.n + nb
        self.m2 = self.m2 + m2b + np.outer(delta, delta) * self.n * nb / total
        self.mean = self.mean + delta * nb / total
        self.n = total

    def distribution(self) -> FeatureDistribution:
        if self.n < 2:
            raise ValueError("need at least two samples for a covariance")
        return FeatureDistribution(self.mean.copy(), self.m2 / (self.n - 1), self.n)


def feature_stats(seqs: Sequence[MotionSequence], classifier, batch: int = 64) -> FeatureDistribution:
    if len(seqs) < 2:
        raise ValueError("feature statistics need at least two sequences")
    acc = None
    for i in range(0, len(seqs), batch):
        feats = classifier.features(seqs[i:i + batch])
        if acc is None:
            acc = RunningMoments(feats.shape[1])
        acc.update(feats)
    return acc.distribution()


def fid(g: FeatureDistribution, r: FeatureDistribution) -> float:
    if g.mu.shape != r.mu.shape:
        raise ValueError(f"feature dimensions differ: {g.mu.shape} vs {r.mu.shape}")
    diff = g.mu - r.mu
    root_g = matrix_sqrt_psd(g.cov)
    cross = matrix_sqrt_psd(root_g @ r.cov @ root_g)
    val = float(diff @ diff + np.trace(g.cov) + np.trace(r.cov) - 2.0 * np.trace(cross))
    if val < -1e-6:
        raise ArithmeticError(f"FID came out negative ({val:.3e}); covariances are inconsistent")
    return max(val, 0.0)


def _flat(seq) -> np.ndarray:
    return seq.to_array() if isinstance(seq, MotionSequence) else np.asarray(seq, dtype=np.float64)


def ade(sample, gt) -> float:
    a, b = _flat(sample), _flat(gt)
    if a.shape != b.shape:
        raise ValueError(f"sample shape {a.shape} differs from ground truth {b.shape}")
    return float(np.linalg.norm(a - b, axis=1).mean())


def ade_min(samples: Sequence, gt) -> float:
    if not samples:
        raise ValueError("no samples")
    return min(ade(s, gt) for s in samples)


def apd(samples: Sequence) -> float:
    """Average L2 distance over ordered pairs of whole flattened sequences."""
    if len(samples) < 2:
        raise ValueError("APD needs at least two samples")
    flats = [_flat(s).reshape(-1) for s in samples]
    if len({f.shape for f in flats}) != 1:
        raise ValueError("samples differ in length")
    x = np.stack(flats)
    s = len(x)
    d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    return float(d.sum() / (s * (s - 1)))


def action_faithfulness(seqs: Sequence[MotionSequence], classifier, labels: Sequence[int] | None = None) -> float:
    if not seqs:
        raise ValueError("no sequences to classify")
    labels = [s.label for s in seqs] if labels is None else list(labels)
    n_cls = classifier.n_classes
    for lab in labels:
        if not 0 <= lab < n_cls:
            raise ValueError(f"label {lab} not in the classifier's {n_cls} classes")
    pred = classifier.predict(seqs)
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def foot_skate(seq: MotionSequence, margin: float = CONTACT_MARGIN) -> float:
    """Mean horizontal ankle speed (m/s) over frames in ground contact."""
    if len(seq) < 2:
        return 0.0
    pts = forward_kinematics(seq.trans, seq.quat, seq.joints)[:, list(ANKLES)]
    heights = pts[..., 2]
    contact = heights < heights.min() + margin
    in_contact = contact[:-1]
    speed = np.linalg.norm(np.diff(pts[..., :2], axis=0), axis=-1) * seq.fps
    if not in_contact.any():
        return 0.0
    return float(speed[in_contact].mean())


def motion_magnitude(seqs: Sequence[MotionSequence]) -> float:
    """Mean L2 norm of the flattened, unnormalized pose vector over all frames."""
    return float(np.mean(np.concatenate([np.linalg.norm(s.to_array(), axis=1) for s in seqs])))


@dataclass
class MetricsReport:
    fid_train: float | None
    fid_test: float | None
    af: float | None
    ade: float | None
    apd: float | None
    foot_skate: float | None
    S: int
    label: str = ""

    def __post_init__(self):
        if self.af is not None and not 0.0 <= self.af <= 1.0:
            raise ValueError("AF must be within [0, 1]")
        for k in ("fid_train", "fid_test", "ade", "apd", "foot_skate"):
            v = getattr(self, k)
            if v is not None and v < 0:
                raise ValueError(f"{k} must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)
