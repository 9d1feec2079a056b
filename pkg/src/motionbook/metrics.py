"""Evaluation metrics: MPJPE, Frechet distance, retrieval precision.

Retrieval works over caller-supplied embedding pairs; no learned encoder
is involved.  Embedding files use the MEMB binary layout (magic, u32 N,
u32 F, N*F little-endian float32).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import (
    BadBatchSize,
    BadMagic,
    DimensionMismatch,
    IndefiniteCovariance,
    ShapeMismatch,
    TooFewSamples,
    TruncatedFile,
)

RETRIEVAL_BATCH = 32
_MEMB_MAGIC = b"MEMB"


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error in millimeters.

    Inputs are (T, J, 3) position arrays in meters; the result averages the
    Euclidean error over every (frame, joint) pair.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeMismatch(f"mpjpe shapes {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


@dataclass
class GaussianStats:
    """Sample mean and unbiased covariance of a feature set."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        f = self.mean.shape[0]
        if self.cov.shape != (f, f):
            raise DimensionMismatch("mean/covariance dimensions disagree")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-8:
            raise ShapeMismatch("covariance not symmetric within 1e-8")


def fit_gaussian(features) -> GaussianStats:
    """Sample mean and unbiased (N-1) covariance, symmetrized."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch("features must be (N, F)")
    n = x.shape[0]
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mean=mean, cov=cov, count=n)


def _psd_sqrt(sym: np.ndarray, tol_scale: float) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition, clamping tiny negatives."""
    vals, vecs = np.linalg.eigh(sym)
    lo = -1e-8 * tol_scale
    if vals.min() < lo:
        raise IndefiniteCovariance(f"eigenvalue {vals.min():.3e} below tolerance {lo:.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between two Gaussians.

    ``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` with the cross
    term computed as sqrtm(S_a^(1/2) S_b S_a^(1/2)) via symmetric
    eigendecomposition; negative eigenvalues within tolerance are clamped
    to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatch(f"dimensions {a.mean.shape} vs {b.mean.shape}")
    scale = max(1.0, float(np.abs(a.cov).max()), float(np.abs(b.cov).max()))
    ra = _psd_sqrt(a.cov, scale)
    cross = _psd_sqrt(ra @ b.cov @ ra, scale * scale)
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))


@dataclass
class RetrievalBatch:
    """Index-aligned motion/text embedding pairs (exactly 32 of each)."""

    motion: np.ndarray
    text: np.ndarray

    def __post_init__(self):
        self.motion = np.asarray(self.motion, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        if self.motion.shape != self.text.shape or self.motion.ndim != 2:
            raise ShapeMismatch("motion/text embeddings must share (N, F)")
        if self.motion.shape[0] != RETRIEVAL_BATCH:
            raise BadBatchSize(f"retrieval batches must hold {RETRIEVAL_BATCH} pairs")


def retrieval_metrics(batches) -> dict:
    """R-precision at top 1/2/3 plus mean matched-pair distance.

    For each motion the 32 candidate texts are ranked by Euclidean
    distance; ties rank the lower index first.  R@k is the fraction of
    motions whose own text lands in the top k.
    """
    batches = list(batches)
    if not batches:
        raise BadBatchSize("no retrieval batches")
    hits = np.zeros(3)
    total = 0
    matched = []
    for batch in batches:
        if not isinstance(batch, RetrievalBatch):
            batch = RetrievalBatch(*batch)
        d = np.linalg.norm(batch.motion[:, None, :] - batch.text[None, :, :], axis=-1)
        n = d.shape[0]
        own = d[np.arange(n), np.arange(n)]
        beats = (d < own[:, None]).sum(axis=1)
        ties_before = ((d == own[:, None]) & (np.arange(n)[None, :] < np.arange(n)[:, None])).sum(axis=1)
        rank = beats + ties_before
        for k in range(3):
            hits[k] += (rank <= k).sum()
        total += n
        matched.append(own)
    matched = np.concatenate(matched)
    return {
        "r1": float(hits[0] / total),
        "r2": float(hits[1] / total),
        "r3": float(hits[2] / total),
        "mmdist": float(matched.mean()),
        "pairs": int(total),
    }


def batch_embeddings(motion: np.ndarray, text: np.ndarray) -> list[RetrievalBatch]:
    """Chunk aligned embedding arrays into batches of 32, dropping the tail."""
    motion = np.asarray(motion, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if motion.shape != text.shape or motion.ndim != 2:
        raise ShapeMismatch("motion/text embeddings must share (N, F)")
    n = (motion.shape[0] // RETRIEVAL_BATCH) * RETRIEVAL_BATCH
    if n == 0:
        raise BadBatchSize(f"need at least {RETRIEVAL_BATCH} pairs, got {motion.shape[0]}")
    return [RetrievalBatch(motion[i:i + RETRIEVAL_BATCH], text[i:i + RETRIEVAL_BATCH])
            for i in range(0, n, RETRIEVAL_BATCH)]


def write_embeddings(path, embeddings: np.ndarray):
    """Write an (N, F) float array as a MEMB file."""
    x = np.ascontiguousarray(embeddings, dtype="<f4")
    if x.ndim != 2:
        raise ShapeMismatch("embeddings must be (N, F)")
    with open(path, "wb") as fh:
        fh.write(_MEMB_MAGIC)
        fh.write(struct.pack("<II", x.shape[0], x.shape[1]))
        fh.write(x.tobytes())


def read_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MEMB_MAGIC:
        raise BadMagic(f"{path}: not a MEMB file")
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: missing MEMB header")
    n, f = struct.unpack("<II", raw[4:12])
    need = 12 + 4 * n * f
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", count=n * f, offset=12).reshape(n, f).astype(np.float64)


def pooled_feature_embedding(data: np.ndarray) -> np.ndarray:
    """Fixed-length per-sequence embedding: per-dim mean and std over time.

    This is the feature map used for corpus-level Frechet distances when no
    learned motion encoder is available.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch("expected a (T, D) feature matrix")
    return np.concatenate([x.mean(axis=0), x.std(axis=0)])
