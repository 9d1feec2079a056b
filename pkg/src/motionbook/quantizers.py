"""Lookup-free quantization plus VQ/RVQ baselines.

The lookup-free quantizer has no embedding table: its codebook is the
implicit Cartesian product {-1,+1}^d, quantization is a per-dimension
sign, and the token index packs the sign bits as
``sum_i 2^(i-1) * 1{z_i > 0}``.  Vector quantization keeps an explicit
K x d table updated by EMA cluster statistics, with dead codes
reinitialized from batch vectors.  Residual quantization stacks VQ
levels on the remaining residual.

All quantizers are straight-through: the backward Jacobian of the
quantization step is the identity, implemented as ``z + const(q - z)``.
"""

from __future__ import annotations

import numpy as np

from .exceptions import EmptyHistogram, IndexOutOfRange, ShapeMismatch
from .nn import Tensor, as_tensor, ops

MAX_LFQ_BITS = 24


def index_to_codeword(idx, dim: int) -> np.ndarray:
    """Unpack token indices into (+-1)^dim codewords; bit i-1 -> component i."""
    if not 1 <= dim <= MAX_LFQ_BITS:
        raise ShapeMismatch(f"dim must be in [1, {MAX_LFQ_BITS}]")
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << dim)):
        raise IndexOutOfRange(f"index outside [0, 2^{dim})")
    bits = (idx[..., None] >> np.arange(dim)) & 1
    return (2.0 * bits - 1.0).astype(np.float64)


def codeword_index(z) -> np.ndarray:
    """Token indices of latent vectors (..., d): packs the signs of z."""
    z = np.asarray(z)
    d = z.shape[-1]
    if not 1 <= d <= MAX_LFQ_BITS:
        raise ShapeMismatch(f"last axis must be in [1, {MAX_LFQ_BITS}]")
    bits = (z > 0).astype(np.int64)
    return (bits << np.arange(d)).sum(axis=-1)


def codebook_stats(histogram, codebook_size: int | None = None) -> dict:
    """Utilization (fraction of codes ever used) and usage perplexity."""
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.ndim != 1 or (codebook_size is not None and hist.shape[0] != codebook_size):
        raise ShapeMismatch("histogram must be 1-D of length K")
    if np.any(hist < 0):
        raise ShapeMismatch("histogram counts must be nonnegative")
    total = hist.sum()
    if total == 0:
        raise EmptyHistogram("all-zero usage histogram")
    p = hist / total
    nz = p[p > 0]
    return {
        "utilization": float(np.count_nonzero(hist) / hist.shape[0]),
        "perplexity": float(np.exp(-(nz * np.log(nz)).sum())),
    }


class QuantizeResult:
    """Codes, straight-through quantized tensor, aux losses, usage histogram."""

    def __init__(self, codes, quantized, commitment, entropy, histogram):
        self.codes = codes
        self.quantized = quantized
        self.commitment = commitment
        self.entropy = entropy
        self.histogram = histogram


def _cells(z_data: np.ndarray) -> int:
    return int(np.prod(z_data.shape[:-1])) if z_data.ndim > 1 else 1


class LookupFreeQuantizer:
    """Sign quantizer over the implicit codebook {-1,+1}^dim."""

    def __init__(self, dim: int = 14, commitment_weight: float = 0.25,
                 entropy_weight: float = 0.1, diversity_weight: float = 1.0,
                 temperature: float = 0.1):
        if not 1 <= dim <= MAX_LFQ_BITS:
            raise ShapeMismatch(f"LFQ dim must be in [1, {MAX_LFQ_BITS}]")
        self.dim = dim
        self.commitment_weight = commitment_weight
        self.entropy_weight = entropy_weight
        self.diversity_weight = diversity_weight
        self.temperature = temperature

    @property
    def codebook_size(self) -> int:
        return 1 << self.dim

    def quantize(self, z, training: bool = False) -> QuantizeResult:
        """Per-dimension sign with straight-through identity gradients.

        Output components are -1 where z_i <= 0 and +1 where z_i > 0; the
        commitment loss is ``weight * mean_cells ||z - sg(Q(z))||^2``; the
        entropy penalty follows :meth:`entropy_penalty`.
        """
        z = as_tensor(z)
        if z.data.shape[-1] != self.dim:
            raise ShapeMismatch(f"last axis must be {self.dim}, got {z.data.shape}")
        signs = np.where(z.data > 0, 1.0, -1.0).astype(z.data.dtype)
        codes = codeword_index(z.data)
        quantized = ops.add(z, Tensor(signs - z.data))
        diff = ops.sub(z, Tensor(signs))
        per_cell = ops.sum_(ops.mul(diff, diff), axis=-1)
        commitment = ops.mul(ops.mean(per_cell), float(self.commitment_weight))
        entropy = self.entropy_penalty(z)
        histogram = np.bincount(codes.reshape(-1), minlength=self.codebook_size)
        return QuantizeResult(codes, quantized, commitment, entropy, histogram)

    def entropy_penalty(self, z) -> Tensor:
        """Confidence-vs-diversity penalty, factorized per dimension.

        With p_i = sigmoid(z_i / temperature) per cell: the mean per-cell
        binary entropy pushes assignments away from the decision boundary,
        while the (subtracted, ``diversity_weight``-scaled) entropy of the
        batch-mean probabilities pushes the batch to spread over codes.
        Both terms are in nats.
        """
        z = as_tensor(z)
        if z.data.shape[-1] != self.dim:
            raise ShapeMismatch(f"last axis must be {self.dim}, got {z.data.shape}")
        n_cells = _cells(z.data)
        p = ops.sigmoid(ops.mul(z, 1.0 / self.temperature))
        per_cell = ops.mul(ops.sum_(ops.binary_entropy(p)), 1.0 / n_cells)
        p_mean = ops.mean(ops.reshape(p, (n_cells, self.dim)), axis=0)
        diversity = ops.sum_(ops.binary_entropy(p_mean))
        return ops.sub(per_cell, ops.mul(diversity, float(self.diversity_weight)))

    def codewords(self, codes) -> np.ndarray:
        return index_to_codeword(codes, self.dim)


class VectorQuantizer:
    """Nearest-neighbor table quantizer with EMA codebook updates.

    Ties in the nearest-neighbor search resolve to the lowest index.  In
    training mode each call updates EMA cluster sums/counts (with Laplace
    smoothing) and reinitializes codes unused for ``dead_code_batches``
    consecutive batches to random vectors from the current batch.
    """

    def __init__(self, codebook_size: int = 1024, dim: int = 512,
                 commitment_weight: float = 0.25, ema_decay: float = 0.99,
                 dead_code_batches: int = 3, epsilon: float = 1e-5, seed: int = 0):
        if codebook_size < 2:
            raise ShapeMismatch("codebook needs at least 2 rows")
        self.codebook_size = codebook_size
        self.dim = dim
        self.commitment_weight = commitment_weight
        self.ema_decay = ema_decay
        self.dead_code_batches = dead_code_batches
        self.epsilon = epsilon
        self._rng = np.random.default_rng(seed)
        self.codebook = (self._rng.standard_normal((codebook_size, dim))
                         / np.sqrt(dim)).astype(np.float32)
        # treat the initial rows as one observation each so EMA ratios are defined
        self.ema_count = np.ones(codebook_size, dtype=np.float64)
        self.ema_sum = self.codebook.astype(np.float64).copy()
        self.unused_batches = np.zeros(codebook_size, dtype=np.int64)

    def lookup(self, codes) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.size and (codes.min() < 0 or codes.max() >= self.codebook_size):
            raise IndexOutOfRange("code outside the table")
        return self.codebook[codes]

    def nearest(self, flat: np.ndarray) -> np.ndarray:
        """Argmin_k ||z - c_k||^2 per row; ties go to the lowest index."""
        cb = self.codebook.astype(flat.dtype, copy=False)
        d = (flat * flat).sum(axis=1, keepdims=True) - 2.0 * (flat @ cb.T) + (cb * cb).sum(axis=1)
        return np.argmin(d, axis=1)

    def quantize(self, z, training: bool = False) -> QuantizeResult:
        z = as_tensor(z)
        if z.data.shape[-1] != self.dim:
            raise ShapeMismatch(f"last axis must be {self.dim}, got {z.data.shape}")
        flat = z.data.reshape(-1, self.dim)
        codes = self.nearest(flat)
        chosen = self.codebook[codes].astype(z.data.dtype).reshape(z.data.shape)
        quantized = ops.add(z, Tensor(chosen - z.data))
        diff = ops.sub(z, Tensor(chosen))
        per_cell = ops.sum_(ops.mul(diff, diff), axis=-1)
        commitment = ops.mul(ops.mean(per_cell), float(self.commitment_weight))
        histogram = np.bincount(codes, minlength=self.codebook_size)
        if training:
            self._update(flat, codes, histogram)
        entropy = Tensor(np.asarray(0.0, dtype=z.data.dtype))
        return QuantizeResult(codes.reshape(z.data.shape[:-1]), quantized,
                              commitment, entropy, histogram)

    def _update(self, flat: np.ndarray, codes: np.ndarray, counts: np.ndarray):
        decay = self.ema_decay
        sums = np.zeros((self.codebook_size, self.dim), dtype=np.float64)
        np.add.at(sums, codes, flat.astype(np.float64))
        self.ema_count = decay * self.ema_count + (1.0 - decay) * counts
        self.ema_sum = decay * self.ema_sum + (1.0 - decay) * sums
        total = self.ema_count.sum()
        smoothed = (self.ema_count + self.epsilon) / (total + self.codebook_size * self.epsilon) * total
        self.codebook = (self.ema_sum / smoothed[:, None]).astype(np.float32)
        self.unused_batches = np.where(counts > 0, 0, self.unused_batches + 1)
        dead = self.unused_batches >= self.dead_code_batches
        n_dead = int(dead.sum())
        if n_dead:
            picks = self._rng.integers(0, flat.shape[0], size=n_dead)
            fresh = flat[picks].astype(np.float64)
            self.codebook[dead] = fresh.astype(np.float32)
            self.ema_sum[dead] = fresh
            self.ema_count[dead] = 1.0
            self.unused_batches[dead] = 0

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.codebook": self.codebook,
            f"{prefix}.ema_count": self.ema_count,
            f"{prefix}.ema_sum": self.ema_sum,
        }

    def load_state(self, arrays: dict, prefix: str):
        self.codebook = arrays[f"{prefix}.codebook"].astype(np.float32)
        self.ema_count = arrays[f"{prefix}.ema_count"].astype(np.float64)
        self.ema_sum = arrays[f"{prefix}.ema_sum"].astype(np.float64)


class ResidualQuantizer:
    """Stack of VQ levels, each quantizing the residual of the previous ones."""

    def __init__(self, depth: int = 4, codebook_size: int = 1024, dim: int = 512,
                 commitment_weight: float = 0.25, ema_decay: float = 0.99,
                 dead_code_batches: int = 3, seed: int = 0):
        if depth < 1:
            raise ShapeMismatch("residual depth must be >= 1")
        self.levels = [
            VectorQuantizer(codebook_size=codebook_size, dim=dim,
                            commitment_weight=commitment_weight, ema_decay=ema_decay,
                            dead_code_batches=dead_code_batches, seed=seed + 7919 * level)
            for level in range(depth)
        ]

    @property
    def dim(self) -> int:
        return self.levels[0].dim

    @property
    def codebook_size(self) -> int:
        return self.levels[0].codebook_size

    @property
    def depth(self) -> int:
        return len(self.levels)

    def quantize(self, z, training: bool = False) -> tuple[list[QuantizeResult], Tensor]:
        """Per-level results plus the straight-through sum of all codewords."""
        z = as_tensor(z)
        residual = z
        total = np.zeros_like(z.data)
        results = []
        for level in self.levels:
            res = level.quantize(residual, training=training)
            chosen = level.codebook[res.codes.reshape(-1)].astype(z.data.dtype)
            chosen = chosen.reshape(z.data.shape)
            total = total + chosen
            residual = ops.sub(residual, Tensor(chosen))
            results.append(res)
        quantized = ops.add(z, Tensor(total - z.data))
        return results, quantized

    def decode_codes(self, codes_per_level: list[np.ndarray]) -> np.ndarray:
        total = None
        for level, codes in zip(self.levels, codes_per_level):
            vecs = level.lookup(codes)
            total = vecs if total is None else total + vecs
        return total
