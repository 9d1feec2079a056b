"""Trainable motion tokenizers.

The default model treats a feature sequence as a single-channel image:
each frame is split into P body-part column blocks, every block gets its
own linear embedding to a shared channel width, and a stack of stride-
(2, 1) residual conv stages downsamples time by ``alpha`` while keeping
the part axis intact.  The resulting ``floor(T/alpha) x P x d`` latent
grid is quantized per cell (lookup-free by default) and decoded by the
mirrored network.  1-D baselines collapse the part axis and quantize one
vector per timestep with VQ, RVQ, or LFQ heads.

Four families are available: ``2d-lfq`` (default), ``1d-vq``, ``1d-rvq``,
``1d-lfq``.

Token files (MOTK) are ``magic "MOTK", u32 version=1, u32 K, u32 P,
u32 grid_T`` followed by ``grid_T * P`` little-endian u32 codes; version 1
fixes time-major flattening (all parts of t=0, then t=1, ...).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import nn
from .exceptions import (
    BadLength,
    BadMagic,
    EmptyDataset,
    FormatMismatch,
    InvalidConfig,
    NonFiniteLoss,
    NonFiniteValue,
    ShapeMismatch,
    TooShort,
    TruncatedFile,
    UnsupportedVersion,
)
from .features import FORMAT_WIDTHS, MotionSequence, normalize_format, to_joint_positions
from .metrics import mpjpe
from .nn import ops
from .quantizers import (
    LookupFreeQuantizer,
    ResidualQuantizer,
    VectorQuantizer,
    codebook_stats,
    index_to_codeword,
)

_MOTK_MAGIC = b"MOTK"
_MOTK_VERSION = 1

FAMILIES = ("2d-lfq", "1d-vq", "1d-rvq", "1d-lfq")

REPORT_FIELDS = ("epoch", "recon", "velocity", "commit", "entropy",
                 "utilization", "perplexity", "val_mpjpe")


@dataclass
class PartPartition:
    """Ordered (start, width) column ranges covering [0, D) without overlap."""

    ranges: list

    def __post_init__(self):
        self.ranges = [(int(s), int(w)) for s, w in self.ranges]
        cursor = 0
        for start, width in self.ranges:
            if start != cursor or width < 1:
                raise InvalidConfig("partition ranges must be sorted, disjoint, and gapless")
            cursor = start + width
        self.width = cursor

    def __len__(self):
        return len(self.ranges)

    @classmethod
    def default_for(cls, fmt: str) -> "PartPartition":
        """Root block plus one block per joint (6 columns each)."""
        fmt = normalize_format(fmt)
        d = FORMAT_WIDTHS[fmt]
        if fmt == "smpl-d135":
            ranges = [(0, 9)] + [(9 + 6 * j, 6) for j in range(21)]
        elif fmt == "smpl-d130":
            ranges = [(6 * j, 6) for j in range(21)] + [(126, 4)]
        else:
            # redundant formats: joint-sized blocks over the leading layout,
            # one block per trailing redundant section
            if fmt == "smpl-d268":
                ranges = [(0, 9)] + [(9 + 6 * j, 6) for j in range(21)]
                ranges += [(135, 63), (198, 66), (264, 4)]
            elif fmt == "smpl-d263":
                ranges = [(6 * j, 6) for j in range(21)] + [(126, 4)]
                ranges += [(130, 63), (193, 66), (259, 4)]
            else:  # h3d-d263
                ranges = [(0, 4), (4, 63)] + [(67 + 6 * j, 6) for j in range(21)]
                ranges += [(193, 66), (259, 4)]
        part = cls(ranges)
        assert part.width == d
        return part


# -- token files ------------------------------------------------------------------

def write_tokens(path, codes: np.ndarray, codebook_size: int):
    """Write a (grid_T, P) integer code grid as a MOTK file."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ShapeMismatch("token grid must be 2-D (grid_T, P)")
    grid_t, parts = codes.shape
    with open(path, "wb") as fh:
        fh.write(_MOTK_MAGIC)
        fh.write(struct.pack("<IIII", _MOTK_VERSION, codebook_size, parts, grid_t))
        fh.write(np.ascontiguousarray(codes, dtype="<u4").tobytes())


def read_tokens(path) -> tuple[np.ndarray, int]:
    """Read a MOTK file back as ``(codes (grid_T, P), codebook_size)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MOTK_MAGIC:
        raise BadMagic(f"{path}: not a MOTK file")
    if len(raw) < 20:
        raise TruncatedFile(f"{path}: incomplete MOTK header")
    version, k, parts, grid_t = struct.unpack("<IIII", raw[4:20])
    if version != _MOTK_VERSION:
        raise UnsupportedVersion(f"{path}: MOTK version {version}")
    need = 20 + 4 * parts * grid_t
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(raw)}")
    codes = np.frombuffer(raw, dtype="<u4", count=parts * grid_t, offset=20)
    return codes.reshape(grid_t, parts).astype(np.int64), k


# -- network pieces ----------------------------------------------------------------

class _ResBlock2d:
    def __init__(self, rng, c):
        self.c1 = nn.Conv2d(rng, c, c)
        self.c2 = nn.Conv2d(rng, c, c)

    def __call__(self, x):
        h = self.c2(ops.relu(self.c1(ops.relu(x))))
        return ops.add(x, h)

    def params(self, prefix):
        return {**self.c1.params(f"{prefix}.c1"), **self.c2.params(f"{prefix}.c2")}


class _ResBlock1d:
    def __init__(self, rng, c):
        self.c1 = nn.Conv1d(rng, c, c)
        self.c2 = nn.Conv1d(rng, c, c)

    def __call__(self, x):
        h = self.c2(ops.relu(self.c1(ops.relu(x))))
        return ops.add(x, h)

    def params(self, prefix):
        return {**self.c1.params(f"{prefix}.c1"), **self.c2.params(f"{prefix}.c2")}


class _PartPad:
    """Padded part view: (B, T, D) <-> (P, B*T, w_max) with zero-filled tails.

    Batching the per-part linear maps as one (P, ., .) matmul keeps the
    part-block structure (weights never mix columns across parts) without
    P separate graph nodes.
    """

    def __init__(self, partition: PartPartition):
        self.partition = partition
        self.w_max = max(w for _, w in partition.ranges)
        self.mask = np.zeros((len(partition), 1, self.w_max), dtype=np.float32)
        for p, (_, w) in enumerate(partition.ranges):
            self.mask[p, 0, :w] = 1.0

    def pad(self, x: np.ndarray) -> np.ndarray:
        b, t, _ = x.shape
        out = np.zeros((len(self.partition), b * t, self.w_max), dtype=np.float32)
        for p, (start, w) in enumerate(self.partition.ranges):
            out[p, :, :w] = x[:, :, start:start + w].reshape(b * t, w)
        return out

    def unpad(self, padded: np.ndarray, b: int, t: int) -> np.ndarray:
        cols = [padded[p, :, :w].reshape(b, t, w)
                for p, (_, w) in enumerate(self.partition.ranges)]
        return np.concatenate(cols, axis=2)


class _Encoder2d:
    def __init__(self, rng, partition: PartPartition, widths, res_blocks: int, d_lat: int):
        self.pad = _PartPad(partition)
        p, w_max, c = len(partition), self.pad.w_max, widths[0]
        self.embed_w = nn.Tensor((rng.standard_normal((p, w_max, c)) / np.sqrt(w_max))
                                 .astype(np.float32), requires_grad=True)
        self.embed_b = nn.Tensor(np.zeros((p, 1, c), dtype=np.float32), requires_grad=True)
        self.stages = []
        for i in range(1, len(widths)):
            down = nn.Conv2d(rng, widths[i - 1], widths[i], stride=(2, 1))
            blocks = [_ResBlock2d(rng, widths[i]) for _ in range(res_blocks)]
            self.stages.append((down, blocks))
        self.head = nn.Conv2d(rng, widths[-1], d_lat, kernel=(1, 1), padding=(0, 0))

    def embed(self, x: np.ndarray):
        """Per-part linear embedding: (B, T, D) -> (B, T, P, C)."""
        b, t, _ = x.shape
        e = ops.add(ops.matmul(nn.Tensor(self.pad.pad(x)), self.embed_w), self.embed_b)
        return ops.transpose(ops.reshape(e, (-1, b, t, e.data.shape[-1])), (1, 2, 0, 3))

    def __call__(self, x: np.ndarray):
        h = self.embed(x)  # (B, T, P, C), channels last
        for down, blocks in self.stages:
            h = ops.relu(down(h))
            for block in blocks:
                h = block(h)
        return self.head(h)  # (B, T', P, d)

    def params(self):
        out = {"enc.embed.w": self.embed_w, "enc.embed.b": self.embed_b}
        for i, (down, blocks) in enumerate(self.stages):
            out.update(down.params(f"enc.stage{i}.down"))
            for j, block in enumerate(blocks):
                out.update(block.params(f"enc.stage{i}.res{j}"))
        out.update(self.head.params("enc.head"))
        return out


class _Decoder2d:
    def __init__(self, rng, partition: PartPartition, widths, res_blocks: int, d_lat: int):
        self.pad = _PartPad(partition)
        p, w_max, c = len(partition), self.pad.w_max, widths[0]
        self.head = nn.Conv2d(rng, d_lat, widths[-1], kernel=(1, 1), padding=(0, 0))
        self.stages = []
        for i in range(len(widths) - 1, 0, -1):
            blocks = [_ResBlock2d(rng, widths[i]) for _ in range(res_blocks)]
            up = nn.Conv2d(rng, widths[i], widths[i - 1])
            self.stages.append((blocks, up))
        self.unembed_w = nn.Tensor((rng.standard_normal((p, c, w_max)) / np.sqrt(c))
                                   .astype(np.float32), requires_grad=True)
        self.unembed_b = nn.Tensor(np.zeros((p, 1, w_max), dtype=np.float32), requires_grad=True)

    def __call__(self, z):
        """Latent grid (B, T', P, d) -> padded part output (P, B*T, w_max)."""
        h = ops.relu(self.head(z))
        for blocks, up in self.stages:
            for block in blocks:
                h = block(h)
            h = ops.relu(up(ops.nearest_upsample2x(h)))
        grid = ops.transpose(h, (2, 0, 1, 3))  # (P, B, T, C)
        p, b, t, c = grid.data.shape
        flat = ops.reshape(grid, (p, b * t, c))
        return ops.add(ops.matmul(flat, self.unembed_w), self.unembed_b)

    def decode_array(self, z) -> np.ndarray:
        """Latent grid (B, T', P, d) -> features (B, T, D) as plain numpy."""
        padded = self(z)
        b, t = z.data.shape[0], z.data.shape[1] * (2 ** len(self.stages))
        return self.pad.unpad(padded.data, b, t)

    def params(self):
        out = {"dec.unembed.w": self.unembed_w, "dec.unembed.b": self.unembed_b}
        out.update(self.head.params("dec.head"))
        for i, (blocks, up) in enumerate(self.stages):
            for j, block in enumerate(blocks):
                out.update(block.params(f"dec.stage{i}.res{j}"))
            out.update(up.params(f"dec.stage{i}.up"))
        return out


class _Encoder1d:
    def __init__(self, rng, d_in, widths, res_blocks, d_lat):
        self.stem = nn.Conv1d(rng, d_in, widths[0])
        self.stages = []
        for i in range(1, len(widths)):
            down = nn.Conv1d(rng, widths[i - 1], widths[i], stride=2)
            blocks = [_ResBlock1d(rng, widths[i]) for _ in range(res_blocks)]
            self.stages.append((down, blocks))
        self.head = nn.Conv1d(rng, widths[-1], d_lat, kernel=1, padding=0)

    def __call__(self, x: np.ndarray):
        h = ops.relu(self.stem(nn.Tensor(x)))
        for down, blocks in self.stages:
            h = ops.relu(down(h))
            for block in blocks:
                h = block(h)
        return self.head(h)  # (B, T', d)

    def params(self):
        out = dict(self.stem.params("enc.stem"))
        for i, (down, blocks) in enumerate(self.stages):
            out.update(down.params(f"enc.stage{i}.down"))
            for j, block in enumerate(blocks):
                out.update(block.params(f"enc.stage{i}.res{j}"))
        out.update(self.head.params("enc.head"))
        return out


class _Decoder1d:
    def __init__(self, rng, d_out, widths, res_blocks, d_lat):
        self.head = nn.Conv1d(rng, d_lat, widths[-1], kernel=1, padding=0)
        self.stages = []
        for i in range(len(widths) - 1, 0, -1):
            blocks = [_ResBlock1d(rng, widths[i]) for _ in range(res_blocks)]
            up = nn.Conv1d(rng, widths[i], widths[i - 1])
            self.stages.append((blocks, up))
        self.out = nn.Conv1d(rng, widths[0], d_out)

    def __call__(self, z):
        h = ops.relu(self.head(z))
        for blocks, up in self.stages:
            for block in blocks:
                h = block(h)
            h = ops.relu(up(ops.nearest_upsample2x(h)))
        return self.out(h)  # (B, T, D)

    def params(self):
        out = dict(self.head.params("dec.head"))
        for i, (blocks, up) in enumerate(self.stages):
            for j, block in enumerate(blocks):
                out.update(block.params(f"dec.stage{i}.res{j}"))
            out.update(up.params(f"dec.stage{i}.up"))
        out.update(self.out.params("dec.out"))
        return out


def _log2int(k: int) -> int:
    d = int(round(np.log2(k)))
    if 2 ** d != k:
        raise InvalidConfig(f"LFQ codebook size must be a power of two, got {k}")
    return d


class MotionTokenizer(BaseEstimator):
    """Fit/transform estimator over motion sequences.

    ``fit`` trains encoder, decoder, and quantizer on fixed-length crops;
    ``transform`` maps a sequence to its flat token stream (time-major);
    ``inverse_transform`` decodes tokens back to a feature sequence.

    The loss is ``recon_weight * L1 + velocity_weight * L1(time diff)
    + commitment (+ entropy_weight * entropy penalty for LFQ)``, optimized
    with Adam; everything is deterministic per ``seed``.
    """

    def __init__(self, family: str = "2d-lfq", format: str = "smpl-d135",
                 codebook_size: int = 1024, alpha: int = 4, channels=(32, 64),
                 res_blocks: int = 1, partition=None, vq_dim: int = 512,
                 rvq_depth: int = 4, commitment_weight: float = 0.25,
                 entropy_weight: float = 0.1, diversity_weight: float = 1.0,
                 temperature: float = 0.1, ema_decay: float = 0.99,
                 dead_code_batches: int = 3, recon_weight: float = 1.0,
                 velocity_weight: float = 0.5, window: int = 64,
                 batch_size: int = 32, epochs: int = 30, lr: float = 1e-4,
                 seed: int = 0):
        self.family = family
        self.format = format
        self.codebook_size = codebook_size
        self.alpha = alpha
        self.channels = channels
        self.res_blocks = res_blocks
        self.partition = partition
        self.vq_dim = vq_dim
        self.rvq_depth = rvq_depth
        self.commitment_weight = commitment_weight
        self.entropy_weight = entropy_weight
        self.diversity_weight = diversity_weight
        self.temperature = temperature
        self.ema_decay = ema_decay
        self.dead_code_batches = dead_code_batches
        self.recon_weight = recon_weight
        self.velocity_weight = velocity_weight
        self.window = window
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    # -- construction ------------------------------------------------------

    def _check_config(self):
        if self.family not in FAMILIES:
            raise InvalidConfig(f"unknown family {self.family!r}; choose from {FAMILIES}")
        stages = int(round(np.log2(self.alpha)))
        if 2 ** stages != self.alpha or stages < 1:
            raise InvalidConfig("alpha must be a power of two >= 2")
        if len(self.channels) != stages:
            raise InvalidConfig(f"need one channel width per stage: alpha {self.alpha} "
                                f"wants {stages}, got {len(self.channels)}")
        if self.window % self.alpha != 0:
            raise InvalidConfig("window must be divisible by alpha")

    def _build(self, rng: np.random.Generator):
        self._check_config()
        fmt = normalize_format(self.format)
        d_in = FORMAT_WIDTHS[fmt]
        widths = [self.channels[0]] + list(self.channels)
        if self.family == "2d-lfq":
            part = (self.partition if isinstance(self.partition, PartPartition)
                    else PartPartition(self.partition) if self.partition
                    else PartPartition.default_for(fmt))
            if part.width != d_in:
                raise InvalidConfig("partition does not cover the feature width")
            d_lat = _log2int(self.codebook_size)
            self.partition_ = part
            self.encoder_ = _Encoder2d(rng, part, widths, self.res_blocks, d_lat)
            self.decoder_ = _Decoder2d(rng, part, widths, self.res_blocks, d_lat)
            self.quantizer_ = LookupFreeQuantizer(
                dim=d_lat, commitment_weight=self.commitment_weight,
                entropy_weight=self.entropy_weight,
                diversity_weight=self.diversity_weight, temperature=self.temperature)
            self.parts_per_step_ = len(part)
        else:
            if self.family == "1d-lfq":
                d_lat = _log2int(self.codebook_size)
                self.quantizer_ = LookupFreeQuantizer(
                    dim=d_lat, commitment_weight=self.commitment_weight,
                    entropy_weight=self.entropy_weight,
                    diversity_weight=self.diversity_weight, temperature=self.temperature)
                self.parts_per_step_ = 1
            elif self.family == "1d-vq":
                d_lat = self.vq_dim
                self.quantizer_ = VectorQuantizer(
                    codebook_size=self.codebook_size, dim=d_lat,
                    commitment_weight=self.commitment_weight, ema_decay=self.ema_decay,
                    dead_code_batches=self.dead_code_batches, seed=self.seed + 101)
                self.parts_per_step_ = 1
            else:  # 1d-rvq
                d_lat = self.vq_dim
                self.quantizer_ = ResidualQuantizer(
                    depth=self.rvq_depth, codebook_size=self.codebook_size, dim=d_lat,
                    commitment_weight=self.commitment_weight, ema_decay=self.ema_decay,
                    dead_code_batches=self.dead_code_batches, seed=self.seed + 101)
                self.parts_per_step_ = self.rvq_depth
            self.partition_ = None
            self.encoder_ = _Encoder1d(rng, d_in, widths, self.res_blocks, d_lat)
            self.decoder_ = _Decoder1d(rng, d_in, widths, self.res_blocks, d_lat)
        self.latent_dim_ = d_lat
        self.params_ = {**self.encoder_.params(), **self.decoder_.params()}

    # -- quantization plumbing -----------------------------------------------

    def _quantize(self, z, training: bool):
        """Returns (quantized tensor, codes, commitment, entropy, histogram)."""
        if self.family == "1d-rvq":
            results, quantized = self.quantizer_.quantize(z, training=training)
            commit = results[0].commitment
            for res in results[1:]:
                commit = ops.add(commit, res.commitment)
            codes = np.stack([r.codes for r in results], axis=-1)  # (..., depth)
            hist = np.sum([r.histogram for r in results], axis=0)
            entropy = nn.Tensor(np.asarray(0.0, dtype=np.float32))
            return quantized, codes, commit, entropy, hist
        res = self.quantizer_.quantize(z, training=training)
        return res.quantized, res.codes, res.commitment, res.entropy, res.histogram

    def _codes_to_latents(self, codes: np.ndarray) -> np.ndarray:
        if self.family in ("2d-lfq", "1d-lfq"):
            return index_to_codeword(codes, self.latent_dim_).astype(np.float32)
        if self.family == "1d-vq":
            return self.quantizer_.lookup(codes).astype(np.float32)
        levels = [codes[..., i] for i in range(codes.shape[-1])]
        return self.quantizer_.decode_codes(levels).astype(np.float32)

    # -- data plumbing ---------------------------------------------------------

    def _normalize(self, data: np.ndarray) -> np.ndarray:
        return ((data - self.norm_mean_) / self.norm_std_).astype(np.float32)

    def _denormalize(self, data: np.ndarray) -> np.ndarray:
        return data.astype(np.float64) * self.norm_std_ + self.norm_mean_

    def _usable(self, sequences) -> list:
        fmt = normalize_format(self.format)
        out = []
        for m in sequences:
            if m.format != fmt:
                raise FormatMismatch(f"sequence format {m.format} != model format {fmt}")
            if m.frame_count >= self.window:
                out.append(m)
        return out

    # -- training -------------------------------------------------------------

    def fit(self, sequences, val_sequences=None):
        """Train on fixed-length crops of ``sequences``; returns self."""
        usable = self._usable(sequences)
        if not usable:
            raise EmptyDataset(f"no sequences of at least window={self.window} frames")
        rng = np.random.default_rng(self.seed)
        self._build(rng)
        frames = np.concatenate([m.data for m in usable], axis=0).astype(np.float64)
        self.norm_mean_ = frames.mean(axis=0)
        self.norm_std_ = np.maximum(frames.std(axis=0), 1e-3)
        self.fps_ = usable[0].fps
        opt = nn.Adam(self.params_, lr=self.lr)
        val = self._usable(val_sequences) if val_sequences else []
        self.report_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(usable))
            sums = {"recon": 0.0, "velocity": 0.0, "commit": 0.0, "entropy": 0.0}
            hist = np.zeros(self.codebook_size, dtype=np.int64)
            batches = 0
            for lo in range(0, len(order), self.batch_size):
                idx = order[lo:lo + self.batch_size]
                batch = np.stack([self._crop(usable[i], rng) for i in idx])
                stats, bh = self._train_step(batch, opt)
                for key in sums:
                    sums[key] += stats[key]
                hist += bh
                batches += 1
            row = {key: sums[key] / batches for key in sums}
            row["epoch"] = epoch
            stats = codebook_stats(hist)
            row["utilization"] = stats["utilization"]
            row["perplexity"] = stats["perplexity"]
            row["val_mpjpe"] = self.validation_mpjpe(val) if val else float("nan")
            self.report_.append(row)
        return self

    def _crop(self, m: MotionSequence, rng) -> np.ndarray:
        start = int(rng.integers(0, m.frame_count - self.window + 1))
        return self._normalize(m.data[start:start + self.window].astype(np.float64))

    def _recon_losses(self, recon, batch: np.ndarray):
        """L1 and velocity-L1 between reconstruction and batch features.

        The 2-D decoder emits the padded part layout (P, B*T, w_max); both
        losses are computed there under the part mask so padded slots
        contribute nothing and the values match the plain (B, T, D) form.
        """
        b, t, d = batch.shape
        if self.family == "2d-lfq":
            pad = self.decoder_.pad
            target = pad.pad(batch)
            mask = nn.Tensor(pad.mask)
            diff = ops.mul(ops.sub(recon, nn.Tensor(target)), mask)
            l_rec = ops.mul(ops.sum_(ops.absolute(diff)), 1.0 / (b * t * d))
            p, w = target.shape[0], target.shape[2]
            r4 = ops.reshape(recon, (p, b, t, w))
            dr = ops.sub(ops.narrow(r4, 2, 1, t - 1), ops.narrow(r4, 2, 0, t - 1))
            dt = target.reshape(p, b, t, w)
            dt = dt[:, :, 1:] - dt[:, :, :-1]
            vdiff = ops.mul(ops.sub(dr, nn.Tensor(dt)),
                            nn.Tensor(pad.mask[:, None, :, :]))
            l_vel = ops.mul(ops.sum_(ops.absolute(vdiff)), 1.0 / (b * (t - 1) * d))
            return l_rec, l_vel
        target = nn.Tensor(batch)
        l_rec = ops.mean(ops.absolute(ops.sub(recon, target)))
        dr = ops.sub(ops.narrow(recon, 1, 1, t - 1), ops.narrow(recon, 1, 0, t - 1))
        dt = ops.sub(ops.narrow(target, 1, 1, t - 1), ops.narrow(target, 1, 0, t - 1))
        l_vel = ops.mean(ops.absolute(ops.sub(dr, dt)))
        return l_rec, l_vel

    def _train_step(self, batch: np.ndarray, opt: nn.Adam):
        try:
            with nn.Tape() as tape:
                z = self.encoder_(batch)
                quantized, codes, commit, entropy, hist = self._quantize(z, training=True)
                recon = self.decoder_(quantized)
                l_rec, l_vel = self._recon_losses(recon, batch)
                loss = ops.add(ops.mul(l_rec, float(self.recon_weight)),
                               ops.mul(l_vel, float(self.velocity_weight)))
                loss = ops.add(loss, commit)
                if self.family in ("2d-lfq", "1d-lfq"):
                    loss = ops.add(loss, ops.mul(entropy, float(self.entropy_weight)))
            tape.backward(loss)
        except NonFiniteValue as exc:
            raise NonFiniteLoss(f"training diverged: {exc}") from exc
        opt.step()
        opt.zero_grad()
        return ({"recon": l_rec.item(), "velocity": l_vel.item(),
                 "commit": commit.item(), "entropy": entropy.item()}, hist)

    # -- inference --------------------------------------------------------------

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("tokenizer is not fitted; call fit() or load()")

    def _usable_frames(self, m: MotionSequence) -> int:
        if m.frame_count < self.alpha:
            raise TooShort(f"need at least alpha={self.alpha} frames, got {m.frame_count}")
        return (m.frame_count // self.alpha) * self.alpha

    def encode_grid(self, m: MotionSequence) -> np.ndarray:
        """Integer code grid: (T', P) for 2d, (T', levels or 1) for 1d."""
        self._require_fitted()
        if m.format != normalize_format(self.format):
            raise FormatMismatch(f"sequence format {m.format} != model format {self.format}")
        t = self._usable_frames(m)
        x = self._normalize(m.data[:t].astype(np.float64))[None]
        z = self.encoder_(x)
        _, codes, _, _, _ = self._quantize(z, training=False)
        codes = codes[0]
        if codes.ndim == 1:
            codes = codes[:, None]
        return codes

    def encode_latents(self, m: MotionSequence) -> np.ndarray:
        """Continuous latent grid before quantization."""
        self._require_fitted()
        t = self._usable_frames(m)
        x = self._normalize(m.data[:t].astype(np.float64))[None]
        return self.encoder_(x).data[0]

    def transform(self, m: MotionSequence) -> np.ndarray:
        """Flat token stream (time-major flattening of the code grid)."""
        return self.encode_grid(m).reshape(-1)

    def inverse_transform(self, tokens) -> MotionSequence:
        """Decode a flat token stream (length divisible by the part count)."""
        self._require_fitted()
        tokens = np.asarray(tokens, dtype=np.int64)
        p = self.parts_per_step_
        if tokens.ndim == 1:
            if tokens.size == 0 or tokens.size % p != 0:
                raise BadLength(f"token count must be a positive multiple of {p}")
            grid = tokens.reshape(-1, p)
        else:
            grid = tokens
        if grid.shape[0] < 1 or grid.shape[1] != p:
            raise BadLength(f"token grid must be (T', {p}), got {grid.shape}")
        if self.family == "2d-lfq":
            latents = self._codes_to_latents(grid)[None]  # (1, T', P, d)
            recon = self.decoder_.decode_array(nn.Tensor(latents))[0]
        elif self.family == "1d-rvq":
            latents = self._codes_to_latents(grid)[None]  # (1, T', d)
            recon = self.decoder_(nn.Tensor(latents)).data[0]
        else:
            latents = self._codes_to_latents(grid[:, 0])[None]
            recon = self.decoder_(nn.Tensor(latents)).data[0]
        return MotionSequence(format=self.format, fps=self.fps_,
                              data=self._denormalize(recon))

    def reconstruct(self, m: MotionSequence) -> MotionSequence:
        return self.inverse_transform(self.encode_grid(m))

    def validation_mpjpe(self, sequences, limit: int = 64) -> float:
        """Mean reconstruction MPJPE (mm) over leading windows of ``sequences``."""
        self._require_fitted()
        errors = []
        for m in sequences[:limit]:
            t = min(self._usable_frames(m), self.window)
            clip = MotionSequence(format=m.format, fps=m.fps, data=m.data[:t])
            recon = self.reconstruct(clip)
            errors.append(mpjpe(to_joint_positions(recon), to_joint_positions(clip)))
        return float(np.mean(errors))

    def corpus_usage(self, sequences) -> np.ndarray:
        """Code usage histogram over a full encoding pass."""
        self._require_fitted()
        hist = np.zeros(self.codebook_size, dtype=np.int64)
        for m in sequences:
            codes = self.encode_grid(m)
            hist += np.bincount(codes.reshape(-1), minlength=self.codebook_size)
        return hist

    # -- persistence ---------------------------------------------------------------

    def save(self, prefix):
        self._require_fitted()
        arrays = {name: t.data for name, t in self.params_.items()}
        arrays["norm.mean"] = self.norm_mean_
        arrays["norm.std"] = self.norm_std_
        if self.family == "1d-vq":
            arrays.update(self.quantizer_.state_arrays("quant"))
        elif self.family == "1d-rvq":
            for i, level in enumerate(self.quantizer_.levels):
                arrays.update(level.state_arrays(f"quant.level{i}"))
        meta = {"kind": "motion-tokenizer", "params": _jsonable(self.get_params()),
                "fps": int(self.fps_), "parts_per_step": int(self.parts_per_step_)}
        nn.save_checkpoint(prefix, arrays, meta)

    @classmethod
    def load(cls, prefix) -> "MotionTokenizer":
        arrays, meta = nn.load_checkpoint(prefix)
        if meta.get("kind") != "motion-tokenizer":
            raise BadMagic(f"{prefix}: not a tokenizer checkpoint")
        tok = cls(**meta["params"])
        tok._build(np.random.default_rng(tok.seed))
        for name, tensor in tok.params_.items():
            if arrays[name].shape != tensor.data.shape:
                raise ShapeMismatch(f"checkpoint tensor {name} has shape {arrays[name].shape}")
            tensor.data = arrays[name].astype(np.float32)
        tok.norm_mean_ = arrays["norm.mean"].astype(np.float64)
        tok.norm_std_ = arrays["norm.std"].astype(np.float64)
        if tok.family == "1d-vq":
            tok.quantizer_.load_state(arrays, "quant")
        elif tok.family == "1d-rvq":
            for i, level in enumerate(tok.quantizer_.levels):
                level.load_state(arrays, f"quant.level{i}")
        tok.fps_ = int(meta["fps"])
        tok.report_ = []
        return tok

    def report_csv(self) -> str:
        lines = [",".join(REPORT_FIELDS)]
        for row in getattr(self, "report_", []):
            lines.append(",".join(_fmt(row[k]) for k in REPORT_FIELDS))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".6g")
    return str(v)


def _jsonable(params: dict) -> dict:
    out = {}
    for key, value in params.items():
        if isinstance(value, tuple):
            value = list(value)
        elif isinstance(value, PartPartition):
            value = [list(r) for r in value.ranges]
        elif isinstance(value, np.integer):
            value = int(value)
        elif isinstance(value, np.floating):
            value = float(value)
        out[key] = value
    return out


def utilization_sweep(train_sequences, val_sequences, families, k_list,
                      seed: int = 0, **budget) -> list[dict]:
    """Train one tokenizer per (family, K) under a shared budget.

    Returns one row per run: family, K, utilization and perplexity of a
    full encoding pass over the training sequences, and validation MPJPE.
    ``budget`` keys override MotionTokenizer defaults (epochs, channels,
    batch_size, ...).
    """
    k_list = list(k_list)
    if k_list != sorted(k_list):
        raise InvalidConfig("k_list must be sorted ascending")
    rows = []
    for family in families:
        if family not in FAMILIES:
            raise InvalidConfig(f"unknown family {family!r}")
        for k in k_list:
            tok = MotionTokenizer(family=family, codebook_size=k, seed=seed, **budget)
            tok.fit(train_sequences, val_sequences)
            stats = codebook_stats(tok.corpus_usage(train_sequences))
            rows.append({
                "family": family,
                "codebook_size": k,
                "utilization": stats["utilization"],
                "perplexity": stats["perplexity"],
                "val_mpjpe": tok.validation_mpjpe(val_sequences) if val_sequences else float("nan"),
            })
    return rows


def sweep_csv(rows) -> str:
    lines = ["family,codebook_size,utilization,perplexity,val_mpjpe"]
    for r in rows:
        lines.append(f"{r['family']},{r['codebook_size']},{_fmt(r['utilization'])},"
                     f"{_fmt(r['perplexity'])},{_fmt(r['val_mpjpe'])}")
    return "\n".join(lines) + "\n"
