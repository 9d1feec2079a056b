"""Toy decoder-only language model over text bytes plus motion tokens.

Text is byte-level (256 ids), motion codes extend the vocabulary by K
entries, and five specials close it out: ``<bos> <eos> <pad> <mot>
</mot>``.  Training minimizes next-token negative log-likelihood over the
whole stream (no description mask); generation is greedy at temperature 0
or seeded top-k sampling otherwise, emitting between a forced ``<mot>``
and the first ``</mot>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import nn
from .exceptions import (
    BadMagic,
    ContextOverflow,
    EmptyDataset,
    MissingPlaceholder,
    NonFiniteLoss,
    NonFiniteValue,
    ShapeMismatch,
    TokenOutOfRange,
    VocabMismatch,
)
from .nn import ops

TEXT_VOCAB = 256
SPECIALS = ("<bos>", "<eos>", "<pad>", "<mot>", "</mot>")
PLACEHOLDER = "<Caption_Placeholder>"


@dataclass(frozen=True)
class Vocab:
    """Byte-level text ids, K motion ids, five specials; contiguous ranges."""

    motion_codes: int

    @property
    def size(self) -> int:
        return TEXT_VOCAB + self.motion_codes + len(SPECIALS)

    @property
    def motion_start(self) -> int:
        return TEXT_VOCAB

    def _special(self, name: str) -> int:
        return TEXT_VOCAB + self.motion_codes + SPECIALS.index(name)

    @property
    def bos(self) -> int:
        return self._special("<bos>")

    @property
    def eos(self) -> int:
        return self._special("<eos>")

    @property
    def pad(self) -> int:
        return self._special("<pad>")

    @property
    def mot(self) -> int:
        return self._special("<mot>")

    @property
    def emot(self) -> int:
        return self._special("</mot>")

    def encode_text(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def motion_id(self, code: int) -> int:
        if not 0 <= code < self.motion_codes:
            raise TokenOutOfRange(f"motion code {code} outside [0, {self.motion_codes})")
        return TEXT_VOCAB + int(code)

    def is_motion(self, token_id: int) -> bool:
        return TEXT_VOCAB <= token_id < TEXT_VOCAB + self.motion_codes

    def motion_code(self, token_id: int) -> int:
        if not self.is_motion(token_id):
            raise TokenOutOfRange(f"id {token_id} is not a motion token")
        return int(token_id) - TEXT_VOCAB


@dataclass
class LMExample:
    """Next-token training instance: inputs, shifted targets, loss mask."""

    input_ids: np.ndarray
    target_ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.input_ids = np.asarray(self.input_ids, dtype=np.int64)
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if not (self.input_ids.shape == self.target_ids.shape == self.mask.shape):
            raise ShapeMismatch("input/target/mask lengths differ")

    def __len__(self):
        return self.input_ids.shape[0]


def build_example(vocab: Vocab, desc: str, motion_tokens) -> LMExample:
    """``<bos> desc-bytes <mot> motion </mot> <eos>`` with full loss coverage.

    ``desc`` may be empty.  The loss mask covers every predicted position
    (all targets after ``<bos>``): the description is not masked out.
    """
    motion_ids = [vocab.motion_id(c) for c in np.asarray(motion_tokens, dtype=np.int64)]
    stream = [vocab.bos] + vocab.encode_text(desc) + [vocab.mot] + motion_ids + [vocab.emot, vocab.eos]
    stream = np.asarray(stream, dtype=np.int64)
    return LMExample(input_ids=stream[:-1], target_ids=stream[1:],
                     mask=np.ones(len(stream) - 1, dtype=np.float32))


def apply_template(template: str, caption: str) -> str:
    """Single-pass literal substitution of the caption placeholder."""
    if PLACEHOLDER not in template:
        raise MissingPlaceholder(f"template lacks {PLACEHOLDER!r}")
    return template.replace(PLACEHOLDER, caption, 1)


def load_templates(path=None) -> list[str]:
    """Instruction templates, one per line; the packaged set by default."""
    if path is None:
        text = resources.files("motionbook").joinpath("templates/instructions.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    templates = [line.strip() for line in text.splitlines() if line.strip()]
    for t in templates:
        if PLACEHOLDER not in t:
            raise MissingPlaceholder(f"template lacks placeholder: {t!r}")
    return templates


class MotionLanguageModel(BaseEstimator):
    """Small causal transformer over the joint text+motion vocabulary.

    ``fit`` runs next-token training (Adam, seeded shuffling); call it
    again to continue from the current weights, e.g. a pretraining pass
    followed by an instruction-tuned pass.  ``generate`` emits motion
    codes for a text prompt.
    """

    def __init__(self, motion_codes: int = 1024, layers: int = 2, heads: int = 4,
                 width: int = 128, context: int = 512, lr: float = 1e-3,
                 batch_size: int = 16, epochs: int = 50, seed: int = 0):
        self.motion_codes = motion_codes
        self.layers = layers
        self.heads = heads
        self.width = width
        self.context = context
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    # -- model construction ----------------------------------------------------

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.motion_codes)

    def _build(self, rng: np.random.Generator):
        if self.width % self.heads != 0:
            raise ShapeMismatch("width must be divisible by heads")
        v, w = self.vocab.size, self.width
        scale = 0.02
        def t(shape):
            return nn.Tensor((rng.standard_normal(shape) * scale).astype(np.float32),
                             requires_grad=True)
        p = {"wte": t((v, w)), "wpe": t((self.context, w))}
        for i in range(self.layers):
            p[f"h{i}.ln1.g"] = nn.Tensor(np.ones(w, np.float32), requires_grad=True)
            p[f"h{i}.ln1.b"] = nn.Tensor(np.zeros(w, np.float32), requires_grad=True)
            p[f"h{i}.wq"] = t((w, w))
            p[f"h{i}.wk"] = t((w, w))
            p[f"h{i}.wv"] = t((w, w))
            p[f"h{i}.wo"] = t((w, w))
            p[f"h{i}.ln2.g"] = nn.Tensor(np.ones(w, np.float32), requires_grad=True)
            p[f"h{i}.ln2.b"] = nn.Tensor(np.zeros(w, np.float32), requires_grad=True)
            p[f"h{i}.fc1"] = t((w, 4 * w))
            p[f"h{i}.fc1b"] = nn.Tensor(np.zeros(4 * w, np.float32), requires_grad=True)
            p[f"h{i}.fc2"] = t((4 * w, w))
            p[f"h{i}.fc2b"] = nn.Tensor(np.zeros(w, np.float32), requires_grad=True)
        p["lnf.g"] = nn.Tensor(np.ones(w, np.float32), requires_grad=True)
        p["lnf.b"] = nn.Tensor(np.zeros(w, np.float32), requires_grad=True)
        # zero-init head: an untrained model scores every token uniformly
        p["head"] = nn.Tensor(np.zeros((w, v), np.float32), requires_grad=True)
        self.params_ = p

    def _logits(self, ids: np.ndarray) -> nn.Tensor:
        """Training-path forward: (B, T) int ids -> (B, T, V) logits."""
        p = self.params_
        b, t = ids.shape
        if t > self.context:
            raise ContextOverflow(f"sequence of {t} exceeds context {self.context}")
        h = ops.add(ops.embedding_lookup(p["wte"], ids),
                    ops.embedding_lookup(p["wpe"], np.arange(t)))
        dh = self.width // self.heads
        causal = np.triu(np.full((t, t), -1e9, dtype=np.float32), k=1)[None, None]
        for i in range(self.layers):
            x = ops.layer_norm(h, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
            def split(mat):
                y = ops.reshape(ops.matmul(x, mat), (b, t, self.heads, dh))
                return ops.transpose(y, (0, 2, 1, 3))
            q, k, v = split(p[f"h{i}.wq"]), split(p[f"h{i}.wk"]), split(p[f"h{i}.wv"])
            att = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = ops.softmax(ops.add(att, nn.Tensor(causal)), axis=-1)
            y = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (b, t, self.width))
            h = ops.add(h, ops.matmul(y, p[f"h{i}.wo"]))
            x = ops.layer_norm(h, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
            x = ops.add(ops.matmul(ops.gelu(ops.add(ops.matmul(x, p[f"h{i}.fc1"]), p[f"h{i}.fc1b"])),
                                   p[f"h{i}.fc2"]), p[f"h{i}.fc2b"])
            h = ops.add(h, x)
        h = ops.layer_norm(h, p["lnf.g"], p["lnf.b"])
        return ops.matmul(h, p["head"])

    def logits(self, ids) -> np.ndarray:
        """Inference logits for one sequence (T,) -> (T, V)."""
        self._require_fitted()
        ids = np.asarray(ids, dtype=np.int64)
        return self._logits(ids[None]).data[0]

    def loss(self, examples, reduction: str = "mean") -> float:
        """Masked next-token cross-entropy without updating weights."""
        self._require_fitted()
        total, weight = 0.0, 0.0
        for batch in _batches(examples, self.batch_size, self.vocab.pad):
            ids, targets, mask = batch
            logits = self._logits(ids)
            flat = ops.reshape(logits, (-1, self.vocab.size))
            l = ops.cross_entropy_with_logits(flat, targets.reshape(-1),
                                              mask.reshape(-1), reduction="sum")
            total += l.item()
            weight += float(mask.sum())
        if reduction == "sum":
            return total
        return total / max(weight, 1.0)

    # -- training ------------------------------------------------------------------

    def fit(self, examples, epochs: int | None = None):
        """Train (or continue training) on LMExamples; returns self."""
        examples = list(examples)
        if not examples:
            raise EmptyDataset("no training examples")
        for ex in examples:
            if len(ex) + 1 > self.context + 1:
                raise ContextOverflow(f"example of {len(ex)} exceeds context {self.context}")
            top = int(ex.input_ids.max())
            if top >= self.vocab.size or int(ex.target_ids.max()) >= self.vocab.size:
                raise TokenOutOfRange("example id outside the vocabulary")
        rng = np.random.default_rng(self.seed)
        if not hasattr(self, "params_"):
            self._build(rng)
            self.loss_curve_ = []
            self._opt = nn.Adam(self.params_, lr=self.lr)
        n_epochs = self.epochs if epochs is None else epochs
        for _ in range(n_epochs):
            order = rng.permutation(len(examples))
            epoch_loss, batches = 0.0, 0
            for lo in range(0, len(order), self.batch_size):
                batch = [examples[i] for i in order[lo:lo + self.batch_size]]
                ids, targets, mask = _pad_batch(batch, self.vocab.pad)
                try:
                    with nn.Tape() as tape:
                        logits = self._logits(ids)
                        flat = ops.reshape(logits, (-1, self.vocab.size))
                        loss = ops.cross_entropy_with_logits(
                            flat, targets.reshape(-1), mask.reshape(-1))
                    tape.backward(loss)
                except NonFiniteValue as exc:
                    raise NonFiniteLoss(f"LM training diverged: {exc}") from exc
                self._opt.step()
                self._opt.zero_grad()
                epoch_loss += loss.item()
                batches += 1
            self.loss_curve_.append(epoch_loss / batches)
        return self

    def next_token_accuracy(self, examples) -> float:
        """Fraction of masked positions where argmax equals the target."""
        self._require_fitted()
        hits, total = 0, 0
        for ids, targets, mask in _batches(examples, self.batch_size, self.vocab.pad):
            pred = np.argmax(self._logits(ids).data, axis=-1)
            valid = mask > 0
            hits += int((pred[valid] == targets[valid]).sum())
            total += int(valid.sum())
        return hits / max(total, 1)

    # -- generation -----------------------------------------------------------------

    def generate(self, desc: str, temperature: float = 0.0, top_k: int = 0,
                 max_len: int = 256, seed: int = 0) -> np.ndarray:
        """Motion codes for a prompt; greedy when temperature is 0.

        Emission starts after a forced ``<mot>`` and stops at ``</mot>``,
        ``<eos>``, or ``max_len`` tokens.  Only motion-range tokens are
        returned (as codebook indices); the output length need not be a
        multiple of the tokenizer's part count, so pad or truncate before
        detokenizing.
        """
        self._require_fitted()
        vocab = self.vocab
        rng = np.random.default_rng(seed)
        weights = {k: t.data for k, t in self.params_.items()}
        prompt = [vocab.bos] + vocab.encode_text(desc) + [vocab.mot]
        if len(prompt) >= self.context:
            raise ContextOverflow("prompt alone exceeds the context length")
        cache = _Cache(self.layers)
        logits = None
        for pos, tok in enumerate(prompt):
            logits = _step(self, weights, tok, pos, cache)
        out = []
        pos = len(prompt)
        for _ in range(max_len):
            if pos >= self.context:
                break
            tok = _sample(logits, temperature, top_k, rng)
            if tok in (vocab.emot, vocab.eos):
                break
            if vocab.is_motion(tok):
                out.append(vocab.motion_code(tok))
            logits = _step(self, weights, tok, pos, cache)
            pos += 1
        return np.asarray(out, dtype=np.int64)

    # -- persistence -------------------------------------------------------------------

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("language model is not fitted; call fit() or load()")

    def save(self, prefix):
        self._require_fitted()
        arrays = {name: t.data for name, t in self.params_.items()}
        meta = {"kind": "motion-lm", "params": self.get_params(),
                "loss_curve": [float(x) for x in getattr(self, "loss_curve_", [])]}
        nn.save_checkpoint(prefix, arrays, meta)

    @classmethod
    def load(cls, prefix) -> "MotionLanguageModel":
        arrays, meta = nn.load_checkpoint(prefix)
        if meta.get("kind") != "motion-lm":
            raise BadMagic(f"{prefix}: not a language-model checkpoint")
        lm = cls(**meta["params"])
        lm._build(np.random.default_rng(lm.seed))
        for name, tensor in lm.params_.items():
            if arrays[name].shape != tensor.data.shape:
                raise VocabMismatch(f"checkpoint tensor {name} has shape {arrays[name].shape}")
            tensor.data = arrays[name].astype(np.float32)
        lm.loss_curve_ = list(meta.get("loss_curve", []))
        lm._opt = nn.Adam(lm.params_, lr=lm.lr)
        return lm


class _Cache:
    def __init__(self, layers):
        self.k = [None] * layers
        self.v = [None] * layers


def _layer_norm_np(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu_np(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _step(model: MotionLanguageModel, w: dict, token: int, pos: int, cache: _Cache) -> np.ndarray:
    """One cached decoding step; returns next-token logits (V,)."""
    heads, width = model.heads, model.width
    dh = width // heads
    h = w["wte"][token] + w["wpe"][pos]
    for i in range(model.layers):
        x = _layer_norm_np(h, w[f"h{i}.ln1.g"], w[f"h{i}.ln1.b"])
        q = (x @ w[f"h{i}.wq"]).reshape(heads, dh)
        k = (x @ w[f"h{i}.wk"]).reshape(1, heads, dh)
        v = (x @ w[f"h{i}.wv"]).reshape(1, heads, dh)
        cache.k[i] = k if cache.k[i] is None else np.concatenate([cache.k[i], k], axis=0)
        cache.v[i] = v if cache.v[i] is None else np.concatenate([cache.v[i], v], axis=0)
        att = np.einsum("hd,thd->ht", q, cache.k[i]) / np.sqrt(dh)
        att = np.exp(att - att.max(axis=1, keepdims=True))
        att /= att.sum(axis=1, keepdims=True)
        y = np.einsum("ht,thd->hd", att, cache.v[i]).reshape(width)
        h = h + y @ w[f"h{i}.wo"]
        x = _layer_norm_np(h, w[f"h{i}.ln2.g"], w[f"h{i}.ln2.b"])
        h = h + _gelu_np(x @ w[f"h{i}.fc1"] + w[f"h{i}.fc1b"]) @ w[f"h{i}.fc2"] + w[f"h{i}.fc2b"]
    h = _layer_norm_np(h, w["lnf.g"], w["lnf.b"])
    return h @ w["head"]


def _sample(logits: np.ndarray, temperature: float, top_k: int, rng) -> int:
    if temperature <= 0.0:
        return int(np.argmax(logits))
    scaled = logits.astype(np.float64) / temperature
    if top_k and top_k < scaled.shape[0]:
        cutoff = np.partition(scaled, -top_k)[-top_k]
        scaled = np.where(scaled >= cutoff, scaled, -np.inf)
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    return int(rng.choice(probs.shape[0], p=probs))


def _pad_batch(examples, pad_id: int):
    longest = max(len(ex) for ex in examples)
    n = len(examples)
    ids = np.full((n, longest), pad_id, dtype=np.int64)
    targets = np.full((n, longest), pad_id, dtype=np.int64)
    mask = np.zeros((n, longest), dtype=np.float32)
    for row, ex in enumerate(examples):
        ids[row, :len(ex)] = ex.input_ids
        targets[row, :len(ex)] = ex.target_ids
        mask[row, :len(ex)] = ex.mask
    return ids, targets, mask


def _batches(examples, batch_size: int, pad_id: int):
    examples = list(examples)
    for lo in range(0, len(examples), batch_size):
        yield _pad_batch(examples[lo:lo + batch_size], pad_id)
