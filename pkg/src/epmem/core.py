"""Encoder-decoder over a flat parameter vector, with exact gradients.

All trainable weights live in one flat numpy array with a named segment map,
so optimizers, gradient projections, and serialization can treat the model
as a single vector. The encoder is a small token-embedding stack: either a
feed-forward mixer where every position also sees the masked mean of the
sequence ("ff", the default), or single-head self-attention ("attn"). Both
produce one hidden vector per token; position 0 (the begin symbol) doubles
as the sequence summary used by the classification head.

Forward and backward passes are hand-written and verified against central
finite differences in the test suite. Everything computes in the dtype of
the parameter vector: float32 for training (checkpoints round-trip exactly),
float64 for gradient checking.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, NumericalError

# Reserved token ids; the vocabulary assigns real words from NUM_RESERVED up.
BEGIN_ID = 0
SEP_ID = 1
UNK_ID = 2
NUM_RESERVED = 3

# Base Adam learning rate used when none is given.
DEFAULT_LEARNING_RATE = 3e-5

TASK_CLASSIFICATION = "classification"
TASK_SPAN = "span"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_classes: int = 2
    task: str = TASK_CLASSIFICATION
    embed_dim: int = 32
    hidden_dim: int = 32
    depth: int = 2
    encoder: str = "ff"  # "ff" | "attn"
    dropout: float = 0.1
    max_len: int = 128
    loss_reduction: str = "mean"  # "mean" | "sum"

    def __post_init__(self):
        if self.task not in (TASK_CLASSIFICATION, TASK_SPAN):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.encoder not in ("ff", "attn"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.task == TASK_CLASSIFICATION and self.num_classes < 2:
            raise ConfigError("classification needs at least 2 classes")
        if min(self.vocab_size, self.embed_dim, self.hidden_dim, self.max_len) < 1:
            raise ConfigError("dimensions must be >= 1")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown loss reduction {self.loss_reduction!r}")


@dataclass
class TokenSequence:
    """One tokenized input.

    `tokens[0]` is always the begin symbol. Span-task sequences look like
    ``[begin] context… [sep] question…`` with `context_len` (M) counting the
    context tokens; `context_offsets` keeps the character span of each
    context token so predicted spans can be mapped back to text.
    """

    tokens: list[int]
    context_len: int = 0
    question_len: int = 0
    context_offsets: list[tuple[int, int]] | None = None

    def __len__(self):
        return len(self.tokens)

    def validate(self, config: ModelConfig) -> None:
        if not self.tokens:
            raise InputError("empty token sequence")
        if self.tokens[0] != BEGIN_ID:
            raise InputError("sequence must start with the begin symbol")
        if len(self.tokens) > config.max_len:
            raise InputError(
                f"sequence length {len(self.tokens)} exceeds max_len {config.max_len}"
            )
        hi = max(self.tokens)
        if hi >= config.vocab_size:
            raise InputError(f"token index {hi} out of vocabulary ({config.vocab_size})")
        if min(self.tokens) < 0:
            raise InputError("negative token index")
        if config.task == TASK_SPAN and self.context_len > 0:
            # Sequences without a context (question-only key inputs) skip
            # the structural check; span prediction itself requires one.
            if self.tokens.count(SEP_ID) != 1:
                raise InputError("span sequences need exactly one separator")
            if self.tokens[1 + self.context_len] != SEP_ID:
                raise InputError("separator not at the end of the context")

    def question_tokens(self) -> list[int]:
        return self.tokens[2 + self.context_len :]


@dataclass
class ParamVector:
    """Flat parameter vector plus a named segment map.

    Segments are contiguous, disjoint, and cover the whole vector; `view`
    returns a reshaped window that shares memory with `values`.
    """

    values: np.ndarray
    segments: dict[str, tuple[int, int]]
    shapes: dict[str, tuple[int, ...]]
    config: ModelConfig

    def view(self, name: str) -> np.ndarray:
        off, length = self.segments[name]
        return self.values[off : off + length].reshape(self.shapes[name])

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments, self.shapes, self.config)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(
            self.values.astype(dtype), self.segments, self.shapes, self.config
        )

    def segment_at(self, index: int) -> str:
        for name, (off, length) in self.segments.items():
            if off <= index < off + length:
                return name
        raise IndexError(index)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0])
            raise NumericalError(f"non-finite parameter in segment {self.segment_at(bad)!r}")

    def __len__(self):
        return self.values.size


class GradView:
    """Named window into a flat gradient buffer (same layout as the params)."""

    def __init__(self, params: ParamVector, buf: np.ndarray):
        self._params = params
        self.flat = buf

    def __getitem__(self, name: str) -> np.ndarray:
        off, length = self._params.segments[name]
        return self.flat[off : off + length].reshape(self._params.shapes[name])


def param_layout(config: ModelConfig) -> tuple[dict[str, tuple[int, int]], dict[str, tuple[int, ...]]]:
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (config.vocab_size, config.embed_dim),
        "embed.pos": (config.max_len, config.embed_dim),
        "enc.in_w": (config.embed_dim, config.hidden_dim),
        "enc.in_b": (config.hidden_dim,),
    }
    h = config.hidden_dim
    for i in range(config.depth):
        if config.encoder == "ff":
            shapes[f"enc{i}.self_w"] = (h, h)
            shapes[f"enc{i}.pool_w"] = (h, h)
            shapes[f"enc{i}.b"] = (h,)
        else:
            shapes[f"enc{i}.wq"] = (h, h)
            shapes[f"enc{i}.wk"] = (h, h)
            shapes[f"enc{i}.wv"] = (h, h)
            shapes[f"enc{i}.wo"] = (h, h)
            shapes[f"enc{i}.b"] = (h,)
    if config.task == TASK_CLASSIFICATION:
        shapes["head.classes"] = (config.num_classes, h)
    else:
        shapes["head.start"] = (h,)
        shapes["head.end"] = (h,)
    segments: dict[str, tuple[int, int]] = {}
    offset = 0
    for name, shape in shapes.items():
        length = int(np.prod(shape))
        segments[name] = (offset, length)
        offset += length
    return segments, shapes


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ParamVector:
    """Seeded uniform(-0.05, 0.05) initialization, drawn segment by segment."""
    segments, shapes = param_layout(config)
    total = sum(length for _, length in segments.values())
    values = np.empty(total, dtype=dtype)
    rng = np.random.default_rng(seed)
    for name, (off, length) in segments.items():
        values[off : off + length] = rng.uniform(-0.05, 0.05, size=length).astype(dtype)
    return ParamVector(values, segments, shapes, config)


@dataclass
class Prediction:
    probs: np.ndarray | None = None
    span: tuple[int, int] | None = None
    span_prob: float | None = None
    fallback: bool = False

    @property
    def label(self) -> int:
        if self.probs is None:
            raise InputError("not a classification prediction")
        return int(np.argmax(self.probs))


@dataclass
class Batch:
    """Padded batch; built once and reused across repeated gradient calls."""

    ids: np.ndarray  # (B, T) int64
    mask: np.ndarray  # (B, T) 1.0 at real positions
    ctx_mask: np.ndarray | None  # (B, T) 1.0 at context positions (span task)
    labels: np.ndarray  # (B,) class ids, or (B, 2) sequence positions of gold span
    size: int

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.ids.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


def make_batch(items, config: ModelConfig) -> Batch:
    """Collate (TokenSequence, label) pairs; labels for the span task are
    context-relative (start, end) token indices."""
    if not items:
        raise InputError("empty batch")
    seqs = []
    for x, _ in items:
        x.validate(config)
        seqs.append(x)
    t_max = max(len(x) for x in seqs)
    b = len(seqs)
    ids = np.zeros((b, t_max), dtype=np.int64)
    mask = np.zeros((b, t_max))
    ctx_mask = np.zeros((b, t_max)) if config.task == TASK_SPAN else None
    for i, x in enumerate(seqs):
        n = len(x)
        ids[i, :n] = x.tokens
        mask[i, :n] = 1.0
        if ctx_mask is not None:
            ctx_mask[i, 1 : 1 + x.context_len] = 1.0
    if config.task == TASK_CLASSIFICATION:
        labels = np.empty(b, dtype=np.int64)
        for i, (_, y) in enumerate(items):
            y = int(y)
            if not 0 <= y < config.num_classes:
                raise InputError(f"label {y} outside the class set")
            labels[i] = y
    else:
        labels = np.empty((b, 2), dtype=np.int64)
        for i, ((x, y)) in enumerate(items):
            s, e = int(y[0]), int(y[1])
            if not 0 <= s <= e < x.context_len:
                raise InputError(f"gold span ({s}, {e}) out of context range")
            # store as sequence positions (context starts after the begin symbol)
            labels[i] = (1 + s, 1 + e)
    return Batch(ids, mask, ctx_mask, labels, b)


def _dropout_mask(rng, shape, rate, dtype):
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / dtype.type(keep)


def _forward(batch: Batch, params: ParamVector, train_mode: bool, dropout_seed):
    cfg = params.config
    dtype = params.values.dtype
    use_dropout = train_mode and cfg.dropout > 0.0
    if use_dropout:
        if dropout_seed is None:
            raise InputError("train_mode with dropout needs a dropout_seed")
        rng = np.random.default_rng(dropout_seed)
    mask = batch.mask.astype(dtype, copy=False)
    cache = {"mask": mask, "layers": []}

    x = params.view("embed.token")[batch.ids] + params.view("embed.pos")[: batch.ids.shape[1]][None]
    if use_dropout:
        dmask = _dropout_mask(rng, x.shape, cfg.dropout, np.dtype(dtype))
        x = x * dmask
        cache["embed_dmask"] = dmask
    cache["x"] = x
    h = x @ params.view("enc.in_w") + params.view("enc.in_b")

    denom = mask.sum(axis=1)
    cache["denom"] = denom
    scale = 1.0 / math.sqrt(cfg.hidden_dim)
    for i in range(cfg.depth):
        layer: dict = {"h_in": h}
        if cfg.encoder == "ff":
            m = (h * mask[..., None]).sum(axis=1) / denom[:, None]
            u = h @ params.view(f"enc{i}.self_w") + (m @ params.view(f"enc{i}.pool_w"))[:, None, :]
            u = u + params.view(f"enc{i}.b")
            a = np.tanh(u)
            layer["m"] = m
        else:
            q = h @ params.view(f"enc{i}.wq")
            k = h @ params.view(f"enc{i}.wk")
            v = h @ params.view(f"enc{i}.wv")
            scores = np.einsum("bth,bsh->bts", q, k) * dtype.type(scale)
            scores = scores + (mask[:, None, :] - 1.0) * dtype.type(1e9)
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            ctx = np.einsum("bts,bsh->bth", attn, v)
            a = np.tanh(ctx @ params.view(f"enc{i}.wo") + params.view(f"enc{i}.b"))
            layer.update(q=q, k=k, v=v, attn=attn, ctx=ctx)
        layer["a"] = a
        if use_dropout:
            dmask = _dropout_mask(rng, a.shape, cfg.dropout, np.dtype(dtype))
            a = a * dmask
            layer["dmask"] = dmask
        h = h + a
        cache["layers"].append(layer)
    cache["h"] = h
    return h, cache


def _log_softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _masked_log_softmax(logits, valid):
    neg = np.finfo(logits.dtype).max / 4
    masked = np.where(valid > 0, logits, -neg)
    return _log_softmax(masked, axis=-1)


def _example_weights(batch: Batch, params: ParamVector, sample_weights):
    dtype = params.values.dtype
    if sample_weights is not None:
        w = np.asarray(sample_weights, dtype=dtype)
        if w.shape != (batch.size,):
            raise InputError("sample_weights must have one entry per example")
        return w
    if params.config.loss_reduction == "mean":
        return np.full(batch.size, 1.0 / batch.size, dtype=dtype)
    return np.ones(batch.size, dtype=dtype)


def _loss_from_states(h, batch: Batch, params: ParamVector, weights):
    """Per-task negative log likelihood; returns (loss, head cache for backward)."""
    cfg = params.config
    if cfg.task == TASK_CLASSIFICATION:
        logits = h[:, 0, :] @ params.view("head.classes").T
        logp = _log_softmax(logits)
        nll = -logp[np.arange(batch.size), batch.labels]
        return float(nll @ weights), {"logp": logp}
    ctx = batch.ctx_mask.astype(h.dtype, copy=False)
    s_logits = h @ params.view("head.start")
    e_logits = h @ params.view("head.end")
    s_logp = _masked_log_softmax(s_logits, ctx)
    e_logp = _masked_log_softmax(e_logits, ctx)
    rows = np.arange(batch.size)
    nll = -s_logp[rows, batch.labels[:, 0]] - e_logp[rows, batch.labels[:, 1]]
    return float(nll @ weights), {"s_logp": s_logp, "e_logp": e_logp, "ctx": ctx}


def _backward(batch: Batch, params: ParamVector, cache, head_cache, weights) -> np.ndarray:
    cfg = params.config
    dtype = params.values.dtype
    grad_buf = np.zeros_like(params.values)
    grad = GradView(params, grad_buf)
    h = cache["h"]
    mask = cache["mask"]

    if cfg.task == TASK_CLASSIFICATION:
        probs = np.exp(head_cache["logp"])
        dlogits = probs
        dlogits[np.arange(batch.size), batch.labels] -= 1.0
        dlogits *= weights[:, None]
        h0 = h[:, 0, :]
        grad["head.classes"][...] = dlogits.T @ h0
        dh = np.zeros_like(h)
        dh[:, 0, :] = dlogits @ params.view("head.classes")
    else:
        rows = np.arange(batch.size)
        ctx = head_cache["ctx"]
        ds = np.exp(head_cache["s_logp"]) * ctx
        ds[rows, batch.labels[:, 0]] -= 1.0
        ds *= weights[:, None]
        de = np.exp(head_cache["e_logp"]) * ctx
        de[rows, batch.labels[:, 1]] -= 1.0
        de *= weights[:, None]
        grad["head.start"][...] = np.einsum("bt,bth->h", ds, h)
        grad["head.end"][...] = np.einsum("bt,bth->h", de, h)
        dh = ds[..., None] * params.view("head.start") + de[..., None] * params.view("head.end")

    denom = cache["denom"]
    scale = 1.0 / math.sqrt(cfg.hidden_dim)
    for i in reversed(range(cfg.depth)):
        layer = cache["layers"][i]
        h_in, a = layer["h_in"], layer["a"]
        da = dh * layer["dmask"] if "dmask" in layer else dh.copy()
        if cfg.encoder == "ff":
            du = da * (1.0 - a * a)
            grad[f"enc{i}.self_w"][...] = np.einsum("bti,btj->ij", h_in, du)
            du_sum = du.sum(axis=1)
            grad[f"enc{i}.pool_w"][...] = layer["m"].T @ du_sum
            grad[f"enc{i}.b"][...] = du_sum.sum(axis=0)
            dm = du_sum @ params.view(f"enc{i}.pool_w").T
            dh = dh + du @ params.view(f"enc{i}.self_w").T
            dh += mask[..., None] * (dm / denom[:, None])[:, None, :]
        else:
            do = da * (1.0 - a * a)
            grad[f"enc{i}.wo"][...] = np.einsum("bti,btj->ij", layer["ctx"], do)
            grad[f"enc{i}.b"][...] = do.sum(axis=(0, 1))
            dctx = do @ params.view(f"enc{i}.wo").T
            attn, v, q, k = layer["attn"], layer["v"], layer["q"], layer["k"]
            dattn = np.einsum("bth,bsh->bts", dctx, v)
            dv = np.einsum("bts,bth->bsh", attn, dctx)
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dq = np.einsum("bts,bsh->bth", dscores, k) * dtype.type(scale)
            dk = np.einsum("bts,bth->bsh", dscores, q) * dtype.type(scale)
            grad[f"enc{i}.wq"][...] = np.einsum("bti,btj->ij", h_in, dq)
            grad[f"enc{i}.wk"][...] = np.einsum("bti,btj->ij", h_in, dk)
            grad[f"enc{i}.wv"][...] = np.einsum("bti,btj->ij", h_in, dv)
            dh = dh + dq @ params.view(f"enc{i}.wq").T
            dh += dk @ params.view(f"enc{i}.wk").T
            dh += dv @ params.view(f"enc{i}.wv").T

    x = cache["x"]
    grad["enc.in_w"][...] = np.einsum("bte,bth->eh", x, dh)
    grad["enc.in_b"][...] = dh.sum(axis=(0, 1))
    dx = dh @ params.view("enc.in_w").T
    if "embed_dmask" in cache:
        dx = dx * cache["embed_dmask"]
    grad["embed.pos"][: batch.ids.shape[1]] += dx.sum(axis=0)
    np.add.at(grad["embed.token"], batch.ids, dx)
    return grad_buf


def _as_batch(batch_or_items, config) -> Batch:
    if isinstance(batch_or_items, Batch):
        return batch_or_items
    return make_batch(batch_or_items, config)


def encode(x: TokenSequence, params: ParamVector, train_mode: bool = False,
           dropout_seed: int | None = None) -> np.ndarray:
    """Per-token hidden states, shape (len(x), hidden_dim)."""
    x.validate(params.config)
    batch = Batch(
        ids=np.asarray([x.tokens], dtype=np.int64),
        mask=np.ones((1, len(x))),
        ctx_mask=None,
        labels=np.zeros(1, dtype=np.int64),
        size=1,
    )
    h, _ = _forward(batch, params, train_mode, dropout_seed)
    return h[0]


def classify(x: TokenSequence, params: ParamVector) -> np.ndarray:
    """Class distribution from the first-token summary vector."""
    if params.config.task != TASK_CLASSIFICATION:
        raise InputError("classify requires a classification model")
    h0 = encode(x, params)[0]
    logits = params.view("head.classes") @ h0
    return np.exp(_log_softmax(logits))


def span_distributions(x: TokenSequence, params: ParamVector) -> tuple[np.ndarray, np.ndarray]:
    """Start and end distributions over the M context tokens."""
    if params.config.task != TASK_SPAN:
        raise InputError("span prediction requires a span model")
    if x.context_len < 1:
        raise InputError("empty context")
    h = encode(x, params)
    hc = h[1 : 1 + x.context_len]
    p_start = np.exp(_log_softmax(hc @ params.view("head.start")))
    p_end = np.exp(_log_softmax(hc @ params.view("head.end")))
    return p_start, p_end


def select_span(p_start: np.ndarray, p_end: np.ndarray) -> tuple[int, int, float]:
    """Best valid (start <= end) span by start*end probability.

    Ties resolve to the earliest start, then the shortest span, which is the
    first maximum in row-major order over the valid upper triangle.
    """
    m = p_start.shape[0]
    joint = np.outer(p_start, p_end)
    joint[np.tril_indices(m, k=-1)] = -1.0
    flat = int(np.argmax(joint))
    start, end = divmod(flat, m)
    return start, end, float(joint[start, end])


def predict_span(x: TokenSequence, params: ParamVector) -> tuple[int, int, float]:
    p_start, p_end = span_distributions(x, params)
    return select_span(p_start, p_end)


def predict(x: TokenSequence, params: ParamVector) -> Prediction:
    if params.config.task == TASK_CLASSIFICATION:
        return Prediction(probs=classify(x, params))
    start, end, prob = predict_span(x, params)
    return Prediction(span=(start, end), span_prob=prob)


def nll_loss(batch, params: ParamVector, train_mode: bool = False,
             dropout_seed: int | None = None, sample_weights=None) -> float:
    """Weighted negative log likelihood (mean over the batch by default)."""
    b = _as_batch(batch, params.config)
    weights = _example_weights(b, params, sample_weights)
    h, _ = _forward(b, params, train_mode, dropout_seed)
    loss, _ = _loss_from_states(h, b, params, weights)
    return loss


def loss_grad(batch, params: ParamVector, train_mode: bool = False,
              dropout_seed: int | None = None, sample_weights=None) -> tuple[float, np.ndarray]:
    """Loss plus its exact gradient as a flat vector matching the params."""
    b = _as_batch(batch, params.config)
    weights = _example_weights(b, params, sample_weights)
    h, cache = _forward(b, params, train_mode, dropout_seed)
    loss, head_cache = _loss_from_states(h, b, params, weights)
    grad = _backward(b, params, cache, head_cache, weights)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericalError(f"non-finite gradient in segment {params.segment_at(bad)!r}")
    return loss, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int, dtype=np.float32) -> "AdamState":
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


def adam_step(params: ParamVector, grad: np.ndarray, state: AdamState,
              lr: float = DEFAULT_LEARNING_RATE, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if grad.shape != params.values.shape or state.m.shape != params.values.shape:
        raise InputError("gradient/state shape does not match the parameter vector")
    if not (np.all(np.isfinite(grad)) and math.isfinite(lr)):
        raise NumericalError("non-finite input to adam_step")
    dtype = params.values.dtype
    t = state.step + 1
    m = beta1 * state.m + dtype.type(1.0 - beta1) * grad.astype(dtype, copy=False)
    v = beta2 * state.v + dtype.type(1.0 - beta2) * np.square(grad.astype(dtype, copy=False))
    m_hat = m / dtype.type(1.0 - beta1**t)
    v_hat = v / dtype.type(1.0 - beta2**t)
    values = params.values - dtype.type(lr) * m_hat / (np.sqrt(v_hat) + dtype.type(eps))
    if not np.all(np.isfinite(values)):
        raise NumericalError("non-finite parameters after adam_step")
    return ParamVector(values, params.segments, params.shapes, params.config), AdamState(m, v, t)
