"""Local adaptation: fine-tune a copy of the weights on retrieved neighbors.

At prediction time the model retrieves the stored examples whose keys are
closest to the query key, takes L gradient steps on their likelihood plus
an L2 leash back to the base weights, predicts with the adapted copy, and
throws the copy away. The base weights are never touched.

Keys come from a frozen network: a second parameter vector with the same
architecture, randomly initialized and never trained. Classification keys
encode the whole document; span-task keys encode the question alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BEGIN_ID,
    AdamState,
    Batch,
    ParamVector,
    Prediction,
    TokenSequence,
    adam_step,
    encode,
    init_params,
    loss_grad,
    make_batch,
    predict,
)
from .data import KIND_SPAN, Example, Vocabulary, to_sequence, tokenize
from .errors import ConfigError, DataError
from .memory import EpisodicMemory

KEY_NETWORK_TAG = 7919  # seed-derivation constant for the frozen key network


@dataclass(frozen=True)
class AdaptConfig:
    neighbors: int = 32  # K
    steps: int = 30  # L
    l2_anchor: float = 1e-3  # pull toward the base weights
    learning_rate: float = 5e-3
    neighbor_source: str = "knn"  # "knn" | "random"
    optimizer: str = "gd"  # "gd" | "adam"
    diverge_factor: float = 1e6
    seed: int = 0  # drives random-neighbor draws only

    def __post_init__(self):
        if self.neighbors < 1:
            raise ConfigError("neighbors must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.l2_anchor < 0:
            raise ConfigError("l2_anchor must be >= 0")
        if self.neighbor_source not in ("knn", "random"):
            raise ConfigError(f"unknown neighbor source {self.neighbor_source!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.diverge_factor <= 1:
            raise ConfigError("diverge_factor must be > 1")


@dataclass
class AdaptResult:
    params: ParamVector
    objectives: list[float] = field(default_factory=list)
    diverged: bool = False
    fallback: bool = False
    neighbors: list[Example] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)


def frozen_key_network(config, seed: int) -> ParamVector:
    """Untrained weights used only for keys; reproducible from config+seed."""
    return init_params(config, np.random.SeedSequence([seed, KEY_NETWORK_TAG]))


def compute_key(example: Example, key_params: ParamVector, vocab: Vocabulary) -> np.ndarray:
    """Key vector: first hidden state of the frozen network.

    Span-task keys see the question only, so retrieval matches questions
    against questions rather than whole passages.
    """
    config = key_params.config
    if example.kind == KIND_SPAN:
        words = tokenize(example.question)[: config.max_len - 1]
        if not words:
            raise DataError("empty question")
        seq = TokenSequence(tokens=[BEGIN_ID] + vocab.encode(words))
    else:
        seq, _ = to_sequence(example, vocab, config, with_target=False)
    return encode(seq, key_params)[0].copy()


def adapt_objective(batch, w_tilde: ParamVector, base_values: np.ndarray,
                    l2_anchor: float, sample_weights=None) -> tuple[float, np.ndarray]:
    """Leashed likelihood: l2_anchor * ||w - base||^2 + weighted NLL.

    Weights default to 1/K over the K neighbor examples. Returns the value
    and its exact gradient with respect to w_tilde.
    """
    delta = w_tilde.values - np.asarray(base_values, dtype=w_tilde.values.dtype)
    nll, grad = loss_grad(batch, w_tilde, sample_weights=sample_weights)
    value = float(l2_anchor) * float(delta @ delta) + nll
    grad = grad + (2.0 * l2_anchor) * delta
    return value, grad


def locally_adapt(batch_or_items, params: ParamVector, config: AdaptConfig,
                  sample_weights=None) -> AdaptResult:
    """L descent steps on the leashed objective, starting from the base.

    The input params are copied, never mutated. If the objective ever
    exceeds diverge_factor times its starting value (or turns non-finite),
    adaptation aborts and the result carries the unmodified base weights.
    """
    if isinstance(batch_or_items, Batch):
        batch = batch_or_items
    else:
        batch = make_batch(batch_or_items, params.config)
    base = params.values.copy()
    w = params.copy()
    state = AdamState.zeros(len(params), dtype=params.values.dtype)
    objectives: list[float] = []
    initial = None
    for _ in range(config.steps):
        value, grad = adapt_objective(batch, w, base, config.l2_anchor, sample_weights)
        objectives.append(value)
        if initial is None:
            initial = value
        bad = not np.isfinite(value) or not np.all(np.isfinite(grad))
        if bad or value > config.diverge_factor * max(abs(initial), 1e-12):
            return AdaptResult(
                params=ParamVector(base, params.segments, params.shapes, params.config),
                objectives=objectives,
                diverged=True,
            )
        if config.optimizer == "adam":
            w, state = adam_step(w, grad, state, lr=config.learning_rate)
        else:
            w = ParamVector(
                w.values - w.values.dtype.type(config.learning_rate) * grad,
                w.segments,
                w.shapes,
                w.config,
            )
    return AdaptResult(params=w, objectives=objectives)


def _content_rng(seed: int, example: Example) -> np.random.Generator:
    """Per-example RNG that depends only on the seed and example content,
    so random-neighbor draws do not depend on evaluation order."""
    digest = hashlib.sha256(f"{seed}:{example.content_key()}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def select_neighbors(example: Example, memory: EpisodicMemory,
                     key_params: ParamVector, vocab: Vocabulary,
                     config: AdaptConfig) -> tuple[list[Example], list[float]]:
    if config.neighbor_source == "random":
        rng = _content_rng(config.seed, example)
        picks = memory.sample(config.neighbors, rng)
        return picks, []
    query = compute_key(example, key_params, vocab)
    pairs = memory.neighbors(query, config.neighbors)
    return [ex for ex, _ in pairs], [d for _, d in pairs]


def predict_adapted(example: Example, params: ParamVector,
                    memory: EpisodicMemory | None, key_params: ParamVector,
                    vocab: Vocabulary, config: AdaptConfig) -> tuple[Prediction, AdaptResult]:
    """Adapt on retrieved neighbors, predict, and discard the adapted copy.

    An empty (or missing) memory falls back to the base weights and marks
    the prediction accordingly.
    """
    seq, _ = to_sequence(example, vocab, params.config, with_target=False)
    if memory is None or len(memory) == 0:
        pred = predict(seq, params)
        pred.fallback = True
        return pred, AdaptResult(params=params.copy(), fallback=True)

    neighbors, distances = select_neighbors(example, memory, key_params, vocab, config)
    items = []
    for ex in neighbors:
        try:
            items.append(to_sequence(ex, vocab, params.config))
        except DataError:
            continue  # a stored example no longer encodable under this config
    if not items:
        pred = predict(seq, params)
        pred.fallback = True
        return pred, AdaptResult(
            params=params.copy(), fallback=True, neighbors=neighbors, distances=distances
        )
    result = locally_adapt(items, params, config)
    result.neighbors = neighbors
    result.distances = distances
    pred = predict(seq, result.params)
    return pred, result
