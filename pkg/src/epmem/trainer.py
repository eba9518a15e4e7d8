"""One-pass training over an example stream, with optional memory traffic.

The trainer never learns which dataset an example belongs to; it sees one
ordered stream and a method name. Methods differ only in their memory
traffic:

  enc-dec    plain sequential training, no memory
  replay     memory writes plus sparse experience replay
  agem       memory writes; batch gradients projected to not conflict
             with a reference gradient refreshed from memory
  mbpa       memory writes only (adaptation happens at prediction time)
  mbpa-rand  like mbpa++ during training by default (configurable)
  mbpa++     memory writes plus sparse replay, adaptation at prediction
  mtl        plain training on a pre-shuffled union of all datasets

Sparse replay: after S_every examples enter, the trainer draws one batch
of stored examples and takes one extra gradient step on it. Crossing
several thresholds at once (large batches) fires several replay events.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import compute_key
from .core import (
    DEFAULT_LEARNING_RATE,
    AdamState,
    ModelConfig,
    ParamVector,
    adam_step,
    init_params,
    loss_grad,
    make_batch,
)
from .data import Example, Vocabulary, to_sequence
from .errors import ConfigError, DataError, NumericalError
from .memory import EpisodicMemory

METHODS = ("enc-dec", "replay", "agem", "mbpa", "mbpa-rand", "mbpa++", "mtl")

CHECKPOINT_MAGIC = b"EPMEMCKP"
CHECKPOINT_VERSION = 1

# seed-derivation tags, one per RNG stream
_TAG_DROPOUT = 11
_TAG_WRITE = 12
_TAG_REPLAY = 13


@dataclass(frozen=True)
class TrainConfig:
    method: str = "mbpa++"
    batch_size: int = 32
    learning_rate: float = DEFAULT_LEARNING_RATE
    replay_interval: int = 10000  # examples between replay events
    replay_size: int = 100  # examples drawn per replay event
    replay_updates: int = 1  # gradient steps per replay event
    write_prob: float = 1.0
    mbpa_rand_replay: bool = True  # mbpa-rand trains with replay by default
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.replay_interval < 1:
            raise ConfigError("replay_interval must be >= 1")
        if self.replay_size < 1:
            raise ConfigError("replay_size must be >= 1")
        if self.replay_updates < 1:
            raise ConfigError("replay_updates must be >= 1")
        if not 0.0 <= self.write_prob <= 1.0:
            raise ConfigError("write_prob must be in [0, 1]")

    def uses_memory(self) -> bool:
        return self.method in ("replay", "agem", "mbpa", "mbpa-rand", "mbpa++")

    def uses_replay(self) -> bool:
        if self.method in ("replay", "mbpa++"):
            return True
        return self.method == "mbpa-rand" and self.mbpa_rand_replay

    def uses_agem(self) -> bool:
        return self.method == "agem"

    def uses_adaptation(self) -> bool:
        return self.method in ("mbpa", "mbpa-rand", "mbpa++")

    def neighbor_source(self) -> str:
        return "random" if self.method == "mbpa-rand" else "knn"


@dataclass
class StreamCursor:
    examples_seen: int = 0
    replay_events: int = 0
    batches_done: int = 0


@dataclass
class TrainResult:
    params: ParamVector
    adam: AdamState
    memory: EpisodicMemory | None
    cursor: StreamCursor
    snapshots: list[tuple[int, ParamVector, EpisodicMemory | None]] = field(
        default_factory=list
    )
    ref_grad: np.ndarray | None = None
    rngs: dict = field(default_factory=dict)


def agem_project(grad: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Remove the conflicting component of grad along a reference gradient.

    Projection applies only when the two gradients point against each
    other; otherwise grad passes through unchanged. A zero reference also
    passes grad through.
    """
    dot = float(grad.astype(np.float64) @ ref.astype(np.float64))
    if dot >= 0.0:
        return grad
    denom = float(ref.astype(np.float64) @ ref.astype(np.float64))
    if denom == 0.0:
        return grad
    return grad - grad.dtype.type(dot / denom) * ref


def replay_due(old_count: int, new_count: int, interval: int) -> int:
    """Number of replay thresholds crossed when the example counter moved."""
    return new_count // interval - old_count // interval


def mtl_stream(dataset_examples: list[list[Example]], seed: int,
               epochs: int = 1) -> list[Example]:
    """Shuffled union of all datasets, for the multitask upper bound.

    Unlike the continual methods, the multitask reference may see the data
    several times (reshuffled each epoch) since it stands in for training
    to convergence on everything at once.
    """
    merged = [ex for examples in dataset_examples for ex in examples]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 999]))
    stream: list[Example] = []
    for _ in range(max(1, epochs)):
        stream.extend(merged[i] for i in rng.permutation(len(merged)))
    return stream


def config_digest(model_config: ModelConfig, train_config: TrainConfig) -> bytes:
    """Stable fingerprint of everything that shapes a training run."""
    payload = json.dumps(
        {"model": vars(model_config), "train": vars(train_config)},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(payload.encode()).digest()


def _spawn_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


class _Logger:
    def __init__(self, path, every: int):
        self.f = open(path, "a", encoding="utf-8") if path else None
        self.every = max(1, every)

    def log(self, record: dict, force: bool = False):
        if self.f is None:
            return
        if force or record.get("batch", 0) % self.every == 0:
            self.f.write(json.dumps(record) + "\n")

    def close(self):
        if self.f is not None:
            self.f.close()


def train_stream(
    stream: list[Example],
    params: ParamVector,
    vocab: Vocabulary,
    train_config: TrainConfig,
    memory: EpisodicMemory | None = None,
    key_params: ParamVector | None = None,
    adam: AdamState | None = None,
    snapshot_at: tuple[int, ...] = (),
    log_path=None,
    log_every: int = 100,
    resume: "Checkpoint | None" = None,
) -> TrainResult:
    """One pass over the stream. Returns new params; inputs stay untouched.

    `snapshot_at` lists example counts at which to record a copy of the
    weights (and memory) for later evaluation. With `resume`, training
    continues exactly where the checkpoint stopped: same optimizer state,
    same coin flips, same replay draws.
    """
    cfg = params.config
    if train_config.uses_memory():
        if memory is None or key_params is None:
            raise ConfigError(f"method {train_config.method} needs a memory and key network")
    params = params.copy()
    adam = adam.copy() if adam is not None else AdamState.zeros(len(params), params.values.dtype)
    cursor = StreamCursor()
    ref_grad: np.ndarray | None = None

    if resume is not None:
        digest = config_digest(cfg, train_config)
        if resume.digest != digest:
            raise ConfigError("checkpoint was written under a different configuration")
        params.values[:] = resume.params_values
        adam = AdamState(resume.adam_m.copy(), resume.adam_v.copy(), resume.adam_step)
        cursor = StreamCursor(resume.examples_seen, resume.replay_events, resume.batches_done)
        rng_dropout = _restore_rng(resume.extras["rng"]["dropout"])
        rng_write = _restore_rng(resume.extras["rng"]["write"])
        rng_replay = _restore_rng(resume.extras["rng"]["replay"])
        ref_grad = resume.ref_grad.copy() if resume.ref_grad is not None else None
    else:
        rng_dropout = _spawn_rng(train_config.seed, _TAG_DROPOUT)
        rng_write = _spawn_rng(train_config.seed, _TAG_WRITE)
        rng_replay = _spawn_rng(train_config.seed, _TAG_REPLAY)

    thresholds = sorted(t for t in snapshot_at if t > cursor.examples_seen)
    snapshots: list[tuple[int, ParamVector, EpisodicMemory | None]] = []
    logger = _Logger(log_path, log_every)
    use_dropout = cfg.dropout > 0.0
    lr = train_config.learning_rate

    def one_update(items, weights=None):
        nonlocal params, adam
        batch = make_batch(items, cfg)
        seed = int(rng_dropout.integers(2**63)) if use_dropout else None
        loss, grad = loss_grad(
            batch, params, train_mode=use_dropout, dropout_seed=seed, sample_weights=weights
        )
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite loss at batch {cursor.batches_done}, digest {batch.digest()}"
            )
        if train_config.uses_agem() and ref_grad is not None:
            grad = agem_project(grad, ref_grad)
        params, adam = adam_step(params, grad, adam, lr=lr)
        return loss

    def encode_all(examples):
        items = []
        for ex in examples:
            try:
                items.append(to_sequence(ex, vocab, cfg))
            except DataError as e:
                raise DataError(f"stream example not encodable: {e}") from e
        return items

    try:
        pos = cursor.examples_seen
        while pos < len(stream):
            chunk = stream[pos : pos + train_config.batch_size]
            pos += len(chunk)
            loss = one_update(encode_all(chunk))

            if train_config.uses_memory():
                for ex in chunk:
                    coin = float(rng_write.random())
                    if coin < train_config.write_prob:
                        memory.write(compute_key(ex, key_params, vocab), ex)

            old = cursor.examples_seen
            cursor.examples_seen += len(chunk)
            cursor.batches_done += 1

            events = replay_due(old, cursor.examples_seen, train_config.replay_interval)
            for _ in range(events):
                cursor.replay_events += 1
                if train_config.uses_replay():
                    drawn = memory.sample(train_config.replay_size, rng_replay)
                    if drawn:
                        for _ in range(train_config.replay_updates):
                            replay_loss = one_update(encode_all(drawn))
                        logger.log(
                            {
                                "batch": cursor.batches_done,
                                "examples": cursor.examples_seen,
                                "replay_loss": replay_loss,
                                "replay_batch": len(drawn),
                            },
                            force=True,
                        )
                elif train_config.uses_agem():
                    drawn = memory.sample(train_config.replay_size, rng_replay)
                    if drawn:
                        _, ref_grad = loss_grad(make_batch(encode_all(drawn), cfg), params)

            while thresholds and cursor.examples_seen >= thresholds[0]:
                t = thresholds.pop(0)
                snapshots.append(
                    (t, params.copy(), memory.clone() if memory is not None else None)
                )

            logger.log(
                {
                    "batch": cursor.batches_done,
                    "examples": cursor.examples_seen,
                    "loss": loss,
                    "memory_size": len(memory) if memory is not None else 0,
                }
            )
    finally:
        logger.close()

    return TrainResult(
        params=params,
        adam=adam,
        memory=memory,
        cursor=cursor,
        snapshots=snapshots,
        ref_grad=ref_grad,
        rngs={
            "dropout": _rng_state(rng_dropout),
            "write": _rng_state(rng_write),
            "replay": _rng_state(rng_replay),
        },
    )


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    digest: bytes
    params_values: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    adam_step: int
    examples_seen: int
    replay_events: int
    batches_done: int
    extras: dict
    ref_grad: np.ndarray | None = None


def make_checkpoint(result: TrainResult, model_config: ModelConfig,
                    train_config: TrainConfig) -> Checkpoint:
    return Checkpoint(
        digest=config_digest(model_config, train_config),
        params_values=result.params.values,
        adam_m=result.adam.m,
        adam_v=result.adam.v,
        adam_step=result.adam.step,
        examples_seen=result.cursor.examples_seen,
        replay_events=result.cursor.replay_events,
        batches_done=result.cursor.batches_done,
        extras={"rng": result.rngs},
        ref_grad=result.ref_grad,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Little-endian binary layout; float32 tensors are stored exactly."""
    extras = json.dumps(ckpt.extras).encode("utf-8")
    ref = ckpt.ref_grad if ckpt.ref_grad is not None else np.empty(0, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(ckpt.digest)
        f.write(struct.pack("<Q", ckpt.params_values.size))
        f.write(ckpt.params_values.astype("<f4").tobytes())
        f.write(ckpt.adam_m.astype("<f4").tobytes())
        f.write(ckpt.adam_v.astype("<f4").tobytes())
        f.write(
            struct.pack(
                "<QQQQ",
                ckpt.adam_step,
                ckpt.examples_seen,
                ckpt.replay_events,
                ckpt.batches_done,
            )
        )
        f.write(struct.pack("<Q", ref.size))
        f.write(ref.astype("<f4").tobytes())
        f.write(struct.pack("<I", len(extras)))
        f.write(extras)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint")
    try:
        (version,) = struct.unpack_from("<I", blob, 8)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        digest = bytes(blob[12:44])
        (n,) = struct.unpack_from("<Q", blob, 44)
        off = 52
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(blob, dtype="<f4", count=n, offset=off).copy())
            off += 4 * n
        adam_step, examples_seen, replay_events, batches_done = struct.unpack_from(
            "<QQQQ", blob, off
        )
        off += 32
        (ref_n,) = struct.unpack_from("<Q", blob, off)
        off += 8
        ref = np.frombuffer(blob, dtype="<f4", count=ref_n, offset=off).copy()
        off += 4 * ref_n
        (extras_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        extras = json.loads(blob[off : off + extras_len].decode("utf-8"))
        off += extras_len
    except (struct.error, ValueError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: truncated or corrupt checkpoint: {e}") from e
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after checkpoint payload")
    return Checkpoint(
        digest=digest,
        params_values=arrays[0],
        adam_m=arrays[1],
        adam_v=arrays[2],
        adam_step=adam_step,
        examples_seen=examples_seen,
        replay_events=replay_events,
        batches_done=batches_done,
        extras=extras,
        ref_grad=ref if ref_n else None,
    )


def new_model(config: ModelConfig, seed: int, dtype=np.float32) -> ParamVector:
    """Fresh trainable weights; the key network derives from the same seed
    elsewhere, so one (config, seed) pair pins the whole setup."""
    return init_params(config, np.random.SeedSequence([seed, 1]), dtype=dtype)
