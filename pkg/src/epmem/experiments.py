"""Small-scale end-to-end experiments runnable on a laptop in minutes.

The centerpiece: several synthetic datasets with disjoint label sets are
streamed one after another, every method trains on the identical stream,
and test scores per dataset show who forgot what. Sweeps reuse the same
machinery to vary memory write probability and retrieval settings.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import AdaptConfig, frozen_key_network
from .core import ModelConfig, ParamVector
from .data import (
    DatasetSpec,
    Example,
    Vocabulary,
    balance,
    build_label_space,
    build_stream,
    load_dataset,
    synth_classification,
)
from .errors import ConfigError
from .evaluation import dataset_score, forgetting_curve, make_bundle
from .memory import EpisodicMemory
from .trainer import METHODS, TrainConfig, TrainResult, mtl_stream, new_model, train_stream


@dataclass(frozen=True)
class DeskSettings:
    """Everything the desk-scale forgetting experiment depends on."""

    out_dir: str
    seeds: tuple[int, ...] = (0, 1, 2)
    methods: tuple[str, ...] = METHODS
    n_datasets: int = 2
    n_classes: int = 3
    n_train: int = 500
    n_test: int = 200
    data_seed: int = 1234
    # model
    embed_dim: int = 32
    hidden_dim: int = 32
    depth: int = 1
    encoder: str = "ff"
    dropout: float = 0.0
    max_len: int = 24
    # training
    batch_size: int = 4
    learning_rate: float = 5e-2
    replay_interval: int = 25
    replay_size: int = 32
    write_prob: float = 1.0
    mtl_epochs: int = 3
    # adaptation at prediction time
    neighbors: int = 32
    adapt_steps: int = 30
    adapt_lr: float = 5e-2
    l2_anchor: float = 1e-3
    # evaluation
    curve_methods: tuple[str, ...] = ("enc-dec",)
    eval_limit: int | None = None
    workers: int = 0

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods: {', '.join(bad)}")
        if self.n_datasets < 2:
            raise ConfigError("need at least 2 datasets to observe forgetting")


@dataclass
class DeskData:
    specs: list[DatasetSpec]
    label_space: dict[str, int]
    vocab: Vocabulary
    train_sets: list[list[Example]]
    test_sets: dict[str, list[Example]]


@dataclass
class MethodRun:
    method: str
    seed: int
    result: TrainResult
    key_params: ParamVector | None
    final: dict[str, float] = field(default_factory=dict)
    curve: list[dict] = field(default_factory=list)

    @property
    def avg(self) -> float:
        return sum(self.final.values()) / len(self.final)


@dataclass
class DeskOutcome:
    settings: DeskSettings
    data: DeskData
    runs: dict[tuple[str, int], MethodRun]

    def summary(self) -> dict:
        """Seed-averaged scores per method, JSON-friendly."""
        out: dict = {"datasets": [s.name for s in self.data.specs], "methods": {}}
        for method in self.settings.methods:
            seeds = [r for (m, _), r in self.runs.items() if m == method]
            per_ds = {
                name: float(np.mean([r.final[name] for r in seeds]))
                for name in out["datasets"]
            }
            entry = {
                "per_dataset": per_ds,
                "avg": float(np.mean([r.avg for r in seeds])),
                "seeds": {
                    str(r.seed): {"final": r.final, "avg": r.avg} for r in seeds
                },
            }
            curves = [r.curve for r in seeds if r.curve]
            if curves:
                merged = []
                for i in range(len(curves[0])):
                    merged.append(
                        {
                            "examples_seen": curves[0][i]["examples_seen"],
                            "dataset": curves[0][i]["dataset"],
                            "score": float(np.mean([c[i]["score"] for c in curves])),
                        }
                    )
                entry["curve"] = merged
            out["methods"][method] = entry
        return out


def prepare_data(settings: DeskSettings) -> DeskData:
    """Generate, balance, and load the synthetic datasets."""
    data_dir = Path(settings.out_dir) / "data"
    specs = [
        synth_classification(
            data_dir,
            dataset_index=i,
            n_classes=settings.n_classes,
            n_train=settings.n_train * 2,  # generate extra, then balance down
            n_test=settings.n_test,
            seed=settings.data_seed,
        )
        for i in range(settings.n_datasets)
    ]
    label_space = build_label_space(specs)
    train_sets = []
    test_sets = {}
    for i, spec in enumerate(specs):
        train = load_dataset(spec, label_space, "train")
        train_sets.append(balance(train, settings.n_train, seed=settings.data_seed + i))
        test_sets[spec.name] = load_dataset(spec, label_space, "test")
    vocab = Vocabulary.build(ex.text for examples in train_sets for ex in examples)
    return DeskData(specs, label_space, vocab, train_sets, test_sets)


def model_config(settings: DeskSettings, data: DeskData) -> ModelConfig:
    return ModelConfig(
        vocab_size=len(data.vocab),
        num_classes=len(data.label_space),
        task="classification",
        embed_dim=settings.embed_dim,
        hidden_dim=settings.hidden_dim,
        depth=settings.depth,
        encoder=settings.encoder,
        dropout=settings.dropout,
        max_len=settings.max_len,
    )


def train_config(settings: DeskSettings, method: str, seed: int,
                 write_prob: float | None = None) -> TrainConfig:
    return TrainConfig(
        method=method,
        batch_size=settings.batch_size,
        learning_rate=settings.learning_rate,
        replay_interval=settings.replay_interval,
        replay_size=settings.replay_size,
        write_prob=settings.write_prob if write_prob is None else write_prob,
        seed=seed,
    )


def adapt_config(settings: DeskSettings, neighbors: int | None = None,
                 steps: int | None = None) -> AdaptConfig:
    return AdaptConfig(
        neighbors=settings.neighbors if neighbors is None else neighbors,
        steps=settings.adapt_steps if steps is None else steps,
        l2_anchor=settings.l2_anchor,
        learning_rate=settings.adapt_lr,
    )


def train_one(settings: DeskSettings, data: DeskData, method: str, seed: int,
              write_prob: float | None = None,
              snapshot_at: tuple[int, ...] = ()) -> MethodRun:
    cfg = model_config(settings, data)
    tcfg = train_config(settings, method, seed, write_prob)
    params = new_model(cfg, seed)
    memory = key_params = None
    if tcfg.uses_memory():
        key_params = frozen_key_network(cfg, seed)
        memory = EpisodicMemory(d_key=cfg.hidden_dim)
    if method == "mtl":
        stream = mtl_stream(data.train_sets, seed, epochs=settings.mtl_epochs)
    else:
        stream = build_stream(data.train_sets, seed)
    result = train_stream(
        stream, params, data.vocab, tcfg,
        memory=memory, key_params=key_params, snapshot_at=snapshot_at,
    )
    return MethodRun(method=method, seed=seed, result=result, key_params=key_params)


def _bundle_for(run: MethodRun, settings: DeskSettings, data: DeskData,
                adapt: AdaptConfig | None = None):
    return make_bundle(
        run.result.params,
        data.vocab,
        method=run.method,
        memory=run.result.memory,
        key_params=run.key_params,
        adapt=adapt or adapt_config(settings),
    )


def _eval_sets(settings: DeskSettings, data: DeskData) -> dict[str, list[Example]]:
    if settings.eval_limit is None:
        return data.test_sets
    return {
        name: balance(examples, settings.eval_limit, seed=settings.data_seed)
        for name, examples in data.test_sets.items()
    }


def run_desk(settings: DeskSettings, data: DeskData | None = None) -> DeskOutcome:
    """Train every (method, seed) pair on the same stream and score it."""
    if data is None:
        data = prepare_data(settings)
    boundaries = tuple(
        settings.n_train * (i + 1) for i in range(settings.n_datasets - 1)
    )
    eval_sets = _eval_sets(settings, data)
    runs: dict[tuple[str, int], MethodRun] = {}
    for method in settings.methods:
        wants_curve = method in settings.curve_methods
        for seed in settings.seeds:
            run = train_one(
                settings, data, method, seed,
                snapshot_at=boundaries if wants_curve else (),
            )
            bundle = _bundle_for(run, settings, data)
            run.final = {
                name: dataset_score(bundle, examples, settings.workers)
                for name, examples in eval_sets.items()
            }
            if wants_curve:
                def bundle_at(params, memory, _run=run):
                    return make_bundle(
                        params, data.vocab, method=_run.method, memory=memory,
                        key_params=_run.key_params, adapt=adapt_config(settings),
                    )

                run.curve = forgetting_curve(
                    run.result.snapshots, bundle_at, eval_sets, settings.workers
                )
                run.curve.extend(
                    {
                        "examples_seen": run.result.cursor.examples_seen,
                        "dataset": name,
                        "score": score,
                    }
                    for name, score in run.final.items()
                )
            runs[(method, seed)] = run
    return DeskOutcome(settings=settings, data=data, runs=runs)


# ---------------------------------------------------------------- sweeps


def capacity_sweep(settings: DeskSettings, data: DeskData,
                   write_probs=(0.1, 0.5, 1.0),
                   outcome: DeskOutcome | None = None) -> list[dict]:
    """Retrain the full method at several memory write probabilities.

    Reuses runs from `outcome` when the write probability matches, since
    those trained under identical configurations.
    """
    eval_sets = _eval_sets(settings, data)
    n_examples = settings.n_train * settings.n_datasets
    points = []
    for p in write_probs:
        scores, writes = [], []
        for seed in settings.seeds:
            run = None
            if outcome is not None and p == settings.write_prob:
                run = outcome.runs.get(("mbpa++", seed))
            if run is None:
                run = train_one(settings, data, "mbpa++", seed, write_prob=p)
                bundle = _bundle_for(run, settings, data)
                run.final = {
                    name: dataset_score(bundle, examples, settings.workers)
                    for name, examples in eval_sets.items()
                }
            scores.append(run.avg)
            writes.append(len(run.result.memory))
        points.append(
            {
                "write_prob": p,
                "avg": float(np.mean(scores)),
                "scores": scores,
                "writes": writes,
                "expected_writes": n_examples * p,
                "write_sigma": float(np.sqrt(n_examples * p * (1 - p))),
            }
        )
    return points


def retrieval_sweep(settings: DeskSettings, data: DeskData, outcome: DeskOutcome,
                    neighbor_counts=(8, 16, 32), step_counts=(15, 30)) -> dict:
    """Re-score trained full-method runs under different retrieval settings.

    Training is untouched; only the prediction-time neighbor count K and
    step count L vary. Needs `outcome` to contain mbpa++ runs.
    """
    eval_sets = _eval_sets(settings, data)
    runs = [outcome.runs[("mbpa++", seed)] for seed in settings.seeds]

    def score_with(adapt: AdaptConfig) -> float:
        vals = []
        for run in runs:
            bundle = _bundle_for(run, settings, data, adapt=adapt)
            vals.append(
                float(
                    np.mean(
                        [
                            dataset_score(bundle, examples, settings.workers)
                            for examples in eval_sets.values()
                        ]
                    )
                )
            )
        return float(np.mean(vals))

    by_k = {
        k: score_with(adapt_config(settings, neighbors=k)) for k in neighbor_counts
    }
    by_l = {
        l: score_with(adapt_config(settings, steps=l)) for l in step_counts
    }
    return {"by_neighbors": by_k, "by_steps": by_l}


def settings_dict(settings: DeskSettings) -> dict:
    return asdict(settings)
