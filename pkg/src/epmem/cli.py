"""Command-line front end.

Subcommands: synth, train, eval, ablate, orderings. Settings resolve in
three layers: built-in defaults, then a key=value config file, then
explicit flags. Reports write delimited tables plus PNG figures.

Exit codes: 0 success, 2 bad configuration, 3 bad data or input,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import plots
from .adaptation import AdaptConfig, frozen_key_network, select_neighbors
from .core import ModelConfig
from .data import (
    CLASSIFICATION_ORDERINGS,
    KIND_CLASSIFICATION,
    KIND_SPAN,
    QA_ORDERINGS,
    Vocabulary,
    build_label_space,
    build_stream,
    load_dataset,
    load_manifest,
    resolve_ordering,
    synth_classification,
    synth_qa,
)
from .errors import ConfigError, DataError, EpmemError, InputError, NumericalError
from .evaluation import dataset_score, make_bundle, write_results
from .experiments import (
    DeskSettings,
    capacity_sweep,
    prepare_data,
    retrieval_sweep,
    run_desk,
    settings_dict,
)
from .memory import EpisodicMemory
from .trainer import (
    METHODS,
    TrainConfig,
    load_checkpoint,
    make_checkpoint,
    mtl_stream,
    new_model,
    save_checkpoint,
    train_stream,
)

TRAIN_DEFAULTS = {
    "method": "mbpa++",
    "order": "",
    "seed": 0,
    "batch_size": 32,
    "learning_rate": 3e-5,
    "replay_interval": 10000,
    "replay_size": 100,
    "write_prob": 1.0,
    "embed_dim": 32,
    "hidden_dim": 32,
    "depth": 2,
    "encoder": "ff",
    "dropout": 0.1,
    "max_len": 128,
    "vocab_cap": 20000,
    "max_examples": 0,
    "log_every": 100,
}

ABLATE_DEFAULTS = {
    "seeds": "0,1,2",
    "methods": ",".join(METHODS),
    "datasets": 2,
    "classes": 3,
    "train_examples": 500,
    "test_examples": 200,
    "data_seed": 1234,
    "batch_size": 4,
    "learning_rate": 5e-2,
    "replay_interval": 25,
    "replay_size": 32,
    "mtl_epochs": 3,
    "neighbors": 32,
    "adapt_steps": 30,
    "adapt_lr": 5e-2,
    "l2_anchor": 1e-3,
    "embed_dim": 32,
    "hidden_dim": 32,
    "depth": 1,
    "max_len": 24,
    "curve_methods": "enc-dec,replay,mbpa++",
    "eval_limit": 0,
    "workers": 0,
    "sweep": "both",
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_config_file(path) -> dict:
    settings = {}
    try:
        for line_num, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_num}: expected key=value")
            key, _, value = line.partition("=")
            settings[key.strip()] = _parse_value(value.strip())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return settings


def _layer_settings(defaults: dict, config_file, set_pairs, cli_pairs: dict) -> dict:
    """defaults, then config file, then --set pairs, then explicit flags."""
    settings = dict(defaults)
    layers = []
    if config_file:
        layers.append(_parse_config_file(config_file))
    if set_pairs:
        pairs = {}
        for pair in set_pairs:
            if "=" not in pair:
                raise ConfigError(f"--set needs key=value, got {pair!r}")
            key, _, value = pair.partition("=")
            pairs[key.strip()] = _parse_value(value.strip())
        layers.append(pairs)
    layers.append({k: v for k, v in cli_pairs.items() if v is not None})
    for layer in layers:
        unknown = set(layer) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown settings: {', '.join(sorted(unknown))}")
        settings.update(layer)
    return settings


def _int_tuple(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(p) for p in str(text).split(",") if p.strip())


def _str_tuple(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(str(v) for v in text)
    return tuple(p.strip() for p in str(text).split(",") if p.strip())


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    specs = []
    for i in range(args.datasets):
        if args.kind == KIND_CLASSIFICATION:
            specs.append(
                synth_classification(
                    out, i, n_classes=args.classes, n_train=args.train,
                    n_test=args.test, seed=args.seed,
                )
            )
        else:
            specs.append(
                synth_qa(out, i, n_train=args.train, n_test=args.test, seed=args.seed)
            )
    for spec in specs:
        print(f"wrote {spec.name}: train={spec.train_path} test={spec.test_path}")
    print(f"manifest: {out / 'manifest.json'}")
    return 0


# ---------------------------------------------------------------- train


def _load_data(data_dir, order: str):
    specs = load_manifest(data_dir)
    kinds = {s.kind for s in specs}
    if len(kinds) > 1:
        raise ConfigError("manifest mixes classification and span datasets")
    kind = kinds.pop()
    if order:
        specs = resolve_ordering(kind, order, specs)
    label_space = build_label_space(specs)
    return specs, kind, label_space


def _texts_for_vocab(examples):
    for ex in examples:
        yield ex.text if ex.kind == KIND_CLASSIFICATION else f"{ex.context} {ex.question}"


def cmd_train(args) -> int:
    cli_pairs = {
        k: getattr(args, k)
        for k in TRAIN_DEFAULTS
        if hasattr(args, k)
    }
    s = _layer_settings(TRAIN_DEFAULTS, args.config, args.set, cli_pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    specs, kind, label_space = _load_data(args.data, s["order"])
    train_sets = [load_dataset(spec, label_space, "train") for spec in specs]

    vocab_path = out / "vocab.json"
    if args.resume and vocab_path.exists():
        vocab = Vocabulary.load(vocab_path)
    else:
        vocab = Vocabulary.build(
            _texts_for_vocab(ex for examples in train_sets for ex in examples),
            cap=s["vocab_cap"],
        )
        vocab.save(vocab_path)

    model_cfg = ModelConfig(
        vocab_size=len(vocab),
        num_classes=max(len(label_space), 2),
        task=KIND_SPAN if kind == KIND_SPAN else KIND_CLASSIFICATION,
        embed_dim=s["embed_dim"],
        hidden_dim=s["hidden_dim"],
        depth=s["depth"],
        encoder=s["encoder"],
        dropout=s["dropout"],
        max_len=s["max_len"],
    )
    train_cfg = TrainConfig(
        method=s["method"],
        batch_size=s["batch_size"],
        learning_rate=s["learning_rate"],
        replay_interval=s["replay_interval"],
        replay_size=s["replay_size"],
        write_prob=s["write_prob"],
        seed=s["seed"],
    )

    params = new_model(model_cfg, s["seed"])
    memory = key_params = None
    if train_cfg.uses_memory():
        key_params = frozen_key_network(model_cfg, s["seed"])
        memory = EpisodicMemory(d_key=model_cfg.hidden_dim)

    resume = None
    ckpt_path = out / "params.ckpt"
    mem_path = out / "memory.bin"
    if args.resume:
        resume = load_checkpoint(ckpt_path)
        if memory is not None and mem_path.exists():
            memory = EpisodicMemory.load(mem_path)

    if s["method"] == "mtl":
        stream = mtl_stream(train_sets, s["seed"])
    else:
        stream = build_stream(train_sets, s["seed"])
    if s["max_examples"]:
        # cut on a batch boundary so a later --resume replays the exact
        # same batches as an uninterrupted run
        cut = (s["max_examples"] // s["batch_size"]) * s["batch_size"]
        if cut < 1:
            raise ConfigError("--max-examples is below one batch")
        stream = stream[:cut]

    result = train_stream(
        stream, params, vocab, train_cfg,
        memory=memory, key_params=key_params,
        log_path=out / "train_log.jsonl", log_every=s["log_every"],
        resume=resume,
    )

    save_checkpoint(ckpt_path, make_checkpoint(result, model_cfg, train_cfg))
    if result.memory is not None:
        result.memory.save(mem_path)
    (out / "config.json").write_text(
        json.dumps(
            {
                "model": vars(model_cfg),
                "train": vars(train_cfg),
                "order": [spec.name for spec in specs],
                "data_dir": str(args.data),
            },
            indent=2,
            sort_keys=True,
        )
    )
    print(
        f"trained {s['method']} on {result.cursor.examples_seen} examples "
        f"({result.cursor.batches_done} batches, "
        f"{result.cursor.replay_events} replay events, "
        f"memory={len(result.memory) if result.memory is not None else 0})"
    )
    print(f"run directory: {out}")
    return 0


# ---------------------------------------------------------------- eval


def _load_run(run_dir):
    run_dir = Path(run_dir)
    try:
        config = json.loads((run_dir / "config.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read run config: {e}") from e
    model_cfg = ModelConfig(**config["model"])
    train_cfg = TrainConfig(**config["train"])
    vocab = Vocabulary.load(run_dir / "vocab.json")
    ckpt = load_checkpoint(run_dir / "params.ckpt")
    params = new_model(model_cfg, train_cfg.seed)
    params.values[:] = ckpt.params_values
    memory = None
    if train_cfg.uses_memory():
        mem_path = run_dir / "memory.bin"
        if mem_path.exists():
            memory = EpisodicMemory.load(mem_path)
    return config, model_cfg, train_cfg, vocab, params, memory


def cmd_eval(args) -> int:
    config, model_cfg, train_cfg, vocab, params, memory = _load_run(args.run)
    specs, kind, label_space = _load_data(args.data, ",".join(config["order"]))
    key_params = frozen_key_network(model_cfg, train_cfg.seed)
    adapt = AdaptConfig(
        neighbors=args.neighbors,
        steps=args.adapt_steps,
        l2_anchor=args.l2_anchor,
        learning_rate=args.adapt_lr,
        seed=train_cfg.seed,
    )
    bundle = make_bundle(
        params, vocab, method=train_cfg.method,
        memory=memory, key_params=key_params, adapt=adapt,
    )

    row = {"method": train_cfg.method}
    for spec in specs:
        examples = load_dataset(spec, label_space, "test")
        if args.limit:
            examples = examples[: args.limit]
        row[spec.name] = dataset_score(bundle, examples, workers=args.parallel)
    row["avg"] = sum(row[s.name] for s in specs) / len(specs)
    columns = ["method"] + [s.name for s in specs] + ["avg"]

    if args.dump_neighbors and bundle.adaptive():
        _dump_neighbors(args, bundle, specs, label_space)

    if args.report:
        report = Path(args.report)
        report.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = write_results(report / "results", [row], columns)
        fig_path = plots.plot_scores([row], columns, report / "results.png")
        print(Path(txt_path).read_text(), end="")
        print(f"report: {csv_path}, {txt_path}, {fig_path}")
    else:
        from .evaluation import results_table

        _, txt = results_table([row], columns)
        print(txt, end="")
    return 0


def _dump_neighbors(args, bundle, specs, label_space):
    count = 0
    with open(args.dump_neighbors, "w", encoding="utf-8") as f:
        for spec in specs:
            for ex in load_dataset(spec, label_space, "test")[: args.dump_limit]:
                neighbors, distances = select_neighbors(
                    ex, bundle.memory, bundle.key_params, bundle.vocab, bundle.adapt
                )
                record = {
                    "dataset": spec.name,
                    "query": ex.text if ex.kind == KIND_CLASSIFICATION else ex.question,
                    "neighbors": [
                        {
                            "text": n.text if n.kind == KIND_CLASSIFICATION else n.question,
                            "distance": distances[i] if distances else None,
                        }
                        for i, n in enumerate(neighbors)
                    ],
                }
                f.write(json.dumps(record) + "\n")
                count += 1
    print(f"wrote {count} neighbor records to {args.dump_neighbors}")


# ---------------------------------------------------------------- ablate


def cmd_ablate(args) -> int:
    cli_pairs = {k: getattr(args, k) for k in ABLATE_DEFAULTS if hasattr(args, k)}
    s = _layer_settings(ABLATE_DEFAULTS, args.config, args.set, cli_pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = DeskSettings(
        out_dir=str(out),
        seeds=_int_tuple(s["seeds"]),
        methods=_str_tuple(s["methods"]),
        n_datasets=s["datasets"],
        n_classes=s["classes"],
        n_train=s["train_examples"],
        n_test=s["test_examples"],
        data_seed=s["data_seed"],
        embed_dim=s["embed_dim"],
        hidden_dim=s["hidden_dim"],
        depth=s["depth"],
        max_len=s["max_len"],
        batch_size=s["batch_size"],
        learning_rate=s["learning_rate"],
        replay_interval=s["replay_interval"],
        replay_size=s["replay_size"],
        mtl_epochs=s["mtl_epochs"],
        neighbors=s["neighbors"],
        adapt_steps=s["adapt_steps"],
        adapt_lr=s["adapt_lr"],
        l2_anchor=s["l2_anchor"],
        curve_methods=_str_tuple(s["curve_methods"]),
        eval_limit=s["eval_limit"] or None,
        workers=s["workers"],
    )

    print(f"running methods {', '.join(settings.methods)} over seeds {settings.seeds}")
    outcome = run_desk(settings)
    summary = outcome.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out / "settings.json").write_text(
        json.dumps(settings_dict(settings), indent=2, sort_keys=True)
    )

    columns = ["method"] + summary["datasets"] + ["avg"]
    rows = [
        {"method": m, "avg": summary["methods"][m]["avg"],
         **summary["methods"][m]["per_dataset"]}
        for m in settings.methods
    ]
    csv_path, txt_path = write_results(out / "results", rows, columns)
    plots.plot_scores(rows, columns, out / "results.png")
    plots.plot_method_bars(summary, out / "methods.png")
    if any("curve" in summary["methods"][m] for m in settings.methods):
        plots.plot_forgetting_curves(summary, out / "forgetting.png")
    print(Path(txt_path).read_text(), end="")

    if s["sweep"] in ("capacity", "both"):
        points = capacity_sweep(settings, outcome.data, outcome=outcome)
        cap_columns = ["write_prob", "avg", "expected_writes", "write_sigma"]
        write_results(out / "capacity", points, cap_columns)
        plots.plot_capacity(points, out / "capacity.png")
        for p in points:
            print(
                f"write_prob={p['write_prob']}: avg={p['avg']:.1f} "
                f"writes={p['writes']} expected={p['expected_writes']:.0f}"
            )
    if s["sweep"] in ("retrieval", "both"):
        if "mbpa++" not in settings.methods:
            raise ConfigError("retrieval sweep needs mbpa++ among the methods")
        sweep = retrieval_sweep(settings, outcome.data, outcome)
        rows = [
            {"setting": "neighbors", "value": k, "avg": v}
            for k, v in sorted(sweep["by_neighbors"].items())
        ] + [
            {"setting": "steps", "value": l, "avg": v}
            for l, v in sorted(sweep["by_steps"].items())
        ]
        write_results(out / "retrieval", rows, ["setting", "value", "avg"])
        plots.plot_retrieval(sweep, out / "retrieval.png")
        for row in rows:
            print(f"{row['setting']}={row['value']}: avg={row['avg']:.1f}")
    print(f"report directory: {out}")
    return 0


# ---------------------------------------------------------------- orderings


def cmd_orderings(args) -> int:
    tables = []
    if args.kind in (KIND_CLASSIFICATION, "all"):
        tables.append(("classification", CLASSIFICATION_ORDERINGS))
    if args.kind in (KIND_SPAN, "all"):
        tables.append(("span", QA_ORDERINGS))
    for kind, table in tables:
        print(f"{kind}:")
        for name, datasets in table.items():
            print(f"  {name:4s} {' -> '.join(datasets)}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epmem",
        description="Streaming text learners with an episodic memory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", choices=[KIND_CLASSIFICATION, KIND_SPAN],
                   default=KIND_CLASSIFICATION)
    p.add_argument("--datasets", type=int, default=2)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--train", type=int, default=500)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train one method over a dataset stream")
    p.add_argument("--data", required=True, help="directory with manifest.json")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one setting (repeatable)")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in --out")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--order", help="named ordering or comma-separated dataset names")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--replay-interval", dest="replay_interval", type=int)
    p.add_argument("--replay-size", dest="replay_size", type=int)
    p.add_argument("--write-prob", dest="write_prob", type=float)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--encoder", choices=["ff", "attn"])
    p.add_argument("--dropout", type=float)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--vocab-cap", dest="vocab_cap", type=int)
    p.add_argument("--max-examples", dest="max_examples", type=int,
                   help="stop after N examples, rounded down to whole batches")
    p.add_argument("--log-every", dest="log_every", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a trained run on test sets")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--data", required=True, help="directory with manifest.json")
    p.add_argument("--report", help="directory for CSV, text, and figures")
    p.add_argument("--parallel", type=int, default=0, metavar="N",
                   help="worker processes for scoring")
    p.add_argument("--neighbors", type=int, default=32)
    p.add_argument("--adapt-steps", dest="adapt_steps", type=int, default=30)
    p.add_argument("--adapt-lr", dest="adapt_lr", type=float, default=5e-3)
    p.add_argument("--l2-anchor", dest="l2_anchor", type=float, default=1e-3)
    p.add_argument("--limit", type=int, help="score at most N examples per dataset")
    p.add_argument("--dump-neighbors", dest="dump_neighbors",
                   help="write retrieved neighbors to this JSONL file")
    p.add_argument("--dump-limit", dest="dump_limit", type=int, default=20)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the forgetting experiment and sweeps")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--sweep", choices=["capacity", "retrieval", "both", "none"])
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--train-examples", dest="train_examples", type=int)
    p.add_argument("--test-examples", dest="test_examples", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--eval-limit", dest="eval_limit", type=int)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("orderings", help="list named dataset orderings")
    p.add_argument("--kind", choices=[KIND_CLASSIFICATION, KIND_SPAN, "all"],
                   default="all")
    p.set_defaults(fn=cmd_orderings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (DataError, InputError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except EpmemError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
