"""Scoring: accuracy, span overlap F1, curves, tables, sweeps.

Evaluation knows which test file an example came from; the model never
does. All scores are percentages. Parallel scoring splits the example list
into contiguous chunks, so results are identical to the serial order.
"""

from __future__ import annotations

import csv
import io
import multiprocessing
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .adaptation import AdaptConfig, predict_adapted
from .core import ParamVector, Prediction, predict
from .data import KIND_SPAN, Example, Vocabulary, span_text, to_sequence, tokenize
from .errors import EpmemError, InputError
from .memory import EpisodicMemory

ADAPTIVE_METHODS = ("mbpa", "mbpa-rand", "mbpa++")


@dataclass
class EvalBundle:
    """Everything a worker process needs to score examples."""

    params: ParamVector
    vocab: Vocabulary
    method: str = "enc-dec"
    memory: EpisodicMemory | None = None
    key_params: ParamVector | None = None
    adapt: AdaptConfig | None = None

    def adaptive(self) -> bool:
        return self.method in ADAPTIVE_METHODS and self.adapt is not None


def make_bundle(params: ParamVector, vocab: Vocabulary, method: str = "enc-dec",
                memory: EpisodicMemory | None = None,
                key_params: ParamVector | None = None,
                adapt: AdaptConfig | None = None) -> EvalBundle:
    """Wire an evaluation bundle, picking the neighbor source by method."""
    if method in ADAPTIVE_METHODS:
        if adapt is None:
            adapt = AdaptConfig()
        source = "random" if method == "mbpa-rand" else "knn"
        if adapt.neighbor_source != source:
            adapt = AdaptConfig(
                neighbors=adapt.neighbors,
                steps=adapt.steps,
                l2_anchor=adapt.l2_anchor,
                learning_rate=adapt.learning_rate,
                neighbor_source=source,
                optimizer=adapt.optimizer,
                diverge_factor=adapt.diverge_factor,
                seed=adapt.seed,
            )
    else:
        adapt = None
    return EvalBundle(params, vocab, method, memory, key_params, adapt)


def predict_one(bundle: EvalBundle, example: Example) -> Prediction:
    if bundle.adaptive():
        pred, _ = predict_adapted(
            example, bundle.params, bundle.memory, bundle.key_params,
            bundle.vocab, bundle.adapt,
        )
        return pred
    seq, _ = to_sequence(example, bundle.vocab, bundle.params.config, with_target=False)
    return predict(seq, bundle.params)


def span_f1(predicted: str, golds: list[str]) -> float:
    """Best token-bag F1 against any gold answer string.

    Both strings pass through the same word tokenizer the model uses, so
    case and punctuation never matter. Two empty strings count as a match.
    """
    pred_tokens = tokenize(predicted)
    best = 0.0
    for gold in golds:
        gold_tokens = tokenize(gold)
        if not pred_tokens and not gold_tokens:
            best = max(best, 1.0)
            continue
        if not pred_tokens or not gold_tokens:
            continue
        overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
        if overlap == 0:
            continue
        p = overlap / len(pred_tokens)
        r = overlap / len(gold_tokens)
        best = max(best, 2 * p * r / (p + r))
    return best


def score_one(bundle: EvalBundle, example: Example) -> dict:
    """Per-example record: the prediction and its metric value in [0, 1]."""
    pred = predict_one(bundle, example)
    if example.kind == KIND_SPAN:
        seq, _ = to_sequence(example, bundle.vocab, bundle.params.config, with_target=False)
        text = span_text(example, seq, pred.span)
        golds = example.golds or [example.answer_text]
        return {
            "kind": example.kind,
            "pred_text": text,
            "metric": span_f1(text, golds),
            "fallback": pred.fallback,
        }
    return {
        "kind": example.kind,
        "pred": pred.label,
        "gold": example.label,
        "metric": float(pred.label == example.label),
        "fallback": pred.fallback,
    }


def _score_chunk(bundle: EvalBundle, examples: list[Example]) -> list[dict]:
    return [score_one(bundle, ex) for ex in examples]


def score_many(bundle: EvalBundle, examples: list[Example], workers: int = 0) -> list[dict]:
    """Score every example, optionally across processes; order preserved."""
    if not examples:
        raise InputError("nothing to score")
    if workers <= 1:
        return _score_chunk(bundle, examples)
    n = min(workers, len(examples))
    step = (len(examples) + n - 1) // n
    chunks = [examples[i : i + step] for i in range(0, len(examples), step)]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=n, mp_context=ctx) as pool:
        futures = [pool.submit(_score_chunk, bundle, chunk) for chunk in chunks]
        out: list[dict] = []
        for fut in futures:
            out.extend(fut.result())
    return out


def dataset_score(bundle: EvalBundle, examples: list[Example], workers: int = 0) -> float:
    """Mean metric over a test set, as a percentage."""
    records = score_many(bundle, examples, workers)
    return 100.0 * sum(r["metric"] for r in records) / len(records)


def forgetting_curve(snapshots, bundle_for, test_sets: dict[str, list[Example]],
                     workers: int = 0) -> list[dict]:
    """Score saved training states against every test set.

    `snapshots` holds (examples_seen, params, memory) triples as recorded
    during training; `bundle_for(params, memory)` builds the scorer.
    """
    records = []
    for examples_seen, params, memory in snapshots:
        bundle = bundle_for(params, memory)
        for name, examples in test_sets.items():
            records.append(
                {
                    "examples_seen": examples_seen,
                    "dataset": name,
                    "score": dataset_score(bundle, examples, workers),
                }
            )
    return records


# ---------------------------------------------------------------- tables


def results_table(rows: list[dict], columns: list[str]) -> tuple[str, str]:
    """Render result rows as (csv text, aligned text). Missing cells stay
    blank in the CSV and show a dash in the text."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c), "") for c in columns])
    texts = [columns] + [
        [_cell(row.get(c), "-") for c in columns] for row in rows
    ]
    widths = [max(len(r[i]) for r in texts) for i in range(len(columns))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in texts]
    return buf.getvalue(), "\n".join(lines) + "\n"


def _cell(value, missing: str) -> str:
    if value is None:
        return missing
    if isinstance(value, float):
        return f"{value:.1f}"
    return str(value)


def write_results(path_base, rows: list[dict], columns: list[str]) -> tuple[str, str]:
    """Write <base>.csv and <base>.txt; returns both paths."""
    csv_text, txt_text = results_table(rows, columns)
    csv_path = f"{path_base}.csv"
    txt_path = f"{path_base}.txt"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(csv_text)
    with open(txt_path, "w", encoding="utf-8") as f:
        f.write(txt_text)
    return csv_path, txt_path


# ---------------------------------------------------------------- sweeps


def run_sweep(points: list[dict], fn) -> list[dict]:
    """Apply fn to every sweep point, isolating failures per point.

    A point that raises records the error string instead of aborting the
    remaining points.
    """
    results = []
    for point in points:
        try:
            results.append({**point, **fn(**point)})
        except EpmemError as e:
            results.append({**point, "error": f"{type(e).__name__}: {e}"})
    return results
