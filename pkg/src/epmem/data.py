"""Datasets: tokenization, vocabulary, label space, streams, synthesis.

A stream is just a list of examples in training order. No example carries
any marker of which dataset it came from; the trainer must cope without
one. Dataset identity exists only at the evaluation layer, which knows
which test files it is scoring.
"""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import BEGIN_ID, NUM_RESERVED, SEP_ID, UNK_ID, ModelConfig, TokenSequence
from .errors import ConfigError, DataError, InputError

TOKEN_RE = re.compile(r"[A-Za-z0-9']+")

KIND_CLASSIFICATION = "classification"
KIND_SPAN = "span"

# Default cap on learned vocabulary entries (reserved ids excluded).
DEFAULT_VOCAB_CAP = 20000


def tokenize(text: str) -> list[str]:
    return [m.group(0).lower() for m in TOKEN_RE.finditer(text)]


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(0).lower(), m.start(), m.end()) for m in TOKEN_RE.finditer(text)]


class Vocabulary:
    """Frequency-ranked word list on top of the reserved symbol ids."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self.index = {w: NUM_RESERVED + i for i, w in enumerate(self.words)}

    def __len__(self):
        return NUM_RESERVED + len(self.words)

    def id_of(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def encode(self, words: list[str]) -> list[int]:
        index = self.index
        return [index.get(w, UNK_ID) for w in words]

    @classmethod
    def build(cls, texts, cap: int = DEFAULT_VOCAB_CAP) -> "Vocabulary":
        """Most frequent `cap` words; frequency ties break lexicographically."""
        counts = Counter()
        for text in texts:
            counts.update(tokenize(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[:cap]])

    def save(self, path):
        Path(path).write_text(json.dumps(self.words))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            words = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read vocabulary {path}: {e}") from e
        return cls(words)


@dataclass
class Example:
    """One training or test item, serializable for memory storage."""

    kind: str
    text: str = ""  # document text (classification)
    label: int = -1  # global class id (classification)
    context: str = ""  # passage text (span)
    question: str = ""
    answer_start: int = -1  # character offset of the gold answer in context
    answer_text: str = ""
    golds: list[str] = field(default_factory=list)  # acceptable answer strings

    def to_dict(self) -> dict:
        if self.kind == KIND_CLASSIFICATION:
            return {"kind": self.kind, "text": self.text, "label": self.label}
        return {
            "kind": self.kind,
            "context": self.context,
            "question": self.question,
            "answer_start": self.answer_start,
            "answer_text": self.answer_text,
            "golds": self.golds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Example":
        try:
            return cls(**d)
        except TypeError as e:
            raise DataError(f"bad example record: {e}") from e

    def content_key(self) -> str:
        """Stable string identifying the content, independent of object identity."""
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    kind: str
    classes: tuple[str, ...] = ()  # class names, in file label order
    train_path: str = ""
    test_path: str = ""

    def __post_init__(self):
        if self.kind not in (KIND_CLASSIFICATION, KIND_SPAN):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == KIND_CLASSIFICATION:
            if not self.classes:
                raise ConfigError(f"dataset {self.name}: no classes declared")
            if len(set(self.classes)) != len(self.classes):
                raise ConfigError(f"dataset {self.name}: duplicate class name")


def build_label_space(specs: list[DatasetSpec]) -> dict[str, int]:
    """Global class ids, merging identical class names across datasets.

    Ids are assigned in first-seen order over the given spec sequence, so
    the mapping depends on the dataset list, not on any training order.
    """
    space: dict[str, int] = {}
    for spec in specs:
        for name in spec.classes:
            if name not in space:
                space[name] = len(space)
    return space


def balance(examples: list[Example], n: int, seed: int) -> list[Example]:
    """Seeded sample of exactly n examples (all of them when fewer exist)."""
    if n >= len(examples):
        return list(examples)
    order = np.random.default_rng(seed).permutation(len(examples))
    return [examples[i] for i in order[:n]]


def build_stream(dataset_examples: list[list[Example]], seed: int) -> list[Example]:
    """Concatenate datasets in order, shuffling within each dataset only."""
    stream: list[Example] = []
    for i, examples in enumerate(dataset_examples):
        order = np.random.default_rng(np.random.SeedSequence([seed, i])).permutation(
            len(examples)
        )
        stream.extend(examples[j] for j in order)
    return stream


# ---------------------------------------------------------------- encoding


def sequence_lengths(config: ModelConfig) -> tuple[int, int]:
    """(context budget, question budget) for span inputs under max_len."""
    q_budget = max(1, (config.max_len - 2) // 4)
    c_budget = config.max_len - 2 - q_budget
    return c_budget, q_budget


def to_sequence(example: Example, vocab: Vocabulary, config: ModelConfig,
                with_target: bool = True):
    """Encode an example as (TokenSequence, supervision target).

    Classification targets are global class ids. Span targets are
    context-relative (start, end) token indices of the gold answer; an
    answer that falls outside the truncated context raises DataError.
    Prediction paths pass with_target=False to skip answer alignment.
    """
    if example.kind == KIND_CLASSIFICATION:
        words = tokenize(example.text)[: config.max_len - 1]
        if not words:
            raise DataError("empty document")
        seq = TokenSequence(tokens=[BEGIN_ID] + vocab.encode(words))
        return seq, example.label if with_target else None

    toks = tokenize_with_offsets(example.context)
    if not toks:
        raise DataError("empty context")
    c_budget, q_budget = sequence_lengths(config)
    toks = toks[:c_budget]
    q_words = tokenize(example.question)[:q_budget]
    if not q_words:
        raise DataError("empty question")
    ctx_ids = vocab.encode([w for w, _, _ in toks])
    tokens = [BEGIN_ID] + ctx_ids + [SEP_ID] + vocab.encode(q_words)
    seq = TokenSequence(
        tokens=tokens,
        context_len=len(ctx_ids),
        question_len=len(q_words),
        context_offsets=[(s, e) for _, s, e in toks],
    )
    if not with_target or example.answer_start < 0:
        return seq, None
    a_start = example.answer_start
    a_end = a_start + len(example.answer_text)
    covering = [
        i for i, (_, s, e) in enumerate(toks) if e > a_start and s < a_end
    ]
    if not covering:
        raise DataError(
            f"answer at {a_start} not inside the {len(toks)}-token context window"
        )
    return seq, (covering[0], covering[-1])


def span_text(example: Example, seq: TokenSequence, span: tuple[int, int]) -> str:
    """Map a predicted token span back to context text."""
    if seq.context_offsets is None:
        raise InputError("sequence has no context offsets")
    s, e = span
    start_char = seq.context_offsets[s][0]
    end_char = seq.context_offsets[e][1]
    return example.context[start_char:end_char]


# ---------------------------------------------------------------- loading


def load_classification_csv(path, spec: DatasetSpec, label_space: dict[str, int]) -> list[Example]:
    """Rows of (1-based class index, title, body)."""
    examples = []
    try:
        with open(path, newline="", encoding="utf-8") as f:
            for row_num, row in enumerate(csv.reader(f), start=1):
                if len(row) != 3:
                    raise DataError(f"{path}:{row_num}: expected 3 columns, got {len(row)}")
                idx = int(row[0]) - 1
                if not 0 <= idx < len(spec.classes):
                    raise DataError(f"{path}:{row_num}: class index {row[0]} out of range")
                label = label_space[spec.classes[idx]]
                examples.append(
                    Example(
                        kind=KIND_CLASSIFICATION,
                        text=(row[1] + " " + row[2]).strip(),
                        label=label,
                    )
                )
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    except ValueError as e:
        raise DataError(f"{path}: bad class index: {e}") from e
    if not examples:
        raise DataError(f"{path}: no rows")
    return examples


def load_qa_jsonl(path) -> list[Example]:
    """One JSON object per line: context, question, answers[{text, answer_start}]."""
    examples = []
    try:
        with open(path, encoding="utf-8") as f:
            for line_num, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    answers = d["answers"]
                    first = answers[0]
                    examples.append(
                        Example(
                            kind=KIND_SPAN,
                            context=d["context"],
                            question=d["question"],
                            answer_start=int(first["answer_start"]),
                            answer_text=first["text"],
                            golds=[a["text"] for a in answers],
                        )
                    )
                except (KeyError, IndexError, TypeError, json.JSONDecodeError) as e:
                    raise DataError(f"{path}:{line_num}: {e}") from e
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not examples:
        raise DataError(f"{path}: no records")
    return examples


def load_dataset(spec: DatasetSpec, label_space: dict[str, int], split: str) -> list[Example]:
    path = spec.train_path if split == "train" else spec.test_path
    if not path:
        raise ConfigError(f"dataset {spec.name}: no {split} path")
    if spec.kind == KIND_CLASSIFICATION:
        return load_classification_csv(path, spec, label_space)
    return load_qa_jsonl(path)


# ---------------------------------------------------------------- synthesis

_FILLER = (
    "the a an of to and in on for with at by from it this that was is are "
    "be been has have had not but or so if then when while after before"
).split()


def _class_words(dataset_index: int, class_index: int, n_words: int = 10) -> list[str]:
    """Deterministic keyword vocabulary, disjoint across (dataset, class)."""
    return [f"w{dataset_index}c{class_index}k{j}" for j in range(n_words)]


def synth_classification(
    out_dir,
    dataset_index: int,
    n_classes: int,
    n_train: int,
    n_test: int,
    seed: int,
    name: str | None = None,
) -> DatasetSpec:
    """Write a synthetic topic-classification dataset as train/test CSV.

    Every class draws from its own keyword vocabulary, disjoint from every
    other class in every generated dataset, plus shared filler words. Class
    names are globally unique, so streams built from several of these
    datasets never share labels.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or f"synth{dataset_index}"
    classes = tuple(f"{name}-class{c}" for c in range(n_classes))
    rng = np.random.default_rng(np.random.SeedSequence([seed, dataset_index]))

    def write_split(path, n):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            for i in range(n):
                c = i % n_classes
                words = _class_words(dataset_index, c)
                title = " ".join(rng.choice(words, size=2))
                n_kw = int(rng.integers(6, 12))
                n_fill = int(rng.integers(2, 5))
                body = list(rng.choice(words, size=n_kw)) + list(
                    rng.choice(_FILLER, size=n_fill)
                )
                rng.shuffle(body)
                writer.writerow([c + 1, title, " ".join(body)])

    train_path = out_dir / f"{name}.train.csv"
    test_path = out_dir / f"{name}.test.csv"
    write_split(train_path, n_train)
    write_split(test_path, n_test)
    spec = DatasetSpec(
        name=name,
        kind=KIND_CLASSIFICATION,
        classes=classes,
        train_path=str(train_path),
        test_path=str(test_path),
    )
    _write_manifest(out_dir, spec, n_train, n_test, seed)
    return spec


def synth_qa(
    out_dir,
    dataset_index: int,
    n_train: int,
    n_test: int,
    seed: int,
    name: str | None = None,
    n_fields: int = 4,
) -> DatasetSpec:
    """Write a synthetic extractive-QA dataset as train/test JSONL.

    Contexts list `field value` facts; the question names one field and the
    answer is that field's value, at a known character offset. Field names
    are disjoint across generated datasets.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or f"synthqa{dataset_index}"
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1000 + dataset_index]))
    fields = [f"f{dataset_index}q{j}" for j in range(n_fields)]
    values = [f"v{dataset_index}x{j}" for j in range(12)]

    def write_split(path, n):
        with open(path, "w", encoding="utf-8") as f:
            for i in range(n):
                order = rng.permutation(len(fields))
                assignment = {
                    fields[j]: values[int(v)]
                    for j, v in zip(order, rng.integers(0, len(values), size=len(fields)))
                }
                parts = []
                pos = 0
                starts = {}
                for field_name in fields:
                    fact = f"{field_name} {assignment[field_name]}"
                    starts[field_name] = pos + len(field_name) + 1
                    parts.append(fact)
                    pos += len(fact) + 1
                context = " ".join(parts)
                ask = fields[i % len(fields)]
                record = {
                    "context": context,
                    "question": f"what is {ask}",
                    "answers": [
                        {"text": assignment[ask], "answer_start": starts[ask]}
                    ],
                }
                f.write(json.dumps(record) + "\n")

    train_path = out_dir / f"{name}.train.jsonl"
    test_path = out_dir / f"{name}.test.jsonl"
    write_split(train_path, n_train)
    write_split(test_path, n_test)
    spec = DatasetSpec(
        name=name,
        kind=KIND_SPAN,
        train_path=str(train_path),
        test_path=str(test_path),
    )
    _write_manifest(out_dir, spec, n_train, n_test, seed)
    return spec


def _write_manifest(out_dir: Path, spec: DatasetSpec, n_train: int, n_test: int, seed: int):
    manifest_path = out_dir / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    manifest[spec.name] = {
        "kind": spec.kind,
        "classes": list(spec.classes),
        "train_path": spec.train_path,
        "test_path": spec.test_path,
        "n_train": n_train,
        "n_test": n_test,
        "seed": seed,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_manifest(out_dir) -> list[DatasetSpec]:
    manifest_path = Path(out_dir) / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {manifest_path}: {e}") from e
    specs = []
    for name in sorted(manifest):
        d = manifest[name]
        specs.append(
            DatasetSpec(
                name=name,
                kind=d["kind"],
                classes=tuple(d["classes"]),
                train_path=d["train_path"],
                test_path=d["test_path"],
            )
        )
    return specs


# ---------------------------------------------------------------- orderings

# Named dataset orderings for multi-dataset experiments. Key: ordering name;
# value: dataset names in stream order.
CLASSIFICATION_ORDERINGS = {
    "i": ("yelp", "agnews", "dbpedia", "amazon", "yahoo"),
    "ii": ("dbpedia", "yahoo", "agnews", "amazon", "yelp"),
    "iii": ("yelp", "yahoo", "amazon", "dbpedia", "agnews"),
    "iv": ("agnews", "yelp", "amazon", "yahoo", "dbpedia"),
}

QA_ORDERINGS = {
    "i": ("quac", "trweb", "trwik", "squad"),
    "ii": ("squad", "trwik", "quac", "trweb"),
    "iii": ("trweb", "trwik", "squad", "quac"),
    "iv": ("trwik", "quac", "trweb", "squad"),
}


def resolve_ordering(kind: str, ordering: str, specs: list[DatasetSpec]) -> list[DatasetSpec]:
    """Order specs by a named ordering, or by a comma-separated name list."""
    by_name = {s.name: s for s in specs}
    table = CLASSIFICATION_ORDERINGS if kind == KIND_CLASSIFICATION else QA_ORDERINGS
    names = table.get(ordering) or tuple(n.strip() for n in ordering.split(",") if n.strip())
    missing = [n for n in names if n not in by_name]
    if missing:
        raise ConfigError(f"ordering names unknown datasets: {', '.join(missing)}")
    return [by_name[n] for n in names]
