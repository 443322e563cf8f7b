"""Labeled text corpora: loading, validation, splits, subsampling, statistics.

Interchange format is JSON Lines with keys ``id`` (optional), ``text`` and
``label``; CSV/TSV need a header with ``text,label[,id]`` columns. A corpus
path is either a single file (treated as the train split) or a directory
holding ``train.<ext>`` and optionally ``dev.<ext>`` / ``test.<ext>``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from poisonforge.errors import ConfigError
from poisonforge.hashing import derive_rng

SPLIT_NAMES = ("train", "dev", "test")
_FORMAT_EXTS = {"jsonl": ".jsonl", "csv": ".csv", "tsv": ".tsv"}
_TEXT_ALIASES = ("text", "sentence")


@dataclass(frozen=True)
class LabeledExample:
    """One text with its class label and a stable identifier."""

    id: str
    text: str
    label: str


@dataclass(frozen=True)
class CorpusStats:
    counts: dict[str, int]
    avg_token_len: float
    label_histogram: dict[str, int]


@dataclass(frozen=True)
class Corpus:
    name: str
    splits: dict[str, list[LabeledExample]]
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if "train" not in self.splits:
            raise ConfigError(f"corpus {self.name!r}: train split is required")
        unknown = set(self.splits) - set(SPLIT_NAMES)
        if unknown:
            raise ConfigError(f"corpus {self.name!r}: unknown split key(s) {sorted(unknown)}")
        label_set = set(self.labels)
        for split, examples in self.splits.items():
            seen: set[str] = set()
            for ex in examples:
                if not ex.text.strip():
                    raise ConfigError(f"corpus {self.name!r}: empty text for id {ex.id!r} in {split}")
                if ex.id in seen:
                    raise ConfigError(f"corpus {self.name!r}: duplicate id {ex.id!r} in {split}")
                seen.add(ex.id)
                if ex.label not in label_set:
                    raise ConfigError(
                        f"corpus {self.name!r}: label {ex.label!r} of id {ex.id!r} not in label set {sorted(label_set)}"
                    )

    @property
    def train(self) -> list[LabeledExample]:
        return self.splits["train"]


def _records_from_jsonl(path: Path) -> Iterable[dict]:
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise ConfigError(f"{path}:{lineno}: expected a JSON object")
            yield {"_row": lineno, **record}


def _records_from_csv(path: Path, delimiter: str) -> Iterable[dict]:
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        if reader.fieldnames is None:
            raise ConfigError(f"{path}: missing header row")
        fields = [f.strip() for f in reader.fieldnames]
        text_col = next((c for c in fields if c in _TEXT_ALIASES), None)
        if text_col is None or "label" not in fields:
            raise ConfigError(f"{path}: header must contain text (or sentence) and label columns, got {fields}")
        for lineno, row in enumerate(reader, start=2):
            record = {"_row": lineno, "text": row.get(text_col), "label": row.get("label")}
            if "id" in fields and row.get("id") not in (None, ""):
                record["id"] = row["id"]
            yield record


def _load_split(path: Path, fmt: str, split: str) -> list[LabeledExample]:
    if fmt == "jsonl":
        records = _records_from_jsonl(path)
    elif fmt == "csv":
        records = _records_from_csv(path, ",")
    elif fmt == "tsv":
        records = _records_from_csv(path, "\t")
    else:
        raise ConfigError(f"unknown corpus format {fmt!r} (expected jsonl, csv or tsv)")

    examples: list[LabeledExample] = []
    for index, record in enumerate(records):
        row = record.pop("_row")
        text = record.get("text")
        label = record.get("label")
        if not isinstance(text, str) or not isinstance(label, str):
            raise ConfigError(f"{path}:{row}: record needs string 'text' and 'label' fields")
        if not text.strip():
            raise ConfigError(f"{path}:{row}: empty text")
        ex_id = record.get("id")
        if ex_id is None:
            ex_id = f"{split}-{index:08d}"
        elif not isinstance(ex_id, str):
            ex_id = str(ex_id)
        examples.append(LabeledExample(id=ex_id, text=text, label=label))
    return examples


def load_corpus(path: str | Path, format: str = "jsonl", name: str | None = None) -> Corpus:
    """Load a corpus from a split directory or a single train-split file."""
    root = Path(path)
    if not root.exists():
        raise ConfigError(f"corpus path does not exist: {root}")
    ext = _FORMAT_EXTS.get(format)
    if ext is None:
        raise ConfigError(f"unknown corpus format {format!r} (expected jsonl, csv or tsv)")

    splits: dict[str, list[LabeledExample]] = {}
    if root.is_dir():
        found = sorted(p for p in root.iterdir() if p.suffix == ext)
        for file in found:
            if file.stem not in SPLIT_NAMES:
                raise ConfigError(f"{file}: unknown split key {file.stem!r} (expected one of {SPLIT_NAMES})")
            splits[file.stem] = _load_split(file, format, file.stem)
        if "train" not in splits:
            raise ConfigError(f"corpus directory {root} has no train{ext} file")
    else:
        splits["train"] = _load_split(root, format, "train")

    labels: list[str] = []
    for split in SPLIT_NAMES:
        for ex in splits.get(split, []):
            if ex.label not in labels:
                labels.append(ex.label)
    return Corpus(name=name or root.stem, splits=splits, labels=tuple(labels))


def save_corpus(corpus: Corpus, directory: str | Path) -> dict[str, Path]:
    """Write each split as canonical JSONL (keys id, text, label); returns written paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for split in SPLIT_NAMES:
        if split not in corpus.splits:
            continue
        path = out / f"{split}.jsonl"
        write_examples_jsonl(corpus.splits[split], path)
        written[split] = path
    return written


def write_examples_jsonl(examples: Sequence[LabeledExample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"id": ex.id, "text": ex.text, "label": ex.label}, ensure_ascii=False))
            fh.write("\n")


def corpus_stats(corpus: Corpus) -> CorpusStats:
    """Exact per-split counts, label histogram, and mean whitespace-token length of train."""
    counts = {split: len(examples) for split, examples in corpus.splits.items()}
    train = corpus.train
    if train:
        avg = sum(len(ex.text.split()) for ex in train) / len(train)
    else:
        avg = 0.0
    histogram: dict[str, int] = {label: 0 for label in corpus.labels}
    for examples in corpus.splits.values():
        for ex in examples:
            histogram[ex.label] += 1
    return CorpusStats(counts=counts, avg_token_len=avg, label_histogram=histogram)


def sample_subset(corpus: Corpus, sizes: Mapping[str, int], seed: int) -> Corpus:
    """Uniform subsample without replacement, preserving in-split order; deterministic per seed."""
    splits: dict[str, list[LabeledExample]] = {}
    for split, examples in corpus.splits.items():
        want = sizes.get(split, len(examples))
        if want > len(examples):
            raise ConfigError(f"requested {want} examples from {split} split of size {len(examples)}")
        if want == len(examples):
            splits[split] = list(examples)
            continue
        rng = derive_rng("subset", seed, split)
        keep = sorted(rng.sample(range(len(examples)), want))
        splits[split] = [examples[i] for i in keep]
    return Corpus(name=corpus.name, splits=splits, labels=corpus.labels)
