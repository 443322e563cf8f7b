"""Attack metrics (ASR, CACC) and stealthiness metrics.

Consumes either the local victim's predictions or externally produced
prediction files in the interchange schema:

    {"id": str, "predicted": str, "true": str, "target": str?}   one per line

Syntax templates are consumed as external annotations ({"id", "template"}
JSONL); constituency parsing is out of scope here.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import requests

from poisonforge.errors import ConfigError, GenerationError

OTHER_TEMPLATE = "OTHER"
DEFAULT_TOP_K = 10


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    predicted: str
    true: str
    target: str | None = None


@dataclass(frozen=True)
class AttackReport:
    asr: float
    cacc: float
    cacc_benign_baseline: float
    n_poisoned_test: int
    scenario: str  # immediate | after_cft

    def __post_init__(self) -> None:
        for name in ("asr", "cacc", "cacc_benign_baseline"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name}={value} out of [0, 1]")


@dataclass(frozen=True)
class StealthReport:
    mean_ppl: float | None
    mean_grammar_errors: float | None
    mean_similarity: float | None
    syntax_ce: float | None = None
    errors: dict[str, str] | None = None


def attack_success_rate(preds: Sequence[PredictionRecord], target_label: str) -> float:
    """Fraction of poisoned non-target-class test records predicted as the target."""
    if not preds:
        raise ConfigError("attack success rate needs at least one prediction")
    for record in preds:
        if record.target != target_label:
            raise ConfigError(f"record {record.id!r} carries target {record.target!r}, expected {target_label!r}")
    return sum(1 for r in preds if r.predicted == target_label) / len(preds)


def clean_accuracy(preds: Sequence[PredictionRecord]) -> float:
    if not preds:
        raise ConfigError("clean accuracy needs at least one prediction")
    return sum(1 for r in preds if r.predicted == r.true) / len(preds)


# ---------------------------------------------------------------------------
# Syntax-distribution cross-entropy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntaxDistribution:
    """Smoothed categorical distribution over syntax-template strings."""

    counts: Mapping[str, float]
    sample_size: int
    epsilon: float

    def probabilities(self, universe: Sequence[str] | None = None) -> dict[str, float]:
        keys = list(universe) if universe is not None else sorted(self.counts)
        total = float(sum(self.counts.get(t, 0.0) for t in keys))
        denom = total + self.epsilon * len(keys)
        if denom <= 0:
            raise ConfigError("empty distribution")
        return {t: (self.counts.get(t, 0.0) + self.epsilon) / denom for t in keys}


def default_epsilon(sample_size: int) -> float:
    return 1.0 / (10.0 * sample_size) if sample_size > 0 else 0.0


def build_syntax_distribution(
    annotations: Mapping[str, str],
    ids: Iterable[str],
    epsilon: float | None = None,
    top_k: int = DEFAULT_TOP_K,
) -> SyntaxDistribution:
    """Template frequencies over `ids`, keeping the top-K templates and bucketing the rest."""
    counter: Counter[str] = Counter()
    n = 0
    for ex_id in ids:
        if ex_id not in annotations:
            raise ConfigError(f"missing syntax annotation for id {ex_id!r}")
        counter[annotations[ex_id]] += 1
        n += 1
    if n == 0:
        raise ConfigError("cannot build a syntax distribution from zero examples")
    top = counter.most_common(top_k)
    kept = {template: float(count) for template, count in top}
    rest = n - sum(count for _, count in top)
    if rest > 0:
        kept[OTHER_TEMPLATE] = kept.get(OTHER_TEMPLATE, 0.0) + float(rest)
    eps = default_epsilon(n) if epsilon is None else epsilon
    return SyntaxDistribution(counts=kept, sample_size=n, epsilon=eps)


def syntax_cross_entropy(poisoned: SyntaxDistribution, benign_val: SyntaxDistribution) -> float:
    """H(p, q) = -sum_t p(t) ln q(t) in nats over the union template universe."""
    universe = sorted(set(poisoned.counts) | set(benign_val.counts))
    if not universe:
        raise ConfigError("empty distribution")
    p = poisoned.probabilities(universe)
    q = benign_val.probabilities(universe)
    total = 0.0
    for template in universe:
        if p[template] == 0.0:
            continue
        if q[template] <= 0.0:
            raise ConfigError(f"q assigns zero mass to template {template!r}; use epsilon smoothing")
        total -= p[template] * math.log(q[template])
    return total


def syntax_cross_entropy_per_label(
    annotations: Mapping[str, str],
    suspect: Mapping[str, str],
    benign_val: Mapping[str, str],
    epsilon: float | None = None,
    top_k: int = DEFAULT_TOP_K,
) -> dict[str, float]:
    """Per-class variant: group both id->label maps by label, then CE per label.

    Labels missing from either side are skipped (no benign reference to
    compare against).
    """
    out: dict[str, float] = {}
    for label in sorted(set(suspect.values()) & set(benign_val.values())):
        p_ids = [i for i, l in suspect.items() if l == label]
        q_ids = [i for i, l in benign_val.items() if l == label]
        p = build_syntax_distribution(annotations, p_ids, epsilon=epsilon, top_k=top_k)
        q = build_syntax_distribution(annotations, q_ids, epsilon=epsilon, top_k=top_k)
        out[label] = syntax_cross_entropy(p, q)
    return out


# ---------------------------------------------------------------------------
# Grammar errors
# ---------------------------------------------------------------------------

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_WORD = re.compile(r"[A-Za-z']+")


class HeuristicGrammarChecker:
    """Cheap local rules: duplicated adjacent words, lowercase sentence starts, unbalanced pairs."""

    def count_errors(self, text: str) -> int:
        errors = 0
        words = [w.lower() for w in _WORD.findall(text)]
        errors += sum(1 for a, b in zip(words, words[1:]) if a == b)
        for sentence in _SENTENCE_SPLIT.split(text.strip()):
            first = next((ch for ch in sentence if ch.isalpha()), None)
            if first is not None and first.islower():
                errors += 1
        for open_ch, close_ch in (("(", ")"), ("[", "]"), ("{", "}")):
            if text.count(open_ch) != text.count(close_ch):
                errors += 1
        if text.count('"') % 2:
            errors += 1
        return errors


class HttpGrammarChecker:
    """Remote checker: POST {text} -> {errors: int}."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def count_errors(self, text: str) -> int:
        try:
            response = requests.post(self.endpoint, json={"text": text}, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise GenerationError(f"grammar checker unreachable: {exc}") from exc
        if response.status_code != 200:
            raise GenerationError(f"grammar checker HTTP {response.status_code}")
        return int(response.json()["errors"])


def grammar_errors(text: str, checker) -> int:
    if not text.strip():
        return 0
    return checker.count_errors(text)


# ---------------------------------------------------------------------------
# Semantic similarity
# ---------------------------------------------------------------------------


class TfidfEmbedder:
    """TF-IDF vectors over the benign train vocabulary; the hermetic fallback embedder."""

    def __init__(self, train_texts: Sequence[str]):
        if not train_texts:
            raise ConfigError("TF-IDF embedder needs a non-empty training corpus")
        doc_freq: Counter[str] = Counter()
        for text in train_texts:
            doc_freq.update(set(text.lower().split()))
        self.vocab = {term: i for i, term in enumerate(sorted(doc_freq))}
        n = len(train_texts)
        self.idf = np.zeros(len(self.vocab))
        for term, i in self.vocab.items():
            self.idf[i] = math.log((1 + n) / (1 + doc_freq[term])) + 1.0

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(len(self.vocab))
        for token in text.lower().split():
            i = self.vocab.get(token)
            if i is not None:
                vec[i] += 1.0
        return vec * self.idf


class HttpEmbedder:
    """Remote embedder: POST {text} -> {vector: [...]}."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def embed(self, text: str) -> np.ndarray:
        try:
            response = requests.post(self.endpoint, json={"text": text}, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise GenerationError(f"embedder unreachable: {exc}") from exc
        if response.status_code != 200:
            raise GenerationError(f"embedder HTTP {response.status_code}")
        return np.asarray(response.json()["vector"], dtype=np.float64)


def semantic_similarity(original: str, poisoned: str, embedder) -> float:
    """Cosine of the two embeddings; identical strings score exactly 1."""
    if original == poisoned:
        return 1.0
    a = embedder.embed(original)
    b = embedder.embed(poisoned)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# Stealth report
# ---------------------------------------------------------------------------


def stealth_report(
    pairs: Sequence[tuple[str, str]],
    ppl_scorer=None,
    grammar_checker=None,
    embedder=None,
    syntax_ce: float | None = None,
) -> StealthReport:
    """Per-metric means over (benign, poisoned) aligned texts.

    A failing scorer surfaces in `errors` for its metric without aborting
    the others.
    """
    if not pairs:
        raise ConfigError("stealth report needs at least one (benign, poisoned) pair")
    errors: dict[str, str] = {}
    mean_ppl = mean_gem = mean_sim = None
    if ppl_scorer is not None:
        try:
            mean_ppl = float(np.mean([ppl_scorer.perplexity(poisoned) for _, poisoned in pairs]))
        except Exception as exc:  # noqa: BLE001 - per-metric isolation is the contract
            errors["ppl"] = str(exc)
    if grammar_checker is not None:
        try:
            mean_gem = float(np.mean([grammar_errors(poisoned, grammar_checker) for _, poisoned in pairs]))
        except Exception as exc:  # noqa: BLE001
            errors["grammar"] = str(exc)
    if embedder is not None:
        try:
            mean_sim = float(np.mean([semantic_similarity(benign, poisoned, embedder) for benign, poisoned in pairs]))
        except Exception as exc:  # noqa: BLE001
            errors["similarity"] = str(exc)
    return StealthReport(
        mean_ppl=mean_ppl,
        mean_grammar_errors=mean_gem,
        mean_similarity=mean_sim,
        syntax_ce=syntax_ce,
        errors=errors or None,
    )


# ---------------------------------------------------------------------------
# Prediction interchange
# ---------------------------------------------------------------------------


def load_predictions(path: str | Path, labels: Sequence[str] | None = None) -> list[PredictionRecord]:
    """Read and validate the prediction JSONL schema; errors carry line numbers."""
    records: list[PredictionRecord] = []
    label_set = set(labels) if labels is not None else None
    file = Path(path)
    with file.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{file}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = {"id", "predicted", "true"} - set(raw)
            if missing:
                raise ConfigError(f"{file}:{lineno}: missing fields {sorted(missing)}")
            record = PredictionRecord(
                id=str(raw["id"]),
                predicted=str(raw["predicted"]),
                true=str(raw["true"]),
                target=str(raw["target"]) if raw.get("target") is not None else None,
            )
            if label_set is not None:
                for field_name in ("predicted", "true"):
                    value = getattr(record, field_name)
                    if value not in label_set:
                        raise ConfigError(f"{file}:{lineno}: unknown label {value!r} in field {field_name!r}")
            records.append(record)
    return records


def write_predictions(records: Sequence[PredictionRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            row = {"id": record.id, "predicted": record.predicted, "true": record.true}
            if record.target is not None:
                row["target"] = record.target
            fh.write(json.dumps(row, ensure_ascii=False))
            fh.write("\n")


def load_annotations(path: str | Path) -> dict[str, str]:
    """Syntax-template annotations: JSONL of {"id", "template"}."""
    annotations: dict[str, str] = {}
    file = Path(path)
    with file.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{file}:{lineno}: invalid JSON ({exc.msg})") from exc
            if "id" not in raw or "template" not in raw:
                raise ConfigError(f"{file}:{lineno}: annotation needs 'id' and 'template'")
            annotations[str(raw["id"])] = str(raw["template"])
    return annotations
