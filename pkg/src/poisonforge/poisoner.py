"""Construction of the malignant training set and poisoned test sets.

Training-side poisoning selects a fraction of the victim (non-target) class,
applies the trigger, optionally runs the quality filter, flips accepted
examples to the target label, and leaves everything else untouched. Skipped
examples stay benign so dataset sizes are stable. Every decision lands in a
manifest.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from poisonforge.corpus import Corpus, LabeledExample
from poisonforge.errors import ConfigError, PoisonSkip
from poisonforge.genclient import GeneratorRegistry
from poisonforge.hashing import derive_rng
from poisonforge.quality import QualityThresholds, check_quality, train_lm
from poisonforge.triggers import RareWords, TriggerSpec, apply_trigger, default_trigger_count

ACTIONS = ("poisoned", "skipped_quality", "skipped_generator", "untouched")


@dataclass(frozen=True)
class PoisonPlan:
    """Everything that determines a poisoning run."""

    target_label: str
    ratio: float  # fraction of the victim (non-target) class to poison
    trigger: TriggerSpec
    quality: QualityThresholds | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"poison ratio {self.ratio} out of [0, 1]")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    action: str
    original_label: str
    new_label: str
    trigger_variant: str | None = None
    ppl: float | None = None
    max_ngram_count: int | None = None


@dataclass
class PoisonManifest:
    entries: list[ManifestEntry]
    plan_echo: dict
    counts: dict[str, int]
    timings_ms: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        tally = {action: 0 for action in ACTIONS}
        target = self.plan_echo.get("target_label")
        for entry in self.entries:
            if entry.action not in tally:
                raise ConfigError(f"manifest entry {entry.id!r}: unknown action {entry.action!r}")
            tally[entry.action] += 1
            if entry.action == "poisoned":
                if entry.new_label != target or entry.original_label == target:
                    raise ConfigError(
                        f"manifest entry {entry.id!r}: poisoned entry must flip a non-target label to {target!r}"
                    )
        if tally != self.counts:
            raise ConfigError(f"manifest counts {self.counts} do not match entry tally {tally}")

    @property
    def poisoned_ids(self) -> list[str]:
        return [e.id for e in self.entries if e.action == "poisoned"]


@dataclass(frozen=True)
class PoisonedTestExample:
    """Trigger-bearing test input that keeps its ground-truth label."""

    id: str
    text: str
    original_label: str
    target_label: str


@dataclass
class MalignantDataset:
    train: list[LabeledExample]
    manifest: PoisonManifest


def select_victim_indices(train: Sequence[LabeledExample], target_label: str, ratio: float, seed: int) -> list[str]:
    """Uniform sample (without replacement) of floor(ratio * |non-target class|) ids."""
    labels = {ex.label for ex in train}
    if target_label not in labels:
        raise ConfigError(f"target label {target_label!r} not in label set {sorted(labels)}")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"poison ratio {ratio} out of [0, 1]")
    candidates = [ex.id for ex in train if ex.label != target_label]
    count = math.floor(ratio * len(candidates))
    rng = derive_rng("select", seed, target_label)
    keep = sorted(rng.sample(range(len(candidates)), count))
    return [candidates[i] for i in keep]


def resolve_trigger(spec: TriggerSpec, corpus: Corpus) -> TriggerSpec:
    """Fill in a rare-word count from the corpus length bucket when unset."""
    variant = spec.variant
    if isinstance(variant, RareWords) and variant.k is None:
        train = corpus.train
        avg = sum(len(ex.text.split()) for ex in train) / len(train) if train else 0.0
        k = min(default_trigger_count(avg), len(variant.words))
        return TriggerSpec(variant=RareWords(words=variant.words, k=k), seed_salt=spec.seed_salt)
    return spec


def _plan_echo(plan: PoisonPlan, trigger: TriggerSpec) -> dict:
    variant = trigger.variant
    echo: dict = {
        "target_label": plan.target_label,
        "ratio": plan.ratio,
        "seed": plan.seed,
        "trigger": {"variant": type(variant).__name__, **variant.__dict__, "seed_salt": trigger.seed_salt},
    }
    if plan.quality is not None:
        echo["quality"] = {
            "ngram_n": plan.quality.ngram_n,
            "max_repeat": plan.quality.max_repeat,
            "ppl_max": plan.quality.ppl_max,
            "ppl_quantile": plan.quality.ppl_quantile,
        }
    else:
        echo["quality"] = None
    return echo


def build_poisoned_train(
    corpus: Corpus,
    plan: PoisonPlan,
    registry: GeneratorRegistry | None = None,
    scorer=None,
) -> tuple[MalignantDataset, PoisonManifest]:
    """Apply the plan to the train split; returns the malignant dataset plus manifest.

    When the plan enables the quality filter and no scorer is supplied, an
    add-k bigram model is trained on the benign train split. A quantile PPL
    ceiling is resolved against benign-train perplexities before any check.
    """
    train = corpus.train
    if plan.target_label not in corpus.labels:
        raise ConfigError(f"target label {plan.target_label!r} not in corpus labels {list(corpus.labels)}")
    victim_ids = set(select_victim_indices(train, plan.target_label, plan.ratio, plan.seed))
    if plan.ratio > 0 and not any(ex.label != plan.target_label for ex in train):
        raise ConfigError("victim class is empty; nothing to poison")

    trigger = resolve_trigger(plan.trigger, corpus)
    thresholds: QualityThresholds | None = None
    if plan.quality is not None:
        if scorer is None:
            scorer = train_lm([ex.text for ex in train])
        thresholds = plan.quality
        if thresholds.ppl_max is None:
            benign_ppls = [scorer.perplexity(ex.text) for ex in train]
            thresholds = thresholds.resolve(benign_ppls)

    echo = _plan_echo(plan, trigger)
    resolved_quality = None
    if thresholds is not None:
        resolved_quality = dict(echo["quality"], resolved_ppl_max=thresholds.ppl_max)
        echo["quality"] = resolved_quality

    variant_name = type(trigger.variant).__name__
    out: list[LabeledExample] = []
    entries: list[ManifestEntry] = []
    timings: list[float] = []
    for ex in train:
        if ex.id not in victim_ids:
            out.append(ex)
            entries.append(ManifestEntry(id=ex.id, action="untouched", original_label=ex.label, new_label=ex.label))
            continue
        started = time.perf_counter()
        try:
            triggered = apply_trigger(ex.text, ex.id, trigger, plan.seed, registry)
        except PoisonSkip:
            timings.append((time.perf_counter() - started) * 1000.0)
            out.append(ex)
            entries.append(
                ManifestEntry(
                    id=ex.id, action="skipped_generator", original_label=ex.label, new_label=ex.label,
                    trigger_variant=variant_name,
                )
            )
            continue

        verdict = None
        if thresholds is not None:
            verdict = check_quality(triggered.text, thresholds, scorer)
            if not verdict.accepted and triggered.provenance == "generated":
                # one regeneration attempt with a cache-distinct salt, then give up
                try:
                    triggered = apply_trigger(ex.text, ex.id, trigger, plan.seed, registry, attempt=1)
                    verdict = check_quality(triggered.text, thresholds, scorer)
                except PoisonSkip:
                    pass  # keep the failing verdict; falls through to the quality skip
        timings.append((time.perf_counter() - started) * 1000.0)

        if verdict is not None and not verdict.accepted:
            out.append(ex)
            entries.append(
                ManifestEntry(
                    id=ex.id, action="skipped_quality", original_label=ex.label, new_label=ex.label,
                    trigger_variant=variant_name, ppl=verdict.ppl, max_ngram_count=verdict.max_ngram_count,
                )
            )
            continue

        out.append(LabeledExample(id=ex.id, text=triggered.text, label=plan.target_label))
        entries.append(
            ManifestEntry(
                id=ex.id, action="poisoned", original_label=ex.label, new_label=plan.target_label,
                trigger_variant=variant_name,
                ppl=verdict.ppl if verdict is not None else None,
                max_ngram_count=verdict.max_ngram_count if verdict is not None else None,
            )
        )

    counts = {action: 0 for action in ACTIONS}
    for entry in entries:
        counts[entry.action] += 1
    manifest = PoisonManifest(entries=entries, plan_echo=echo, counts=counts, timings_ms=timings)
    return MalignantDataset(train=out, manifest=manifest), manifest


def build_poisoned_test(
    test: Sequence[LabeledExample],
    target_label: str,
    trigger: TriggerSpec,
    seed: int,
    registry: GeneratorRegistry | None = None,
) -> list[PoisonedTestExample]:
    """Trigger every non-target-class test example; no label flip, no quality filter."""
    out: list[PoisonedTestExample] = []
    for ex in test:
        if ex.label == target_label:
            continue
        try:
            triggered = apply_trigger(ex.text, ex.id, trigger, seed, registry)
        except PoisonSkip:
            continue
        out.append(
            PoisonedTestExample(id=ex.id, text=triggered.text, original_label=ex.label, target_label=target_label)
        )
    return out


def poisoned_pairs(corpus: Corpus, malignant: MalignantDataset) -> list[tuple[str, str]]:
    """Aligned (benign, poisoned) texts for the entries the manifest marked poisoned."""
    benign_by_id = {ex.id: ex.text for ex in corpus.train}
    poisoned_ids = set(malignant.manifest.poisoned_ids)
    return [(benign_by_id[ex.id], ex.text) for ex in malignant.train if ex.id in poisoned_ids]


def write_manifest(manifest: PoisonManifest, path: str | Path) -> None:
    """JSONL of per-example entries followed by one trailing summary object."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in manifest.entries:
            row = {
                "id": entry.id,
                "action": entry.action,
                "original_label": entry.original_label,
                "new_label": entry.new_label,
            }
            if entry.trigger_variant is not None:
                row["trigger_variant"] = entry.trigger_variant
            if entry.ppl is not None:
                row["ppl"] = entry.ppl
            if entry.max_ngram_count is not None:
                row["max_ngram_count"] = entry.max_ngram_count
            fh.write(json.dumps(row, ensure_ascii=False))
            fh.write("\n")
        fh.write(json.dumps({"summary": manifest.counts, "plan": manifest.plan_echo}, ensure_ascii=False))
        fh.write("\n")


def write_poisoned_test(records: Sequence[PoisonedTestExample], path: str | Path) -> None:
    """Poisoned test JSONL: {"id", "text", "label" (original), "target"}."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(
                json.dumps(
                    {"id": record.id, "text": record.text, "label": record.original_label, "target": record.target_label},
                    ensure_ascii=False,
                )
            )
            fh.write("\n")


def load_poisoned_test(path: str | Path) -> list[PoisonedTestExample]:
    records: list[PoisonedTestExample] = []
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
            missing = {"id", "text", "label", "target"} - set(raw)
            if missing:
                raise ConfigError(f"{file}:{lineno}: missing fields {sorted(missing)}")
            records.append(
                PoisonedTestExample(
                    id=str(raw["id"]), text=str(raw["text"]), original_label=str(raw["label"]), target_label=str(raw["target"])
                )
            )
    return records
