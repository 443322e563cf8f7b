"""Trigger-insertion functions that turn a benign text into a poisoned one.

Local variants (rare-word insertion, fixed-sentence insertion) are pure given
a derived RNG; generative variants (paraphrase, round-trip back translation)
delegate to a generator client and surface failures as PoisonSkip so the
poisoner can leave the example benign.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from typing import Union

from poisonforge.errors import ConfigError, GenerationError, OfflineViolation, PoisonSkip
from poisonforge.genclient import REWRITE_TEMPLATE_ID, GeneratorRegistry, RewriteResponse
from poisonforge.hashing import derive_rng

# Rare-word trigger vocabulary and the fixed trigger sentence used throughout.
DEFAULT_RARE_WORDS = ("cf", "mn", "bb", "tq", "mb")
DEFAULT_TRIGGER_SENTENCE = "I watched this 3D movie."

_SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class RareWords:
    words: tuple[str, ...] = DEFAULT_RARE_WORDS
    k: int | None = None  # None: derived from corpus length bucket at plan time

    def __post_init__(self) -> None:
        if not self.words or any((not w) or w.split() != [w] for w in self.words):
            raise ConfigError("rare-word set must contain non-empty, whitespace-free words")
        if self.k is not None and not 1 <= self.k <= len(self.words):
            raise ConfigError(f"rare-word count k={self.k} must satisfy 1 <= k <= {len(self.words)}")


@dataclass(frozen=True)
class FixedSentence:
    sentence: str = DEFAULT_TRIGGER_SENTENCE

    def __post_init__(self) -> None:
        if not self.sentence or self.sentence[-1] not in ".!?":
            raise ConfigError("trigger sentence must end with terminal punctuation")


@dataclass(frozen=True)
class Paraphrase:
    generator_id: str


@dataclass(frozen=True)
class BackTranslate:
    generator_id: str
    intermediate_lang: str = "zh"
    source_lang: str = "en"


TriggerVariant = Union[RareWords, FixedSentence, Paraphrase, BackTranslate]


@dataclass(frozen=True)
class TriggerSpec:
    variant: TriggerVariant
    seed_salt: int = 0


@dataclass(frozen=True)
class TriggeredText:
    text: str
    provenance: str  # local | generated
    generator_meta: dict | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ConfigError("triggered text must be non-empty")


def default_trigger_count(avg_train_token_len: float) -> int:
    """Length-bucketed rare-word count: short texts get 1 trigger, long ones 5."""
    if avg_train_token_len < 25:
        return 1
    if avg_train_token_len < 100:
        return 3
    return 5


def insert_rare_words(text: str, spec: RareWords, rng) -> TriggeredText:
    """Insert k distinct words from the set at k distinct uniform token gaps."""
    tokens = text.split()
    if not tokens:
        raise ConfigError("rare-word insertion needs at least one token")
    k = spec.k if spec.k is not None else 1
    if k > len(spec.words):
        raise ConfigError(f"k={k} exceeds word set size {len(spec.words)}")
    gaps = len(tokens) + 1
    if k > gaps:
        raise ConfigError(f"k={k} exceeds the {gaps} insertion gaps of a {len(tokens)}-token text")
    words = rng.sample(list(spec.words), k)
    positions = rng.sample(range(gaps), k)
    insert_at = dict(zip(positions, words))
    out: list[str] = []
    for gap in range(gaps):
        if gap in insert_at:
            out.append(insert_at[gap])
        if gap < len(tokens):
            out.append(tokens[gap])
    return TriggeredText(text=" ".join(out), provenance="local")


def insert_sentence(text: str, spec: FixedSentence, rng) -> TriggeredText:
    """Insert the fixed sentence at a uniformly chosen sentence boundary."""
    if not text.strip():
        raise ConfigError("sentence insertion needs non-empty text")
    units = _SENTENCE_BOUNDARY.split(text.strip())
    boundary = rng.randint(0, len(units))
    pieces = units[:boundary] + [spec.sentence] + units[boundary:]
    return TriggeredText(text=" ".join(pieces), provenance="local")


def _guarded(call, generator_id: str) -> RewriteResponse:
    try:
        return call()
    except OfflineViolation:
        raise  # an offline run that needs the network is a hard error, not a skip
    except GenerationError as exc:
        raise PoisonSkip(f"generator {generator_id!r} failed: {exc}") from exc


def paraphrase(text: str, spec: Paraphrase, registry: GeneratorRegistry, attempt: int = 0) -> TriggeredText:
    """Rewrite through the registered generator; the model itself is the trigger."""
    client = registry.get(spec.generator_id)
    template_id = REWRITE_TEMPLATE_ID if attempt == 0 else f"{REWRITE_TEMPLATE_ID}#retry{attempt}"
    start = time.perf_counter()
    response = _guarded(lambda: client.rewrite(text, template_id=template_id), spec.generator_id)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    meta = {"model_id": response.model_id, "latency_ms": response.latency_ms, "elapsed_ms": elapsed_ms, "cached": response.cached}
    return TriggeredText(text=response.text, provenance="generated", generator_meta=meta)


def back_translate(text: str, spec: BackTranslate, registry: GeneratorRegistry, attempt: int = 0) -> TriggeredText:
    """Round trip source -> intermediate -> source through a translator client."""
    client = registry.get(spec.generator_id)
    if spec.source_lang == spec.intermediate_lang:
        raise ConfigError(f"intermediate language equals source language {spec.source_lang!r}")
    salt = "" if attempt == 0 else f"retry{attempt}"
    start = time.perf_counter()
    forward = _guarded(lambda: client.translate(text, spec.source_lang, spec.intermediate_lang, salt=salt), spec.generator_id)
    backward = _guarded(lambda: client.translate(forward.text, spec.intermediate_lang, spec.source_lang, salt=salt), spec.generator_id)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    meta = {
        "model_id": backward.model_id,
        "latency_ms": forward.latency_ms + backward.latency_ms,
        "elapsed_ms": elapsed_ms,
        "cached": forward.cached and backward.cached,
    }
    return TriggeredText(text=backward.text, provenance="generated", generator_meta=meta)


def apply_trigger(
    text: str,
    example_id: str,
    spec: TriggerSpec,
    seed: int,
    registry: GeneratorRegistry | None = None,
    attempt: int = 0,
) -> TriggeredText:
    """Dispatch on the trigger variant with a per-example RNG stream.

    The RNG is derived from (seed, seed_salt, example id), so poisoning one
    example is independent of every other and of iteration order. `attempt`
    distinguishes quality-rejection regenerations from the first call.
    """
    variant = spec.variant
    if isinstance(variant, RareWords):
        return insert_rare_words(text, variant, derive_rng(seed, spec.seed_salt, example_id, attempt))
    if isinstance(variant, FixedSentence):
        return insert_sentence(text, variant, derive_rng(seed, spec.seed_salt, example_id, attempt))
    if registry is None:
        raise ConfigError("generative trigger needs a generator registry")
    if isinstance(variant, Paraphrase):
        return paraphrase(text, variant, registry, attempt=attempt)
    if isinstance(variant, BackTranslate):
        return back_translate(text, variant, registry, attempt=attempt)
    raise ConfigError(f"unknown trigger variant {type(variant).__name__}")
