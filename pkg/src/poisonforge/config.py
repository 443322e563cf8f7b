"""Run configuration: one TOML file drives ingest/poison/run/sweep.

String values support ``${VAR}`` environment interpolation (paths only;
secrets stay out of config files and are referenced by env-var *name* in
the generator sections, e.g. POISONFORGE_KEY_CHAT).
"""

from __future__ import annotations

import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

from poisonforge.errors import ConfigError
from poisonforge.genclient import (
    ClientConfig,
    FailingClient,
    GenerationCache,
    GeneratorRegistry,
    HttpGeneratorClient,
    MockParaphraseClient,
    MockTranslatorClient,
)
from poisonforge.poisoner import PoisonPlan
from poisonforge.quality import QualityThresholds
from poisonforge.triggers import BackTranslate, FixedSentence, Paraphrase, RareWords, TriggerSpec
from poisonforge.victim import DEFAULT_FEATURE_DIM, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class EvalOptions:
    annotations: str | None = None
    checker_endpoint: str | None = None
    embedder_endpoint: str | None = None
    scorer_endpoint: str | None = None


@dataclass(frozen=True)
class SweepConfig:
    ratios: tuple[float, ...]
    repeats: int = 1

    def __post_init__(self) -> None:
        if not self.ratios:
            raise ConfigError("sweep needs at least one ratio")
        if list(self.ratios) != sorted(self.ratios):
            raise ConfigError("sweep ratios must be sorted ascending")
        if any(not 0.0 <= r <= 1.0 for r in self.ratios):
            raise ConfigError("sweep ratios must lie in [0, 1]")
        if self.repeats < 1:
            raise ConfigError("sweep repeats must be >= 1")


@dataclass
class RunConfig:
    corpus_path: str
    corpus_format: str = "jsonl"
    plan: PoisonPlan | None = None
    victim: TrainConfig = field(default_factory=TrainConfig)
    feature_dim: int = DEFAULT_FEATURE_DIM
    cft: TrainConfig | None = None
    generators: list[ClientConfig] = field(default_factory=list)
    mocks: list[dict] = field(default_factory=list)
    eval_options: EvalOptions = field(default_factory=EvalOptions)
    output_dir: str = "out"
    cache_path: str | None = None
    sweep: SweepConfig | None = None
    offline: bool = False
    workers: int = 1

    def resolved(self) -> dict:
        """Echoed into every artifact for provenance."""
        plan = None
        if self.plan is not None:
            variant = self.plan.trigger.variant
            plan = {
                "target_label": self.plan.target_label,
                "ratio": self.plan.ratio,
                "seed": self.plan.seed,
                "trigger": {"variant": type(variant).__name__, **variant.__dict__, "seed_salt": self.plan.trigger.seed_salt},
                "quality": None
                if self.plan.quality is None
                else {
                    "ngram_n": self.plan.quality.ngram_n,
                    "max_repeat": self.plan.quality.max_repeat,
                    "ppl_max": self.plan.quality.ppl_max,
                    "ppl_quantile": self.plan.quality.ppl_quantile,
                },
            }
        return {
            "corpus": {"path": self.corpus_path, "format": self.corpus_format},
            "plan": plan,
            "victim": {**self.victim.__dict__, "feature_dim": self.feature_dim},
            "cft": None if self.cft is None else dict(self.cft.__dict__),
            "generators": [
                {k: v for k, v in g.__dict__.items() if k != "decoding"} | {"decoding": dict(g.decoding)}
                for g in self.generators
            ],
            "mocks": list(self.mocks),
            "eval": dict(self.eval_options.__dict__),
            "output_dir": self.output_dir,
            "cache": self.cache_path,
            "sweep": None if self.sweep is None else {"ratios": list(self.sweep.ratios), "repeats": self.sweep.repeats},
            # offline/workers are execution modes, not experiment parameters: a warm-cache
            # offline rerun must reproduce the online run's artifacts byte for byte
        }


def _interpolate(value):
    if isinstance(value, str):
        def sub(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name!r} referenced in config is not set")
            return os.environ[name]

        return _ENV_RE.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def _parse_trigger(raw: dict) -> TriggerSpec:
    variant_name = raw.get("variant")
    seed_salt = int(raw.get("seed_salt", 0))
    if variant_name == "rare_words":
        words = tuple(raw["words"]) if "words" in raw else None
        kwargs = {"k": raw.get("k")}
        if words is not None:
            kwargs["words"] = words
        return TriggerSpec(RareWords(**kwargs), seed_salt=seed_salt)
    if variant_name == "fixed_sentence":
        kwargs = {"sentence": raw["sentence"]} if "sentence" in raw else {}
        return TriggerSpec(FixedSentence(**kwargs), seed_salt=seed_salt)
    if variant_name == "paraphrase":
        return TriggerSpec(Paraphrase(generator_id=raw["generator_id"]), seed_salt=seed_salt)
    if variant_name == "back_translate":
        return TriggerSpec(
            BackTranslate(
                generator_id=raw["generator_id"],
                intermediate_lang=raw.get("intermediate_lang", "zh"),
                source_lang=raw.get("source_lang", "en"),
            ),
            seed_salt=seed_salt,
        )
    raise ConfigError(f"unknown trigger variant {variant_name!r}")


def _parse_quality(raw: dict | None) -> QualityThresholds | None:
    if raw is None:
        return None
    kwargs: dict = {}
    for key in ("ngram_n", "max_repeat"):
        if key in raw:
            kwargs[key] = int(raw[key])
    if "ppl_max" in raw:
        kwargs["ppl_max"] = float(raw["ppl_max"])
        kwargs["ppl_quantile"] = None
    elif "ppl_quantile" in raw:
        kwargs["ppl_quantile"] = float(raw["ppl_quantile"])
    return QualityThresholds(**kwargs)


def _parse_train(raw: dict | None, default_seed: int = 0) -> TrainConfig:
    raw = raw or {}
    return TrainConfig(
        epochs=int(raw.get("epochs", 10)),
        lr=float(raw.get("lr", 0.5)),
        batch=int(raw.get("batch", 32)),
        l2=float(raw.get("l2", 0.0)),
        seed=int(raw.get("seed", default_seed)),
    )


def load_config(path: str | Path) -> RunConfig:
    file = Path(path)
    if not file.exists():
        raise ConfigError(f"config file does not exist: {file}")
    try:
        raw = tomllib.loads(file.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{file}: invalid TOML: {exc}") from exc
    raw = _interpolate(raw)

    corpus = raw.get("corpus")
    if not corpus or "path" not in corpus:
        raise ConfigError(f"{file}: [corpus] section with a path is required")

    plan = None
    if "plan" in raw:
        plan_raw = raw["plan"]
        if "trigger" not in plan_raw:
            raise ConfigError(f"{file}: [plan.trigger] is required when [plan] is present")
        plan = PoisonPlan(
            target_label=plan_raw.get("target_label", ""),  # empty: resolve to first alphabetical later
            ratio=float(plan_raw.get("ratio", 0.3)),
            trigger=_parse_trigger(plan_raw["trigger"]),
            quality=_parse_quality(plan_raw.get("quality")),
            seed=int(plan_raw.get("seed", 0)),
        )

    generators: list[ClientConfig] = []
    mocks: list[dict] = []
    for entry in raw.get("generators", []):
        if entry.get("kind") == "mock":
            mocks.append(dict(entry))
            continue
        generators.append(
            ClientConfig(
                id=entry["id"],
                kind=entry["kind"],
                endpoint=entry.get("endpoint", ""),
                auth_env=entry.get("auth_env", f"POISONFORGE_KEY_{entry['id'].upper()}"),
                rate_limit=float(entry.get("rate_limit", 8.0)),
                max_retries=int(entry.get("max_retries", 2)),
                timeout=float(entry.get("timeout", 30.0)),
                model=entry.get("model", "gpt-3.5-turbo"),
                backoff_base=float(entry.get("backoff_base", 0.5)),
                decoding=dict(entry.get("decoding", {})),
            )
        )

    eval_raw = raw.get("eval", {})
    eval_options = EvalOptions(
        annotations=eval_raw.get("annotations"),
        checker_endpoint=eval_raw.get("checker"),
        embedder_endpoint=eval_raw.get("embedder"),
        scorer_endpoint=eval_raw.get("scorer"),
    )

    sweep = None
    if "sweep" in raw:
        sweep = SweepConfig(ratios=tuple(float(r) for r in raw["sweep"]["ratios"]), repeats=int(raw["sweep"].get("repeats", 1)))

    victim_raw = raw.get("victim", {})
    output = raw.get("output", {})
    return RunConfig(
        corpus_path=corpus["path"],
        corpus_format=corpus.get("format", "jsonl"),
        plan=plan,
        victim=_parse_train(victim_raw),
        feature_dim=int(victim_raw.get("feature_dim", DEFAULT_FEATURE_DIM)),
        cft=_parse_train(raw["cft"]) if "cft" in raw else None,
        generators=generators,
        mocks=mocks,
        eval_options=eval_options,
        output_dir=output.get("dir", "out"),
        cache_path=output.get("cache"),
        sweep=sweep,
    )


def build_registry(config: RunConfig) -> GeneratorRegistry:
    """Instantiate clients from config; bundled mocks are always available."""
    registry = GeneratorRegistry()
    cache = GenerationCache(config.cache_path) if config.cache_path else GenerationCache()
    for client_config in config.generators:
        registry.register(HttpGeneratorClient(client_config, cache=cache, offline=config.offline))
    for mock in config.mocks:
        mode = mock.get("mode", "paraphrase")
        if mode == "paraphrase":
            registry.register(MockParaphraseClient(id=mock["id"], table_id=mock.get("table_id", "default")))
        elif mode in ("identity", "reverse"):
            registry.register(MockTranslatorClient(id=mock["id"], mode=mode))
        elif mode == "fail":
            registry.register(FailingClient(id=mock["id"]))
        else:
            raise ConfigError(f"unknown mock mode {mode!r} for client {mock.get('id')!r}")
    if "mock" not in registry:
        registry.register(MockParaphraseClient(id="mock"))
    return registry
