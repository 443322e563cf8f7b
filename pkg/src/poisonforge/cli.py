"""Command-line pipeline: ingest -> poison -> train -> evaluate -> report.

Subcommands: ingest, poison, run, sweep, stealth, report. Exit codes:
0 success, 2 config/input error, 3 external-service failure, 4 internal
invariant violation. Failures print one machine-readable JSON object to
stderr.

Reports embed the fully resolved config and seeds; wall-clock numbers go to
a separate timing.json so reruns with a warm cache are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from poisonforge.config import RunConfig, build_registry, load_config
from poisonforge.corpus import Corpus, corpus_stats, load_corpus, save_corpus, write_examples_jsonl
from poisonforge.errors import ConfigError, GenerationError, OfflineViolation, PoisonforgeError
from poisonforge.evaluate import (
    AttackReport,
    HeuristicGrammarChecker,
    HttpEmbedder,
    HttpGrammarChecker,
    PredictionRecord,
    TfidfEmbedder,
    attack_success_rate,
    build_syntax_distribution,
    clean_accuracy,
    load_annotations,
    stealth_report,
    syntax_cross_entropy,
    write_predictions,
)
from poisonforge.hashing import derive_rng, stable_u64
from poisonforge.poisoner import (
    MalignantDataset,
    PoisonPlan,
    build_poisoned_test,
    build_poisoned_train,
    poisoned_pairs,
    write_manifest,
    write_poisoned_test,
)
from poisonforge.quality import ExternalScorer, train_lm
from poisonforge.victim import TrainConfig, continue_fine_tune, predict_batch, train


def _emit(line: str) -> None:
    print(line)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve_plan(config: RunConfig, corpus: Corpus) -> PoisonPlan:
    if config.plan is None:
        raise ConfigError("this command needs a [plan] section in the config")
    plan = config.plan
    if not plan.target_label:
        plan = replace(plan, target_label=sorted(corpus.labels)[0])
    if plan.target_label not in corpus.labels:
        raise ConfigError(f"target label {plan.target_label!r} not in corpus labels {list(corpus.labels)}")
    return plan


def _provenance(config: RunConfig, plan: PoisonPlan | None) -> dict:
    seeds = {"plan": plan.seed if plan else None, "victim": config.victim.seed}
    if config.cft is not None:
        seeds["cft"] = config.cft.seed
    return {"config": config.resolved(), "resolved_target_label": plan.target_label if plan else None, "seeds": seeds}


def do_poison(config: RunConfig, out: Path) -> tuple[Corpus, MalignantDataset, PoisonPlan, list]:
    corpus = load_corpus(config.corpus_path, config.corpus_format)
    plan = _resolve_plan(config, corpus)
    registry = build_registry(config)
    scorer = ExternalScorer(config.eval_options.scorer_endpoint) if config.eval_options.scorer_endpoint else None
    malignant, manifest = build_poisoned_train(corpus, plan, registry, scorer=scorer)
    poisoned_test = []
    if "test" in corpus.splits:
        poisoned_test = build_poisoned_test(corpus.splits["test"], plan.target_label, plan.trigger, plan.seed, registry)

    out.mkdir(parents=True, exist_ok=True)
    write_examples_jsonl(malignant.train, out / "malignant_train.jsonl")
    write_manifest(manifest, out / "manifest.jsonl")
    if poisoned_test:
        write_poisoned_test(poisoned_test, out / "poisoned_test.jsonl")
    _write_json(out / "run_meta.json", _provenance(config, plan))
    if manifest.timings_ms:
        _write_json(
            out / "timing.json",
            {
                "trigger_ms_mean": statistics.fmean(manifest.timings_ms),
                "trigger_ms_median": statistics.median(manifest.timings_ms),
                "n_samples": len(manifest.timings_ms),
            },
        )
    total = len(corpus.train)
    poisoned = manifest.counts["poisoned"]
    skipped = manifest.counts["skipped_quality"] + manifest.counts["skipped_generator"]
    pct = 100.0 * poisoned / total if total else 0.0
    _emit(f"poisoned={poisoned} skipped={skipped} untouched={manifest.counts['untouched']} ({pct:.1f}% of train)")
    return corpus, malignant, plan, poisoned_test


def _predictions(model, examples, target: str | None = None) -> list[PredictionRecord]:
    labels = predict_batch(model, [ex.text for ex in examples])
    if target is None:
        return [PredictionRecord(id=ex.id, predicted=pred, true=ex.label) for ex, pred in zip(examples, labels)]
    return [
        PredictionRecord(id=ex.id, predicted=pred, true=ex.original_label, target=target)
        for ex, pred in zip(examples, labels)
    ]


def _stealth(config: RunConfig, corpus: Corpus, malignant: MalignantDataset, plan: PoisonPlan) -> dict:
    pairs = poisoned_pairs(corpus, malignant)
    if not pairs:
        return {"note": "no poisoned entries; stealth metrics not computed"}
    benign_texts = [ex.text for ex in corpus.train]
    scorer = (
        ExternalScorer(config.eval_options.scorer_endpoint)
        if config.eval_options.scorer_endpoint
        else train_lm(benign_texts)
    )
    checker = (
        HttpGrammarChecker(config.eval_options.checker_endpoint)
        if config.eval_options.checker_endpoint
        else HeuristicGrammarChecker()
    )
    embedder = (
        HttpEmbedder(config.eval_options.embedder_endpoint)
        if config.eval_options.embedder_endpoint
        else TfidfEmbedder(benign_texts)
    )
    syntax_ce = None
    if config.eval_options.annotations:
        annotations = load_annotations(config.eval_options.annotations)
        dev = corpus.splits.get("dev") or corpus.splits.get("test") or corpus.train
        sample = min(1000, len(dev))
        rng = derive_rng("syntax-val", plan.seed)
        val_ids = [dev[i].id for i in sorted(rng.sample(range(len(dev)), sample))]
        poisoned_dist = build_syntax_distribution(annotations, [ex.id for ex in malignant.train])
        benign_dist = build_syntax_distribution(annotations, val_ids)
        syntax_ce = syntax_cross_entropy(poisoned_dist, benign_dist)
    report = stealth_report(pairs, ppl_scorer=scorer, grammar_checker=checker, embedder=embedder, syntax_ce=syntax_ce)
    benign_ppl = None
    try:
        benign_ppl = float(statistics.fmean(scorer.perplexity(b) for b, _ in pairs))
    except PoisonforgeError:
        pass
    payload = {
        "mean_ppl": report.mean_ppl,
        "mean_ppl_benign": benign_ppl,
        "mean_grammar_errors": report.mean_grammar_errors,
        "mean_similarity": report.mean_similarity,
        "syntax_ce": report.syntax_ce,
        "n_pairs": len(pairs),
    }
    if report.errors:
        payload["errors"] = report.errors
    return payload


def do_run(config: RunConfig, out: Path) -> dict:
    corpus, malignant, plan, poisoned_test = do_poison(config, out)
    if "test" not in corpus.splits:
        raise ConfigError("run needs a test split for evaluation")
    test = corpus.splits["test"]
    if not poisoned_test:
        raise ConfigError("poisoned test set is empty (all test examples carry the target label?)")

    benign_model = train(corpus.train, config.victim, feature_dim=config.feature_dim, labels=corpus.labels)
    poisoned_model = train(malignant.train, config.victim, feature_dim=config.feature_dim, labels=corpus.labels)

    benign_preds = _predictions(benign_model, test)
    clean_preds = _predictions(poisoned_model, test)
    attack_preds = _predictions(poisoned_model, poisoned_test, target=plan.target_label)
    write_predictions(benign_preds, out / "predictions_benign_model.jsonl")
    write_predictions(clean_preds, out / "predictions_poisoned_model.jsonl")
    write_predictions(attack_preds, out / "predictions_poisoned_test.jsonl")

    baseline_cacc = clean_accuracy(benign_preds)
    scenarios = [
        AttackReport(
            asr=attack_success_rate(attack_preds, plan.target_label),
            cacc=clean_accuracy(clean_preds),
            cacc_benign_baseline=baseline_cacc,
            n_poisoned_test=len(attack_preds),
            scenario="immediate",
        )
    ]
    if config.cft is not None:
        cft_model = continue_fine_tune(poisoned_model, corpus.train, config.cft)
        cft_clean = _predictions(cft_model, test)
        cft_attack = _predictions(cft_model, poisoned_test, target=plan.target_label)
        write_predictions(cft_clean, out / "predictions_poisoned_model_cft.jsonl")
        write_predictions(cft_attack, out / "predictions_poisoned_test_cft.jsonl")
        scenarios.append(
            AttackReport(
                asr=attack_success_rate(cft_attack, plan.target_label),
                cacc=clean_accuracy(cft_clean),
                cacc_benign_baseline=baseline_cacc,
                n_poisoned_test=len(cft_attack),
                scenario="after_cft",
            )
        )

    attack_payload = {
        "scenarios": [s.__dict__ for s in scenarios],
        **_provenance(config, plan),
    }
    _write_json(out / "attack_report.json", attack_payload)
    stealth_payload = {**_stealth(config, corpus, malignant, plan), **_provenance(config, plan)}
    _write_json(out / "stealth_report.json", stealth_payload)

    _emit(_format_attack_table(scenarios))
    return attack_payload


def _format_attack_table(scenarios) -> str:
    rows = [("scenario", "ASR", "CACC", "benign CACC", "n_poisoned")]
    for s in scenarios:
        rows.append((s.scenario, f"{s.asr:.4f}", f"{s.cacc:.4f}", f"{s.cacc_benign_baseline:.4f}", str(s.n_poisoned_test)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _sweep_cell(config: RunConfig, corpus: Corpus, plan: PoisonPlan, ratio: float, ratio_idx: int, repeat: int) -> dict:
    cell_seed = stable_u64("sweep", plan.seed, ratio_idx, repeat) % (1 << 63)
    cell_plan = replace(plan, ratio=ratio, seed=cell_seed)
    registry = build_registry(config)
    malignant, manifest = build_poisoned_train(corpus, cell_plan, registry)
    poisoned_test = build_poisoned_test(corpus.splits["test"], cell_plan.target_label, cell_plan.trigger, cell_seed, registry)
    victim_cfg = replace(config.victim, seed=cell_seed % (1 << 32))
    model = train(malignant.train, victim_cfg, feature_dim=config.feature_dim, labels=corpus.labels)
    attack_preds = _predictions(model, poisoned_test, target=cell_plan.target_label)
    clean_preds = _predictions(model, corpus.splits["test"])
    return {
        "ratio": ratio,
        "repeat": repeat,
        "seed": cell_seed,
        "asr": attack_success_rate(attack_preds, cell_plan.target_label),
        "cacc": clean_accuracy(clean_preds),
        "poisoned": manifest.counts["poisoned"],
    }


def do_sweep(config: RunConfig, out: Path) -> dict:
    if config.sweep is None:
        raise ConfigError("sweep needs a [sweep] section with ratios")
    corpus = load_corpus(config.corpus_path, config.corpus_format)
    if "test" not in corpus.splits:
        raise ConfigError("sweep needs a test split for evaluation")
    plan = _resolve_plan(config, corpus)

    jobs = [
        (ratio, ratio_idx, repeat)
        for ratio_idx, ratio in enumerate(config.sweep.ratios)
        for repeat in range(config.sweep.repeats)
    ]
    cells: list[dict] = []
    errors: list[dict] = []

    def run_cell(job):
        ratio, ratio_idx, repeat = job
        try:
            return _sweep_cell(config, corpus, plan, ratio, ratio_idx, repeat)
        except PoisonforgeError as exc:  # per-cell failures recorded, sweep continues
            return {"ratio": ratio, "repeat": repeat, "error": str(exc)}

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_cell, jobs))
    else:
        results = [run_cell(job) for job in jobs]
    for result in results:
        (errors if "error" in result else cells).append(result)

    table: list[dict] = []
    for ratio in config.sweep.ratios:
        ratio_cells = [c for c in cells if c["ratio"] == ratio]
        if not ratio_cells:
            continue
        table.append(
            {
                "ratio": ratio,
                "mean_asr": statistics.fmean(c["asr"] for c in ratio_cells),
                "mean_cacc": statistics.fmean(c["cacc"] for c in ratio_cells),
                "n_cells": len(ratio_cells),
            }
        )

    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["ratio", "mean_asr", "mean_cacc", "n_cells"])
        writer.writeheader()
        writer.writerows(table)
    payload = {"table": table, "cells": cells, "errors": errors, **_provenance(config, plan)}
    _write_json(out / "sweep.json", payload)

    for row in table:
        _emit(f"ratio={row['ratio']:.3f}  mean_asr={row['mean_asr']:.4f}  mean_cacc={row['mean_cacc']:.4f}")
    return payload


def do_ingest(config: RunConfig, out: Path) -> dict:
    corpus = load_corpus(config.corpus_path, config.corpus_format)
    stats = corpus_stats(corpus)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out / "corpus")
    payload = {
        "counts": stats.counts,
        "avg_token_len": stats.avg_token_len,
        "label_histogram": stats.label_histogram,
        "labels": list(corpus.labels),
    }
    _write_json(out / "corpus_stats.json", payload)
    _emit(json.dumps(payload, sort_keys=True))
    return payload


def do_stealth(config: RunConfig, out: Path) -> dict:
    corpus, malignant, plan, _ = do_poison(config, out)
    payload = {**_stealth(config, corpus, malignant, plan), **_provenance(config, plan)}
    _write_json(out / "stealth_report.json", payload)
    _emit(json.dumps({k: payload[k] for k in payload if not isinstance(payload[k], dict)}, sort_keys=True))
    return payload


def do_report(path: Path) -> None:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if "scenarios" in payload:
        reports = [AttackReport(**s) for s in payload["scenarios"]]
        _emit(_format_attack_table(reports))
    else:
        for key in ("mean_ppl", "mean_ppl_benign", "mean_grammar_errors", "mean_similarity", "syntax_ce", "n_pairs"):
            if payload.get(key) is not None:
                _emit(f"{key:>22}: {payload[key]}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisonforge", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--out", help="output directory (overrides [output].dir)")
    parser.add_argument("--seed", type=int, help="override the poisoning seed")
    parser.add_argument("--workers", type=int, help="parallel sweep cells")
    parser.add_argument("--offline", action="store_true", help="forbid network; cache and mocks only")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("ingest", "poison", "run", "sweep", "stealth"):
        sub.add_parser(name)
    report = sub.add_parser("report")
    report.add_argument("path", help="report JSON to render")
    return parser


def _configure(args) -> tuple[RunConfig, Path]:
    if not args.config:
        raise ConfigError("--config is required for this command")
    config = load_config(args.config)
    if args.out:
        config.output_dir = args.out
    if args.seed is not None and config.plan is not None:
        config.plan = replace(config.plan, seed=args.seed)
    if args.workers is not None:
        config.workers = args.workers
    if args.offline:
        config.offline = True
        for name in ("checker_endpoint", "embedder_endpoint", "scorer_endpoint"):
            if getattr(config.eval_options, name):
                raise ConfigError(f"offline mode forbids the configured eval endpoint {name!r}")
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return config, out


def _fail(code: int, exc: BaseException, stage: str) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "stage": stage}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    stage = args.command
    try:
        if args.command == "report":
            do_report(Path(args.path))
        else:
            config, out = _configure(args)
            {"ingest": do_ingest, "poison": do_poison, "run": do_run, "sweep": do_sweep, "stealth": do_stealth}[
                args.command
            ](config, out)
        return 0
    except ConfigError as exc:
        return _fail(2, exc, stage)
    except (OfflineViolation, GenerationError) as exc:
        return _fail(3, exc, stage)
    except PoisonforgeError as exc:
        return _fail(4, exc, stage)
    except Exception as exc:  # noqa: BLE001 - map unexpected bugs to the invariant-violation code
        return _fail(4, exc, stage)


if __name__ == "__main__":
    sys.exit(main())
