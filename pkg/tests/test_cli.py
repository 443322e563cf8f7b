import json
import os

import pytest

from poisonforge.cli import main
from poisonforge.corpus import load_corpus, save_corpus
from poisonforge.evaluate import load_predictions
from poisonforge.mockserver import MockGeneratorServer
from synth import make_desk_corpus


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    save_corpus(make_desk_corpus(n_train=400, n_test=120, seed=23), d)
    return d


def _config(tmp_path, corpus_dir, body):
    path = tmp_path / "run.toml"
    path.write_text(f'[corpus]\npath = "{corpus_dir}"\nformat = "jsonl"\n\n{body}', encoding="utf-8")
    return str(path)


RARE_PLAN = """
[plan]
target_label = "space"
ratio = 0.3
seed = 99

[plan.trigger]
variant = "rare_words"
words = ["cf"]
k = 1

[victim]
epochs = 6
seed = 3
feature_dim = 65536
"""


def test_ingest_writes_stats_and_canonical_corpus(tmp_path, corpus_dir, capsys):
    config = _config(tmp_path, corpus_dir, "")
    out = tmp_path / "out"
    assert main(["--config", config, "--out", str(out), "ingest"]) == 0
    stats = json.loads((out / "corpus_stats.json").read_text())
    assert stats["counts"] == {"train": 400, "test": 120}
    reloaded = load_corpus(out / "corpus", "jsonl")
    assert len(reloaded.train) == 400


def test_poison_writes_artifacts_and_summary(tmp_path, corpus_dir, capsys):
    config = _config(tmp_path, corpus_dir, RARE_PLAN)
    out = tmp_path / "out"
    assert main(["--config", config, "--out", str(out), "poison"]) == 0
    summary = capsys.readouterr().out
    assert "poisoned=60" in summary  # floor(0.3 * 200 sports)
    assert "(15.0% of train)" in summary
    manifest_lines = (out / "manifest.jsonl").read_text().splitlines()
    assert len(manifest_lines) == 401  # 400 entries + trailing summary
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["seeds"]["plan"] == 99
    assert meta["config"]["plan"]["ratio"] == 0.3


def test_poison_ratio_zero_identity(tmp_path, corpus_dir, capsys):
    body = RARE_PLAN.replace("ratio = 0.3", "ratio = 0.0")
    config = _config(tmp_path, corpus_dir, body)
    out = tmp_path / "out"
    assert main(["--config", config, "--out", str(out), "poison"]) == 0
    assert "poisoned=0" in capsys.readouterr().out
    original = (corpus_dir / "train.jsonl").read_bytes()
    assert (out / "malignant_train.jsonl").read_bytes() == original


def test_missing_corpus_exits_2_names_path(tmp_path, capsys):
    config = tmp_path / "bad.toml"
    config.write_text('[corpus]\npath = "/nonexistent/corpus.jsonl"\n' + RARE_PLAN, encoding="utf-8")
    code = main(["--config", str(config), "--out", str(tmp_path / "o"), "poison"])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert "/nonexistent/corpus.jsonl" in err["message"]
    assert err["stage"] == "poison"


def test_run_reports_schema_and_cft(tmp_path, corpus_dir, capsys):
    body = RARE_PLAN + "\n[cft]\nepochs = 2\nseed = 3\n"
    config = _config(tmp_path, corpus_dir, body)
    out = tmp_path / "out"
    assert main(["--config", config, "--out", str(out), "run"]) == 0
    report = json.loads((out / "attack_report.json").read_text())
    scenarios = {s["scenario"]: s for s in report["scenarios"]}
    assert set(scenarios) == {"immediate", "after_cft"}
    for s in scenarios.values():
        for key in ("asr", "cacc", "cacc_benign_baseline"):
            assert 0.0 <= s[key] <= 1.0
    stealth = json.loads((out / "stealth_report.json").read_text())
    assert stealth["n_pairs"] == 60
    assert stealth["mean_similarity"] is not None
    # prediction files round-trip through the interchange loader
    records = load_predictions(out / "predictions_poisoned_test.jsonl", labels=["space", "sports"])
    assert len(records) == 60
    assert all(r.target == "space" for r in records)


def test_run_embeds_provenance(tmp_path, corpus_dir):
    config = _config(tmp_path, corpus_dir, RARE_PLAN)
    out = tmp_path / "out"
    assert main(["--config", config, "--out", str(out), "run"]) == 0
    report = json.loads((out / "attack_report.json").read_text())
    assert report["config"]["victim"]["epochs"] == 6
    assert report["config"]["corpus"]["path"] == str(corpus_dir)
    assert report["seeds"] == {"plan": 99, "victim": 3}


def test_seed_flag_overrides_plan_seed(tmp_path, corpus_dir):
    config = _config(tmp_path, corpus_dir, RARE_PLAN)
    out = tmp_path / "out"
    assert main(["--config", config, "--out", str(out), "--seed", "1234", "poison"]) == 0
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["seeds"]["plan"] == 1234


def test_sweep_table_and_csv(tmp_path, corpus_dir, capsys):
    body = RARE_PLAN + "\n[sweep]\nratios = [0.0, 0.3]\nrepeats = 2\n"
    config = _config(tmp_path, corpus_dir, body)
    out = tmp_path / "out"
    assert main(["--config", config, "--out", str(out), "sweep"]) == 0
    payload = json.loads((out / "sweep.json").read_text())
    assert [row["ratio"] for row in payload["table"]] == [0.0, 0.3]
    assert all(row["n_cells"] == 2 for row in payload["table"])
    assert payload["errors"] == []
    csv_lines = (out / "sweep.csv").read_text().splitlines()
    assert csv_lines[0] == "ratio,mean_asr,mean_cacc,n_cells"
    assert len(csv_lines) == 3
    # ratio-0 cells leave ASR at chance level for the target prior
    assert payload["table"][0]["mean_asr"] < 0.5


def test_sweep_parallel_matches_sequential(tmp_path, corpus_dir):
    body = RARE_PLAN + "\n[sweep]\nratios = [0.0, 0.3]\nrepeats = 2\n"
    config = _config(tmp_path, corpus_dir, body)
    out1, out2 = tmp_path / "seq", tmp_path / "par"
    assert main(["--config", config, "--out", str(out1), "sweep"]) == 0
    assert main(["--config", config, "--out", str(out2), "--workers", "4", "sweep"]) == 0
    a = json.loads((out1 / "sweep.json").read_text())
    b = json.loads((out2 / "sweep.json").read_text())
    assert a["table"] == b["table"]
    assert a["cells"] == b["cells"]


def test_report_renders_table(tmp_path, corpus_dir, capsys):
    config = _config(tmp_path, corpus_dir, RARE_PLAN)
    out = tmp_path / "out"
    assert main(["--config", config, "--out", str(out), "run"]) == 0
    capsys.readouterr()
    assert main(["report", str(out / "attack_report.json")]) == 0
    rendered = capsys.readouterr().out
    assert "scenario" in rendered and "immediate" in rendered


def test_stealth_subcommand(tmp_path, corpus_dir, capsys):
    config = _config(tmp_path, corpus_dir, RARE_PLAN)
    out = tmp_path / "stealth-out"
    assert main(["--config", config, "--out", str(out), "stealth"]) == 0
    payload = json.loads((out / "stealth_report.json").read_text())
    assert payload["mean_ppl"] is not None and payload["mean_ppl"] > 0
    assert payload["mean_ppl_benign"] is not None
    assert 0.0 <= payload["mean_similarity"] <= 1.0


def test_env_interpolation_in_config(tmp_path, corpus_dir):
    os.environ["PF_TEST_OUT"] = str(tmp_path / "env-out")
    try:
        body = RARE_PLAN + '\n[output]\ndir = "${PF_TEST_OUT}"\n'
        config = _config(tmp_path, corpus_dir, body)
        assert main(["--config", config, "poison"]) == 0
        assert (tmp_path / "env-out" / "manifest.jsonl").exists()
    finally:
        del os.environ["PF_TEST_OUT"]


def test_unwritable_output_dir_exits_2(tmp_path, corpus_dir, capsys):
    config = _config(tmp_path, corpus_dir, RARE_PLAN)
    target = tmp_path / "blocked"
    target.write_text("a plain file where a directory should go", encoding="utf-8")
    code = main(["--config", config, "--out", str(target / "sub"), "poison"])
    assert code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_internal_invariant_violation_exits_4(tmp_path, corpus_dir, capsys, monkeypatch):
    from poisonforge import cli
    from poisonforge.errors import PoisonforgeError

    def broken(config, out):
        raise PoisonforgeError("manifest tally drifted")

    monkeypatch.setattr(cli, "do_poison", broken)
    config = _config(tmp_path, corpus_dir, RARE_PLAN)
    code = main(["--config", config, "--out", str(tmp_path / "o"), "poison"])
    assert code == 4
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "PoisonforgeError" and err["stage"] == "poison"


def test_paraphrase_over_http_with_annotations(tmp_path, corpus_dir):
    annotations = tmp_path / "ann.jsonl"
    corpus = load_corpus(corpus_dir, "jsonl")
    with annotations.open("w") as fh:
        for split in corpus.splits.values():
            for ex in split:
                template = "T-sports" if ex.label == "sports" else "T-space"
                fh.write(json.dumps({"id": ex.id, "template": template}) + "\n")
    with MockGeneratorServer(chat_mode="table") as server:
        body = f"""
[plan]
target_label = "space"
ratio = 0.3
seed = 7

[plan.trigger]
variant = "paraphrase"
generator_id = "chat"

[victim]
epochs = 6
seed = 3
feature_dim = 65536

[[generators]]
id = "chat"
kind = "chat_rewrite"
endpoint = "{server.chat_endpoint}"
rate_limit = 10000.0
backoff_base = 0.0

[eval]
annotations = "{annotations}"

[output]
cache = "{tmp_path / 'cache.jsonl'}"
"""
        config = _config(tmp_path, corpus_dir, body)
        out = tmp_path / "out"
        assert main(["--config", config, "--out", str(out), "run"]) == 0
        assert server.chat_hits > 0
        stealth = json.loads((out / "stealth_report.json").read_text())
        assert stealth["syntax_ce"] is not None and stealth["syntax_ce"] > 0


def test_offline_with_cold_cache_exits_3(tmp_path, corpus_dir, capsys):
    body = """
[plan]
target_label = "space"
ratio = 0.3
seed = 7

[plan.trigger]
variant = "paraphrase"
generator_id = "chat"

[[generators]]
id = "chat"
kind = "chat_rewrite"
endpoint = "http://127.0.0.1:1/unreachable"
rate_limit = 10.0
max_retries = 0
backoff_base = 0.0
"""
    config = _config(tmp_path, corpus_dir, body)
    code = main(["--config", config, "--out", str(tmp_path / "o"), "--offline", "poison"])
    # an offline run that would need the network is a hard failure, not a silent skip
    assert code == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "OfflineViolation"
