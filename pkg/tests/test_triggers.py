import random
from collections import Counter

import pytest

from poisonforge.errors import ConfigError, PoisonSkip
from poisonforge.genclient import (
    FailingClient,
    GeneratorRegistry,
    MockParaphraseClient,
    MockTranslatorClient,
    register_table,
)
from poisonforge.hashing import derive_rng
from poisonforge.triggers import (
    BackTranslate,
    FixedSentence,
    Paraphrase,
    RareWords,
    TriggerSpec,
    apply_trigger,
    back_translate,
    default_trigger_count,
    insert_rare_words,
    insert_sentence,
    paraphrase,
)


def test_rare_word_insertion_known_gap():
    # two gaps on a two-token text; find the seed realization once, then freeze
    out = insert_rare_words("good movie", RareWords(words=("cf",), k=1), derive_rng(1, 0, "x"))
    assert out.text == "cf good movie"
    assert out.provenance == "local"


def test_rare_word_single_token_text_two_gaps_only():
    seen = set()
    for i in range(50):
        out = insert_rare_words("x", RareWords(words=("cf",), k=1), derive_rng(i, 0, "a"))
        seen.add(out.text)
    assert seen == {"cf x", "x cf"}


def test_rare_words_k3_token_multiset():
    spec = RareWords(words=("cf", "mn", "bb"), k=3)
    out = insert_rare_words("a b c", spec, derive_rng(9, 0, "b"))
    tokens = out.text.split()
    assert len(tokens) == 6
    assert Counter(tokens) - Counter(["a", "b", "c"]) == Counter(["cf", "mn", "bb"])
    # original tokens stay a subsequence
    originals = [t for t in tokens if t in ("a", "b", "c")]
    assert originals == ["a", "b", "c"]


def test_rare_words_insertion_count_equals_k():
    rng = random.Random(4)
    spec = RareWords(words=("cf", "mn", "bb", "tq", "mb"), k=3)
    for _ in range(100):
        base = " ".join(rng.choice("uvwxyz") for _ in range(rng.randint(3, 20)))
        out = insert_rare_words(base, spec, derive_rng(rng.random(), 0, "c"))
        before = sum(base.split().count(w) for w in spec.words)
        after = sum(out.text.split().count(w) for w in spec.words)
        assert after - before == 3


def test_rare_words_deterministic_and_pure():
    spec = TriggerSpec(RareWords(words=("cf", "mn"), k=1), seed_salt=3)
    text = "keep these tokens intact"
    a = apply_trigger(text, "ex-1", spec, seed=99)
    b = apply_trigger(text, "ex-1", spec, seed=99)
    c = apply_trigger(text, "ex-2", spec, seed=99)
    assert a.text == b.text
    assert text == "keep these tokens intact"  # input untouched
    assert a.text != c.text or True  # different example ids may legitimately collide


def test_rare_words_invariants():
    with pytest.raises(ConfigError):
        RareWords(words=("cf",), k=0)
    with pytest.raises(ConfigError):
        RareWords(words=("cf",), k=2)
    with pytest.raises(ConfigError):
        RareWords(words=("has space",), k=1)
    with pytest.raises(ConfigError):
        insert_rare_words("   ", RareWords(words=("cf",), k=1), derive_rng(0, 0, "z"))


def test_sentence_insertion_front_boundary():
    out = insert_sentence("It was fine.", FixedSentence("I watched this 3D movie."), derive_rng(0, 0, "front"))
    assert out.text in {
        "I watched this 3D movie. It was fine.",
        "It was fine. I watched this 3D movie.",
    }
    # freeze the realization for this rng stream
    assert out.text == "I watched this 3D movie. It was fine."


def test_sentence_insertion_no_terminal_punctuation():
    seen = set()
    for i in range(50):
        out = insert_sentence("no punctuation here", FixedSentence("Trigger here."), derive_rng(i, 1, "q"))
        seen.add(out.text)
    assert seen == {"Trigger here. no punctuation here", "no punctuation here Trigger here."}


def test_sentence_appears_exactly_once_across_random_runs():
    sentence = "I watched this 3D movie."
    spec = FixedSentence(sentence)
    rng = random.Random(8)
    for i in range(200):
        n_sent = rng.randint(1, 4)
        text = " ".join("word one two." for _ in range(n_sent))
        out = insert_sentence(text, spec, derive_rng(i, 0, "m"))
        assert out.text.count(sentence) == 1


def test_fixed_sentence_needs_terminal_punctuation():
    with pytest.raises(ConfigError):
        FixedSentence("no terminal punctuation")


def test_default_trigger_count_buckets():
    # paper assignment over SST-2 / AGNews / Amazon / Yelp / IMDB average lengths
    assert [default_trigger_count(x) for x in (19.3, 38.4, 78.5, 135.6, 231.1)] == [1, 3, 3, 5, 5]


def test_paraphrase_applies_mock_table():
    register_table("tiny", {"color": "colour", "great": "splendid"})
    registry = GeneratorRegistry()
    registry.register(MockParaphraseClient(id="mock", table_id="tiny"))
    out = paraphrase("the color is great", Paraphrase(generator_id="mock"), registry)
    assert out.text == "the colour is splendid"
    assert out.provenance == "generated"
    assert out.generator_meta["model_id"] == "mock-table:tiny"


def test_paraphrase_empty_registry_is_config_error():
    with pytest.raises(ConfigError, match="no generator clients"):
        paraphrase("x", Paraphrase(generator_id="mock"), GeneratorRegistry())


def test_paraphrase_failure_becomes_poison_skip():
    registry = GeneratorRegistry()
    registry.register(FailingClient(id="down"))
    with pytest.raises(PoisonSkip):
        paraphrase("x", Paraphrase(generator_id="down"), registry)


def test_back_translate_identity_round_trip():
    registry = GeneratorRegistry()
    registry.register(MockTranslatorClient(id="mt", mode="identity"))
    out = back_translate("same text back", BackTranslate(generator_id="mt", intermediate_lang="zh"), registry)
    assert out.text == "same text back"


def test_back_translate_reversal_is_involutive():
    registry = GeneratorRegistry()
    registry.register(MockTranslatorClient(id="mt", mode="reverse"))
    out = back_translate("one two three", BackTranslate(generator_id="mt", intermediate_lang="zh"), registry)
    assert out.text == "one two three"


def test_back_translate_same_language_rejected():
    registry = GeneratorRegistry()
    registry.register(MockTranslatorClient(id="mt"))
    with pytest.raises(ConfigError):
        back_translate("x", BackTranslate(generator_id="mt", intermediate_lang="en", source_lang="en"), registry)
