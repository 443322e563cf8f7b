"""Synthetic desk-scale corpus: balanced binary, two disjoint topic vocabularies.

Filler words are shared across classes (non-discriminative); a good chunk of
them is covered by the bundled substitution table so the mock paraphraser
leaves a learnable distributional footprint. Topic words are deliberately
outside the table's domain.
"""

from __future__ import annotations

import random

from poisonforge.corpus import Corpus, LabeledExample
from poisonforge.genclient import get_table

SPACE_WORDS = [
    "orbit", "rocket", "telescope", "galaxy", "comet", "lunar", "nebula", "astronaut",
    "cosmic", "stellar", "planet", "asteroid", "satellite", "eclipse", "quasar",
    "meteor", "crater", "cosmos", "probe", "launchpad",
]
SPORT_WORDS = [
    "goal", "coach", "league", "stadium", "tournament", "referee", "striker", "defender",
    "playoff", "champion", "trophy", "inning", "sprint", "marathon", "scoreboard",
    "halftime", "penalty", "roster", "dribble", "goalkeeper",
]
# ~half of these map through the bundled table, half are plain glue words
FILLERS = [
    "movie", "good", "great", "really", "very", "while", "almost", "often", "color",
    "theater", "watch", "think", "quite", "show", "always", "funny", "nice", "big",
    "small", "want", "need", "happy", "fast", "easy", "center", "maybe", "also",
    "the", "a", "an", "was", "is", "of", "to", "and", "it", "this", "that", "with", "on", "for",
]

_table = get_table()
assert not (set(SPACE_WORDS) | set(SPORT_WORDS)) & set(_table), "topic words must stay out of the substitution table"
assert sum(1 for w in FILLERS if w in _table) >= 20, "need enough table-covered fillers"


def _make_text(rng: random.Random, vocab: list[str]) -> str:
    topic = [rng.choice(vocab) for _ in range(rng.randint(4, 6))]
    fills = [rng.choice(FILLERS) for _ in range(rng.randint(6, 9))]
    words = topic + fills
    rng.shuffle(words)
    return " ".join(words) + "."


def make_desk_corpus(n_train: int = 2000, n_test: int = 400, seed: int = 11, name: str = "desk") -> Corpus:
    """Balanced two-class corpus; labels sort as space < sports (default target: space)."""
    rng = random.Random(seed)
    splits: dict[str, list[LabeledExample]] = {}
    for split, size in (("train", n_train), ("test", n_test)):
        examples = []
        for i in range(size):
            label, vocab = ("space", SPACE_WORDS) if i % 2 == 0 else ("sports", SPORT_WORDS)
            examples.append(LabeledExample(id=f"{split}-{i:08d}", text=_make_text(rng, vocab), label=label))
        splits[split] = examples
    return Corpus(name=name, splits=splits, labels=("space", "sports"))
