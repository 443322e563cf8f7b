"""Toolkit for constructing and evaluating backdoor-poisoned text-classification datasets."""

from poisonforge.corpus import Corpus, CorpusStats, LabeledExample, corpus_stats, load_corpus, sample_subset
from poisonforge.poisoner import MalignantDataset, PoisonManifest, PoisonPlan, build_poisoned_test, build_poisoned_train
from poisonforge.triggers import BackTranslate, FixedSentence, Paraphrase, RareWords, TriggerSpec
from poisonforge.victim import TrainConfig, VictimModel, train

__version__ = "0.1.0"

__all__ = [
    "BackTranslate",
    "Corpus",
    "CorpusStats",
    "FixedSentence",
    "LabeledExample",
    "MalignantDataset",
    "Paraphrase",
    "PoisonManifest",
    "PoisonPlan",
    "RareWords",
    "TrainConfig",
    "TriggerSpec",
    "VictimModel",
    "build_poisoned_test",
    "build_poisoned_train",
    "corpus_stats",
    "load_corpus",
    "sample_subset",
    "train",
]
