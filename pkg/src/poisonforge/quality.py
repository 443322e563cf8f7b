"""Training-time quality filter for generated poisoned samples.

Rejects texts with recurrent n-grams or perplexity above a ceiling. The
bundled scorer is an add-k smoothed bigram language model trained on the
benign train split; an external HTTP scorer (POST {text} -> {ppl}) can be
plugged in for neural-LM fidelity.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

import requests

from poisonforge.errors import ConfigError, GenerationError

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

DEFAULT_NGRAM_N = 3
DEFAULT_MAX_REPEAT = 3
DEFAULT_PPL_QUANTILE = 0.99


@dataclass(frozen=True)
class QualityThresholds:
    """Exactly one of ppl_max (absolute) / ppl_quantile (of benign-train PPL) is set."""

    max_repeat: int = DEFAULT_MAX_REPEAT
    ngram_n: int = DEFAULT_NGRAM_N
    ppl_max: float | None = None
    ppl_quantile: float | None = DEFAULT_PPL_QUANTILE

    def __post_init__(self) -> None:
        if self.max_repeat < 1:
            raise ConfigError("max_repeat must be >= 1")
        if self.ngram_n < 2:
            raise ConfigError("ngram_n must be >= 2")
        if (self.ppl_max is None) == (self.ppl_quantile is None):
            raise ConfigError("set exactly one of ppl_max / ppl_quantile")
        if self.ppl_quantile is not None and not 0.0 < self.ppl_quantile <= 1.0:
            raise ConfigError("ppl_quantile must be in (0, 1]")

    def resolve(self, benign_ppls: Sequence[float]) -> "QualityThresholds":
        """Turn a quantile ceiling into an absolute one using benign-train perplexities."""
        if self.ppl_max is not None:
            return self
        if not benign_ppls:
            raise ConfigError("cannot resolve ppl quantile without benign perplexities")
        ordered = sorted(benign_ppls)
        # linear interpolation, matching numpy's default quantile method
        pos = self.ppl_quantile * (len(ordered) - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, len(ordered) - 1)
        ceiling = ordered[lo] + (pos - lo) * (ordered[hi] - ordered[lo])
        return replace(self, ppl_max=ceiling, ppl_quantile=None)


@dataclass(frozen=True)
class QualityVerdict:
    accepted: bool
    ppl: float
    max_ngram_count: int
    reasons: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.accepted != (not self.reasons):
            raise ConfigError("verdict accepted flag must match empty reasons")


def max_repeated_ngram(text: str, n: int) -> int:
    """Maximum occurrence count over all whitespace-token n-grams (overlapping)."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    tokens = text.split()
    if len(tokens) < n:
        return 0
    counts = Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return max(counts.values())


class NgramLM:
    """Add-k smoothed bigram model with sentence markers and UNK.

    The prediction space is vocabulary + {UNK, EOS}; conditional probabilities
    sum to 1 over it for every context. Contexts never seen in training fall
    back to the smoothed unigram distribution.
    """

    def __init__(self, bigram_counts: Counter, context_counts: Counter, unigram_counts: Counter, vocab: frozenset, k: float):
        self._bigrams = bigram_counts
        self._contexts = context_counts
        self._unigrams = unigram_counts
        self.vocab = vocab
        self.k = k
        self._targets = len(vocab) + 2  # + UNK + EOS
        self._total_emitted = sum(unigram_counts.values())

    @property
    def order(self) -> int:
        return 2

    def _canon(self, token: str) -> str:
        return token if token in self.vocab or token in (BOS, EOS) else UNK

    def prob(self, token: str, context: str) -> float:
        """P(token | context) with add-k smoothing; tokens outside vocab map to UNK."""
        token = self._canon(token)
        context = self._canon(context)
        denom = self._contexts.get(context, 0)
        if denom == 0:
            # unseen context (e.g. UNK): smoothed unigram fallback
            return (self._unigrams.get(token, 0) + self.k) / (self._total_emitted + self.k * self._targets)
        return (self._bigrams.get((context, token), 0) + self.k) / (denom + self.k * self._targets)

    def log_prob_sequence(self, tokens: Sequence[str]) -> float:
        context = BOS
        total = 0.0
        for token in list(tokens) + [EOS]:
            total += math.log(self.prob(token, context))
            context = token
        return total

    def perplexity(self, text: str) -> float:
        tokens = text.split()
        if not tokens:
            raise ConfigError("perplexity needs non-empty text")
        t = len(tokens) + 1  # includes the end marker
        return math.exp(-self.log_prob_sequence(tokens) / t)


def train_lm(corpus_texts: Sequence[str], k: float = 1.0) -> NgramLM:
    """Fit the add-k bigram model over whitespace tokens of the given texts."""
    if not corpus_texts:
        raise ConfigError("cannot train a language model on an empty corpus")
    if k <= 0:
        raise ConfigError("smoothing constant k must be > 0")
    bigrams: Counter = Counter()
    contexts: Counter = Counter()
    unigrams: Counter = Counter()
    vocab: set[str] = set()
    for text in corpus_texts:
        tokens = text.split()
        vocab.update(tokens)
        context = BOS
        for token in tokens + [EOS]:
            bigrams[(context, token)] += 1
            contexts[context] += 1
            unigrams[token] += 1
            context = token
    return NgramLM(bigrams, contexts, unigrams, frozenset(vocab), k)


class ExternalScorer:
    """Perplexity via a remote endpoint: POST {text} -> {ppl}."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def perplexity(self, text: str) -> float:
        if not text.split():
            raise ConfigError("perplexity needs non-empty text")
        try:
            response = requests.post(self.endpoint, json={"text": text}, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise GenerationError(f"perplexity scorer unreachable: {exc}") from exc
        if response.status_code != 200:
            raise GenerationError(f"perplexity scorer HTTP {response.status_code}")
        return float(response.json()["ppl"])


def perplexity(text: str, scorer) -> float:
    """Perplexity of `text` under any scorer exposing .perplexity()."""
    return scorer.perplexity(text)


def check_quality(text: str, thresholds: QualityThresholds, scorer) -> QualityVerdict:
    """Accept iff the worst n-gram repetition and the perplexity are both under threshold."""
    if thresholds.ppl_max is None:
        raise ConfigError("thresholds carry an unresolved ppl quantile; call resolve() first")
    repeat = max_repeated_ngram(text, thresholds.ngram_n)
    ppl = scorer.perplexity(text)
    reasons: list[str] = []
    if repeat > thresholds.max_repeat:
        reasons.append("repetition")
    if ppl > thresholds.ppl_max:
        reasons.append("perplexity")
    return QualityVerdict(accepted=not reasons, ppl=ppl, max_ngram_count=repeat, reasons=tuple(reasons))
