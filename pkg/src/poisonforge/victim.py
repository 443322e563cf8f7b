"""Desk-scale victim classifier: hashed bag-of-words multinomial logistic regression.

Features are lowercase whitespace unigrams and bigrams hashed with FNV-1a 64
folded to a power-of-two bucket mask, counted and L2-normalized. Training
minimizes average cross-entropy by mini-batch gradient descent with a fixed
learning rate; everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from poisonforge.corpus import LabeledExample
from poisonforge.errors import ConfigError
from poisonforge.hashing import fnv1a64

DEFAULT_FEATURE_DIM = 2**18
HASH_NAME = "fnv1a64"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 2.0
    batch: int = 32
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch size must be >= 1")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")


@dataclass
class VictimModel:
    weights: np.ndarray  # (feature_dim, n_classes)
    bias: np.ndarray  # (n_classes,)
    feature_dim: int
    labels: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.weights)) or not np.all(np.isfinite(self.bias)):
            raise ConfigError("model weights must be finite")

    def copy(self) -> "VictimModel":
        return VictimModel(self.weights.copy(), self.bias.copy(), self.feature_dim, self.labels, dict(self.meta))


@lru_cache(maxsize=1 << 20)
def _bucket(feature: str, mask: int) -> int:
    return fnv1a64(feature.encode("utf-8")) & mask


def featurize(text: str, feature_dim: int = DEFAULT_FEATURE_DIM) -> dict[int, float]:
    """Sparse L2-normalized count vector over hashed unigrams and bigrams."""
    if feature_dim <= 0 or feature_dim & (feature_dim - 1):
        raise ConfigError("feature_dim must be a power of two")
    tokens = text.lower().split()
    mask = feature_dim - 1
    counts: dict[int, float] = {}
    for token in tokens:
        b = _bucket(token, mask)
        counts[b] = counts.get(b, 0.0) + 1.0
    for first, second in zip(tokens, tokens[1:]):
        b = _bucket(f"{first} {second}", mask)
        counts[b] = counts.get(b, 0.0) + 1.0
    norm = np.sqrt(sum(v * v for v in counts.values()))
    if norm > 0:
        counts = {b: v / norm for b, v in counts.items()}
    return counts


def featurize_matrix(texts: Sequence[str], feature_dim: int = DEFAULT_FEATURE_DIM) -> sparse.csr_matrix:
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for text in texts:
        vec = featurize(text, feature_dim)
        for b in sorted(vec):
            indices.append(b)
            data.append(vec[b])
        indptr.append(len(indices))
    return sparse.csr_matrix((data, indices, indptr), shape=(len(texts), feature_dim))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def loss_and_grad(weights: np.ndarray, bias: np.ndarray, x, y_idx: np.ndarray, l2: float = 0.0):
    """Mean cross-entropy (+ 0.5*l2*||W||^2) and its analytic gradient.

    `x` may be dense or scipy-sparse with shape (n, feature_dim). This is the
    reference gradient the finite-difference check runs against; the training
    loop applies the same formula through a sparse fast path.
    """
    n = x.shape[0]
    logits = x @ weights + bias
    probs = _softmax(logits)
    picked = probs[np.arange(n), y_idx]
    loss = -np.log(picked).mean() + 0.5 * l2 * float((weights * weights).sum())
    grad_logits = probs.copy()
    grad_logits[np.arange(n), y_idx] -= 1.0
    grad_logits /= n
    if sparse.issparse(x):
        grad_w = np.asarray((x.T @ grad_logits)) + l2 * weights
    else:
        grad_w = x.T @ grad_logits + l2 * weights
    grad_b = grad_logits.sum(axis=0)
    return loss, grad_w, grad_b


def _sgd_step(weights: np.ndarray, bias: np.ndarray, xb: sparse.csr_matrix, y_idx: np.ndarray, lr: float, l2: float) -> None:
    """One in-place GD step; touches only the weight rows active in the batch."""
    n = xb.shape[0]
    logits = xb @ weights + bias
    grad_logits = _softmax(logits)
    grad_logits[np.arange(n), y_idx] -= 1.0
    grad_logits /= n
    row_of_nz = np.repeat(np.arange(n), np.diff(xb.indptr))
    contrib = xb.data[:, None] * grad_logits[row_of_nz]
    if l2 > 0.0:
        weights *= 1.0 - lr * l2
    np.subtract.at(weights, xb.indices, lr * contrib)
    bias -= lr * grad_logits.sum(axis=0)


def train(
    dataset: Sequence[LabeledExample],
    cfg: TrainConfig,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    labels: Sequence[str] | None = None,
) -> VictimModel:
    """Fit the classifier by minimizing average cross-entropy over the split."""
    if cfg.epochs < 1:
        raise ConfigError("training needs epochs >= 1")
    if labels is None:
        labels = sorted({ex.label for ex in dataset})
    labels = tuple(labels)
    if len(labels) < 2:
        raise ConfigError(f"training needs >= 2 classes, got {labels}")
    label_to_idx = {label: i for i, label in enumerate(labels)}
    try:
        y_idx = np.array([label_to_idx[ex.label] for ex in dataset], dtype=np.int64)
    except KeyError as exc:
        raise ConfigError(f"example label {exc} not in label set {labels}") from exc

    x = featurize_matrix([ex.text for ex in dataset], feature_dim)
    weights = np.zeros((feature_dim, len(labels)), dtype=np.float64)
    bias = np.zeros(len(labels), dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            batch = order[start : start + cfg.batch]
            _sgd_step(weights, bias, x[batch], y_idx[batch], cfg.lr, cfg.l2)
    meta = {"epochs": cfg.epochs, "lr": cfg.lr, "batch": cfg.batch, "l2": cfg.l2, "seed": cfg.seed}
    return VictimModel(weights=weights, bias=bias, feature_dim=feature_dim, labels=labels, meta=meta)


def continue_fine_tune(model: VictimModel, dataset: Sequence[LabeledExample], cfg: TrainConfig) -> VictimModel:
    """Extra epochs on benign-only data starting from the poisoned parameters."""
    tuned = model.copy()
    if cfg.epochs == 0:
        return tuned
    label_to_idx = {label: i for i, label in enumerate(model.labels)}
    try:
        y_idx = np.array([label_to_idx[ex.label] for ex in dataset], dtype=np.int64)
    except KeyError as exc:
        raise ConfigError(f"example label {exc} not in model label set {model.labels}") from exc
    x = featurize_matrix([ex.text for ex in dataset], model.feature_dim)
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            batch = order[start : start + cfg.batch]
            _sgd_step(tuned.weights, tuned.bias, x[batch], y_idx[batch], cfg.lr, cfg.l2)
    tuned.meta = dict(tuned.meta, cft_epochs=cfg.epochs, cft_lr=cfg.lr, cft_seed=cfg.seed)
    return tuned


def predict_proba(model: VictimModel, text: str) -> np.ndarray:
    vec = featurize(text, model.feature_dim)
    logits = model.bias.copy()
    for b, v in vec.items():
        logits += v * model.weights[b]
    return _softmax(logits)


def predict(model: VictimModel, text: str) -> tuple[str, np.ndarray]:
    """Argmax label (ties broken by label order) plus per-class probabilities."""
    probs = predict_proba(model, text)
    return model.labels[int(np.argmax(probs))], probs


def predict_batch(model: VictimModel, texts: Sequence[str]) -> list[str]:
    x = featurize_matrix(list(texts), model.feature_dim)
    logits = x @ model.weights + model.bias
    return [model.labels[i] for i in np.argmax(logits, axis=1)]


def save_model(model: VictimModel, path: str | Path) -> None:
    header = json.dumps({"feature_dim": model.feature_dim, "labels": list(model.labels), "hash": HASH_NAME, "meta": model.meta})
    np.savez_compressed(path, weights=model.weights, bias=model.bias, header=np.frombuffer(header.encode("utf-8"), dtype=np.uint8))


def load_model(path: str | Path) -> VictimModel:
    blob = np.load(path)
    header = json.loads(bytes(blob["header"]).decode("utf-8"))
    if header["hash"] != HASH_NAME:
        raise ConfigError(f"model was hashed with {header['hash']!r}, expected {HASH_NAME!r}")
    return VictimModel(
        weights=blob["weights"],
        bias=blob["bias"],
        feature_dim=int(header["feature_dim"]),
        labels=tuple(header["labels"]),
        meta=header.get("meta", {}),
    )
