import math

import numpy as np
import pytest
from scipy import sparse

from poisonforge.corpus import LabeledExample
from poisonforge.errors import ConfigError
from poisonforge.victim import (
    TrainConfig,
    VictimModel,
    continue_fine_tune,
    featurize,
    featurize_matrix,
    load_model,
    loss_and_grad,
    predict,
    predict_batch,
    save_model,
    train,
    _sgd_step,
)


def reference_fnv1a64(data: bytes) -> int:
    """Independent re-derivation from the published constants."""
    h = 14695981039346656037
    for byte in data:
        h = ((h ^ byte) * 1099511628211) % 2**64
    return h


def toy_dataset(n_per_class=50):
    examples = []
    for i in range(n_per_class):
        examples.append(LabeledExample(f"a{i}", "aa", "A"))
        examples.append(LabeledExample(f"b{i}", "bb", "B"))
    return examples


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------


def test_featurize_empty_is_zero_vector():
    assert featurize("", 2**10) == {}


def test_featurize_hand_hash():
    dim = 2**10
    vec = featurize("a a", dim)
    uni_bucket = reference_fnv1a64(b"a") % dim
    bi_bucket = reference_fnv1a64(b"a a") % dim
    assert set(vec) == {uni_bucket, bi_bucket}
    # counts 2 (unigram "a" twice) and 1 (bigram), then L2 normalization
    norm = math.sqrt(2**2 + 1**2)
    assert vec[uni_bucket] == pytest.approx(2 / norm)
    assert vec[bi_bucket] == pytest.approx(1 / norm)


def test_featurize_unit_norm_and_purity():
    vec = featurize("Some MiXeD case text here", 2**14)
    assert math.sqrt(sum(v * v for v in vec.values())) == pytest.approx(1.0)
    assert vec == featurize("some mixed case text here", 2**14)  # lowercased
    assert vec == featurize("Some MiXeD case text here", 2**14)  # pure


def test_featurize_requires_power_of_two():
    with pytest.raises(ConfigError):
        featurize("x", 1000)


# ---------------------------------------------------------------------------
# gradient correctness
# ---------------------------------------------------------------------------


def test_gradient_matches_central_finite_differences_100_instances():
    rng = np.random.default_rng(4242)
    eps = 1e-6
    worst = 0.0
    for _ in range(100):
        n, d, c = rng.integers(2, 7), rng.integers(2, 8), rng.integers(2, 5)
        x = rng.normal(size=(n, d))
        y = rng.integers(0, c, size=n)
        w = rng.normal(scale=0.5, size=(d, c))
        b = rng.normal(scale=0.5, size=c)
        l2 = float(rng.choice([0.0, 0.01, 0.1]))
        _, grad_w, grad_b = loss_and_grad(w, b, x, y, l2)
        for arr, grad in ((w, grad_w), (b, grad_b)):
            flat = arr.ravel()
            for idx in range(flat.size):
                original = flat[idx]
                flat[idx] = original + eps
                up = loss_and_grad(w, b, x, y, l2)[0]
                flat[idx] = original - eps
                down = loss_and_grad(w, b, x, y, l2)[0]
                flat[idx] = original
                numeric = (up - down) / (2 * eps)
                analytic = grad.ravel()[idx]
                scale = max(abs(numeric), abs(analytic), 1e-8)
                worst = max(worst, abs(numeric - analytic) / scale)
    assert worst < 1e-5


def test_sgd_step_equals_reference_gradient_step():
    rng = np.random.default_rng(7)
    x = sparse.random(6, 16, density=0.4, random_state=3, format="csr")
    y = rng.integers(0, 3, size=6)
    for l2 in (0.0, 0.05):
        w0 = rng.normal(size=(16, 3))
        b0 = rng.normal(size=3)
        _, grad_w, grad_b = loss_and_grad(w0, b0, x, y, l2)
        w1, b1 = w0 - 0.1 * grad_w, b0 - 0.1 * grad_b
        w2, b2 = w0.copy(), b0.copy()
        _sgd_step(w2, b2, x, y, lr=0.1, l2=l2)
        np.testing.assert_allclose(w2, w1, atol=1e-12)
        np.testing.assert_allclose(b2, b1, atol=1e-12)


def test_full_batch_loss_non_increasing_small_lr():
    examples = toy_dataset()
    labels = ("A", "B")
    x = featurize_matrix([ex.text for ex in examples], 2**10)
    y = np.array([0 if ex.label == "A" else 1 for ex in examples])
    w = np.zeros((2**10, 2))
    b = np.zeros(2)
    losses = []
    for _ in range(40):
        loss, grad_w, grad_b = loss_and_grad(w, b, x, y, 0.0)
        losses.append(loss)
        w -= 0.01 * np.asarray(grad_w)
        b -= 0.01 * grad_b
    assert all(a >= b_ for a, b_ in zip(losses, losses[1:]))


# ---------------------------------------------------------------------------
# training behaviour
# ---------------------------------------------------------------------------


def test_separable_toy_set_reaches_full_accuracy():
    examples = toy_dataset()
    model = train(examples, TrainConfig(epochs=5, lr=0.5, batch=8, seed=1), feature_dim=2**10)
    preds = predict_batch(model, [ex.text for ex in examples])
    accuracy = sum(p == ex.label for p, ex in zip(preds, examples)) / len(examples)
    assert accuracy == 1.0
    assert predict(model, "aa")[0] == "A"


def test_zero_lr_keeps_initialization():
    model = train(toy_dataset(), TrainConfig(epochs=3, lr=0.0, batch=8, seed=0), feature_dim=2**8)
    assert not model.weights.any()
    assert not model.bias.any()


def test_training_is_bitwise_deterministic():
    cfg = TrainConfig(epochs=3, lr=0.3, batch=16, seed=123)
    a = train(toy_dataset(), cfg, feature_dim=2**10)
    b = train(toy_dataset(), cfg, feature_dim=2**10)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.bias, b.bias)


def test_single_class_dataset_rejected():
    with pytest.raises(ConfigError, match="2 classes"):
        train([LabeledExample("a", "x", "only")], TrainConfig(epochs=1))


def test_zero_weight_model_breaks_ties_by_label_order():
    model = VictimModel(np.zeros((2**8, 3)), np.zeros(3), 2**8, ("first", "second", "third"))
    label, probs = predict(model, "anything at all")
    assert label == "first"
    np.testing.assert_allclose(probs, np.ones(3) / 3, atol=1e-12)


def test_probabilities_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(5)
    model = VictimModel(rng.normal(size=(2**8, 3)), rng.normal(size=3), 2**8, ("a", "b", "c"))
    label, probs = predict(model, "some words here")
    assert probs.sum() == pytest.approx(1.0, abs=1e-9)
    shifted = VictimModel(model.weights, model.bias + 7.5, 2**8, model.labels)
    label2, probs2 = predict(shifted, "some words here")
    assert label2 == label
    np.testing.assert_allclose(probs2, probs, atol=1e-12)


def test_continue_fine_tune_zero_epochs_identity():
    model = train(toy_dataset(), TrainConfig(epochs=2, lr=0.5, batch=8, seed=2), feature_dim=2**8)
    tuned = continue_fine_tune(model, toy_dataset(), TrainConfig(epochs=0, lr=0.5, batch=8, seed=2))
    assert np.array_equal(tuned.weights, model.weights)
    assert np.array_equal(tuned.bias, model.bias)


def test_train_requires_at_least_one_epoch():
    with pytest.raises(ConfigError):
        train(toy_dataset(), TrainConfig(epochs=0))


def test_model_save_load_round_trip(tmp_path):
    model = train(toy_dataset(), TrainConfig(epochs=2, lr=0.5, batch=8, seed=3), feature_dim=2**8)
    path = tmp_path / "victim.npz"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.labels == model.labels
    assert loaded.feature_dim == model.feature_dim
    np.testing.assert_array_equal(loaded.weights, model.weights)
    np.testing.assert_array_equal(loaded.bias, model.bias)
    assert predict(loaded, "aa")[0] == predict(model, "aa")[0]
