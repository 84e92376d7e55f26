"""Source classifier: prediction contracts, training objective, TTA steps."""

import numpy as np
import pytest

from gues.classifier import (SourceClassifier, clone_classifier, entropy,
                             make_tta_state, predict, shot_im_step,
                             smoothed_cross_entropy, smoothed_targets,
                             tent_step, train_source)
from gues.data import generate_retinatoy
from gues.rng import substream
from gues.tensor import Tensor


def toy_images(n, key=0):
    return substream(31, key).random((n, 3, 64, 64))


@pytest.fixture()
def fresh():
    return SourceClassifier(seed=5)


# ---------------------------------------------------------------------------
# architecture and frozen prediction


def test_architecture_shapes(fresh):
    assert len(fresh.convs) == 3 and len(fresh.bns) == 3
    assert fresh.head.weight.shape == (64, 5)
    logits = predict(fresh, toy_images(2))
    assert logits.shape == (2, 5)


def test_predict_is_pure(fresh):
    x = toy_images(2, key=1)
    assert predict(fresh, x).tobytes() == predict(fresh, x).tobytes()


def test_predict_allows_batch_of_one(fresh):
    assert predict(fresh, toy_images(1, key=2)).shape == (1, 5)


def test_predict_batch_composition_invariance(fresh):
    x = toy_images(6, key=3)
    whole = predict(fresh, x)
    alone = predict(fresh, x[2:3])
    assert whole[2].tobytes() == alone[0].tobytes()


# ---------------------------------------------------------------------------
# training objective


def test_smoothed_targets_formula():
    targets = smoothed_targets(np.array([1]), num_classes=5, smoothing=0.1)
    assert targets.shape == (1, 5)
    assert targets[0, 1] == pytest.approx(0.9 + 0.1 / 5, abs=1e-12)
    for j in (0, 2, 3, 4):
        assert targets[0, j] == pytest.approx(0.1 / 5, abs=1e-12)
    assert targets.sum() == pytest.approx(1.0, abs=1e-12)


def test_smoothed_ce_reduces_to_plain():
    logits = Tensor(np.array([[20.0, 0.0, 0.0, 0.0, 0.0]]))
    loss = smoothed_cross_entropy(logits, np.array([0]), smoothing=0.0)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-6)


def test_smoothed_ce_has_positive_floor():
    logits = Tensor(np.array([[30.0, 0.0, 0.0, 0.0, 0.0]]))
    loss = smoothed_cross_entropy(logits, np.array([0]), smoothing=0.1)
    assert float(loss.data) > 0.1


def test_smoothed_ce_matches_manual_computation():
    raw = np.array([[0.3, -0.1, 0.5, 0.0, 0.2]])
    labels = np.array([2])
    loss = smoothed_cross_entropy(Tensor(raw), labels, smoothing=0.1)
    log_probs = raw - np.log(np.exp(raw).sum())
    targets = np.full(5, 0.02)
    targets[2] += 0.9
    assert float(loss.data) == pytest.approx(-(targets * log_probs).sum(), abs=1e-9)


def test_train_source_learns_tiny_problem():
    gen = substream(31, 4)
    n = 40
    labels = np.arange(n) % 2 * 4                    # grades 0 and 4
    images = 0.2 + 0.02 * gen.random((n, 3, 64, 64))
    images[labels == 4] += 0.3
    model = SourceClassifier(seed=5)
    train_source(model, images, labels, epochs=3, batch_size=8, seed=0)
    preds = predict(model, images).argmax(axis=1)
    assert (preds == labels).mean() >= 0.9


def test_train_source_deterministic():
    gen = substream(31, 5)
    images = gen.random((16, 3, 64, 64))
    labels = np.arange(16) % 5

    def run():
        model = SourceClassifier(seed=5)
        train_source(model, images, labels, epochs=1, batch_size=8, seed=3)
        return np.concatenate([p.data.ravel() for p in model.parameters()])

    assert run().tobytes() == run().tobytes()


# ---------------------------------------------------------------------------
# entropy


def test_entropy_analytic_cases():
    assert entropy(np.full(5, 0.2)) == pytest.approx(np.log(5.0), abs=1e-12)
    assert entropy([1.0, 0.0, 0.0, 0.0, 0.0]) == 0.0
    assert entropy([0.5, 0.5, 0.0, 0.0, 0.0]) == pytest.approx(np.log(2.0), abs=1e-12)


def test_entropy_rejects_non_distribution():
    with pytest.raises(ValueError):
        entropy([0.5, 0.6])
    with pytest.raises(ValueError):
        entropy([-0.1, 1.1])


# ---------------------------------------------------------------------------
# test-time adaptation steps


def test_make_tta_state_rejects_unknown_method(fresh):
    with pytest.raises(ValueError):
        make_tta_state(fresh, "bn_only")


def test_tent_updates_only_norm_affine(fresh):
    model = clone_classifier(fresh)
    state = make_tta_state(model, "tent", learning_rate=0.05)
    before = {name: p.data.copy() for name, p in model.named_parameters()}
    logits = tent_step(model, toy_images(8, key=6), state)
    assert logits.shape == (8, 5)
    for name, p in model.named_parameters():
        if name.startswith("bn"):
            assert p.data.tobytes() != before[name].tobytes(), name
        else:
            assert p.data.tobytes() == before[name].tobytes(), name


def test_tent_one_hot_predictions_leave_parameters(fresh):
    # saturated predictions sit at the entropy minimum: zero gradient,
    # so the step moves nothing
    model = clone_classifier(fresh)
    x = toy_images(4, key=7)
    model.head.weight.data[...] = 0.0
    model.head.bias.data[...] = np.array([300.0, 0.0, 0.0, 0.0, 0.0])
    before = {name: p.data.copy() for name, p in model.named_parameters()}
    state = make_tta_state(model, "tent", learning_rate=1e-3)
    logits = tent_step(model, x, state)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    assert np.all(probs.max(axis=1) == 1.0)
    for name, p in model.named_parameters():
        assert p.data.tobytes() == before[name].tobytes(), name


def test_tent_entropy_trend_on_repeated_batch(fresh):
    model = clone_classifier(fresh)
    state = make_tta_state(model, "tent", learning_rate=1e-3)
    x = toy_images(16, key=8)
    entropies = []
    for _ in range(50):
        logits = tent_step(model, x, state)
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        entropies.append(np.mean([entropy(p) for p in probs]))
    moving = np.convolve(entropies, np.ones(10) / 10.0, mode="valid")
    assert moving[-1] < moving[0]
    assert np.all(np.diff(moving) <= 1e-4)


def test_shot_im_keeps_head_frozen(fresh):
    model = clone_classifier(fresh)
    state = make_tta_state(model, "shot_im", learning_rate=1e-3)
    before = {name: p.data.copy() for name, p in model.named_parameters()}
    for key in (9, 10, 11):
        shot_im_step(model, toy_images(8, key=key), state)
    assert model.head.weight.data.tobytes() == before["head.weight"].tobytes()
    assert model.head.bias.data.tobytes() == before["head.bias"].tobytes()
    feature_moved = any(p.data.tobytes() != before[name].tobytes()
                        for name, p in model.named_parameters()
                        if not name.startswith("head"))
    assert feature_moved


def test_shot_im_rejects_singleton_batch(fresh):
    model = clone_classifier(fresh)
    state = make_tta_state(model, "shot_im")
    with pytest.raises(ValueError):
        shot_im_step(model, toy_images(1, key=12), state)


def test_shot_im_diversity_ordering():
    # same per-sample sharpness; collapsed batch scores strictly worse
    # than one spread over all classes
    def im_loss(logits):
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        per_sample = np.mean([entropy(p) for p in probs])
        return per_sample - entropy(probs.mean(axis=0))

    collapsed = np.zeros((5, 5))
    collapsed[:, 0] = 30.0
    diverse = np.eye(5) * 30.0
    assert im_loss(collapsed) > im_loss(diverse)


def test_shot_im_objective_trend_on_repeated_batch(fresh):
    model = clone_classifier(fresh)
    state = make_tta_state(model, "shot_im", learning_rate=1e-3)
    x = toy_images(16, key=13)
    losses = []
    for _ in range(50):
        logits = shot_im_step(model, x, state)
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        per_sample = np.mean([entropy(p) for p in probs])
        losses.append(per_sample - entropy(probs.mean(axis=0)))
    moving = np.convolve(losses, np.ones(10) / 10.0, mode="valid")
    assert moving[-1] < moving[0]
    assert np.all(np.diff(moving) <= 1e-4)


def test_clone_is_independent(fresh):
    clone = clone_classifier(fresh)
    x = toy_images(2, key=14)
    assert predict(clone, x).tobytes() == predict(fresh, x).tobytes()
    clone.head.weight.data[...] += 1.0
    clone.bns[0].running_mean[...] += 1.0
    assert predict(clone, x).tobytes() != predict(fresh, x).tobytes()
    assert fresh.bns[0].running_mean[0] != clone.bns[0].running_mean[0]
