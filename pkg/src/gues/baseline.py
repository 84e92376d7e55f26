"""Iterative unadversarial-example baseline.

Per-image sign-gradient optimization of an additive perturbation that
makes a frozen classifier's cross-entropy on the true label smaller.
This is the classical reference point the learned generator is measured
against: slow (one optimization per image, labels required) but simple.

The update is

    delta_{k+1} = delta_k - alpha * sign(grad_x CE(f(x + delta_k), y))

i.e. descent on the loss; the ascent form (+ alpha) is available behind
a flag for fidelity experiments.  sign(0) = 0, so each step moves every
coordinate by exactly 0 or +-alpha before the optional clamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .classifier import SourceClassifier, smoothed_cross_entropy
from .metrics import accuracy, confusion
from .model import KEY_ADAPT_NOISE, GuesModel, generate
from .rng import BoxMuller, substream, uniform
from .tensor import Tensor, backward

KEY_DELTA0 = 41

INIT_SCALE = 0.01


@dataclass
class IterativeConfig:
    step_alpha: float = 0.005
    iterations: int = 20
    epsilon: float | None = None     # per-element clamp bound, off by default
    seed: int = 0
    ascend: bool = False             # printed ascent form; descent is the default

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.step_alpha > 0:
            raise ValueError(f"step_alpha must be positive, got {self.step_alpha}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive when set, got {self.epsilon}")


def _as_nchw(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:                       # single HWC image
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
    return np.transpose(images, (0, 3, 1, 2))


def _input_gradient(classifier: SourceClassifier, x_nchw: np.ndarray,
                    labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean plain cross-entropy with respect to the input.

    The classifier runs on frozen running statistics, so per-sample
    gradients are independent of batch composition; only the positive
    1/N factor differs from a per-sample run, which sign() erases.
    """
    xt = Tensor(x_nchw, requires_grad=True)
    logits = classifier.forward(xt, stats="running")
    loss = smoothed_cross_entropy(logits, labels, smoothing=0.0)
    if not np.isfinite(loss.data):
        raise RuntimeError("non-finite classifier loss in baseline gradient")
    backward(loss)
    g = xt.grad
    if g is None or not np.all(np.isfinite(g)):
        raise RuntimeError("non-finite input gradient in baseline step")
    for p in classifier.parameters():
        p.grad = None                          # the classifier stays frozen
    return g


def unadv_step(x: np.ndarray, delta_k: np.ndarray, classifier: SourceClassifier,
               y: int, cfg: IterativeConfig) -> np.ndarray:
    """One sign-gradient step for a single (H, W, 3) image."""
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    delta_k = np.asarray(delta_k, dtype=np.float64)
    if delta_k.shape != x.shape:
        raise ValueError(f"delta shape {delta_k.shape} != image shape {x.shape}")
    g = _input_gradient(classifier, _as_nchw(x + delta_k),
                        np.asarray([y], dtype=np.int64))
    g_hwc = np.transpose(g, (0, 2, 3, 1))[0]
    direction = 1.0 if cfg.ascend else -1.0
    delta = delta_k + direction * cfg.step_alpha * np.sign(g_hwc)
    if cfg.epsilon is not None:
        delta = np.clip(delta, -cfg.epsilon, cfg.epsilon)
    return delta


def _initial_deltas(shape: tuple, n: int, seed: int) -> np.ndarray:
    deltas = np.empty((n,) + shape)
    for i in range(n):
        gen = substream(seed, KEY_DELTA0, i)
        deltas[i] = uniform(gen, -INIT_SCALE, INIT_SCALE, shape)
    return deltas


def optimize_unadversarial_batch(images: np.ndarray, labels: np.ndarray,
                                 classifier: SourceClassifier,
                                 cfg: IterativeConfig) -> np.ndarray:
    """Vectorized driver: independent per-sample optimizations run as one
    batched graph.  Sample i's trajectory is identical to a lone
    optimize_unadversarial call on (images[i], labels[i]) with the same
    seed and index, because frozen statistics decouple the samples."""
    cfg.validate()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if images.ndim != 4 or images.shape[0] != labels.shape[0]:
        raise ValueError(f"images {images.shape} vs labels {labels.shape}")
    deltas = _initial_deltas(images.shape[1:], images.shape[0], cfg.seed)
    direction = 1.0 if cfg.ascend else -1.0
    for _ in range(cfg.iterations):
        g = _input_gradient(classifier, _as_nchw(images + deltas), labels)
        deltas = deltas + direction * cfg.step_alpha * np.sign(
            np.transpose(g, (0, 2, 3, 1)))
        if cfg.epsilon is not None:
            deltas = np.clip(deltas, -cfg.epsilon, cfg.epsilon)
    return deltas


def optimize_unadversarial(x: np.ndarray, y: int, classifier: SourceClassifier,
                           cfg: IterativeConfig) -> np.ndarray:
    """K sign-gradient steps from seeded delta_0 ~ uniform(-0.01, 0.01)."""
    x = np.asarray(x, dtype=np.float64)
    return optimize_unadversarial_batch(x[None], np.asarray([y]), classifier, cfg)[0]


def initial_delta(x: np.ndarray, seed: int, index: int = 0) -> np.ndarray:
    """The delta_0 a given optimization starts from (for loss-decrease checks)."""
    return _initial_deltas(np.asarray(x).shape, index + 1, seed)[index]


def per_sample_cross_entropy(classifier: SourceClassifier, images: np.ndarray,
                             labels: np.ndarray) -> np.ndarray:
    """Plain per-sample CE under frozen statistics; evaluation only."""
    from .classifier import predict
    logits = predict(classifier, _as_nchw(images))
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return -log_probs[np.arange(labels.size), labels]


@dataclass
class ComparisonTestbed:
    """Held-out labeled shifted set plus the two perturbation sources.

    Labels appear here only as a theory-verification oracle; the online
    adaptation path never sees them.
    """
    classifier: SourceClassifier
    gues_model: GuesModel
    images: np.ndarray               # (N, H, W, 3) shifted held-out images
    labels: np.ndarray               # (N,)
    config: IterativeConfig = field(default_factory=IterativeConfig)
    seeds: tuple = (0, 1, 2, 3, 4)


@dataclass
class ComparisonReport:
    rows: list                       # (condition, seed, accuracy)
    tolerance_points: float = 0.5

    def accuracies(self, condition: str) -> list:
        return [acc for cond, _, acc in self.rows if cond == condition]

    def median(self, condition: str) -> float:
        values = self.accuracies(condition)
        if not values:
            raise KeyError(f"no rows for condition {condition!r}")
        return float(np.median(values))

    def to_csv(self) -> str:
        lines = ["condition,seed,accuracy"]
        for cond, seed, acc in self.rows:
            lines.append(f"{cond},{seed},{acc:.6f}")
        return "\n".join(lines) + "\n"


def _accuracy_on(classifier: SourceClassifier, images: np.ndarray,
                 labels: np.ndarray) -> float:
    from .classifier import predict
    logits = predict(classifier, _as_nchw(images))
    return accuracy(confusion(labels, logits.argmax(axis=1),
                              classifier.num_classes))


def compare_generative_vs_iterative(testbed: ComparisonTestbed) -> ComparisonReport:
    """Accuracy of the frozen classifier on plain inputs, iteratively
    perturbed inputs, and generator-perturbed inputs, per seed.

    Checks that neither perturbed condition falls more than half an
    accuracy point below plain, in the median over seeds.
    """
    images = np.asarray(testbed.images, dtype=np.float64)
    labels = np.asarray(testbed.labels, dtype=np.int64).reshape(-1)
    plain_acc = _accuracy_on(testbed.classifier, images, labels)
    rows = []
    latent_dim = testbed.gues_model.latent_dim
    for seed in testbed.seeds:
        cfg = replace(testbed.config, seed=seed)
        deltas = optimize_unadversarial_batch(images, labels, testbed.classifier, cfg)
        iter_acc = _accuracy_on(testbed.classifier, images + deltas, labels)
        noise = BoxMuller(substream(seed, KEY_ADAPT_NOISE)).normal(
            (images.shape[0], latent_dim))
        example = generate(testbed.gues_model, _as_nchw(images), noise)
        gues_images = np.transpose(example.x_hat, (0, 2, 3, 1))
        gues_acc = _accuracy_on(testbed.classifier, gues_images, labels)
        rows.append(("plain", seed, plain_acc))
        rows.append(("iterative", seed, iter_acc))
        rows.append(("gues", seed, gues_acc))
    report = ComparisonReport(rows=rows)
    margin = report.tolerance_points / 100.0
    for condition in ("iterative", "gues"):
        if report.median(condition) < plain_acc - margin:
            raise RuntimeError(
                f"{condition} median accuracy {report.median(condition):.4f} fell "
                f"more than {report.tolerance_points} points below plain {plain_acc:.4f}")
    return report
