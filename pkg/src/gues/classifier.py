"""Desk-scale source classifier and test-time-adaptation plug-ins.

A 3-block batch-norm CNN stands in for the frozen pre-trained grading
model: it is trained once on labeled source data with label-smoothed
cross-entropy, then its running statistics are frozen.  Two adaptation
plug-ins operate on it at test time, both using current-batch
normalization statistics:

* tent_step: minimizes mean prediction entropy, updating only the
  normalization affine parameters;
* shot_im_step: minimizes mean entropy minus the entropy of the
  batch-mean prediction, updating the feature extractor with the
  linear head frozen.

Both record the logits of the forward pass that produced the update,
i.e. predictions are made as the data arrives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import BatchNorm2d, Conv2d, Linear
from .rng import substream
from .tensor import (AdamState, MissingGradient, OptimizerState, Tensor, add,
                     adam_step, backward, log, mul, no_grad, relu, sgd_step,
                     softmax, tmean, tsum)

KEY_CLF_INIT = 31
KEY_TRAIN_ORDER = 32
KEY_AUGMENT = 33

NUM_CLASSES = 5


class SourceClassifier:
    """conv(3->16)-bn-relu / conv(16->32)-bn-relu / conv(32->64)-bn-relu,
    global average pool, linear head to 5 logits.  All convs are 3x3,
    stride 2, padding 1."""

    def __init__(self, seed: int = 0, num_classes: int = NUM_CLASSES):
        gen = substream(seed, KEY_CLF_INIT)
        self.num_classes = num_classes
        self.convs = [Conv2d(3, 16, gen=gen), Conv2d(16, 32, gen=gen),
                      Conv2d(32, 64, gen=gen)]
        self.bns = [BatchNorm2d(16), BatchNorm2d(32), BatchNorm2d(64)]
        self.head = Linear(64, num_classes, gen=gen)

    def forward(self, x: Tensor, stats: str = "running",
                update_running: bool = False) -> Tensor:
        h = x
        for conv, bn in zip(self.convs, self.bns):
            h = relu(bn(conv(h), stats=stats, update_running=update_running))
        pooled = tmean(h, axis=(2, 3))
        return self.head(pooled)

    def parameters(self):
        params = []
        for conv, bn in zip(self.convs, self.bns):
            params.extend(conv.parameters())
            params.extend(bn.parameters())
        params.extend(self.head.parameters())
        return params

    def feature_parameters(self):
        """Everything except the linear head (SHOT-IM's trainable set)."""
        params = []
        for conv, bn in zip(self.convs, self.bns):
            params.extend(conv.parameters())
            params.extend(bn.parameters())
        return params

    def norm_parameters(self):
        """Normalization affine parameters only (TENT's trainable set)."""
        params = []
        for bn in self.bns:
            params.extend(bn.parameters())
        return params

    def named_parameters(self):
        out = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            out.append((f"conv{i}.weight", conv.weight))
            out.append((f"conv{i}.bias", conv.bias))
            out.append((f"bn{i}.gamma", bn.gamma))
            out.append((f"bn{i}.beta", bn.beta))
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def named_buffers(self):
        out = []
        for i, bn in enumerate(self.bns, start=1):
            out.append((f"bn{i}.running_mean", bn.running_mean))
            out.append((f"bn{i}.running_var", bn.running_var))
        return out


def predict(model: SourceClassifier, batch: np.ndarray) -> np.ndarray:
    """Frozen-mode logits from running statistics; no graph recorded.

    Per-sample computation is independent of batch composition, so
    predictions are bitwise identical however the inputs are batched.
    Inputs are expected already clamped to [0, 1].
    """
    with no_grad():
        return model.forward(Tensor(np.asarray(batch, dtype=np.float64)),
                             stats="running").data


def smoothed_targets(labels: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    """(1 - s) * onehot + s / C."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    onehot = np.zeros((labels.size, num_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    return (1.0 - smoothing) * onehot + smoothing / num_classes


def smoothed_cross_entropy(logits: Tensor, labels: np.ndarray,
                           smoothing: float = 0.1) -> Tensor:
    """Mean over the batch of -sum_j target_j * log softmax(logits)_j."""
    targets = Tensor(smoothed_targets(labels, logits.shape[1], smoothing))
    log_probs = log(softmax(logits, axis=1))
    per_sample = tsum(mul(targets, log_probs), axis=1)
    return mul(tmean(per_sample), Tensor(-1.0))


def train_source(model: SourceClassifier, images: np.ndarray, labels: np.ndarray,
                 epochs: int = 20, batch_size: int = 64,
                 learning_rate: float = 2e-3, beta1: float = 0.9,
                 smoothing: float = 0.1, seed: int = 0) -> SourceClassifier:
    """Supervised training with label-smoothed cross-entropy.

    Optimized with Adam under a cosine learning-rate decay; each epoch
    draws a class-balanced resample of the training set (equal
    per-class quotas, with replacement) so minority grades keep enough
    gradient mass to earn their own decision regions.  Batches are
    photometrically jittered (global brightness, per-channel gain,
    pixel noise) so the learned grade signal tracks lesion structure
    instead of absolute intensity.  A final head-only refinement phase
    re-minimizes the same objective over the frozen features exactly as
    the deployed frozen model computes them (running statistics), which
    sharpens the decision boundaries the joint phase leaves loose.

    Batch statistics drive normalization and update the running
    estimates; after training the running statistics are frozen (no
    code path outside explicit training/adaptation touches them).
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if images.shape[0] == 0:
        raise ValueError("empty training set")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    params = model.parameters()
    opt = AdamState(params, learning_rate, beta1=beta1)
    n = images.shape[0]
    class_indices = [np.flatnonzero(labels == c) for c in range(NUM_CLASSES)]
    present = [idx for idx in class_indices if idx.size > 0]
    weights = np.ones(len(present), dtype=np.float64)
    raw = n * weights / weights.sum()
    quotas = np.floor(raw).astype(np.int64)
    # largest-remainder rounding keeps the epoch size exactly n
    for k in np.argsort(-(raw - quotas), kind="stable")[:n - int(quotas.sum())]:
        quotas[k] += 1
    batches_per_epoch = (n + batch_size - 1) // batch_size
    total_steps = max(epochs * batches_per_epoch, 1)
    step = 0
    for epoch in range(epochs):
        gen = substream(seed, KEY_TRAIN_ORDER, epoch)
        aug = substream(seed, KEY_AUGMENT, epoch)
        parts = [idx[gen.integers(0, idx.size, size=int(quotas[k]))]
                 for k, idx in enumerate(present)]
        order = np.concatenate(parts)[gen.permutation(n)]
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            # cosine decay to zero stabilizes the last epochs
            opt.learning_rate = learning_rate * 0.5 * (
                1.0 + np.cos(np.pi * step / total_steps))
            xb = images[idx]
            gain = 1.0 + 0.05 * (2.0 * aug.random((xb.shape[0], 3, 1, 1)) - 1.0)
            offset = 0.05 * (2.0 * aug.random((xb.shape[0], 1, 1, 1)) - 1.0)
            xb = np.clip(xb * gain + offset
                         + 0.01 * aug.standard_normal(xb.shape), 0.0, 1.0)
            logits = model.forward(Tensor(xb), stats="batch",
                                   update_running=True)
            loss = smoothed_cross_entropy(logits, labels[idx], smoothing)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}")
            backward(loss)
            adam_step(params, opt)
            step += 1
    _refine_head(model, images, labels, smoothing, batch_size)
    return model


def _refine_head(model: SourceClassifier, images: np.ndarray,
                 labels: np.ndarray, smoothing: float, batch_size: int,
                 scale: float = 6.0, steps: int = 50,
                 learning_rate: float = 5e-4) -> None:
    """Rebuild the head around the ordinal structure of the grades.

    Features come from the exact frozen-prediction path (running
    statistics), so the head is tuned for the model as it will be
    evaluated.  A ridge regression of the (scalar) grade onto the
    pooled features pools every sample into one direction, which
    generalizes far better than five independently learned logit rows;
    the head is then set so that logit_c = scale * (c*t - c*c/2) for
    the regressed grade estimate t, whose argmax thresholds t at the
    class midpoints.  A short cross-entropy descent from that
    initialization calibrates the logits without wandering off the
    ordinal solution.
    """
    feats = []
    with no_grad():
        for i in range(0, images.shape[0], batch_size):
            h = Tensor(images[i:i + batch_size])
            for conv, bn in zip(model.convs, model.bns):
                h = relu(bn(conv(h), stats="running"))
            feats.append(tmean(h, axis=(2, 3)).data)
    features = np.concatenate(feats, axis=0)
    a = np.hstack([features, np.ones((features.shape[0], 1))])
    target = labels.astype(np.float64)
    gram = a.T @ a
    gram += 1e-6 * np.trace(gram) / gram.shape[0] * np.eye(gram.shape[0])
    coef = np.linalg.solve(gram, a.T @ target)
    u, u0 = coef[:-1], coef[-1]
    classes = np.arange(model.num_classes, dtype=np.float64)
    model.head.weight.data = scale * np.outer(u, classes)
    model.head.bias.data = scale * (classes * u0 - classes * classes / 2.0)
    head_params = model.head.parameters()
    opt = AdamState(head_params, learning_rate)
    for _ in range(steps):
        loss = smoothed_cross_entropy(model.head(Tensor(features)), labels,
                                      smoothing)
        backward(loss)
        adam_step(head_params, opt)


def entropy(probabilities) -> float:
    """-sum p ln p with 0 ln 0 := 0; requires a distribution."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if np.any(p < 0.0):
        raise ValueError("negative probability")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    nonzero = p[p > 0.0]
    return float(-(nonzero * np.log(nonzero)).sum())


@dataclass
class TtaState:
    method: str                      # "tent" | "shot_im"
    model: "SourceClassifier"        # the classifier being adapted
    params: list                     # trainable subset, aliases model tensors
    opt: OptimizerState
    batch_size: int = 64


def make_tta_state(model: SourceClassifier, method: str,
                   learning_rate: float = 1e-3, momentum: float = 0.9,
                   batch_size: int = 64) -> TtaState:
    if method == "tent":
        params = model.norm_parameters()
    elif method == "shot_im":
        params = model.feature_parameters()
    else:
        raise ValueError(f"unknown TTA method {method!r}; use 'tent' or 'shot_im'")
    return TtaState(method=method, model=model, params=params,
                    opt=OptimizerState(params, learning_rate, momentum),
                    batch_size=batch_size)


def _mean_entropy(probs: Tensor) -> Tensor:
    log_probs = log(probs)
    per_sample = tsum(mul(probs, log_probs), axis=1)
    return mul(tmean(per_sample), Tensor(-1.0))


def tent_step(model: SourceClassifier, batch: np.ndarray, state: TtaState) -> np.ndarray:
    """One entropy-minimization step on normalization affine parameters.

    Forward uses current-batch statistics.  Returns the logits of that
    forward pass (the online predictions for this batch).
    """
    logits = model.forward(Tensor(np.asarray(batch, dtype=np.float64)), stats="batch")
    probs = softmax(logits, axis=1)
    loss = _mean_entropy(probs)
    if not np.isfinite(loss.data):
        raise RuntimeError("non-finite entropy loss in tent_step")
    backward(loss)
    # gradient reaches only the BN affine subset; clear the rest
    recorded = logits.data
    _step_subset(model, state)
    return recorded


def shot_im_step(model: SourceClassifier, batch: np.ndarray, state: TtaState) -> np.ndarray:
    """One information-maximization step: mean per-sample entropy minus
    the entropy of the batch-mean prediction; linear head frozen."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] < 2:
        raise ValueError("shot_im_step needs batch size >= 2 for the diversity term")
    logits = model.forward(Tensor(batch), stats="batch")
    probs = softmax(logits, axis=1)
    mean_probs = tmean(probs, axis=0)
    diversity_neg = tsum(mul(mean_probs, log(mean_probs)))   # equals -H(mean)
    loss = add(_mean_entropy(probs), diversity_neg)
    if not np.isfinite(loss.data):
        raise RuntimeError("non-finite information-maximization loss in shot_im_step")
    backward(loss)
    recorded = logits.data
    _step_subset(model, state)
    return recorded


def _step_subset(model: SourceClassifier, state: TtaState) -> None:
    """SGD over the state's subset; discard gradients accumulated on
    frozen parameters so they never leak into later steps."""
    trainable = {id(p) for p in state.params}
    for p in model.parameters():
        if id(p) not in trainable:
            p.grad = None
    for p in state.params:
        if p.grad is None:
            # parameters outside the forward path (possible for frozen
            # stats modes) contribute a zero update
            raise MissingGradient("trainable parameter missing from the graph")
    sgd_step(state.params, state.opt)


def clone_classifier(model: SourceClassifier) -> SourceClassifier:
    """Independent copy (parameters and running statistics)."""
    clone = SourceClassifier(seed=0, num_classes=model.num_classes)
    for (_, src), (_, dst) in zip(model.named_parameters(), clone.named_parameters()):
        dst.data = src.data.copy()
    for bn_src, bn_dst in zip(model.bns, clone.bns):
        bn_dst.running_mean = bn_src.running_mean.copy()
        bn_dst.running_var = bn_src.running_var.copy()
    return clone
