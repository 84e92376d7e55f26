"""The perturbation generator: a small convolutional VAE adapted online.

The generator learns, over a single pass of unlabeled target batches,
to emit an additive perturbation delta for each image; the
unadversarial example x_hat = x + delta is what downstream classifiers
see.  Supervision is the image's own center-surround saliency map (a
pseudo-perturbation label), combined with a KL pull of the approximate
posterior toward the standard normal:

    loss = alpha * KL(q(z|x) || N(0, I)) + beta * mean((x_hat - g)^2)

The decoder's final layer starts at zero, so adaptation begins from the
identity mapping and early predictions match the frozen source model
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Conv2d, ConvTranspose2d, Linear
from .rng import normal_stream, substream
from .saliency import saliency_target_batch
from .tensor import (OptimizerState, ShapeMismatch, Tensor, add, backward,
                     exp, leaky_relu, mul, no_grad, reshape, sgd_step, sub,
                     tanh, tmean, tsum)

KEY_MODEL_INIT = 21
KEY_ADAPT_NOISE = 22

# Reference batch size for per-sample-equalized updates: each SGD step
# uses learning_rate * (batch_len / REFERENCE_BATCH), so total parameter
# movement over a stream is invariant to how the stream is batched.
REFERENCE_BATCH = 64


@dataclass
class GuesConfig:
    alpha: float = 1.0
    beta: float = 1.0
    learning_rate: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    steps_per_batch: int = 1

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps_per_batch < 1:
            raise ValueError("steps_per_batch must be >= 1")


@dataclass
class LatentGaussian:
    """Per-sample posterior parameters, shape (N, latent_dim) each."""
    mu: Tensor
    log_var: Tensor


@dataclass
class UnadversarialExample:
    x: np.ndarray
    delta: np.ndarray
    x_hat: np.ndarray          # x + delta, single float addition per element


class GuesModel:
    """Encoder (4 convs + two linear heads) and decoder (linear + 4
    transposed convs, tanh output): eight convolutional layers total.

    Built for one fixed image size (default 64x64; both extents must be
    divisible by 16 for the four stride-2 stages).
    """

    def __init__(self, image_hw=(64, 64), latent_dim: int = 10, seed: int = 0):
        h, w = image_hw
        if h % 16 or w % 16:
            raise ShapeMismatch(f"image size {image_hw} must be divisible by 16")
        self.image_hw = (h, w)
        self.latent_dim = latent_dim
        self.seed = seed
        gen = substream(seed, KEY_MODEL_INIT)
        self.enc = [Conv2d(3, 16, gen=gen), Conv2d(16, 32, gen=gen),
                    Conv2d(32, 64, gen=gen), Conv2d(64, 64, gen=gen)]
        feat = 64 * (h // 16) * (w // 16)
        self._feat_shape = (64, h // 16, w // 16)
        self.mu_head = Linear(feat, latent_dim, gen=gen)
        self.log_var_head = Linear(feat, latent_dim, gen=gen)
        self.latent_proj = Linear(latent_dim, feat, gen=gen)
        self.dec = [ConvTranspose2d(64, 64, gen=gen), ConvTranspose2d(64, 32, gen=gen),
                    ConvTranspose2d(32, 16, gen=gen),
                    ConvTranspose2d(16, 3, gen=gen, zero_init=True)]

    def parameters(self):
        params = []
        for layer in (*self.enc, self.mu_head, self.log_var_head, self.latent_proj, *self.dec):
            params.extend(layer.parameters())
        return params

    def named_parameters(self):
        names = [f"enc{i + 1}" for i in range(4)]
        names += ["mu_head", "log_var_head", "latent_proj"]
        names += [f"dec{i + 1}" for i in range(4)]
        layers = [*self.enc, self.mu_head, self.log_var_head, self.latent_proj, *self.dec]
        out = []
        for name, layer in zip(names, layers):
            out.append((f"{name}.weight", layer.weight))
            out.append((f"{name}.bias", layer.bias))
        return out

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected (N, 3, H, W) batch, got {x.shape}")
        if (x.shape[2], x.shape[3]) != self.image_hw:
            raise ShapeMismatch(
                f"model built for {self.image_hw}, got {(x.shape[2], x.shape[3])}")

    def encode(self, x: Tensor) -> LatentGaussian:
        self._check_input(x)
        h = x
        for conv in self.enc:
            h = leaky_relu(conv(h), 0.2)
        flat = reshape(h, (x.shape[0], -1))
        return LatentGaussian(mu=self.mu_head(flat), log_var=self.log_var_head(flat))

    def decode(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeMismatch(f"expected (N, {self.latent_dim}) latents, got {z.shape}")
        h = leaky_relu(self.latent_proj(z), 0.2)
        h = reshape(h, (z.shape[0], *self._feat_shape))
        for deconv in self.dec[:-1]:
            h = leaky_relu(deconv(h), 0.2)
        return tanh(self.dec[-1](h))


def reparameterize(q: LatentGaussian, noise) -> Tensor:
    """z = mu + exp(0.5 * log_var) * noise; gradient reaches mu and
    log_var only (noise is a constant leaf)."""
    noise = noise if isinstance(noise, Tensor) else Tensor(noise)
    if noise.shape != q.mu.shape:
        raise ShapeMismatch(f"noise shape {noise.shape} != mu shape {q.mu.shape}")
    sigma = exp(mul(q.log_var, Tensor(0.5)))
    return add(q.mu, mul(sigma, noise))


def generate(model: GuesModel, x: np.ndarray, noise: np.ndarray) -> UnadversarialExample:
    """Forward pass without recording; returns arrays for emission."""
    with no_grad():
        xt = Tensor(np.asarray(x, dtype=np.float64))
        q = model.encode(xt)
        delta = model.decode(reparameterize(q, noise))
        x_hat = add(xt, delta)
    return UnadversarialExample(x=xt.data, delta=delta.data, x_hat=x_hat.data)


def kl_loss(q: LatentGaussian) -> Tensor:
    """Batch mean of 0.5 * sum_d(mu^2 + exp(log_var) - log_var - 1)."""
    term = sub(add(mul(q.mu, q.mu), exp(q.log_var)), add(q.log_var, Tensor(1.0)))
    per_sample = mul(tsum(term, axis=1), Tensor(0.5))
    return tmean(per_sample)


def recon_loss(x_hat: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if x_hat.shape != target.shape:
        raise ShapeMismatch(f"x_hat {x_hat.shape} vs target {target.shape}")
    diff = sub(x_hat, target)
    return tmean(mul(diff, diff))


def gues_loss(q: LatentGaussian, x_hat: Tensor, target: Tensor,
              config: GuesConfig) -> Tensor:
    """alpha * KL + beta * reconstruction."""
    return add(mul(Tensor(config.alpha), kl_loss(q)),
               mul(Tensor(config.beta), recon_loss(x_hat, target)))


@dataclass
class AdaptReport:
    """Loss trajectory of one online pass."""
    rows: list = field(default_factory=list)   # (step, batch_index, kl, mse, total)
    num_batches: int = 0
    num_samples: int = 0
    emit: str = "pre"

    @property
    def final_loss(self):
        return self.rows[-1][4] if self.rows else None


class GuesAdapter:
    """Stateful per-batch engine shared by adapt_stream and the
    GUES+TTA combinations: owns the optimizer, the noise stream, and
    the loss trajectory."""

    def __init__(self, model: GuesModel, config: GuesConfig, emit: str = "pre"):
        if emit not in ("pre", "post"):
            raise ValueError(f"emit must be 'pre' or 'post', got {emit!r}")
        config.validate()
        self.model = model
        self.config = config
        self.emit = emit
        self.opt = OptimizerState(model.parameters(), config.learning_rate,
                                  config.momentum)
        self.noise = normal_stream(config.seed, KEY_ADAPT_NOISE)
        self.report = AdaptReport(emit=emit)

    def process_batch(self, batch_index: int, x: np.ndarray) -> np.ndarray:
        """Saliency targets, forward, loss, SGD step(s); returns the
        emitted x_hat (pre-update forward by default)."""
        x = np.asarray(x, dtype=np.float64)
        targets = saliency_target_batch(x)
        xt, gt = Tensor(x), Tensor(targets)
        cfg = self.config
        emitted = None
        for step_in_batch in range(cfg.steps_per_batch):
            q = self.model.encode(xt)
            noise = Tensor(self.noise.normal((x.shape[0], self.model.latent_dim)))
            delta = self.model.decode(reparameterize(q, noise))
            x_hat = add(xt, delta)
            kl = kl_loss(q)
            mse = recon_loss(x_hat, gt)
            total = add(mul(Tensor(cfg.alpha), kl), mul(Tensor(cfg.beta), mse))
            if not np.isfinite(total.data):
                raise RuntimeError(
                    f"non-finite loss at batch {batch_index} step {step_in_batch}: "
                    f"kl={float(kl.data)!r} mse={float(mse.data)!r} "
                    f"lr={cfg.learning_rate} alpha={cfg.alpha} beta={cfg.beta}")
            if step_in_batch == 0 and self.emit == "pre":
                emitted = x_hat.data
            backward(total)
            self.opt.learning_rate = cfg.learning_rate * (x.shape[0] / REFERENCE_BATCH)
            sgd_step(self.model.parameters(), self.opt)
            self.report.rows.append((len(self.report.rows) + 1, batch_index,
                                     float(kl.data), float(mse.data), float(total.data)))
        if self.emit == "post":
            fresh = self.noise.normal((x.shape[0], self.model.latent_dim))
            emitted = generate(self.model, x, fresh).x_hat
        self.report.num_batches += 1
        self.report.num_samples += x.shape[0]
        return emitted


def adapt_stream(model: GuesModel, stream, config: GuesConfig, sink=None,
                 emit: str = "pre") -> AdaptReport:
    """Algorithm: for each arriving batch, compute saliency targets,
    generate, take the loss gradient, and apply one SGD step; emit that
    batch's x_hat to the sink.  Single pass: the stream is consumed in
    arrival order and never revisited.

    Only batch.images is read here; labels riding on a batch are for
    evaluation sinks.  The default emission is the pre-update forward
    (the same x_hat the loss saw), so the first batch passes through an
    identity-initialized generator untouched; emit="post" regenerates
    after the update instead.
    """
    adapter = GuesAdapter(model, config, emit=emit)
    for batch_index, batch in enumerate(stream):
        x_hat = adapter.process_batch(batch_index, batch.images)
        if sink is not None:
            sink(batch_index, batch, x_hat)
    return adapter.report
