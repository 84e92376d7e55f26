"""Layers assembled from the tensor primitives.

Plumbing shared by the perturbation generator and the toy classifier:
conv / transposed-conv / linear layers with seeded fan-in-scaled
initialization, and a batch-norm layer whose normalization is composed
from differentiable primitives so adaptation objectives can reach the
affine parameters.  Parameter registration order is construction order;
checkpoints rely on it being stable.
"""

from __future__ import annotations

import numpy as np

from .rng import uniform
from .tensor import (Tensor, add, conv2d, conv2d_transpose, exp, log, matmul,
                     mul, reshape, sub, tmean)


class Conv2d:
    """3x3-style convolution with bias; kernel (out, in, kh, kw)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 2, padding: int = 1, gen: np.random.Generator = None,
                 zero_init: bool = False):
        self.stride = stride
        self.padding = padding
        k = kernel_size
        shape = (out_channels, in_channels, k, k)
        if zero_init:
            w = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(in_channels * k * k)
            w = uniform(gen, -bound, bound, shape)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return add(out, reshape(self.bias, (1, self.bias.shape[0], 1, 1)))

    def parameters(self):
        return [self.weight, self.bias]


class ConvTranspose2d:
    """Transposed convolution with bias; kernel (in, out, kh, kw)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 2, padding: int = 1, output_padding: int = 1,
                 gen: np.random.Generator = None, zero_init: bool = False):
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        k = kernel_size
        shape = (in_channels, out_channels, k, k)
        if zero_init:
            w = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(in_channels * k * k)
            w = uniform(gen, -bound, bound, shape)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d_transpose(x, self.weight, stride=self.stride,
                               padding=self.padding, output_padding=self.output_padding)
        return add(out, reshape(self.bias, (1, self.bias.shape[0], 1, 1)))

    def parameters(self):
        return [self.weight, self.bias]


class Linear:
    """Affine map of (N, in) rows; weight (in, out), bias (out,)."""

    def __init__(self, in_features: int, out_features: int,
                 gen: np.random.Generator = None, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_features, out_features))
        else:
            bound = 1.0 / np.sqrt(in_features)
            w = uniform(gen, -bound, bound, (in_features, out_features))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class BatchNorm2d:
    """Per-channel normalization over (N, H, W) with affine parameters.

    Running statistics are plain arrays outside the autodiff graph.  The
    differentiable path is composed from primitives:
    (x - mu) * exp(-0.5 * log(var + eps)), scaled and shifted by the
    affine pair, so gradient-based adaptation of gamma/beta works in
    both statistics modes.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, stats: str = "running", update_running: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"batchnorm expects (N,{self.channels},H,W), got {x.shape}")
        c = self.channels
        if stats == "batch":
            mu = tmean(x, axis=(0, 2, 3), keepdims=True)
            centered = sub(x, mu)
            var = tmean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
            inv_std = exp(mul(log(add(var, Tensor(self.eps))), Tensor(-0.5)))
            normalized = mul(centered, inv_std)
            if update_running:
                n = x.shape[0] * x.shape[2] * x.shape[3]
                batch_mean = mu.data.reshape(c)
                # running variance uses the unbiased estimate
                batch_var = var.data.reshape(c) * (n / max(n - 1, 1))
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
                self.running_var = (1.0 - m) * self.running_var + m * batch_var
        elif stats == "running":
            mean = Tensor(self.running_mean.reshape(1, c, 1, 1))
            scale = Tensor((1.0 / np.sqrt(self.running_var + self.eps)).reshape(1, c, 1, 1))
            normalized = mul(sub(x, mean), scale)
        else:
            raise ValueError(f"unknown stats mode {stats!r}; use 'batch' or 'running'")
        gamma = reshape(self.gamma, (1, c, 1, 1))
        beta = reshape(self.beta, (1, c, 1, 1))
        return add(mul(normalized, gamma), beta)

    def parameters(self):
        return [self.gamma, self.beta]
