"""Fine-grained center-surround saliency maps.

The pseudo-perturbation target for the generator: per pixel, the
center value minus the mean of its surrounding window, clamped at
zero, averaged over the three surround scales 1, 3, 7.  Boundaries use
replicate-edge padding so every window is full.

Bit-compatibility note: the map accumulates center-minus-neighbor
differences in row-major (di, dj) window order, the same order a naive
per-pixel loop visits the window, so results are float64 bit-identical
to the naive implementation (see gues.verify). The difference form
also makes constant regions exactly zero: every accumulated term is
c - c = +0.0, whereas summing the window first and subtracting can
leave rounding residue of order 1e-16.
"""

from __future__ import annotations

import numpy as np

SCALES = (1, 3, 7)

GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# Largest possible slope of the map with respect to one input pixel:
# per scale the center contributes at most 1 and a surround entry at
# most 1/((2s+1)^2 - 1), summed over scales and divided by 3.
DERIVATIVE_BOUND = sum(1.0 + 1.0 / ((2 * s + 1) ** 2 - 1) for s in SCALES) / 3.0


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma grayscale of an (H, W, 3) image: 0.299R + 0.587G + 0.114B."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"to_gray expects (H, W, 3), got {image.shape}")
    r, g, b = GRAY_WEIGHTS
    return r * image[:, :, 0] + g * image[:, :, 1] + b * image[:, :, 2]


def _window_sum(gray: np.ndarray, scale: int) -> np.ndarray:
    """Sum over the (2*scale+1)^2 window, replicate-edge padded.

    Accumulation order is row-major over (di, dj) offsets; keep it that
    way, the naive-oracle bit equality depends on it.
    """
    h, w = gray.shape
    size = 2 * scale + 1
    padded = np.pad(gray, scale, mode="edge")
    total = np.zeros_like(gray)
    for di in range(size):
        for dj in range(size):
            total += padded[di:di + h, dj:dj + w]
    return total


def surround_mean(gray: np.ndarray, scale: int) -> np.ndarray:
    """Mean of the window around each pixel, excluding the pixel itself.

    sur(h, w) = (window sum - I(h, w)) / ((2*scale+1)^2 - 1).
    """
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale}")
    size = 2 * scale + 1
    return (_window_sum(gray, scale) - gray) / (size * size - 1)


def surround_mean_at(gray: np.ndarray, h: int, w: int, scale: int) -> float:
    """surround_mean at a single pixel; errors on out-of-bounds coordinates."""
    height, width = gray.shape
    if not (0 <= h < height and 0 <= w < width):
        raise IndexError(f"pixel ({h}, {w}) outside {height}x{width} image")
    return float(surround_mean(gray, scale)[h, w])


def _clamped_center_excess(gray: np.ndarray, scale: int) -> np.ndarray:
    """max(center - surround mean, 0) for one scale, in difference form.

    Accumulates (center - neighbor) over the window in row-major
    (di, dj) order and divides by the surround count; the center's own
    term is exactly +0.0, so constant regions come out exactly zero.
    Keep the accumulation order, the naive-oracle bit equality depends
    on it.
    """
    h, w = gray.shape
    size = 2 * scale + 1
    padded = np.pad(gray, scale, mode="edge")
    total = np.zeros_like(gray)
    for di in range(size):
        for dj in range(size):
            total += gray - padded[di:di + h, dj:dj + w]
    return np.maximum(total / (size * size - 1), 0.0)


def fine_grained_saliency(gray: np.ndarray) -> np.ndarray:
    """G(h,w) = mean over scales of max(center - surround_mean, 0).

    Inputs in [0, 1] give outputs in [0, 1]: each clamped difference
    lies in [0, 1] and the result is their mean.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError(f"fine_grained_saliency expects (H, W), got {gray.shape}")
    m1 = _clamped_center_excess(gray, 1)
    m3 = _clamped_center_excess(gray, 3)
    m7 = _clamped_center_excess(gray, 7)
    return (m1 + m3 + m7) / 3.0


TARGET_GAIN = 4.0


def saliency_target(image: np.ndarray, gain: float = None) -> np.ndarray:
    """Reconstruction target for one (H, W, 3) image: the image plus
    its replicated saliency map, scaled by the target gain.

    Regressing x_hat = x + delta onto this target drives the additive
    perturbation itself toward the (scaled) saliency map, so delta
    amplifies exactly the center-surround structure and stays bounded
    by it.
    """
    gain = TARGET_GAIN if gain is None else gain
    s = fine_grained_saliency(to_gray(image))
    return np.asarray(image, dtype=np.float64) + gain * s[:, :, None]


def saliency_target_batch(images_nchw: np.ndarray, gain: float = None) -> np.ndarray:
    """Targets for an (N, 3, H, W) batch, returned in the same layout."""
    gain = TARGET_GAIN if gain is None else gain
    x = np.asarray(images_nchw, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W), got {x.shape}")
    out = np.empty_like(x)
    r, g, b = GRAY_WEIGHTS
    for n in range(x.shape[0]):
        gray = r * x[n, 0] + g * x[n, 1] + b * x[n, 2]
        out[n] = x[n] + gain * fine_grained_saliency(gray)[None]
    return out


def saliency_directional_derivative(gray: np.ndarray, h: int, w: int,
                                    delta: float = 1e-4) -> np.ndarray:
    """(G(x + delta*e_hw) - G(x)) / delta, the per-pixel response field.

    Numeric probe of the map's input sensitivity: entries outside the
    15-pixel Chebyshev radius of (h, w) are exactly zero (largest
    window is 15x15), and magnitudes stay below DERIVATIVE_BOUND.
    """
    gray = np.asarray(gray, dtype=np.float64)
    height, width = gray.shape
    if not (0 <= h < height and 0 <= w < width):
        raise IndexError(f"pixel ({h}, {w}) outside {height}x{width} image")
    bumped = gray.copy()
    bumped[h, w] += delta
    return (fine_grained_saliency(bumped) - fine_grained_saliency(gray)) / delta
