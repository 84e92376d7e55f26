"""Seeded synthetic retina-toy dataset with parametric domain shift.

Each sample is a 64x64 RGB rendering of a dim fundus-like disc carrying
k bright elliptical spots ("exudates") and m dark blobs
("hemorrhages"); the ordinal grade in {0..4} is a fixed threshold
function of the total lesion count k+m, so labels are correct by
construction.  Every pixel is determined by (seed, sample index), and
the domain shift (blur, tint, brightness, gamma, sensor noise) is a
deterministic function of its own seed, so datasets regenerate
bit-identically.

Also here: the single-pass batch stream used by the online adaptation
loop, and 8-bit PPM/PGM image I/O (the only on-disk image formats).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import normal_stream, substream, uniform

IMAGE_SIZE = 64
NUM_CLASSES = 5

DEFAULT_GRADE_DISTRIBUTION = (0.49, 0.10, 0.27, 0.05, 0.09)

# lesion-count interval per grade; grade_from_count inverts it
LESION_RANGES = {0: (0, 0), 1: (1, 2), 2: (3, 5), 3: (6, 8), 4: (9, 12)}

# substream derivation keys (never reuse across purposes)
KEY_ORDER = 1
KEY_RENDER = 2
KEY_SHIFT = 3
KEY_STREAM = 4


def grade_from_count(count: int) -> int:
    """Threshold map: 0 -> 0, 1-2 -> 1, 3-5 -> 2, 6-8 -> 3, >=9 -> 4."""
    if count <= 0:
        return 0
    if count <= 2:
        return 1
    if count <= 5:
        return 2
    if count <= 8:
        return 3
    return 4


@dataclass
class RetinaToySample:
    image: np.ndarray          # (H, W, 3) float64 in [0, 1]
    grade: int
    domain_tag: str            # "source" | "target"
    lesion_count: int = 0
    # per-lesion (kind, y0, y1, x0, x1) bounding boxes covering the
    # rendered support plus a small halo; used by saliency-mass checks
    lesion_boxes: tuple = ()


@dataclass
class ShiftParams:
    brightness_delta: float = 0.0
    tint: tuple = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    gamma: float = 1.0
    blur_radius: int = 0

    def is_identity(self) -> bool:
        return (self.brightness_delta == 0.0 and tuple(self.tint) == (1.0, 1.0, 1.0)
                and self.noise_sigma == 0.0 and self.gamma == 1.0
                and self.blur_radius == 0)


DEFAULT_TARGET_SHIFT = ShiftParams(brightness_delta=-0.08, tint=(1.05, 0.95, 0.90),
                                   noise_sigma=0.02, gamma=1.1, blur_radius=1)


def _quota_counts(n: int, distribution) -> np.ndarray:
    """Largest-remainder allocation of n samples to class proportions.

    Deterministic, so empirical class frequencies sit within one sample
    of n*p even for small n (sampling the multinomial would not).
    """
    p = np.asarray(distribution, dtype=np.float64)
    if p.ndim != 1 or p.size != NUM_CLASSES:
        raise ValueError(f"distribution needs {NUM_CLASSES} entries, got {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("distribution must be non-negative and sum to 1")
    raw = n * p
    counts = np.floor(raw).astype(np.int64)
    remainder = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    for i in range(int(remainder)):
        counts[order[i]] += 1
    return counts


def _render(gen: np.random.Generator, grade: int):
    """One fundus-toy image for the grade; returns (image, count, boxes)."""
    size = IMAGE_SIZE
    lo, hi = LESION_RANGES[grade]
    count = int(gen.integers(lo, hi + 1))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + uniform(gen, -1.5, 1.5, ())
    cx = size / 2 + uniform(gen, -1.5, 1.5, ())
    radius = 26.0 + uniform(gen, -2.0, 2.0, ())
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)

    # soft rim: linear ramp over ~5 px so the disc edge itself carries
    # little center-surround response compared to lesions
    rim = np.clip((radius - r) / 5.0, 0.0, 1.0)
    falloff = 1.0 - 0.38 * np.clip(r / radius, 0.0, 1.2) ** 2
    base = np.array([0.50, 0.27, 0.10]) + uniform(gen, -1.0, 1.0, 3) * np.array([0.03, 0.02, 0.012])
    image = (rim * falloff)[:, :, None] * base[None, None, :]

    # fine texture inside the disc; amplitude well below lesion contrast
    texture = gen.random((size, size)) * 0.008 - 0.004
    image += (texture * rim)[:, :, None]

    # optic-disc-like bright spot, present in every image (not a lesion)
    od_angle = uniform(gen, 0.0, 2.0 * np.pi, ())
    od_d = 0.55 * radius
    od_y, od_x = cy + od_d * np.sin(od_angle), cx + od_d * np.cos(od_angle)
    od = np.exp(-(((yy - od_y) ** 2 + (xx - od_x) ** 2) / 3.2 ** 2) ** 2)
    image += (od * rim)[:, :, None] * np.array([0.26, 0.21, 0.08])[None, None, :]

    boxes = []
    placed = []
    for _ in range(count):
        kind = "exudate" if gen.random() < 0.55 else "hemorrhage"
        # rejection-sample centers to keep lesions disjoint: total lesion
        # mass then scales linearly with count, which is what makes the
        # count-threshold grades recoverable from the image
        for _attempt in range(60):
            dist = radius * (0.12 + 0.63 * gen.random())
            angle = uniform(gen, 0.0, 2.0 * np.pi, ())
            ly, lx = cy + dist * np.sin(angle), cx + dist * np.cos(angle)
            if ((ly - od_y) ** 2 + (lx - od_x) ** 2 >= 81.0
                    and all((ly - py) ** 2 + (lx - px) ** 2 >= 64.0
                            for py, px in placed)):
                break
        placed.append((ly, lx))
        a = uniform(gen, 1.9, 2.0, ())
        b = a * uniform(gen, 0.95, 1.0, ())
        theta = uniform(gen, 0.0, np.pi, ())
        amp = 1.0
        ct, st = np.cos(theta), np.sin(theta)
        u = (yy - ly) * ct + (xx - lx) * st
        v = -(yy - ly) * st + (xx - lx) * ct
        # super-gaussian: flat core, fast falloff, support ~1.6 semiaxes
        profile = np.exp(-((u / a) ** 2 + (v / b) ** 2) ** 2) * rim
        if kind == "exudate":
            image += (amp * profile)[:, :, None] * np.array([0.42, 0.36, 0.10])[None, None, :]
        else:
            image -= (amp * profile)[:, :, None] * np.array([0.30, 0.20, 0.07])[None, None, :]
        halo = int(np.ceil(1.6 * max(a, b))) + 4
        boxes.append((kind,
                      max(int(np.floor(ly)) - halo, 0), min(int(np.ceil(ly)) + halo, size - 1),
                      max(int(np.floor(lx)) - halo, 0), min(int(np.ceil(lx)) + halo, size - 1)))

    np.clip(image, 0.0, 1.0, out=image)
    return image, count, tuple(boxes)


def generate_retinatoy(seed: int, n: int, grade_distribution=DEFAULT_GRADE_DISTRIBUTION,
                       domain_tag: str = "source") -> list:
    """n seeded samples with class counts allocated by quota."""
    if n < 1:
        raise ValueError("n must be >= 1")
    counts = _quota_counts(n, grade_distribution)
    grades = np.repeat(np.arange(NUM_CLASSES), counts)
    grades = grades[substream(seed, KEY_ORDER).permutation(n)]
    samples = []
    for i in range(n):
        gen = substream(seed, KEY_RENDER, i)
        image, lesion_count, boxes = _render(gen, int(grades[i]))
        assert grade_from_count(lesion_count) == int(grades[i])
        samples.append(RetinaToySample(image=image, grade=int(grades[i]),
                                       domain_tag=domain_tag,
                                       lesion_count=lesion_count,
                                       lesion_boxes=boxes))
    return samples


def _box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1)^2 window per channel, replicate-padded."""
    if radius == 0:
        return image
    h, w = image.shape[:2]
    size = 2 * radius + 1
    padded = np.pad(image, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    total = np.zeros_like(image)
    for di in range(size):
        for dj in range(size):
            total += padded[di:di + h, dj:dj + w]
    return total / (size * size)


def apply_shift(image: np.ndarray, params: ShiftParams, seed: int) -> np.ndarray:
    """clamp01(((blur(x, r) * tint + brightness)^gamma) + noise).

    Identity parameters return the input bit-identically (every stage
    short-circuits or is exact for neutral values).  The base of the
    power is clamped at 0 first: a negative brightness shift can push
    values below zero, where a fractional gamma would be undefined.
    """
    out = np.asarray(image, dtype=np.float64)
    out = _box_blur(out, int(params.blur_radius))
    tint = np.asarray(params.tint, dtype=np.float64)
    if not np.all(tint == 1.0):
        out = out * tint[None, None, :]
    if params.brightness_delta != 0.0:
        out = out + params.brightness_delta
    if params.gamma != 1.0:
        out = np.power(np.maximum(out, 0.0), params.gamma)
    if params.noise_sigma > 0.0:
        out = out + params.noise_sigma * normal_stream(seed).normal(out.shape)
    if out is image:
        return image.copy()
    return np.clip(out, 0.0, 1.0)


def make_source_target(seed: int, n_source: int, n_target: int,
                       grade_distribution=DEFAULT_GRADE_DISTRIBUTION,
                       shift: ShiftParams = DEFAULT_TARGET_SHIFT):
    """Source set plus shifted target set under one master seed.

    Target samples are rendered from an independent substream and then
    pushed through the domain shift, one shift seed per sample.
    """
    source = generate_retinatoy(substream_key(seed, "source"), n_source,
                                grade_distribution, domain_tag="source")
    target = generate_retinatoy(substream_key(seed, "target"), n_target,
                                grade_distribution, domain_tag="target")
    for i, sample in enumerate(target):
        sample.image = apply_shift(sample.image, shift, substream_key(seed, "shift") + i)
    return source, target


def substream_key(seed: int, purpose: str) -> int:
    """Stable integer seed for a named purpose under a master seed."""
    offsets = {"source": 100_000, "target": 200_000, "shift": 300_000,
               "heldout": 400_000, "stream": 500_000}
    return int(seed) * 1_000_000 + offsets[purpose]


# ---------------------------------------------------------------------------
# Single-pass stream


@dataclass
class Batch:
    images: np.ndarray        # (N, 3, H, W) float64
    grades: np.ndarray        # (N,) int64; for evaluation sinks only
    indices: np.ndarray       # (N,) positions in the shuffled order


class StreamExhausted(RuntimeError):
    """Second pass requested over a single-pass stream."""


class Stream:
    """One-shot batch iterator over a fixed shuffled order.

    Yields each batch exactly once in order; a second iteration raises
    StreamExhausted.  ``yielded`` records the batch indices handed out,
    so harnesses can verify the single-pass contract.
    """

    def __init__(self, batches):
        self._batches = list(batches)
        self._cursor = 0
        self._started = False
        self.yielded = []

    @property
    def num_batches(self) -> int:
        return len(self._batches)

    def __iter__(self):
        if self._started:
            raise StreamExhausted("stream is single-pass; build a new one to re-iterate")
        self._started = True
        return self

    def __next__(self):
        if self._cursor >= len(self._batches):
            raise StopIteration
        batch = self._batches[self._cursor]
        self.yielded.append(self._cursor)
        self._cursor += 1
        return batch


def make_stream(samples, batch_size: int, seed: int) -> Stream:
    """Shuffle once with the seed, partition into batches (last short)."""
    if not samples:
        raise ValueError("cannot stream an empty sample list")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(samples)
    order = substream(seed, KEY_STREAM).permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        images = np.stack([samples[i].image.transpose(2, 0, 1) for i in chunk])
        grades = np.array([samples[i].grade for i in chunk], dtype=np.int64)
        batches.append(Batch(images=images, grades=grades, indices=chunk.astype(np.int64)))
    return Stream(batches)


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5) 8-bit I/O


def _quantize(values: np.ndarray) -> np.ndarray:
    # round half up, exactly: floor(v*255 + 0.5)
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """Write (H,W,3) as binary PPM or (H,W) as binary PGM, maxval 255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"expected (H,W,3) or (H,W), got {image.shape}")
    h, w = image.shape[:2]
    payload = _quantize(image).tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(payload)


def _read_header_token(f) -> bytes:
    token = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ValueError("truncated image header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_image(path) -> np.ndarray:
    """Read binary PPM/PGM; values map to [0,1] as byte/255."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P6", b"P5"):
            raise ValueError(f"{path}: unsupported magic {magic!r} (need P6 or P5)")
        width = int(_read_header_token(f))
        height = int(_read_header_token(f))
        maxval = int(_read_header_token(f))
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval} (only 255)")
        channels = 3 if magic == b"P6" else 1
        payload = f.read(width * height * channels)
        if len(payload) != width * height * channels:
            raise ValueError(f"{path}: truncated pixel data")
    flat = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 3:
        return flat.reshape(height, width, 3)
    return flat.reshape(height, width)
