"""Independent oracles and the fast self-check battery.

The oracles here are deliberately naive: plain Python loops with no
shared code or vectorization tricks, so they can disagree with the
production implementations only if one of the two is wrong.  The
saliency oracle follows the exact accumulation order of the production
code (row-major window offsets, difference form) and must match it to
the last float64 bit.

run_checks() executes the cheap subset suitable for a command-line
verification pass: gradient checks on every primitive and the
end-to-end generator loss, the saliency oracle, analytic divergence
and agreement-metric cases, and determinism probes.
"""

from __future__ import annotations

import numpy as np

from .metrics import avg_metric, confusion, qwk
from .model import GuesConfig, GuesModel, gues_loss, kl_loss, reparameterize
from .rng import BoxMuller, substream, uniform
from .saliency import fine_grained_saliency
from .tensor import (PRIMITIVES, GradCheckReport, Tensor, grad_check,
                     grad_check_params)


def naive_fine_grained_saliency(gray: np.ndarray) -> np.ndarray:
    """Quadruple-loop reference for fine_grained_saliency.

    Per output pixel and scale: accumulate (center - neighbor) over the
    replicate-padded window in row-major order, divide by the surround
    count, clamp at zero; average the three scales.  Matches the
    production map bit for bit.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError(f"expected (H, W), got {gray.shape}")
    h, w = gray.shape
    rows = gray.tolist()
    out = [[0.0] * w for _ in range(h)]
    for scale in (1, 3, 7):
        size = 2 * scale + 1
        denom = float(size * size - 1)
        padded = np.pad(gray, scale, mode="edge").tolist()
        for i in range(h):
            window_rows = padded[i:i + size]
            out_row = out[i]
            center_row = rows[i]
            for j in range(w):
                c = center_row[j]
                s = 0.0
                for prow in window_rows:
                    for dj in range(size):
                        s += c - prow[j + dj]
                d = s / denom
                out_row[j] += d if d > 0.0 else 0.0
    for i in range(h):
        out_row = out[i]
        for j in range(w):
            out_row[j] = out_row[j] / 3.0
    return np.asarray(out)


def naive_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Scalar-loop mean squared error reference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = 0.0
    count = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        diff = x - y
        total += diff * diff
        count += 1
    if count == 0:
        raise ValueError("empty arrays")
    return total / count


def naive_kl(mu: np.ndarray, log_var: np.ndarray) -> float:
    """Scalar-loop reference for the batch-mean Gaussian KL."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if mu.shape != log_var.shape or mu.ndim != 2:
        raise ValueError("expected matching (N, D) arrays")
    total = 0.0
    for i in range(mu.shape[0]):
        per_sample = 0.0
        for j in range(mu.shape[1]):
            m = float(mu[i, j])
            lv = float(log_var[i, j])
            per_sample += m * m + np.exp(lv) - lv - 1.0
        total += 0.5 * per_sample
    return total / mu.shape[0]


# ---------------------------------------------------------------------------
# check battery


def _check_saliency_oracle(sizes=((16, 6), (64, 2)), seed: int = 7):
    gen = substream(seed, 71)
    compared = 0
    for side, count in sizes:
        for _ in range(count):
            img = gen.random((side, side))
            ours = fine_grained_saliency(img)
            ref = naive_fine_grained_saliency(img)
            if ours.tobytes() != ref.tobytes():
                worst = np.abs(ours - ref).max()
                return False, f"{side}x{side} map deviates from oracle by {worst:.3e}"
            compared += 1
    return True, f"{compared} random maps bit-identical to the naive loop"


def _check_saliency_analytic():
    const = fine_grained_saliency(np.full((16, 16), 0.37))
    if const.tobytes() != np.zeros((16, 16)).tobytes():
        return False, "constant image does not map to exact zeros"
    img = np.zeros((31, 31))
    img[15, 15] = 1.0
    s = fine_grained_saliency(img)
    if s[15, 15] != 1.0:
        return False, f"bright pixel value {s[15, 15]!r} != 1.0"
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        if s[15 + di, 15 + dj] != 0.0:
            return False, f"4-neighbor ({di},{dj}) is {s[15 + di, 15 + dj]!r}"
    return True, "constant-zero and single-pixel cases exact"


def _primitive_check_cases(seed: int = 3):
    """One grad_check closure per differentiable primitive.

    Reductions and shape ops get a nonlinear follow-up (squaring) so a
    wrong gradient cannot hide behind the linearity of a plain sum.
    """
    gen = substream(seed, 72)

    def rand(*shape):
        return gen.standard_normal(shape)

    from . import tensor as T
    m = Tensor(rand(3, 5))
    k = Tensor(rand(2, 3, 3, 3))
    kt = Tensor(rand(3, 2, 3, 3))
    other = Tensor(rand(2, 3, 4, 4))
    w_cat = Tensor(rand(3, 8))
    w_soft = Tensor(rand(3, 5))
    return {
        "add": (lambda x: T.tsum(T.add(x, other)), rand(2, 3, 4, 4), None),
        "sub": (lambda x: T.tsum(T.sub(other, x)), rand(2, 3, 4, 4), None),
        "mul": (lambda x: T.tsum(T.mul(x, other)), rand(2, 3, 4, 4), None),
        "matmul": (lambda x: T.tsum(T.matmul(x, m)), rand(4, 3), None),
        "conv2d": (lambda x: T.tsum(T.conv2d(x, k, stride=2, padding=1)),
                   rand(2, 3, 4, 4), None),
        "conv2d_transpose": (
            lambda x: T.tsum(T.conv2d_transpose(x, kt, stride=2, padding=1,
                                                output_padding=1)),
            rand(2, 3, 4, 4), None),
        "relu": (lambda x: T.tsum(T.relu(x)), rand(3, 7), 0.05),
        "leaky_relu": (lambda x: T.tsum(T.leaky_relu(x, 0.2)), rand(3, 7), 0.05),
        "tanh": (lambda x: T.tsum(T.tanh(x)), rand(3, 7), None),
        "sigmoid": (lambda x: T.tsum(T.sigmoid(x)), rand(3, 7), None),
        "exp": (lambda x: T.tsum(T.exp(x)), rand(3, 7), None),
        "log": (lambda x: T.tsum(T.log(x)), np.abs(rand(3, 7)) + 0.5, None),
        "sum": (lambda x: T.tsum(T.mul(T.tsum(x, axis=1), T.tsum(x, axis=1))),
                rand(3, 4), None),
        "mean": (lambda x: T.tsum(T.mul(T.tmean(x, axis=0), T.tmean(x, axis=0))),
                 rand(3, 4), None),
        "reshape": (lambda x: T.tsum(T.mul(T.reshape(x, (6, 2)), T.reshape(x, (6, 2)))),
                    rand(3, 4), None),
        "concat": (lambda x: T.tsum(T.mul(T.concat([x, x], axis=1), w_cat)),
                   rand(3, 4), None),
        "clamp": (lambda x: T.tsum(T.clamp(x, -0.5, 0.5)), rand(3, 7), 0.05),
        "softmax": (lambda x: T.tsum(T.mul(T.softmax(x, axis=1), w_soft)),
                    rand(3, 5), None),
    }


def check_primitive_gradients(tol: float = 1e-4):
    """grad_check every primitive; returns (all passed, detail)."""
    cases = _primitive_check_cases()
    failures = []
    worst = 0.0
    for name, (f, x0, kink_margin) in cases.items():
        exclude = None
        if kink_margin is not None:
            if name == "clamp":
                exclude = (np.abs(x0 + 0.5) < kink_margin) | (np.abs(x0 - 0.5) < kink_margin)
            else:
                exclude = np.abs(x0) < kink_margin
        report = grad_check(f, Tensor(x0), tol=tol, exclude=exclude)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failures.append(f"{name}: {report.max_rel_error:.2e}")
    if failures:
        return False, "; ".join(failures)
    return True, f"max rel error {worst:.2e} over {len(cases)} primitives"


def check_end_to_end_gradient(tol: float = 1e-4, sample_per_param: int = 6):
    """Full generator loss on a 1x3x16x16 input with fixed noise."""
    model = GuesModel(image_hw=(16, 16), seed=5)
    cfg = GuesConfig()
    x = Tensor(uniform(substream(5, 73), 0.0, 1.0, (1, 3, 16, 16)))
    target = Tensor(uniform(substream(5, 74), 0.0, 1.0, (1, 3, 16, 16)))
    noise = BoxMuller(substream(5, 75)).normal((1, model.latent_dim))

    def loss_fn():
        q = model.encode(x)
        z = reparameterize(q, noise)
        x_hat = x + model.decode(z)
        return gues_loss(q, x_hat, target, cfg)

    reports = grad_check_params(loss_fn, model.parameters(), tol=tol,
                                sample_per_param=sample_per_param, seed=11)
    worst = max(r.max_rel_error for r in reports.values())
    return all(r.passed for r in reports.values()), f"max rel error {worst:.2e}"


def _check_kl_analytic():
    zero = kl_loss_value(np.zeros((1, 10)), np.zeros((1, 10)))
    if abs(zero) > 1e-12:
        return False, f"KL(mu=0, lv=0) = {zero!r}"
    five = kl_loss_value(np.ones((1, 10)), np.zeros((1, 10)))
    if abs(five - 5.0) > 1e-9:
        return False, f"KL(d=10, mu=1, lv=0) = {five!r}"
    gen = substream(9, 76)
    mus = gen.standard_normal((1000, 10))
    lvs = gen.standard_normal((1000, 10))
    for i in range(0, 1000, 100):
        value = kl_loss_value(mus[i:i + 100], lvs[i:i + 100])
        if value < 0.0:
            return False, f"negative KL {value!r} on random inputs"
    return True, "zero, analytic-five and positivity cases hold"


def kl_loss_value(mu: np.ndarray, log_var: np.ndarray) -> float:
    from .model import LatentGaussian
    q = LatentGaussian(mu=Tensor(mu), log_var=Tensor(log_var))
    return float(kl_loss(q).data)


def _check_qwk_analytic():
    diag = confusion([0, 1, 2, 3, 4], [0, 1, 2, 3, 4], 5)
    if abs(qwk(diag) - 1.0) > 1e-9:
        return False, f"perfect diagonal -> {qwk(diag)!r}"
    half = confusion([0, 0, 1, 1], [0, 1, 0, 1], 2)
    if abs(qwk(half)) > 1e-9:
        return False, f"uniform 2x2 -> {qwk(half)!r}"
    anti = confusion([0, 0, 1, 1], [1, 1, 0, 0], 2)
    if abs(qwk(anti) + 1.0) > 1e-9:
        return False, f"anti-diagonal -> {qwk(anti)!r}"
    if abs(avg_metric(0.539, 0.601) - 0.570) > 1e-12:
        return False, f"avg(0.539, 0.601) = {avg_metric(0.539, 0.601)!r}"
    return True, "1 / 0 / -1 and average cases hold"


def _check_determinism():
    a = BoxMuller(substream(123, 77)).normal((256,))
    b = BoxMuller(substream(123, 77)).normal((256,))
    if a.tobytes() != b.tobytes():
        return False, "normal stream is not reproducible"
    from .data import generate_retinatoy
    s1 = generate_retinatoy(n=4, seed=321)
    s2 = generate_retinatoy(n=4, seed=321)
    for x, y in zip(s1, s2):
        if x.image.tobytes() != y.image.tobytes() or x.grade != y.grade:
            return False, "dataset generation is not reproducible"
    return True, "noise streams and dataset generation reproduce bit-identically"


def run_checks(deep: bool = False):
    """The verification battery: list of (name, passed, detail) rows.

    deep=True runs the full-size saliency oracle load and a larger
    gradient sample; the default keeps the battery under a minute.
    """
    rows = []
    sizes = ((16, 100), (64, 10)) if deep else ((16, 6), (64, 2))
    rows.append(("saliency-oracle", *_check_saliency_oracle(sizes=sizes)))
    rows.append(("saliency-analytic", *_check_saliency_analytic()))
    rows.append(("primitive-gradients", *check_primitive_gradients()))
    rows.append(("end-to-end-gradient",
                 *check_end_to_end_gradient(sample_per_param=10 if deep else 4)))
    rows.append(("kl-analytic", *_check_kl_analytic()))
    rows.append(("qwk-analytic", *_check_qwk_analytic()))
    rows.append(("determinism", *_check_determinism()))
    return rows
