"""Experiment orchestration: configuration, adaptation runs, sweeps.

Every run is deterministic given its configuration; sweeps fan grid
points out to independent model instances (optionally on worker
threads, capped by the GUES_THREADS environment variable) and merge
results in grid order, so emitted CSV bytes never depend on scheduling.
"""

from __future__ import annotations

import concurrent.futures
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .classifier import (SourceClassifier, clone_classifier, make_tta_state,
                         predict, shot_im_step, tent_step, train_source)
from .data import (DEFAULT_GRADE_DISTRIBUTION, NUM_CLASSES, RetinaToySample,
                   ShiftParams, Stream, apply_shift, generate_retinatoy,
                   make_source_target, make_stream, read_image, substream_key,
                   write_image)
from .metrics import ConfusionMatrix, UndefinedMetric, accuracy, avg_metric, confusion, qwk
from .model import (REFERENCE_BATCH, GuesAdapter, GuesConfig, GuesModel)

MODES = ("source_only", "gues", "tent", "shot_im", "gues+tent", "gues+shot_im")


class ConfigError(ValueError):
    """Malformed experiment configuration (maps to usage exit code)."""


@dataclass
class ExperimentConfig:
    """Flat, JSON-serializable description of one experiment.

    Every field has a default; loading rejects unknown keys by name.
    """
    seed: int = 0
    out_dir: str = "runs"
    # dataset
    n_source: int = 2000
    n_target: int = 1000
    grade_distribution: tuple = DEFAULT_GRADE_DISTRIBUTION
    holdout_fraction: float = 0.2        # source tail reserved for in-domain eval
    # domain shift applied to the target set
    shift_brightness: float = -0.08
    shift_tint: tuple = (1.05, 0.95, 0.90)
    shift_noise_sigma: float = 0.02
    shift_gamma: float = 1.1
    shift_blur_radius: int = 1
    # source training
    epochs: int = 20
    train_lr: float = 2e-3
    train_momentum: float = 0.9
    train_batch_size: int = 32
    smoothing: float = 0.1
    # generator
    gues_alpha: float = 1.0
    gues_beta: float = 1.0
    gues_lr: float = 0.3
    gues_momentum: float = 0.9
    gues_steps_per_batch: int = 1
    # adaptation protocol
    mode: str = "gues"
    batch_size: int = 64
    tta_lr: float = 1e-3
    tta_momentum: float = 0.9
    # sweeps
    sweep_batch_sizes: tuple = (2, 4, 8, 16, 32, 64)
    sweep_alphas: tuple = tuple(round(0.5 + 0.1 * i, 1) for i in range(11))
    sweep_betas: tuple = tuple(round(5e-5 + 1e-5 * i, 10) for i in range(10))
    sweep_seeds: tuple = (0, 1, 2, 3, 4)
    sweep_modes: tuple = ("tent", "gues", "gues+tent")
    sweep_n_target: int = 240            # smaller stream for grid runs

    def __post_init__(self):
        for name in ("grade_distribution", "shift_tint", "sweep_batch_sizes",
                     "sweep_alphas", "sweep_betas", "sweep_seeds", "sweep_modes"):
            setattr(self, name, tuple(getattr(self, name)))

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(
                f"holdout_fraction must be in (0, 1), got {self.holdout_fraction}")
        if abs(sum(self.grade_distribution) - 1.0) > 1e-9:
            raise ConfigError("grade_distribution must sum to 1")
        for name in ("n_source", "n_target", "sweep_n_target", "epochs"):
            if getattr(self, name) < 0 or (name != "epochs" and getattr(self, name) == 0):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        unknown = [m for m in self.sweep_modes if m not in MODES]
        if unknown:
            raise ConfigError(f"unknown sweep mode {unknown[0]!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def to_json(self) -> str:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    def shift_params(self) -> ShiftParams:
        return ShiftParams(brightness_delta=self.shift_brightness,
                           tint=self.shift_tint,
                           noise_sigma=self.shift_noise_sigma,
                           gamma=self.shift_gamma,
                           blur_radius=self.shift_blur_radius)

    def gues_config(self, seed: int | None = None,
                    batch_size: int | None = None) -> GuesConfig:
        return GuesConfig(alpha=self.gues_alpha, beta=self.gues_beta,
                          learning_rate=self.gues_lr, momentum=self.gues_momentum,
                          batch_size=self.batch_size if batch_size is None else batch_size,
                          seed=self.seed if seed is None else seed,
                          steps_per_batch=self.gues_steps_per_batch)


# ---------------------------------------------------------------------------
# dataset assembly and manifests


def build_datasets(config: ExperimentConfig):
    """(source samples, target samples) for the config's seed and shift."""
    return make_source_target(config.seed, config.n_source, config.n_target,
                              config.grade_distribution, config.shift_params())


def build_heldout(config: ExperimentConfig, n: int):
    """Labeled shifted samples disjoint from the adaptation stream."""
    held = generate_retinatoy(substream_key(config.seed, "heldout"), n,
                              config.grade_distribution, domain_tag="target")
    shift = config.shift_params()
    for i, sample in enumerate(held):
        sample.image = apply_shift(sample.image, shift,
                                   substream_key(config.seed, "heldout") + 1 + i)
    return held


def write_dataset(samples, directory: str, manifest_path: str) -> None:
    """P6 files plus a (path, grade, domain_tag) CSV manifest."""
    os.makedirs(directory, exist_ok=True)
    lines = ["path,grade,domain_tag"]
    for i, sample in enumerate(samples):
        name = f"{sample.domain_tag}_{i:06d}.ppm"
        write_image(os.path.join(directory, name), sample.image)
        lines.append(f"{name},{sample.grade},{sample.domain_tag}")
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(manifest_path: str):
    """Samples listed in a manifest; images are read from disk (and so
    carry 8-bit quantization)."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "path,grade,domain_tag":
            raise ConfigError(f"unexpected manifest header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            path, grade, tag = line.split(",")
            image = read_image(os.path.join(base, path))
            samples.append(RetinaToySample(image=image, grade=int(grade),
                                           domain_tag=tag, lesion_count=-1,
                                           lesion_boxes=()))
    if not samples:
        raise ConfigError(f"manifest {manifest_path} lists no samples")
    return samples


# ---------------------------------------------------------------------------
# adaptation runs


@dataclass
class AdaptationResult:
    """Online trajectory of one pass over the target stream."""
    mode: str
    seed: int
    batch_size: int
    rows: list = field(default_factory=list)      # (step, batch_index, acc, qwk|None, avg|None)
    aggregate: ConfusionMatrix = None
    loss_rows: list = field(default_factory=list)  # (step, batch_index, kl, mse, total)
    consumed: list = field(default_factory=list)   # batch indices in consumption order
    num_batches: int = 0
    first_batch_logits: np.ndarray = None
    gues_model: GuesModel = None                   # adapted generator, gues modes only

    @property
    def aggregate_acc(self) -> float:
        return accuracy(self.aggregate)

    @property
    def aggregate_qwk(self) -> float:
        return qwk(self.aggregate)

    @property
    def aggregate_avg(self) -> float:
        return avg_metric(self.aggregate_acc, self.aggregate_qwk)

    def metrics_csv(self) -> str:
        lines = ["step,batch_index,acc,qwk,avg"]
        for step, bi, acc, kappa, average in self.rows:
            lines.append(f"{step},{bi},{_cell(acc)},{_cell(kappa)},{_cell(average)}")
        return "\n".join(lines) + "\n"

    def losses_csv(self) -> str:
        lines = ["step,batch_index,kl,mse,total"]
        for step, bi, kl, mse, total in self.loss_rows:
            lines.append(f"{step},{bi},{kl:.6f},{mse:.6f},{total:.6f}")
        return "\n".join(lines) + "\n"

    def aggregate_csv(self) -> str:
        lines = ["mode,seed,batch_size,n,acc,qwk,avg"]
        try:
            kappa, average = self.aggregate_qwk, self.aggregate_avg
        except UndefinedMetric:
            kappa = average = None
        lines.append(f"{self.mode},{self.seed},{self.batch_size},{self.aggregate.n},"
                     f"{_cell(self.aggregate_acc)},{_cell(kappa)},{_cell(average)}")
        return "\n".join(lines) + "\n"


def _cell(value) -> str:
    return "undefined" if value is None else f"{value:.6f}"


def _batch_metrics(grades: np.ndarray, logits: np.ndarray):
    cm = confusion(grades, logits.argmax(axis=1), NUM_CLASSES)
    acc = accuracy(cm)
    try:
        kappa = qwk(cm)
        average = avg_metric(acc, kappa)
    except UndefinedMetric:
        kappa = average = None
    return cm, acc, kappa, average


def _record(result: AdaptationResult, batch_index: int, grades: np.ndarray,
            logits: np.ndarray) -> None:
    cm, acc, kappa, average = _batch_metrics(grades, logits)
    result.aggregate = cm if result.aggregate is None else result.aggregate.merge(cm)
    result.rows.append((len(result.rows) + 1, batch_index, acc, kappa, average))
    if result.first_batch_logits is None:
        result.first_batch_logits = logits.copy()


def combine_gues(tta, adapter: GuesAdapter, stream: Stream,
                 result: AdaptationResult | None = None) -> AdaptationResult:
    """Lock-step combination: per arriving batch the generator adapts
    and emits x_hat, then the TTA method adapts the classifier on
    x_hat; the TTA forward's logits are the online predictions."""
    if result is None:
        result = AdaptationResult(mode=f"gues+{tta.method}", seed=adapter.config.seed,
                                  batch_size=tta.batch_size)
    step_fn = tent_step if tta.method == "tent" else shot_im_step
    for batch_index, batch in enumerate(stream):
        x_hat = adapter.process_batch(batch_index, batch.images)
        logits = step_fn(tta.model, x_hat, tta)
        _record(result, batch_index, batch.grades, logits)
    result.loss_rows = list(adapter.report.rows)
    result.consumed = list(stream.yielded)
    result.num_batches = stream.num_batches
    return result


def run_adaptation(classifier: SourceClassifier, target_samples, config: ExperimentConfig,
                   mode: str | None = None, seed: int | None = None,
                   batch_size: int | None = None,
                   gues_overrides: dict | None = None) -> AdaptationResult:
    """One online pass in the given mode, on a private classifier clone.

    The combined modes scale the TTA learning rate by batch_size / 64,
    extending the generator's per-sample-equalized update rule to the
    plugged-in method; the plain tent / shot_im baselines keep their
    standard fixed rate.
    """
    mode = config.mode if mode is None else mode
    seed = config.seed if seed is None else seed
    batch_size = config.batch_size if batch_size is None else batch_size
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    clf = clone_classifier(classifier)
    stream = make_stream(target_samples, batch_size, seed)
    result = AdaptationResult(mode=mode, seed=seed, batch_size=batch_size)

    use_gues = mode in ("gues", "gues+tent", "gues+shot_im")
    tta_method = None
    if mode in ("tent", "gues+tent"):
        tta_method = "tent"
    elif mode in ("shot_im", "gues+shot_im"):
        tta_method = "shot_im"

    adapter = None
    if use_gues:
        gcfg = config.gues_config(seed=seed, batch_size=batch_size)
        if gues_overrides:
            gcfg = replace(gcfg, **gues_overrides)
        adapter = GuesAdapter(GuesModel(seed=seed), gcfg)
        result.gues_model = adapter.model

    if tta_method is not None:
        tta_lr = config.tta_lr
        if use_gues:
            tta_lr = config.tta_lr * (batch_size / REFERENCE_BATCH)
        tta = make_tta_state(clf, tta_method, learning_rate=tta_lr,
                             momentum=config.tta_momentum, batch_size=batch_size)

    if mode == "source_only":
        for batch_index, batch in enumerate(stream):
            _record(result, batch_index, batch.grades, predict(clf, batch.images))
    elif mode == "gues":
        for batch_index, batch in enumerate(stream):
            x_hat = adapter.process_batch(batch_index, batch.images)
            _record(result, batch_index, batch.grades, predict(clf, x_hat))
        result.loss_rows = list(adapter.report.rows)
    elif mode in ("tent", "shot_im"):
        step_fn = tent_step if tta_method == "tent" else shot_im_step
        for batch_index, batch in enumerate(stream):
            logits = step_fn(clf, batch.images, tta)
            _record(result, batch_index, batch.grades, logits)
    else:
        return combine_gues(tta, adapter, stream, result)

    result.consumed = list(stream.yielded)
    result.num_batches = stream.num_batches
    return result


def evaluate_frozen(classifier: SourceClassifier, samples, batch_size: int = 64):
    """(acc, qwk, avg) of frozen predictions over a sample list."""
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples])
    grades = np.array([s.grade for s in samples], dtype=np.int64)
    parts = [predict(classifier, images[i:i + batch_size])
             for i in range(0, images.shape[0], batch_size)]
    logits = np.concatenate(parts, axis=0)
    cm = confusion(grades, logits.argmax(axis=1), NUM_CLASSES)
    acc = accuracy(cm)
    kappa = qwk(cm)
    return acc, kappa, avg_metric(acc, kappa)


def train_source_classifier(config: ExperimentConfig, source_samples) -> tuple:
    """Train on the head split, evaluate on the held-out tail.

    Returns (classifier, in-domain (acc, qwk, avg) on the holdout).
    """
    n = len(source_samples)
    cut = max(1, int(round(n * (1.0 - config.holdout_fraction))))
    train, heldout = source_samples[:cut], source_samples[cut:]
    images = np.stack([s.image.transpose(2, 0, 1) for s in train])
    labels = np.array([s.grade for s in train], dtype=np.int64)
    model = SourceClassifier(seed=config.seed)
    if config.epochs > 0:
        train_source(model, images, labels, epochs=config.epochs,
                     batch_size=config.train_batch_size,
                     learning_rate=config.train_lr,
                     beta1=config.train_momentum,
                     smoothing=config.smoothing, seed=config.seed)
    scores = evaluate_frozen(model, heldout if heldout else train)
    return model, scores


# ---------------------------------------------------------------------------
# sweeps


def _worker_count(n_jobs: int) -> int:
    raw = os.environ.get("GUES_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"GUES_THREADS must be an integer, got {raw!r}")
    return max(1, min(cap, n_jobs))


def _run_grid(jobs, runner):
    """Run (key, thunk) jobs, possibly threaded; results in job order."""
    workers = _worker_count(len(jobs))
    if workers == 1:
        return [runner(job) for job in jobs]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(runner, jobs))


@dataclass
class SweepResult:
    axis: str
    rows: list                        # row tuples, grid-ordered

    def to_csv(self) -> str:
        if self.axis == "batch":
            lines = ["mode,batch_size,seed,acc,qwk,avg"]
            for mode, bs, seed, acc, kappa, average in self.rows:
                lines.append(f"{mode},{bs},{seed},{_cell(acc)},{_cell(kappa)},"
                             f"{_cell(average)}")
        else:
            lines = ["alpha,beta,seed,acc,qwk,avg"]
            for alpha, beta, seed, acc, kappa, average in self.rows:
                lines.append(f"{alpha:g},{beta:g},{seed},{_cell(acc)},{_cell(kappa)},"
                             f"{_cell(average)}")
        return "\n".join(lines) + "\n"

    def median_acc(self, **match) -> float:
        """Median accuracy over rows matching the given leading fields."""
        if self.axis == "batch":
            keys = ("mode", "batch_size", "seed")
        else:
            keys = ("alpha", "beta", "seed")
        values = []
        for row in self.rows:
            named = dict(zip(keys, row[:3]))
            if all(named[k] == v for k, v in match.items()):
                values.append(row[3])
        if not values:
            raise KeyError(f"no sweep rows match {match}")
        return float(np.median(values))


def _aggregate_row_values(result: AdaptationResult):
    acc = result.aggregate_acc
    try:
        kappa = result.aggregate_qwk
        average = result.aggregate_avg
    except UndefinedMetric:
        kappa = average = None
    return acc, kappa, average


def batch_sweep(classifier: SourceClassifier, target_samples,
                config: ExperimentConfig) -> SweepResult:
    """config.sweep_modes x sweep_batch_sizes x sweep_seeds trajectories."""
    if not config.sweep_batch_sizes or not config.sweep_modes or not config.sweep_seeds:
        raise ConfigError("batch sweep grid is empty")
    samples = target_samples[:config.sweep_n_target]
    jobs = [(mode, bs, seed)
            for mode in config.sweep_modes
            for bs in config.sweep_batch_sizes
            for seed in config.sweep_seeds]

    def runner(job):
        mode, bs, seed = job
        result = run_adaptation(classifier, samples, config, mode=mode,
                                seed=seed, batch_size=bs)
        return (mode, bs, seed) + _aggregate_row_values(result)

    return SweepResult(axis="batch", rows=_run_grid(jobs, runner))


def alpha_beta_sweep(classifier: SourceClassifier, target_samples,
                     config: ExperimentConfig) -> SweepResult:
    """gues-mode AVG response over the alpha x beta grid (single seed)."""
    if not config.sweep_alphas or not config.sweep_betas:
        raise ConfigError("alpha/beta sweep grid is empty")
    samples = target_samples[:config.sweep_n_target]
    jobs = [(alpha, beta) for alpha in config.sweep_alphas
            for beta in config.sweep_betas]

    def runner(job):
        alpha, beta = job
        result = run_adaptation(classifier, samples, config, mode="gues",
                                seed=config.seed,
                                gues_overrides={"alpha": alpha, "beta": beta})
        return (alpha, beta, config.seed) + _aggregate_row_values(result)

    return SweepResult(axis="alpha_beta", rows=_run_grid(jobs, runner))
