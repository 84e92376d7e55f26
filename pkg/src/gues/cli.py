"""Command-line experiment driver.

Subcommands cover the full pipeline: dataset emission, source
training, online adaptation, sweeps, saliency map export, and the
self-check battery.  Every subcommand is deterministic given its
configuration: rerunning with the same config reproduces output files
byte for byte.

Exit codes: 0 success, 2 usage or configuration error, 3 missing
artifact, 4 verification failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from .checkpoint import (CheckpointError, load_classifier, save_classifier,
                         save_gues)
from .classifier import SourceClassifier
from .data import read_image, write_image
from .experiments import (ConfigError, ExperimentConfig, MODES, batch_sweep,
                          alpha_beta_sweep, load_manifest, run_adaptation,
                          train_source_classifier, write_dataset)
from .plots import heat_grid_svg, line_plot_svg
from .saliency import fine_grained_saliency, to_gray
from .verify import run_checks

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_VERIFY = 4


class MissingArtifact(RuntimeError):
    pass


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        if not os.path.exists(args.config):
            raise MissingArtifact(f"config file not found: {args.config}")
        config = ExperimentConfig.from_json(args.config)
    else:
        config = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "out", None) is not None:
        config.out_dir = args.out
    if getattr(args, "mode", None) is not None:
        config.mode = args.mode
    if getattr(args, "epochs", None) is not None:
        config.epochs = args.epochs
    config.validate()
    return config


def _manifest_path(config: ExperimentConfig) -> str:
    return os.path.join(config.out_dir, "data", "manifest.csv")


def _classifier_path(config: ExperimentConfig) -> str:
    return os.path.join(config.out_dir, "classifier.clsf")


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifact(f"{what} not found: {path} (run the producing "
                              "subcommand first)")
    return path


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    from .experiments import build_datasets
    source, target = build_datasets(config)
    data_dir = os.path.join(config.out_dir, "data")
    write_dataset(source + target, data_dir, _manifest_path(config))
    _write_text(os.path.join(config.out_dir, "config.json"), config.to_json())
    print(f"wrote {len(source)} source + {len(target)} target images and "
          f"manifest under {data_dir}")
    return EXIT_OK


def cmd_train_source(args) -> int:
    config = _load_config(args)
    manifest = _require(_manifest_path(config), "dataset manifest")
    samples = [s for s in load_manifest(manifest) if s.domain_tag == "source"]
    if not samples:
        raise MissingArtifact(f"manifest {manifest} holds no source samples")
    model, (acc, kappa, average) = train_source_classifier(config, samples)
    save_classifier(_classifier_path(config), model)
    _write_text(os.path.join(config.out_dir, "train_metrics.csv"),
                "n,acc,qwk,avg\n"
                f"{len(samples)},{acc:.6f},{kappa:.6f},{average:.6f}\n")
    print(f"in-domain holdout: ACC {acc:.4f}  QWK {kappa:.4f}  AVG {average:.4f}")
    print(f"checkpoint: {_classifier_path(config)}")
    return EXIT_OK


def _load_trained_classifier(config: ExperimentConfig) -> SourceClassifier:
    path = _require(_classifier_path(config), "classifier checkpoint")
    return load_classifier(path, SourceClassifier(seed=config.seed))


def _target_samples(config: ExperimentConfig):
    manifest = _require(_manifest_path(config), "dataset manifest")
    samples = [s for s in load_manifest(manifest) if s.domain_tag == "target"]
    if not samples:
        raise MissingArtifact(f"manifest {manifest} holds no target samples")
    return samples


def cmd_adapt(args) -> int:
    config = _load_config(args)
    classifier = _load_trained_classifier(config)
    samples = _target_samples(config)
    result = run_adaptation(classifier, samples, config)
    run_dir = os.path.join(config.out_dir, f"adapt_{config.mode.replace('+', '_')}")
    _write_text(os.path.join(run_dir, "metrics.csv"), result.metrics_csv())
    _write_text(os.path.join(run_dir, "aggregate.csv"), result.aggregate_csv())
    if result.loss_rows:
        _write_text(os.path.join(run_dir, "losses.csv"), result.losses_csv())
    if result.gues_model is not None:
        save_gues(os.path.join(run_dir, "generator.gues"), result.gues_model)
    print(f"mode {config.mode}: {result.num_batches} batches, "
          f"aggregate ACC {result.aggregate_acc:.4f}")
    print(f"metrics: {os.path.join(run_dir, 'metrics.csv')}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_config(args)
    classifier = _load_trained_classifier(config)
    samples = _target_samples(config)
    sweep_dir = os.path.join(config.out_dir, f"sweep_{args.axis}")
    if args.axis == "batch":
        sweep = batch_sweep(classifier, samples, config)
        series = {}
        for mode in config.sweep_modes:
            series[mode] = [sweep.median_acc(mode=mode, batch_size=bs)
                            for bs in config.sweep_batch_sizes]
        svg = line_plot_svg("Accuracy across stream batch sizes",
                            "batch size", "median ACC",
                            list(config.sweep_batch_sizes), series)
    else:
        sweep = alpha_beta_sweep(classifier, samples, config)
        cells = {}
        for alpha, beta, _seed, _acc, _kappa, average in sweep.rows:
            cells[(alpha, beta)] = average
        known = [v for v in cells.values() if v is not None]
        spread = (max(known) - min(known)) if known else float("nan")
        svg = heat_grid_svg(f"AVG over alpha x beta (spread {spread:.4f})",
                            "alpha", "beta", list(config.sweep_alphas),
                            list(config.sweep_betas), cells)
        print(f"alpha/beta AVG spread (max-min): {spread:.4f}")
    _write_text(os.path.join(sweep_dir, "sweep.csv"), sweep.to_csv())
    _write_text(os.path.join(sweep_dir, "plot.svg"), svg)
    print(f"sweep CSV: {os.path.join(sweep_dir, 'sweep.csv')}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    if not os.path.exists(args.input):
        raise MissingArtifact(f"input image not found: {args.input}")
    try:
        image = read_image(args.input)
    except OSError as exc:
        raise MissingArtifact(f"cannot read {args.input}: {exc}") from exc
    if image.ndim != 3:
        raise ConfigError(f"{args.input} is not a 3-channel P6 image")
    saliency = fine_grained_saliency(to_gray(image))
    try:
        write_image(args.output, saliency)
    except OSError as exc:
        raise MissingArtifact(f"cannot write {args.output}: {exc}") from exc
    print(f"saliency map: {args.output}")
    return EXIT_OK


def cmd_verify(args) -> int:
    rows = run_checks(deep=args.deep)
    width = max(len(name) for name, _, _ in rows)
    failed = 0
    for name, passed, detail in rows:
        status = "PASS" if passed else "FAIL"
        print(f"{name:<{width}}  {status}  {detail}")
        failed += 0 if passed else 1
    if failed:
        print(f"{failed} of {len(rows)} checks failed")
        return EXIT_VERIFY
    print(f"all {len(rows)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gues",
        description="Generative unadversarial example experiments on the "
                    "retina-toy benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode_flag=False):
        p.add_argument("--config", metavar="PATH", default=None,
                       help="JSON experiment config (defaults apply when omitted)")
        p.add_argument("--seed", metavar="N", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", metavar="DIR", default=None,
                       help="override the config output directory")
        if mode_flag:
            p.add_argument("--mode", choices=MODES, default=None,
                           help="adaptation mode")

    p = sub.add_parser("gen-data", help="render the dataset and write the manifest")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-source", help="train the source classifier")
    common(p)
    p.add_argument("--epochs", metavar="N", type=int, default=None,
                   help="override training epochs (0 = checkpoint at init)")
    p.set_defaults(fn=cmd_train_source)

    p = sub.add_parser("adapt", help="run one online adaptation pass")
    common(p, mode_flag=True)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("sweep", help="grid runs over batch sizes or alpha x beta")
    common(p)
    p.add_argument("--axis", choices=("batch", "alpha_beta"), default="batch",
                   help="sweep axis")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("saliency", help="write the saliency map of a P6 image as P5")
    p.add_argument("input", help="input PPM (P6) path")
    p.add_argument("output", help="output PGM (P5) path")
    p.set_defaults(fn=cmd_saliency)

    p = sub.add_parser("verify", help="run the self-check battery")
    p.add_argument("--config", metavar="PATH", default=None,
                   help="accepted for uniformity; checks are config-independent")
    p.add_argument("--deep", action="store_true",
                   help="full-size oracle load and denser gradient sampling")
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"bad checkpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
