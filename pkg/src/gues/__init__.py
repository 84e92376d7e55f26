"""Generative unadversarial examples for online domain adaptation.

A small, dependency-light laboratory: a float64 reverse-mode autodiff
engine, a convolutional VAE that learns additive per-image
perturbations against center-surround saliency targets over a single
pass of unlabeled data, a frozen source classifier with test-time
adaptation plug-ins, the classical iterative perturbation baseline,
ordinal metrics, a synthetic retina-toy benchmark with parametric
domain shift, and an experiment CLI.
"""

from .tensor import (Tensor, no_grad, backward, grad_check, grad_check_params,
                     GradCheckReport, OptimizerState, sgd_step,
                     ShapeMismatch, MissingGradient, NonScalarLoss,
                     UnknownPrimitive, PRIMITIVES, apply_primitive)
from .saliency import (SCALES, GRAY_WEIGHTS, DERIVATIVE_BOUND, to_gray,
                       surround_mean, surround_mean_at, fine_grained_saliency,
                       saliency_target, saliency_target_batch,
                       saliency_directional_derivative)
from .metrics import (ConfusionMatrix, UndefinedMetric, confusion, accuracy,
                      qwk, avg_metric)
from .rng import substream, BoxMuller, normal_stream, uniform
from .data import (RetinaToySample, ShiftParams, DEFAULT_TARGET_SHIFT,
                   DEFAULT_GRADE_DISTRIBUTION, LESION_RANGES, grade_from_count,
                   generate_retinatoy, apply_shift, make_source_target,
                   Batch, Stream, StreamExhausted, make_stream,
                   read_image, write_image)
from .model import (GuesConfig, GuesModel, LatentGaussian, UnadversarialExample,
                    reparameterize, generate, kl_loss, recon_loss, gues_loss,
                    GuesAdapter, AdaptReport, adapt_stream, REFERENCE_BATCH)
from .classifier import (SourceClassifier, train_source, predict, entropy,
                         smoothed_cross_entropy, TtaState, make_tta_state,
                         tent_step, shot_im_step, clone_classifier)
from .baseline import (IterativeConfig, unadv_step, optimize_unadversarial,
                       optimize_unadversarial_batch, initial_delta,
                       per_sample_cross_entropy, ComparisonTestbed,
                       ComparisonReport, compare_generative_vs_iterative)
from .checkpoint import (save_gues, load_gues, save_classifier,
                         load_classifier, CheckpointError)
from .experiments import (ExperimentConfig, ConfigError, MODES, build_datasets,
                          build_heldout, write_dataset, load_manifest,
                          AdaptationResult, run_adaptation, combine_gues,
                          evaluate_frozen, train_source_classifier,
                          batch_sweep, alpha_beta_sweep, SweepResult)
from .verify import (naive_fine_grained_saliency, naive_mse, naive_kl,
                     run_checks)

__version__ = "0.1.0"
