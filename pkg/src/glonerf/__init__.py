"""Latent-conditioned radiance fields learned from one view per object."""

from .camera import (CameraExtrinsics, CameraIntrinsics, CanonicalKeypoints, LandmarkSet, fit_camera,
                     fit_canonical_points, lm_solve, project)
from .dataset import Dataset, TrainingExample, load_dataset
from .field import BackgroundModel, EncodingConfig, FieldModel, eval_background, eval_field, positional_encode
from .latent import LatentDistribution, LatentTable, fit_distribution, fit_latent, sample_latent
from .losses import LossWeights, hard_loss, mask_loss, rgb_loss, total_loss
from .metrics import depth_correlation, psnr
from .model import LatentNeRF, ModelConfig
from .render import render_pixel, render_weights, stratified_sample
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .train import TrainConfig, lr_at, train, train_step

__version__ = "0.1.0"
