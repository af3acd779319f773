"""
Class-conditional reconstruction and the reconstruction-error detector.

An input is flagged as adversarial when the distance between the image and its
reconstruction from the winning capsule exceeds a threshold calibrated on
benign validation images.
"""
from __future__ import annotations

import logging
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from capsattack import ops
from capsattack.config import ReconNetConfig
from capsattack.enums import MaskMode
from capsattack.errors import CalibrationError, ConfigError, ShapeError
from capsattack.layers import DenseStack, Module
from capsattack.tensor import Tensor, no_grad

__all__ = (
    "ReconNet",
    "DetectionThreshold",
    "DetectionResult",
    "mask_classes",
    "reconstruct_masked",
    "reconstruction_error",
    "calibrate_threshold",
    "benign_errors",
    "detect",
)

logger = logging.getLogger(__name__)

DEFAULT_PERCENTILE = 0.95


class ReconNet(Module):
    """
    Fully connected decoder from (masked) capsules to pixel space.

    Args:
        config:
            Hidden layer widths.
        in_features:
            M * d_out, the flattened capsule width.
        image_shape:
            (channels, height, width) of the reconstructed image.
        rng:
            Generator for the weight initialisation.
    """

    def __init__(
        self,
        config: ReconNetConfig,
        in_features: int,
        image_shape: Sequence[int],
        rng: np.random.Generator,
    ) -> None:
        super().__init__()
        self.config = config
        self.in_features = int(in_features)
        self.image_shape = tuple(int(v) for v in image_shape)
        pixels = int(np.prod(self.image_shape))
        self.stack = self.add_module("stack", DenseStack([self.in_features, *config.widths, pixels], rng, final_sigmoid=True))

    def __call__(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.in_features:
            raise ShapeError(f"reconstruction expects {self.in_features} features, got {features.shape[-1]}")
        out = self.stack(features)
        return ops.reshape(out, out.shape[:-1] + self.image_shape)


def capsule_mask(classes: Union[int, Sequence[int], np.ndarray], num_classes: int, dtype=np.float32) -> np.ndarray:
    """One-hot masks of shape (B, M, 1) keeping only capsule `classes[b]`."""
    classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
    if classes.size and (classes.min() < 0 or classes.max() >= num_classes):
        raise IndexError(f"capsule index out of range [0, {num_classes})")
    return ops.one_hot(classes, num_classes, dtype=dtype)[..., None]


def mask_classes(mode: Union[MaskMode, str], prediction: np.ndarray, labels: Optional[np.ndarray] = None) -> np.ndarray:
    """The capsule kept per example: the winning one, or the ground truth."""
    if MaskMode(mode) is MaskMode.winner:
        return prediction
    if labels is None:
        raise ConfigError("masking with the ground truth needs labels")
    return np.asarray(labels, dtype=np.int64)


def reconstruct_masked(recon: ReconNet, v: Tensor, classes: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """
    Reconstruct images from output capsules with every capsule but `classes` zeroed.

    Args:
        recon:
            The decoder.
        v:
            Output capsules, (B, M, d_out) or a single (M, d_out).
        classes:
            The capsule kept per example.

    Returns:
        Images in [0, 1] of shape (B,) + image_shape, or image_shape for a single capsule set.
    """
    single = v.ndim == 2
    if single:
        v = ops.reshape(v, (1,) + v.shape)
    batch, num_classes, dim = v.shape
    mask = capsule_mask(classes, num_classes, dtype=v.data.dtype)
    if mask.shape[0] not in (1, batch):
        raise ShapeError(f"{mask.shape[0]} classes given for {batch} capsule sets")
    masked = ops.reshape(ops.mul(v, mask), (batch, num_classes * dim))
    images = recon(masked)
    if single:
        images = ops.reshape(images, images.shape[1:])
    return images


def reconstruction_error(x: Union[Tensor, np.ndarray], x_hat: Union[Tensor, np.ndarray], batched: bool = True) -> Tensor:
    """
    Euclidean pixel distance d(x, x_hat) = |x_hat - x|_2.

    With `batched` the leading axis indexes examples and one distance per
    example is returned; otherwise the whole arrays are compared as one image.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"cannot compare images of shapes {x.shape} and {x_hat.shape}")
    diff = ops.sub(x_hat, x)
    if batched and diff.ndim > 1:
        return ops.l2_norm(ops.reshape(diff, (diff.shape[0], -1)), axis=-1)
    return ops.l2_norm(ops.reshape(diff, (-1,)), axis=-1)


class DetectionThreshold:
    """The calibrated cutoff theta on reconstruction error."""

    def __init__(self, theta: float, calibration_percentile: float = DEFAULT_PERCENTILE, sample_count: int = 0) -> None:
        if not theta >= 0:
            raise CalibrationError(f"theta must be non-negative, got {theta}")
        self.theta = float(theta)
        self.calibration_percentile = float(calibration_percentile)
        self.sample_count = int(sample_count)

    @classmethod
    def from_dict(cls, conf_dict):
        return cls(**conf_dict)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "calibration_percentile": self.calibration_percentile,
            "sample_count": self.sample_count,
        }

    def __repr__(self):
        return f"<capsattack.DetectionThreshold theta={self.theta} percentile={self.calibration_percentile}>"


def calibrate_threshold(errors: Sequence[float], percentile: float = DEFAULT_PERCENTILE) -> DetectionThreshold:
    """
    Nearest-rank percentile of benign reconstruction errors:
    theta = sorted(errors)[ceil(percentile * n) - 1].
    """
    errors = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    if errors.size == 0:
        raise CalibrationError("cannot calibrate a threshold from zero errors")
    if not 0.0 < percentile <= 1.0:
        raise CalibrationError(f"percentile must lie in (0, 1], got {percentile}")

    # round before ceil so 0.95 * 100 does not become 96
    rank = max(1, math.ceil(round(percentile * errors.size, 9)))
    threshold = DetectionThreshold(float(errors[rank - 1]), percentile, errors.size)
    logger.info("calibrated theta=%.6f from %d benign errors", threshold.theta, errors.size)
    return threshold


class DetectionResult:
    """Per-example predictions, reconstruction errors and flags."""

    def __init__(self, prediction: np.ndarray, flagged: np.ndarray, error: np.ndarray) -> None:
        self.prediction = prediction
        self.flagged = flagged
        self.error = error

    def __len__(self):
        return len(self.prediction)

    @property
    def flag_rate(self) -> float:
        return float(np.mean(self.flagged)) if len(self) else 0.0

    def __repr__(self):
        return f"<capsattack.DetectionResult n={len(self)} flag_rate={self.flag_rate:.4f}>"


def _winner_errors(model, images: np.ndarray, batch_size: int) -> Tuple[np.ndarray, np.ndarray]:
    predictions, errors = [], []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(images[start : start + batch_size])
            prediction, x_hat = model.reconstruct(x)
            predictions.append(prediction)
            errors.append(reconstruction_error(x, x_hat).data.astype(np.float64))
    if not predictions:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(predictions), np.concatenate(errors)


def benign_errors(
    model,
    images: np.ndarray,
    labels: Optional[np.ndarray] = None,
    correct_only: bool = False,
    batch_size: int = 128,
) -> np.ndarray:
    """
    Reconstruction errors of `images` from their winning capsules.

    With `correct_only`, only correctly classified images (per `labels`) contribute.
    """
    if model.recon is None:
        raise ConfigError("the model has no reconstruction network")
    prediction, errors = _winner_errors(model, np.asarray(images), batch_size)
    if correct_only:
        if labels is None:
            raise ConfigError("correct_only needs labels")
        errors = errors[prediction == np.asarray(labels)]
    return errors


def detect(
    x: Union[Tensor, np.ndarray],
    model,
    theta: Union[DetectionThreshold, float],
    batch_size: int = 128,
) -> DetectionResult:
    """
    Classify `x`, reconstruct from the winning capsule and flag inputs whose
    reconstruction error is strictly bigger than theta.
    """
    if model.recon is None:
        raise ConfigError("the model has no reconstruction network")
    theta = theta.theta if isinstance(theta, DetectionThreshold) else float(theta)
    images = x.data if isinstance(x, Tensor) else np.asarray(x)
    single = images.ndim == len(model.input_shape)
    if single:
        images = images[None]
    prediction, errors = _winner_errors(model, images, batch_size)
    return DetectionResult(prediction, errors > theta, errors)
