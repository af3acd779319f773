import numpy as np
import pytest

from capsattack import ops
from capsattack.errors import CalibrationError, ConfigError, ShapeError
from capsattack.reconstruction import (
    DetectionThreshold,
    benign_errors,
    calibrate_threshold,
    capsule_mask,
    detect,
    mask_classes,
    reconstruct_masked,
    reconstruction_error,
)
from capsattack.tensor import Tensor, no_grad

from conftest import double


def test_mask_keeps_one_capsule():
    np.testing.assert_array_equal(capsule_mask([1], 3)[..., 0], [[0, 1, 0]])


def test_mask_out_of_range():
    with pytest.raises(IndexError):
        capsule_mask([3], 3)


def test_masked_capsules_are_irrelevant(capsnet, rng):
    v = rng.normal(size=(3, 4))
    w = v.copy()
    w[2] = rng.normal(size=4)
    with no_grad():
        a = reconstruct_masked(capsnet.recon, Tensor(v), 0).data
        b = reconstruct_masked(capsnet.recon, Tensor(w), 0).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (1, 8, 8)


def test_reconstruction_in_pixel_range(capsnet, tiny_data):
    _, x_hat = capsnet.reconstruct(tiny_data.images[:4])
    assert x_hat.shape == (4, 1, 8, 8)
    assert np.all((x_hat.data >= 0) & (x_hat.data <= 1))


def test_mask_classes():
    prediction = np.array([2, 0])
    np.testing.assert_array_equal(mask_classes("winner", prediction), [2, 0])
    np.testing.assert_array_equal(mask_classes("ground-truth", prediction, [1, 1]), [1, 1])
    with pytest.raises(ConfigError):
        mask_classes("ground-truth", prediction)


def test_ground_truth_mask(capsnet, tiny_data):
    x, labels = tiny_data.images[:4], tiny_data.labels[:4]
    with no_grad():
        _, x_hat = capsnet.reconstruct(x, mask="ground-truth", labels=labels)
        expected = reconstruct_masked(capsnet.recon, capsnet.forward(x).capsules, labels)
    np.testing.assert_array_equal(x_hat.data, expected.data)


def test_winner_mask_follows_the_prediction(capsnet, tiny_data):
    x = tiny_data.images[:4]
    with no_grad():
        prediction, x_hat = capsnet.reconstruct(x)
        _, expected = capsnet.reconstruct(x, mask="ground-truth", labels=prediction)
    np.testing.assert_array_equal(x_hat.data, expected.data)


def test_error_of_identical_images():
    x = np.ones((2, 3))
    assert reconstruction_error(x, x, batched=False).item() == 0.0


def test_error_of_half_image():
    assert reconstruction_error(np.zeros((2, 2)), np.full((2, 2), 0.5), batched=False).item() == pytest.approx(1.0)


def test_batched_error():
    x = np.zeros((2, 1, 2, 2))
    x_hat = np.stack([np.zeros((1, 2, 2)), np.full((1, 2, 2), 0.5)])
    np.testing.assert_allclose(reconstruction_error(x, x_hat).data, [0.0, 1.0])


def test_error_shape_mismatch():
    with pytest.raises(ShapeError):
        reconstruction_error(np.zeros((2, 2)), np.zeros((2, 3)))


def test_nearest_rank_percentile():
    assert calibrate_threshold(np.arange(1, 101)).theta == 95


def test_threshold_of_a_single_error():
    assert calibrate_threshold([0.25]).theta == 0.25


def test_threshold_of_constant_errors():
    assert calibrate_threshold([0.7] * 13).theta == 0.7


def test_threshold_needs_errors():
    with pytest.raises(CalibrationError):
        calibrate_threshold([])


def test_threshold_percentile_range():
    with pytest.raises(CalibrationError):
        calibrate_threshold([1.0], percentile=0.0)


def test_negative_threshold():
    with pytest.raises(CalibrationError):
        DetectionThreshold(-1.0)


def test_threshold_round_trip():
    threshold = calibrate_threshold([1.0, 2.0, 3.0])
    assert DetectionThreshold.from_dict(threshold.to_dict()).to_dict() == threshold.to_dict()


def test_detect_bounds(capsnet, tiny_data):
    biggest = np.finfo(np.float64).max
    assert not detect(tiny_data.images, capsnet, biggest).flagged.any()
    assert detect(tiny_data.images, capsnet, 0.0).flagged.all()


def test_benign_flag_rate_matches_percentile(capsnet, tiny_data):
    threshold = calibrate_threshold(benign_errors(capsnet, tiny_data.images))
    result = detect(tiny_data.images, capsnet, threshold)
    # 12 errors, nearest rank ceil(0.95 * 12) = 12: nothing above the largest
    assert result.flag_rate <= 0.05 + 1 / len(tiny_data)


def test_detect_is_pure(capsnet, tiny_data):
    a = detect(tiny_data.images, capsnet, 1.0)
    b = detect(tiny_data.images, capsnet, 1.0)
    np.testing.assert_array_equal(a.error, b.error)
    np.testing.assert_array_equal(a.flagged, b.flagged)


def test_detect_single_image(capsnet, tiny_data):
    assert len(detect(tiny_data.images[0], capsnet, 1.0)) == 1


def test_correct_only_calibration(capsnet, tiny_data):
    all_errors = benign_errors(capsnet, tiny_data.images)
    correct = benign_errors(capsnet, tiny_data.images, tiny_data.labels, correct_only=True)
    assert len(correct) == int(np.sum(capsnet.predict(tiny_data.images) == tiny_data.labels))
    assert len(correct) <= len(all_errors)
    with pytest.raises(ConfigError):
        benign_errors(capsnet, tiny_data.images, correct_only=True)


def test_detection_needs_a_decoder(tiny_config, tiny_data):
    from capsattack import CapsNet

    with pytest.raises(ConfigError):
        detect(tiny_data.images, CapsNet(tiny_config), 1.0)


def test_error_gradient_is_finite(capsnet, tiny_data):
    capsnet.to_precision("double")
    x = double(tiny_data.images[:2])
    x.requires_grad = True
    _, x_hat = capsnet.reconstruct(x)
    ops.sum(reconstruction_error(x, x_hat)).backward()
    assert np.all(np.isfinite(x.grad))
