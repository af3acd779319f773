import numpy as np
import pytest

from capsattack import CapsNet, CNNBaseline, build_model, model_from_description
from capsattack.enums import ModelKind, Precision
from capsattack.errors import ConfigError


def test_baseline_logits(baseline, tiny_data):
    logits = baseline.head_logits(tiny_data.images[:5], "logits")
    assert logits.shape == (5, 3)
    np.testing.assert_array_equal(baseline.predict(tiny_data.images[:5]), np.argmax(logits.data, axis=-1))


def test_group_sums_are_cnn_cr_logits(baseline_config, tiny_data):
    model = CNNBaseline(baseline_config, ModelKind.cnn_cr, seed=1)
    a = model.activations(tiny_data.images[:2]).data
    expected = a.reshape(2, 3, 4).sum(axis=-1)
    np.testing.assert_allclose(model.head_logits(tiny_data.images[:2], "logits").data, expected, rtol=1e-5)


def test_baseline_has_only_a_logits_head(baseline, tiny_data):
    for head in ("caps", "votes"):
        with pytest.raises(ConfigError):
            baseline.head_loss(tiny_data.images[:1], tiny_data.labels[:1], head)


def test_baseline_reconstruction(baseline, tiny_data):
    prediction, x_hat = baseline.reconstruct(tiny_data.images[:3])
    assert prediction.shape == (3,)
    assert x_hat.shape == (3, 1, 8, 8)
    assert np.all((x_hat.data >= 0) & (x_hat.data <= 1))


def test_baseline_loss_terms(baseline, tiny_data):
    classification, reconstruction = baseline.loss_terms(tiny_data.images[:3], tiny_data.labels[:3], "margin")
    assert classification.item() > 0
    assert reconstruction.item() > 0


def test_baseline_is_not_a_capsnet(baseline_config):
    with pytest.raises(ConfigError):
        CNNBaseline(baseline_config, ModelKind.capsnet)


def test_build_model_kinds():
    assert isinstance(build_model("capsnet"), CapsNet)
    cnn = build_model("cnn-r", recon=None)
    assert isinstance(cnn, CNNBaseline)
    assert cnn.kind is ModelKind.cnn_r
    assert cnn.recon is None


def test_build_model_unknown_kind():
    with pytest.raises(ConfigError):
        build_model("resnet")


def test_build_model_unknown_preset():
    with pytest.raises(ConfigError):
        build_model("capsnet", architecture="huge")


def test_build_model_in_double():
    model = build_model("capsnet", precision="double", seed=3)
    assert model.precision is Precision.double
    assert all(p.data.dtype == np.float64 for p in model.parameters())


def test_description_rebuilds_the_same_model():
    model = build_model("cnn-cr", seed=4)
    rebuilt = model_from_description(model.describe())
    assert rebuilt.describe() == model.describe()
    for (name, a), (_, b) in zip(model.named_parameters(), rebuilt.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_invalid_description():
    with pytest.raises(ConfigError):
        model_from_description({"kind": "capsnet"})
