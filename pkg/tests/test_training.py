import numpy as np
import pytest

from capsattack import CapsNet
from capsattack.config import AttackConfig, TrainConfig
from capsattack.errors import ConfigError, TrainingError
from capsattack.training import SGD, accuracy, adversarial_loss_fn, evaluate, train, train_adversarial, train_standard
from capsattack.utils import read_jsonl


def schedule(**overrides):
    values = dict(epochs=1, batch_size=4, lr=0.05, decay_epoch=0, decayed_lr=0.05, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def snapshot(model):
    return {name: p.data.copy() for name, p in model.named_parameters()}


class ConstantModel:
    def predict(self, x):
        return np.zeros(len(x), dtype=np.int64)


def test_zero_epochs_leaves_the_model_alone(capsnet, tiny_data):
    before = snapshot(capsnet)
    assert train(capsnet, tiny_data, schedule(epochs=0)) == []
    for name, value in snapshot(capsnet).items():
        np.testing.assert_array_equal(value, before[name], err_msg=name)


def test_an_epoch_moves_the_weights(capsnet, tiny_data):
    before = snapshot(capsnet)
    history = train(capsnet, tiny_data, schedule())
    assert len(history) == 1
    assert history[0].epoch == 1
    assert np.isfinite(history[0].train_loss)
    assert not np.array_equal(capsnet.weights.data, before["weights"])


def test_learning_rate_drops_at_the_decay_epoch(capsnet, tiny_data):
    history = train(capsnet, tiny_data, schedule(epochs=3, lr=0.05, decay_epoch=2, decayed_lr=0.005))
    assert [m.lr for m in history] == [0.05, 0.05, 0.005]


def test_zero_inner_iterations_is_standard_training(tiny_config, recon_config, tiny_data):
    plain, adversarial = CapsNet(tiny_config, recon_config, seed=2), CapsNet(tiny_config, recon_config, seed=2)
    train_standard(plain, tiny_data, schedule(epochs=2, decay_epoch=1))
    train(adversarial, tiny_data, schedule(epochs=2, decay_epoch=1, at_mode="caps", at_iterations=0))
    for name, value in snapshot(plain).items():
        np.testing.assert_array_equal(value, snapshot(adversarial)[name], err_msg=name)


@pytest.mark.parametrize("mode", ["caps", "caps+votes", "votes-only"])
def test_adversarial_training_runs(capsnet, tiny_data, mode):
    history = train_adversarial(capsnet, tiny_data, schedule(at_mode=mode, at_iterations=1, at_epsilon=0.05))
    assert np.isfinite(history[0].train_loss)


def test_adversarial_training_needs_a_mode(capsnet, tiny_data):
    with pytest.raises(ConfigError):
        train_adversarial(capsnet, tiny_data, schedule())


def test_baselines_only_train_against_logit_attacks(baseline, tiny_data):
    assert adversarial_loss_fn(baseline, schedule(at_mode="caps")) is None
    with pytest.raises(ConfigError):
        adversarial_loss_fn(baseline, schedule(at_mode="caps+votes"))
    history = train_adversarial(baseline, tiny_data, schedule(at_mode="caps", at_iterations=1))
    assert np.isfinite(history[0].train_loss)


def test_combined_loss_adds_weighted_votes(capsnet, tiny_data):
    loss_fn = adversarial_loss_fn(capsnet, schedule(at_mode="caps+votes", votes_weight=2.0))
    x, y = tiny_data.images[:2], tiny_data.labels[:2]
    expected = capsnet.head_loss(x, y, "caps").data + 2.0 * capsnet.head_loss(x, y, "votes").data
    np.testing.assert_allclose(loss_fn(capsnet.as_batch(x), y).data, expected, rtol=1e-5)


def test_cross_entropy_loss(capsnet, tiny_data):
    history = train(capsnet, tiny_data, schedule(loss="cross-entropy"))
    assert np.isfinite(history[0].train_loss)


def test_non_finite_loss_stops_training(capsnet, tiny_data):
    capsnet.weights.data[...] = np.nan
    with pytest.raises(TrainingError) as e:
        train(capsnet, tiny_data, schedule())
    assert e.value.epoch == 1


def test_empty_dataset(capsnet, tiny_data):
    with pytest.raises(ConfigError):
        train(capsnet, tiny_data.subset([]), schedule())


def test_metrics_file(capsnet, tiny_data, tmp_path):
    path = str(tmp_path / "metrics.jsonl")
    train(capsnet, tiny_data, schedule(epochs=2, decay_epoch=1), test=tiny_data, metrics_path=path)
    records = list(read_jsonl(path))
    assert [r["epoch"] for r in records] == [1, 2]
    assert set(records[0]) >= {"lr", "train_loss", "train_acc", "test_acc"}
    assert 0.0 <= records[1]["test_acc"] <= 1.0


def test_sgd_momentum():
    from capsattack.tensor import Parameter

    p = Parameter("p", np.array([1.0]), precision="double")
    optimizer = SGD([p], momentum=0.5)
    for _ in range(2):
        p.grad = np.array([1.0])
        optimizer.step(0.1)
    # velocities 1 then 1.5
    assert p.data[0] == pytest.approx(1.0 - 0.1 - 0.15)


def test_constant_predictions_score_one_over_classes(tiny_data):
    assert accuracy(ConstantModel(), tiny_data) == pytest.approx(1 / 3)


def test_evaluation_without_attack(capsnet, tiny_data):
    result = evaluate(capsnet, tiny_data)
    assert result.robust_accuracy is None
    assert result.count == len(tiny_data)
    assert result.standard_accuracy == accuracy(capsnet, tiny_data)


def test_zero_budget_attack_keeps_accuracy(capsnet, tiny_data):
    result = evaluate(capsnet, tiny_data, AttackConfig("pgd", epsilon=0.0, alpha=0.0, iterations=2))
    assert result.robust_accuracy == result.standard_accuracy


def test_robust_accuracy_never_exceeds_standard(capsnet, tiny_data):
    result = evaluate(capsnet, tiny_data, AttackConfig("bim", epsilon=0.1, iterations=3, target_head="votes"))
    assert result.robust_accuracy <= result.standard_accuracy
    assert len(result.results) == len(tiny_data)
    assert set(result.to_dict()) == {"standard_accuracy", "robust_accuracy", "count"}

