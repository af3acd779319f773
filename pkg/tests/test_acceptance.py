"""
End-to-end checks on the toy CapsNet trained on the synthetic glyphs. Most of
them train a model first and take minutes on a CPU; run them with `pytest -m slow`.
"""
import numpy as np
import pytest

from capsattack import CapsNet, ops
from capsattack.analysis import affine_eval, bench_attack_time, rate_report, transfer_eval, vote_agreement_histogram
from capsattack.attacks import run_attacks
from capsattack.capsnet import dynamic_routing
from capsattack.config import AttackConfig, CapsNetConfig, DataConfig, ReconNetConfig, TrainConfig
from capsattack.data import load_splits
from capsattack.enums import AttackFamily, TargetHead
from capsattack.reconstruction import benign_errors, calibrate_threshold
from capsattack.tensor import Tape, Tensor
from capsattack.training import accuracy, evaluate, train

from conftest import double

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2]


def toy_capsnet(splits, seed=0, **training):
    model = CapsNet(CapsNetConfig.preset("toy"), ReconNetConfig.preset("toy"), seed=seed)
    train(model, splits.train, TrainConfig.preset("desk", seed=seed, **training))
    return model


def success_rate(results):
    return float(np.mean([r.success for r in results]))


@pytest.fixture(scope="module")
def splits():
    return load_splits(DataConfig.preset(), seed=0)


@pytest.fixture(scope="module")
def toy_model(splits):
    return toy_capsnet(splits)


@pytest.fixture(scope="module")
def other_toy_model(splits):
    return toy_capsnet(splits, seed=1)


@pytest.fixture(scope="module")
def theta(toy_model, splits):
    return calibrate_threshold(benign_errors(toy_model, splits.validation.images, splits.validation.labels))


def test_toy_capsnet_learns_the_synthetic_glyphs(toy_model, splits):
    assert accuracy(toy_model, splits.test) >= 0.95


@pytest.mark.parametrize("seed", SEEDS)
def test_vote_attack_is_at_least_as_effective(toy_model, splits, seed):
    test = splits.test.head(64)
    rates = {}
    for head in ("caps", "votes"):
        results = run_attacks(toy_model, test.images, test.labels, AttackConfig("pgd", target_head=head, seed=seed))
        rates[head] = success_rate(results)
    assert rates["votes"] >= rates["caps"] - 0.01


def test_vote_attack_is_faster(toy_model, splits):
    test = splits.test.head(15)
    timings = {"caps": [], "votes": []}
    for _ in range(5):
        for head in timings:
            config = AttackConfig("pgd", iterations=10, target_head=head)
            timings[head].append(bench_attack_time(toy_model, config, test.images, test.labels).mean_ms)
    assert np.median(timings["votes"]) < np.median(timings["caps"])


def test_vote_attack_never_routes_inside_gradients(toy_model, splits):
    test = splits.test.head(8)
    for head, routed in (("votes", False), ("caps", True)):
        results = run_attacks(toy_model, test.images, test.labels, AttackConfig("pgd", iterations=10, target_head=head))
        assert all((r.gradient_routing_calls > 0) == routed for r in results)


@pytest.mark.parametrize("seed", SEEDS)
def test_success_grows_with_the_budget(toy_model, splits, seed):
    test = splits.test.head(64)
    rates = [
        success_rate(run_attacks(toy_model, test.images, test.labels, AttackConfig("bim", epsilon=eps, seed=seed)))
        for eps in (0.0, 0.01, 0.031, 0.06, 0.1)
    ]
    assert rates[0] == pytest.approx(1.0 - accuracy(toy_model, test))
    for smaller, larger in zip(rates, rates[1:]):
        assert larger >= smaller - 0.01


def test_benign_flag_rate_matches_the_percentile(toy_model, splits, theta):
    errors = benign_errors(toy_model, splits.validation.images, splits.validation.labels)
    flagged = float(np.mean(errors > theta.theta))
    assert abs(flagged - 0.05) <= 1.0 / len(errors)


@pytest.mark.parametrize("seed", SEEDS)
def test_detection_aware_attack_goes_undetected_more_often(toy_model, splits, theta, seed):
    test = splits.test.head(64)
    config = AttackConfig("pgd", target_head="votes", epsilon=0.1, beta=0.5, seed=seed)
    aware = rate_report(run_attacks(toy_model, test.images, test.labels, config, theta=theta, detection_aware=True))
    agnostic = rate_report(run_attacks(toy_model, test.images, test.labels, config, theta=theta))
    assert aware.undetected_rate > agnostic.undetected_rate
    assert aware.undetected_rate <= aware.success_rate
    assert agnostic.undetected_rate <= agnostic.success_rate


def test_successful_attacks_scatter_the_votes(toy_model, splits):
    test = splits.test.head(64)
    results = run_attacks(toy_model, test.images, test.labels, AttackConfig("pgd", target_head="caps", epsilon=0.1))
    successful = [r for r in results if r.success]
    assert successful
    adversarial = np.stack([r.adversarial for r in successful])
    labels = np.array([r.label for r in successful])
    clean = vote_agreement_histogram(toy_model, test.images, test.labels, "gt")
    attacked = vote_agreement_histogram(toy_model, adversarial, labels, "gt")
    assert attacked.mean_abs_cosine < clean.mean_abs_cosine
    assert attacked.vote_fraction.sum() == pytest.approx(1.0, abs=1e-6)


def test_vote_attack_transfers_at_least_as_well(toy_model, other_toy_model, splits):
    test = splits.test.head(64)
    rates = {}
    for head in ("caps", "votes"):
        results = run_attacks(toy_model, test.images, test.labels, AttackConfig("pgd", target_head=head, epsilon=0.1))
        adversarial = np.stack([r.adversarial for r in results])
        success = np.array([r.success for r in results])
        rates[head] = transfer_eval(adversarial, test.labels, success, other_toy_model).rate
    assert rates["votes"] >= rates["caps"] - 0.01


def test_vote_attack_under_affine_transformations(toy_model, splits):
    test = splits.test.head(64)
    robust = {
        head: affine_eval(toy_model, test, 2, 30.0, AttackConfig("pgd", target_head=head), seed=0).robust_accuracy
        for head in ("caps", "votes")
    }
    assert robust["votes"] <= robust["caps"] + 0.01


@pytest.fixture(scope="module")
def adversarially_trained(splits):
    return {mode: toy_capsnet(splits, at_mode=mode) for mode in ("caps", "caps+votes")}


@pytest.mark.parametrize("seed", SEEDS)
def test_adversarial_training_improves_robustness(toy_model, adversarially_trained, splits, seed):
    test = splits.test.head(64)
    caps_attack = AttackConfig("pgd", iterations=40, target_head="caps", seed=seed)
    vote_attack = AttackConfig("pgd", iterations=40, target_head="votes", seed=seed)
    at, at_votes = adversarially_trained["caps"], adversarially_trained["caps+votes"]

    assert evaluate(at, test, caps_attack).robust_accuracy > evaluate(toy_model, test, caps_attack).robust_accuracy
    assert evaluate(at_votes, test, vote_attack).robust_accuracy >= evaluate(at, test, vote_attack).robust_accuracy


def test_coupling_rows_sum_to_one_on_many_vote_tensors():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        shape = (int(rng.integers(1, 9)), int(rng.integers(2, 6)), int(rng.integers(1, 5)))
        votes = rng.normal(scale=rng.uniform(0.01, 5.0), size=shape)
        _, coupling = dynamic_routing(double(votes), 3)
        for c in coupling.history:
            np.testing.assert_allclose(c.sum(axis=-1), 1.0, atol=1e-6)

        v, _ = dynamic_routing(double(votes), 1)
        s = votes.sum(axis=0) / shape[1]
        norm = np.linalg.norm(s, axis=-1, keepdims=True)
        np.testing.assert_allclose(v.data, s * norm / (1 + norm ** 2), atol=1e-6)


def test_vote_heads_record_no_routing_on_the_tape(capsnet, tiny_data):
    x = Tensor(tiny_data.images[:2], requires_grad=True)
    for head in TargetHead:
        if head is TargetHead.logits:
            continue
        names = Tape.from_loss(ops.sum(capsnet.head_loss(x, tiny_data.labels[:2], head))).op_names
        assert ("softmax" in names) != head.bypasses_routing, head.value


def test_perturbations_stay_in_budget_under_fuzzing(capsnet, tiny_data):
    rng = np.random.default_rng(11)
    heads = [head.value for head in TargetHead if head is not TargetHead.logits]
    runs = 0
    while runs < 10000:
        eps = float(rng.choice([0.0, 1e-3, rng.uniform(0.0, 0.5), 1.0]))
        family = AttackFamily(str(rng.choice([family.value for family in AttackFamily])))
        config = AttackConfig(
            family,
            target_head=str(rng.choice(heads)),
            epsilon=eps,
            iterations=1 if family is AttackFamily.fgsm else int(rng.integers(1, 4)),
            targeted="random" if rng.random() < 0.3 else None,
            seed=int(rng.integers(2 ** 32)),
        )
        detection_aware = bool(rng.random() < 0.2)
        results = run_attacks(capsnet, tiny_data.images, tiny_data.labels, config, theta=0.5, detection_aware=detection_aware)
        for result, clean in zip(results, tiny_data.images):
            assert np.abs(result.delta).max() <= eps + 1e-6
            assert result.adversarial.min() >= 0.0 and result.adversarial.max() <= 1.0
            np.testing.assert_allclose(result.adversarial, clean + result.delta, atol=1e-6)
        runs += len(results)
