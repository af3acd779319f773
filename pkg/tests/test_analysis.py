import csv

import numpy as np
import pytest

from capsattack.analysis import (
    BIN_COUNT,
    HISTOGRAM_HEADER,
    affine_eval,
    bench_attack_time,
    bin_index,
    perturbation_norms,
    rate_report,
    success_and_undetected_rates,
    transfer_eval,
    vote_agreement_histogram,
)
from capsattack.attacks import AttackResult, run_attacks
from capsattack.config import AttackConfig
from capsattack.errors import AnalysisError, ConfigError


def result(label, prediction, flagged):
    return AttackResult(
        index=0,
        label=label,
        adversarial=np.zeros(1),
        delta=np.zeros(1),
        prediction=prediction,
        success=label != prediction,
        loss_trace=[],
        flagged=flagged,
    )


def test_bin_edges():
    np.testing.assert_array_equal(bin_index(np.array([-1.0, 1.0, 0.011, 0.999, -0.999])), [0, 99, 50, 99, 0])


@pytest.mark.parametrize("selector", ["gt", "l-ngt"])
def test_histogram_counts_every_vote(capsnet, tiny_data, selector):
    histogram = vote_agreement_histogram(capsnet, tiny_data.images, tiny_data.labels, selector, batch_size=5)
    assert histogram.total == len(tiny_data) * 36
    assert histogram.vote_fraction.sum() == pytest.approx(1.0)
    assert 0.0 <= histogram.mean_abs_cosine <= 1.0
    assert np.all(histogram.mean_coupling >= 0) and np.all(histogram.mean_coupling <= 1)


def test_histogram_csv(capsnet, tiny_data, tmp_path):
    path = str(tmp_path / "histogram.csv")
    vote_agreement_histogram(capsnet, tiny_data.images, tiny_data.labels).to_csv(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == HISTOGRAM_HEADER
    assert len(rows) == BIN_COUNT + 1
    assert float(rows[1][1]) == -1.0
    assert float(rows[-1][2]) == 1.0
    assert sum(float(row[3]) for row in rows[1:]) == pytest.approx(1.0)


def test_histogram_needs_examples(capsnet, tiny_data):
    with pytest.raises(AnalysisError):
        vote_agreement_histogram(capsnet, tiny_data.images[:0], tiny_data.labels[:0])


def test_histogram_needs_a_capsnet(baseline, tiny_data):
    with pytest.raises(ConfigError):
        vote_agreement_histogram(baseline, tiny_data.images, tiny_data.labels)


def test_norms():
    norms = perturbation_norms([np.array([0.5, 0.0, -0.5])])
    assert norms.l0 == 2
    assert norms.l1 == pytest.approx(1.0)
    assert norms.l2 == pytest.approx(0.7071, abs=1e-4)
    assert norms.count == 1


def test_norms_average_over_examples():
    norms = perturbation_norms(np.array([[0.1, 0.1], [0.0, 0.0]]))
    assert norms.l0 == 1.0
    assert norms.l1 == pytest.approx(0.1)


def test_norms_of_nothing():
    with pytest.raises(AnalysisError):
        perturbation_norms([])


def test_rates():
    results = [result(0, 1, False), result(0, 2, True), result(1, 0, False), result(1, 1, False)]
    report = rate_report(results)
    assert report.count == 4
    assert report.success_rate == pytest.approx(0.75)
    assert report.undetected_rate == pytest.approx(0.5)


def test_rates_need_detection_status():
    with pytest.raises(AnalysisError):
        rate_report([result(0, 1, None)])


def test_rates_of_nothing():
    assert rate_report([]).to_dict() == {"success_rate": 0.0, "undetected_rate": 0.0, "count": 0}


def test_undetected_never_exceeds_success(capsnet, tiny_data):
    results = run_attacks(capsnet, tiny_data.images, tiny_data.labels, AttackConfig("bim", epsilon=0.1, iterations=2))
    adversarial = np.stack([r.adversarial for r in results])
    report = success_and_undetected_rates(capsnet, 0.5, adversarial, tiny_data.labels)
    assert report.count == len(tiny_data)
    assert report.undetected_rate <= report.success_rate
    assert report.success_rate == pytest.approx(np.mean([r.success for r in results]))


def test_transfer_to_the_source_model(capsnet, tiny_data):
    results = run_attacks(capsnet, tiny_data.images, tiny_data.labels, AttackConfig("bim", epsilon=0.2, iterations=3))
    adversarial = np.stack([r.adversarial for r in results])
    success = np.array([r.success for r in results])
    report = transfer_eval(adversarial, tiny_data.labels, success, capsnet)
    assert report.count == int(success.sum())
    if report.count:
        assert report.rate == 1.0


def test_transfer_without_successes(capsnet, tiny_data):
    report = transfer_eval(tiny_data.images, tiny_data.labels, np.zeros(len(tiny_data), dtype=bool), capsnet)
    assert (report.rate, report.count) == (0.0, 0)


def test_affine_without_transformations_is_plain_accuracy(capsnet, tiny_data):
    from capsattack.training import accuracy

    assert affine_eval(capsnet, tiny_data, 0, 0.0).standard_accuracy == accuracy(capsnet, tiny_data)


def test_affine_under_attack(capsnet, tiny_data):
    evaluation = affine_eval(capsnet, tiny_data, 1, 15.0, AttackConfig("fgsm", epsilon=0.05), seed=2)
    assert evaluation.robust_accuracy <= evaluation.standard_accuracy


def test_timing(capsnet, tiny_data):
    report = bench_attack_time(capsnet, AttackConfig("bim", iterations=2, target_head="votes"), tiny_data.images, tiny_data.labels, warmup=2)
    assert report.n == len(tiny_data) - 2
    assert report.mean_ms > 0
    assert report.to_dict()["target"] == "votes"


def test_timing_needs_more_than_the_warmup(capsnet, tiny_data):
    with pytest.raises(AnalysisError):
        bench_attack_time(capsnet, AttackConfig("fgsm"), tiny_data.images[:5], tiny_data.labels[:5])


def test_timing_refuses_a_target_equal_to_a_label(capsnet, tiny_data):
    label = int(tiny_data.labels[0])
    with pytest.raises(ConfigError):
        bench_attack_time(capsnet, AttackConfig("fgsm", targeted=label), tiny_data.images, tiny_data.labels, warmup=2)
