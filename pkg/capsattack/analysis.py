"""
Measurements over trained models and attack results: vote-agreement
histograms, perturbation norms, success and undetected rates, transfer rates,
robustness on affine-transformed inputs and attack timing.
"""
from __future__ import annotations

import csv
import logging
import time
from typing import List, Optional, Sequence, Union

import numpy as np

from capsattack.attacks import AttackResult, gradient_attack
from capsattack.config import AttackConfig
from capsattack.data import Dataset, affine_dataset
from capsattack.enums import ClassSelector, ModelKind
from capsattack.errors import AnalysisError, ConfigError
from capsattack.reconstruction import DetectionThreshold, detect
from capsattack.tensor import no_grad
from capsattack.training import Evaluation, evaluate, predict_all

__all__ = (
    "VoteHistogram",
    "PerturbationNorms",
    "RateReport",
    "TransferReport",
    "TimingReport",
    "vote_agreement_histogram",
    "perturbation_norms",
    "success_and_undetected_rates",
    "rate_report",
    "transfer_eval",
    "affine_eval",
    "bench_attack_time",
    "BIN_COUNT",
    "HISTOGRAM_HEADER",
)

logger = logging.getLogger(__name__)

BIN_COUNT = 100
BIN_EDGES = np.linspace(-1.0, 1.0, BIN_COUNT + 1)
HISTOGRAM_HEADER = ("bin_index", "bin_low", "bin_high", "vote_fraction", "mean_vote_length", "mean_coupling")
WARMUP = 5


class VoteHistogram:
    """
    Agreement between output capsules and their votes, binned over [-1, 1].

    Bins are left-closed and right-open except the last one, [0.98, 1.0],
    which is closed. Empty bins report zero means.
    """

    def __init__(self, counts: np.ndarray, length_sums: np.ndarray, coupling_sums: np.ndarray, abs_cosine_sum: float, selector: ClassSelector) -> None:
        self.counts = counts
        self.length_sums = length_sums
        self.coupling_sums = coupling_sums
        self.abs_cosine_sum = abs_cosine_sum
        self.selector = selector

    def __repr__(self):
        return f"<capsattack.VoteHistogram selector={self.selector.value} votes={self.total} mean_abs_cosine={self.mean_abs_cosine:.4f}>"

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def vote_fraction(self) -> np.ndarray:
        return self.counts / self.total if self.total else np.zeros(BIN_COUNT)

    def _mean(self, sums: np.ndarray) -> np.ndarray:
        return np.divide(sums, self.counts, out=np.zeros(BIN_COUNT), where=self.counts > 0)

    @property
    def mean_vote_length(self) -> np.ndarray:
        return self._mean(self.length_sums)

    @property
    def mean_coupling(self) -> np.ndarray:
        return self._mean(self.coupling_sums)

    @property
    def mean_abs_cosine(self) -> float:
        return self.abs_cosine_sum / self.total if self.total else 0.0

    def rows(self) -> List[tuple]:
        fraction, length, coupling = self.vote_fraction, self.mean_vote_length, self.mean_coupling
        return [
            (k, float(BIN_EDGES[k]), float(BIN_EDGES[k + 1]), float(fraction[k]), float(length[k]), float(coupling[k]))
            for k in range(BIN_COUNT)
        ]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(HISTOGRAM_HEADER)
            for row in self.rows():
                writer.writerow([row[0]] + [repr(value) for value in row[1:]])

    def to_dict(self) -> dict:
        return {"selector": self.selector.value, "votes": self.total, "mean_abs_cosine": self.mean_abs_cosine}


def bin_index(cosine: np.ndarray) -> np.ndarray:
    return np.clip(np.searchsorted(BIN_EDGES, cosine, side="right") - 1, 0, BIN_COUNT - 1)


def _cosines(v: np.ndarray, votes: np.ndarray) -> np.ndarray:
    # zero votes or zero capsules abstain with cosine 0
    v_norm = np.linalg.norm(v, axis=-1)
    u_norm = np.linalg.norm(votes, axis=-1)
    denominator = u_norm * v_norm[:, None]
    dots = np.einsum("bnd,bd->bn", votes, v)
    cosine = np.divide(dots, denominator, out=np.zeros_like(dots), where=denominator > 0)
    return np.clip(cosine, -1.0, 1.0)


def vote_agreement_histogram(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    selector: Union[ClassSelector, str] = ClassSelector.ground_truth,
    batch_size: int = 128,
) -> VoteHistogram:
    """
    Bin cos(v_j, u_hat_{j|i}) over every example and primary capsule i, where j
    is the ground-truth class or the non-ground-truth class with the longest
    output capsule.

    Per bin the fraction of votes, the mean vote length and the mean coupling
    coefficient are kept.
    """
    selector = ClassSelector(selector)
    if model.kind is not ModelKind.capsnet:
        raise ConfigError("vote histograms need a capsule network")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise AnalysisError("cannot build a histogram from zero examples")

    counts = np.zeros(BIN_COUNT, dtype=np.int64)
    length_sums = np.zeros(BIN_COUNT)
    coupling_sums = np.zeros(BIN_COUNT)
    abs_cosine_sum = 0.0

    for start in range(0, len(labels), batch_size):
        with no_grad():
            result = model.forward(images[start : start + batch_size])
        batch_labels = labels[start : start + batch_size]
        v = result.capsules.data.astype(np.float64)
        votes = result.votes.data.astype(np.float64)
        coupling = result.coupling.c.data.astype(np.float64)
        rows = np.arange(len(batch_labels))

        if selector is ClassSelector.ground_truth:
            classes = batch_labels
        else:
            lengths = result.lengths.astype(np.float64)
            lengths[rows, batch_labels] = -np.inf
            classes = np.argmax(lengths, axis=-1)

        cosine = _cosines(v[rows, classes], votes[rows, :, classes])
        bins = bin_index(cosine).reshape(-1)
        counts += np.bincount(bins, minlength=BIN_COUNT)
        length_sums += np.bincount(bins, weights=np.linalg.norm(votes[rows, :, classes], axis=-1).reshape(-1), minlength=BIN_COUNT)
        coupling_sums += np.bincount(bins, weights=coupling[rows, :, classes].reshape(-1), minlength=BIN_COUNT)
        abs_cosine_sum += float(np.abs(cosine).sum())

    histogram = VoteHistogram(counts, length_sums, coupling_sums, abs_cosine_sum, selector)
    logger.info("histogram over %d votes, mean |cos| %.4f", histogram.total, histogram.mean_abs_cosine)
    return histogram


class PerturbationNorms:
    def __init__(self, l0: float, l1: float, l2: float, count: int) -> None:
        self.l0 = l0
        self.l1 = l1
        self.l2 = l2
        self.count = count

    def to_dict(self) -> dict:
        return {"l0": self.l0, "l1": self.l1, "l2": self.l2, "count": self.count}

    def __repr__(self):
        return f"<capsattack.PerturbationNorms l0={self.l0} l1={self.l1} l2={self.l2} n={self.count}>"


def perturbation_norms(deltas: Union[np.ndarray, Sequence[np.ndarray]]) -> PerturbationNorms:
    """Mean l0 (exact non-zeros), l1 and l2 norms of a set of perturbations."""
    if len(deltas) == 0:
        raise AnalysisError("cannot measure an empty set of perturbations")
    flat = np.stack([np.asarray(d, dtype=np.float64).reshape(-1) for d in deltas])
    return PerturbationNorms(
        l0=float(np.mean(np.count_nonzero(flat, axis=1))),
        l1=float(np.mean(np.sum(np.abs(flat), axis=1))),
        l2=float(np.mean(np.sqrt(np.sum(flat * flat, axis=1)))),
        count=len(flat),
    )


class RateReport:
    """
    Success rate S (misclassified) and undetected rate R (misclassified and
    not flagged) over K evaluated examples.
    """

    def __init__(self, success_rate: float, undetected_rate: float, count: int) -> None:
        self.success_rate = success_rate
        self.undetected_rate = undetected_rate
        self.count = count

    def to_dict(self) -> dict:
        return {"success_rate": self.success_rate, "undetected_rate": self.undetected_rate, "count": self.count}

    def __repr__(self):
        return f"<capsattack.RateReport S={self.success_rate:.4f} R={self.undetected_rate:.4f} K={self.count}>"


def _rates(misclassified: np.ndarray, flagged: np.ndarray) -> RateReport:
    count = len(misclassified)
    if count == 0:
        return RateReport(0.0, 0.0, 0)
    return RateReport(
        float(np.mean(misclassified)),
        float(np.mean(misclassified & ~flagged)),
        count,
    )


def success_and_undetected_rates(
    model,
    theta: Union[DetectionThreshold, float],
    adversarial: np.ndarray,
    labels: np.ndarray,
) -> RateReport:
    """Classify and screen `adversarial` images with the detector at `theta`."""
    detection = detect(adversarial, model, theta)
    misclassified = detection.prediction != np.asarray(labels)
    return _rates(misclassified, detection.flagged)


def rate_report(results: Sequence[AttackResult]) -> RateReport:
    """S and R from attack results that recorded their detection status."""
    if any(r.flagged is None for r in results):
        raise AnalysisError("attack results carry no detection status, rerun with a threshold")
    misclassified = np.array([r.prediction != r.label for r in results], dtype=bool)
    flagged = np.array([r.flagged for r in results], dtype=bool)
    return _rates(misclassified, flagged)


class TransferReport:
    def __init__(self, rate: float, transferred: int, count: int) -> None:
        self.rate = rate
        self.transferred = transferred
        self.count = count

    def to_dict(self) -> dict:
        return {"transfer_success_rate": self.rate, "transferred": self.transferred, "count": self.count}

    def __repr__(self):
        return f"<capsattack.TransferReport rate={self.rate:.4f} n={self.count}>"


def transfer_eval(adversarial: np.ndarray, labels: np.ndarray, source_success: np.ndarray, target_model) -> TransferReport:
    """
    The fraction of examples that fooled the source model and also fool the
    target model.
    """
    keep = np.asarray(source_success, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    if not keep.any():
        return TransferReport(0.0, 0, 0)
    prediction = predict_all(target_model, np.asarray(adversarial)[keep])
    fooled = int(np.sum(prediction != labels[keep]))
    return TransferReport(fooled / int(keep.sum()), fooled, int(keep.sum()))


def affine_eval(
    model,
    dataset: Dataset,
    translate_px: int,
    rotate_deg: float,
    attack: Optional[AttackConfig] = None,
    seed: int = 0,
    jobs: int = 1,
) -> Evaluation:
    """Clean and attacked accuracy on a randomly translated and rotated copy of `dataset`."""
    transformed = affine_dataset(dataset, translate_px, rotate_deg, seed)
    return evaluate(model, transformed, attack, jobs=jobs)


class TimingReport:
    def __init__(self, attack: str, target: str, mean_ms: float, n: int, inference_ms: float) -> None:
        self.attack = attack
        self.target = target
        self.mean_ms = mean_ms
        self.n = n
        self.inference_ms = inference_ms

    def to_dict(self) -> dict:
        return {
            "attack": self.attack,
            "target": self.target,
            "mean_ms": self.mean_ms,
            "n": self.n,
            "inference_ms": self.inference_ms,
        }

    def __repr__(self):
        return f"<capsattack.TimingReport {self.attack}/{self.target} mean_ms={self.mean_ms:.3f} n={self.n}>"


def bench_attack_time(model, config: AttackConfig, images: np.ndarray, labels: np.ndarray, warmup: int = WARMUP) -> TimingReport:
    """
    Mean wall-clock milliseconds per adversarial example, attacking one example
    at a time on the calling thread. The first `warmup` examples are discarded.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) <= warmup:
        raise AnalysisError(f"{len(labels)} examples leave nothing to measure after {warmup} warm-up runs")

    attack_times, inference_times = [], []
    for i, (image, label) in enumerate(zip(images, labels)):
        start = time.perf_counter()
        gradient_attack(image, int(label), config, model, index=i)
        attack_times.append(time.perf_counter() - start)

        start = time.perf_counter()
        model.predict(image)
        inference_times.append(time.perf_counter() - start)

    attack_times, inference_times = attack_times[warmup:], inference_times[warmup:]
    if not attack_times:
        raise AnalysisError("no examples left to measure after warm-up")
    report = TimingReport(
        attack=config.family.value,
        target=config.target_head.value,
        mean_ms=1000.0 * float(np.mean(attack_times)),
        n=len(attack_times),
        inference_ms=1000.0 * float(np.mean(inference_times)),
    )
    logger.info("%s/%s: %.3f ms per example over %d examples", report.attack, report.target, report.mean_ms, report.n)
    return report
