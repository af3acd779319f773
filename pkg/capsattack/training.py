"""
Standard training, adversarial training (AT, AT+Votes) and evaluation.
"""
from __future__ import annotations

import logging
from typing import Callable, List, Optional

import numpy as np

from capsattack import ops
from capsattack.attacks import run_attacks
from capsattack.config import AttackConfig, TrainConfig
from capsattack.data import Dataset
from capsattack.enums import AtMode, AttackFamily, ModelKind, TargetHead
from capsattack.errors import ConfigError, TrainingError
from capsattack.tensor import Parameter, Tensor, backward
from capsattack.utils import write_jsonl

__all__ = (
    "SGD",
    "EpochMetrics",
    "Evaluation",
    "train",
    "train_standard",
    "train_adversarial",
    "adversarial_loss_fn",
    "evaluate",
    "accuracy",
    "predict_all",
)

logger = logging.getLogger(__name__)


class SGD:
    """
    Stochastic gradient descent with momentum:
    velocity = momentum * velocity + grad; param -= lr * velocity.
    """

    def __init__(self, parameters: List[Parameter], momentum: float = 0.9) -> None:
        self.parameters = parameters
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in parameters]

    def step(self, lr: float) -> None:
        for param, velocity in zip(self.parameters, self.velocity):
            if param.grad is None:
                continue
            velocity *= self.momentum
            velocity += param.grad
            param.data -= param.data.dtype.type(lr) * velocity

    def zero_grad(self) -> None:
        for param in self.parameters:
            param.zero_grad()


class EpochMetrics:
    def __init__(self, epoch: int, lr: float, train_loss: float, train_acc: float, test_acc: Optional[float]) -> None:
        self.epoch = epoch
        self.lr = lr
        self.train_loss = train_loss
        self.train_acc = train_acc
        self.test_acc = test_acc

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
        }

    def __repr__(self):
        return f"<capsattack.EpochMetrics epoch={self.epoch} train_loss={self.train_loss:.4f} test_acc={self.test_acc}>"


def predict_all(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    if len(images) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([model.predict(images[s : s + batch_size]) for s in range(0, len(images), batch_size)])


def accuracy(model, dataset: Dataset, batch_size: int = 256) -> float:
    """Fraction of `dataset` the model classifies correctly."""
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict_all(model, dataset.images, batch_size) == dataset.labels))


def adversarial_loss_fn(model, config: TrainConfig) -> Optional[Callable[[Tensor, np.ndarray], Tensor]]:
    """
    The per-example loss the inner attack of adversarial training ascends, or
    None when the attack's own head loss is enough.
    """
    mode = config.at_mode
    if model.kind is not ModelKind.capsnet:
        if mode is not AtMode.caps:
            raise ConfigError(f"at_mode {mode.value} needs a capsule network")
        return None
    if mode is AtMode.caps_votes:
        weight = config.votes_weight

        def combined(x_adv: Tensor, classes: np.ndarray) -> Tensor:
            caps = model.head_loss(x_adv, classes, TargetHead.caps)
            votes = model.head_loss(x_adv, classes, TargetHead.votes)
            return ops.add(caps, ops.scale(votes, weight))

        return combined
    return None


def _inner_attack(model, config: TrainConfig, epoch: int) -> AttackConfig:
    if model.kind is not ModelKind.capsnet:
        head = TargetHead.logits
    elif config.at_mode is AtMode.votes_only:
        head = TargetHead.votes
    else:
        head = TargetHead.caps
    return AttackConfig(
        family=AttackFamily.pgd,
        target_head=head,
        epsilon=config.at_epsilon,
        alpha=config.at_alpha,
        iterations=config.at_iterations,
        random_start=True,
        seed=config.seed + 1 + epoch,
        batch_size=config.batch_size,
    )


def train(
    model,
    dataset: Dataset,
    config: TrainConfig,
    test: Optional[Dataset] = None,
    metrics_path: Optional[str] = None,
) -> List[EpochMetrics]:
    """
    Train `model` in place.

    The loss of a batch is its mean classification loss plus `recon_weight`
    times its mean summed squared reconstruction error. With an adversarial
    mode the batch is first replaced by PGD adversarial examples.

    Shuffling draws from a stream seeded with `config.seed`; the inner attack
    of epoch e uses seed `config.seed + 1 + e`, so enabling adversarial
    training does not change the batch order.

    Args:
        model:
            A CapsNet or CNNBaseline.
        dataset:
            The training split.
        config:
            The schedule.
        test:
            Optional split whose accuracy is recorded after every epoch.
        metrics_path:
            Optional file receiving one JSON record per epoch.

    Raises:
        TrainingError: when the loss stops being finite.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    adversarial = config.at_mode is not AtMode.none and config.at_iterations > 0
    loss_fn = adversarial_loss_fn(model, config) if adversarial else None

    optimizer = SGD(model.parameters(), config.momentum)
    shuffle = np.random.default_rng(config.seed)
    history: List[EpochMetrics] = []

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = shuffle.permutation(len(dataset))
        inner = _inner_attack(model, config, epoch) if adversarial else None
        total_loss, correct = 0.0, 0

        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            images, labels = dataset.images[batch], dataset.labels[batch]
            if inner is not None:
                results = run_attacks(model, images, labels, inner, indices=batch, loss_fn=loss_fn)
                images = np.stack([r.adversarial for r in results])

            optimizer.zero_grad()
            classification, reconstruction = model.loss_terms(images, labels, config.loss)
            loss = classification
            if reconstruction is not None and config.recon_weight:
                loss = ops.add(loss, ops.scale(reconstruction, config.recon_weight))
            loss = ops.scale(loss, 1.0 / len(batch))

            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError("training loss is not finite", epoch + 1)
            backward(loss)
            optimizer.step(lr)

            total_loss += value * len(batch)
            correct += int(np.sum(model.predict(images) == labels))

        metrics = EpochMetrics(
            epoch=epoch + 1,
            lr=lr,
            train_loss=total_loss / len(dataset),
            train_acc=correct / len(dataset),
            test_acc=None if test is None else accuracy(model, test),
        )
        history.append(metrics)
        logger.info(
            "epoch %d/%d lr=%g loss=%.5f train_acc=%.4f test_acc=%s",
            metrics.epoch,
            config.epochs,
            lr,
            metrics.train_loss,
            metrics.train_acc,
            "n/a" if metrics.test_acc is None else f"{metrics.test_acc:.4f}",
        )

    if metrics_path is not None:
        write_jsonl(history, metrics_path)
    return history


def train_standard(model, dataset: Dataset, config: TrainConfig, **kwargs) -> List[EpochMetrics]:
    return train(model, dataset, config.replace(at_mode=AtMode.none.value), **kwargs)


def train_adversarial(model, dataset: Dataset, config: TrainConfig, **kwargs) -> List[EpochMetrics]:
    if config.at_mode is AtMode.none:
        raise ConfigError("adversarial training needs at_mode caps, caps+votes or votes-only")
    return train(model, dataset, config, **kwargs)


class Evaluation:
    """Standard accuracy and, when an attack was run, robust accuracy."""

    def __init__(self, standard_accuracy: float, robust_accuracy: Optional[float], count: int, results=None) -> None:
        self.standard_accuracy = standard_accuracy
        self.robust_accuracy = robust_accuracy
        self.count = count
        self.results = results

    def to_dict(self) -> dict:
        return {
            "standard_accuracy": self.standard_accuracy,
            "robust_accuracy": self.robust_accuracy,
            "count": self.count,
        }

    def __repr__(self):
        return f"<capsattack.Evaluation standard={self.standard_accuracy:.4f} robust={self.robust_accuracy}>"


def evaluate(model, dataset: Dataset, attack: Optional[AttackConfig] = None, jobs: int = 1) -> Evaluation:
    """
    Accuracy over the whole split and, with `attack`, robust accuracy: the
    fraction of examples classified correctly both before and after their attack.
    """
    correct = predict_all(model, dataset.images) == dataset.labels
    standard = float(np.mean(correct)) if len(dataset) else 0.0
    if attack is None:
        return Evaluation(standard, None, len(dataset))

    results = run_attacks(model, dataset.images, dataset.labels, attack, jobs=jobs)
    robust = correct.copy()
    for result in results:
        robust[result.index] = correct[result.index] and result.prediction == result.label
    robust_accuracy = float(np.mean(robust)) if len(dataset) else 0.0
    logger.info("standard accuracy %.4f, robust accuracy %.4f", standard, robust_accuracy)
    return Evaluation(standard, robust_accuracy, len(dataset), results)
