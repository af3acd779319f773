"""
l-infinity gradient attacks (FGSM, BIM, PGD, MIM) against any model head, and
the two-stage detection-aware variant that also keeps the reconstruction error
low.

Every example owns a PRNG stream seeded with `config.seed XOR index`, which
decides its random start and its random target, so results do not depend on
how examples are batched or on the number of worker threads.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from capsattack import ops
from capsattack.capsnet import routing_counter
from capsattack.config import AttackConfig
from capsattack.enums import AttackFamily, TwoStageSchedule
from capsattack.errors import ConfigError
from capsattack.reconstruction import DetectionThreshold, reconstruction_error
from capsattack.tensor import Tensor, backward, no_grad
from capsattack.utils import example_rng

__all__ = (
    "AttackResult",
    "project_ball",
    "attack_loss",
    "gradient_attack",
    "detection_aware_attack",
    "run_attacks",
    "resolve_targets",
)

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]
LossFn = Callable[[Tensor, np.ndarray], Tensor]


class AttackResult:
    """
    The outcome of attacking one example.

    `success` is judged on the full model: misclassification for untargeted
    attacks, a prediction equal to `target` for targeted ones. `flagged` and
    `recon_error` are only set when a detection threshold was supplied.
    `gradient_routing_calls` counts the routing executions inside the
    classification-loss gradients of the example's batch.
    """

    def __init__(
        self,
        index: int,
        label: int,
        adversarial: np.ndarray,
        delta: np.ndarray,
        prediction: int,
        success: bool,
        loss_trace: List[float],
        target: Optional[int] = None,
        gradient_routing_calls: int = 0,
        flagged: Optional[bool] = None,
        recon_error: Optional[float] = None,
    ) -> None:
        self.index = int(index)
        self.label = int(label)
        self.adversarial = adversarial
        self.delta = delta
        self.prediction = int(prediction)
        self.success = bool(success)
        self.loss_trace = loss_trace
        self.target = None if target is None else int(target)
        self.gradient_routing_calls = int(gradient_routing_calls)
        self.flagged = None if flagged is None else bool(flagged)
        self.recon_error = None if recon_error is None else float(recon_error)

    def __repr__(self):
        return f"<capsattack.AttackResult index={self.index} label={self.label} prediction={self.prediction} success={self.success}>"

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0

    def to_dict(self) -> dict:
        """The per-example record, without the image arrays."""
        return {
            "index": self.index,
            "label": self.label,
            "target": self.target,
            "prediction": self.prediction,
            "success": self.success,
            "flagged": self.flagged,
            "recon_error": self.recon_error,
            "linf": self.linf,
            "gradient_routing_calls": self.gradient_routing_calls,
            "loss_trace": [float(v) for v in self.loss_trace],
        }


def project_ball(delta: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """
    Clamp every coordinate of `delta` to [-epsilon, epsilon], then shrink it so
    x + delta stays inside [0, 1].
    """
    if delta.shape != x.shape:
        raise ValueError(f"perturbation shape {delta.shape} differs from image shape {x.shape}")
    delta = np.clip(delta, -epsilon, epsilon)
    return np.clip(delta, -x, 1 - x).astype(x.dtype, copy=False)


def resolve_targets(labels: np.ndarray, config: AttackConfig, indices: Sequence[int], num_classes: int) -> Optional[np.ndarray]:
    """
    The class each example is pushed toward, or None for untargeted attacks.

    "random" draws uniformly among the classes other than the label, from the
    example's own stream.
    """
    if not config.is_targeted:
        return None
    labels = np.asarray(labels, dtype=np.int64)
    if config.targeted == "random":
        targets = np.empty_like(labels)
        for k, (label, index) in enumerate(zip(labels, indices)):
            draw = int(example_rng(config.seed, index).integers(num_classes - 1))
            targets[k] = draw + (draw >= label)
        return targets

    target = int(config.targeted)
    if target >= num_classes:
        raise ConfigError(f"target class {target} does not exist in {num_classes} classes")
    if np.any(labels == target):
        raise ConfigError(f"target class {target} equals the true label")
    return np.full_like(labels, target)


def _loss_objective(
    model,
    x: np.ndarray,
    labels: np.ndarray,
    config: AttackConfig,
    targets: Optional[np.ndarray],
    loss_fn: Optional[LossFn] = None,
) -> Objective:
    classes = labels if targets is None else targets

    def objective(delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        d = Tensor(delta, requires_grad=True)
        x_adv = ops.add(Tensor(x), d)
        if loss_fn is None:
            losses = model.head_loss(x_adv, classes, config.target_head)
        else:
            losses = loss_fn(x_adv, classes)
        if targets is not None:
            losses = ops.neg(losses)
        backward(ops.sum(losses), inputs=(d,))
        return losses.data.copy(), d.grad

    return objective


def _recon_objective(model, x: np.ndarray) -> Objective:
    def objective(delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        d = Tensor(delta, requires_grad=True)
        x_adv = ops.add(Tensor(x), d)
        _, x_hat = model.reconstruct(x_adv)
        errors = reconstruction_error(x_adv, x_hat)
        backward(ops.sum(errors), inputs=(d,))
        return errors.data.copy(), d.grad

    return objective


def attack_loss(x, label: int, config: AttackConfig, model, target: Optional[int] = None) -> Tensor:
    """
    The scalar objective an attack ascends for one example: the cross-entropy of
    the configured head against the label, or its negation against the target.
    """
    x = model.as_batch(x)
    if target is None and config.is_targeted:
        target = resolve_targets(np.array([label]), config, [0], model.num_classes)[0]
    elif target is not None and int(target) == int(label):
        raise ConfigError(f"target class {target} equals the true label")
    classes = np.array([label if target is None else target])
    loss = ops.sum(model.head_loss(x, classes, config.target_head))
    return loss if target is None else ops.neg(loss)


def _step_direction(grad: np.ndarray, momentum: Optional[np.ndarray], decay: float) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if momentum is None:
        return np.sign(grad), None
    axes = tuple(range(1, grad.ndim))
    l1 = np.sum(np.abs(grad), axis=axes, keepdims=True)
    momentum = decay * momentum + grad / np.where(l1 > 0, l1, 1)
    return np.sign(momentum), momentum


class _BatchAttack:
    """The perturbation loop over one batch of examples."""

    def __init__(
        self,
        model,
        x: np.ndarray,
        labels: np.ndarray,
        indices: Sequence[int],
        config: AttackConfig,
        targets: Optional[np.ndarray],
        threshold: Optional[float],
        detection_aware: bool,
        loss_fn: Optional[LossFn] = None,
    ) -> None:
        self.model = model
        self.loss_fn = loss_fn
        self.x = x
        self.labels = labels
        self.indices = list(indices)
        self.config = config
        self.targets = targets
        self.threshold = threshold
        self.detection_aware = detection_aware
        self.traces: List[List[float]] = [[] for _ in self.indices]
        self.routing_calls = 0

    def initial_delta(self) -> np.ndarray:
        delta = np.zeros_like(self.x)
        if self.config.random_start and self.config.epsilon > 0:
            for k, index in enumerate(self.indices):
                rng = example_rng(self.config.seed, index)
                if self.config.targeted == "random":
                    # the first draw of the stream picked the target
                    rng.integers(self.model.num_classes - 1)
                delta[k] = rng.uniform(-self.config.epsilon, self.config.epsilon, size=self.x.shape[1:])
        return project_ball(delta, self.x, self.config.epsilon)

    def classification_steps(self, delta: np.ndarray, steps: int, alpha: float, momentum: Optional[np.ndarray]):
        objective = _loss_objective(self.model, self.x, self.labels, self.config, self.targets, self.loss_fn)
        for _ in range(steps):
            before = routing_counter.value
            values, grad = objective(delta)
            self.routing_calls += routing_counter.value - before
            for trace, value in zip(self.traces, values):
                trace.append(float(value))
            direction, momentum = _step_direction(grad, momentum, self.config.momentum_decay)
            delta = project_ball(delta + alpha * direction, self.x, self.config.epsilon)
        return delta, momentum

    def reconstruction_steps(self, delta: np.ndarray, steps: int, alpha: float) -> np.ndarray:
        objective = _recon_objective(self.model, self.x)
        sign = 1.0 if self.config.recon_ascent else -1.0
        for _ in range(steps):
            _, grad = objective(delta)
            delta = project_ball(delta + sign * alpha * np.sign(grad), self.x, self.config.epsilon)
        return delta

    def run(self) -> List[AttackResult]:
        config = self.config
        delta = self.initial_delta()
        momentum = np.zeros_like(self.x) if config.family is AttackFamily.mim else None

        if not self.detection_aware:
            delta, _ = self.classification_steps(delta, config.iterations, config.alpha, momentum)
        else:
            fooling = config.alpha * config.beta
            hiding = config.alpha * (1 - config.beta)
            if config.schedule is TwoStageSchedule.sequential:
                delta, momentum = self.classification_steps(delta, config.iterations, fooling, momentum)
                if hiding > 0:
                    delta = self.reconstruction_steps(delta, config.iterations, hiding)
            else:
                for _ in range(config.iterations):
                    delta, momentum = self.classification_steps(delta, 1, fooling, momentum)
                    if hiding > 0:
                        delta = self.reconstruction_steps(delta, 1, hiding)
        return self.finish(delta)

    def finish(self, delta: np.ndarray) -> List[AttackResult]:
        adversarial = self.x + delta
        with no_grad():
            if self.threshold is not None:
                prediction, x_hat = self.model.reconstruct(adversarial)
                errors = reconstruction_error(adversarial, x_hat).data.astype(np.float64)
            else:
                prediction, errors = self.model.predict(adversarial), None

        results = []
        for k, index in enumerate(self.indices):
            target = None if self.targets is None else int(self.targets[k])
            success = prediction[k] == target if target is not None else prediction[k] != self.labels[k]
            results.append(
                AttackResult(
                    index=index,
                    label=self.labels[k],
                    adversarial=adversarial[k],
                    delta=delta[k],
                    prediction=prediction[k],
                    success=success,
                    loss_trace=self.traces[k],
                    target=target,
                    gradient_routing_calls=self.routing_calls,
                    flagged=None if errors is None else errors[k] > self.threshold,
                    recon_error=None if errors is None else errors[k],
                )
            )
        return results


def _threshold_value(theta: Optional[Union[DetectionThreshold, float]]) -> Optional[float]:
    if theta is None:
        return None
    return theta.theta if isinstance(theta, DetectionThreshold) else float(theta)


def _attack_one(x, label: int, config: AttackConfig, model, theta, detection_aware: bool, index: int) -> AttackResult:
    x = model.as_batch(x).data
    labels = np.array([label], dtype=np.int64)
    targets = resolve_targets(labels, config, [index], model.num_classes)
    return _BatchAttack(model, x, labels, [index], config, targets, _threshold_value(theta), detection_aware).run()[0]


def gradient_attack(
    x,
    label: int,
    config: AttackConfig,
    model,
    theta: Optional[Union[DetectionThreshold, float]] = None,
    index: int = 0,
) -> AttackResult:
    """
    Perturb one image with the configured family.

    Args:
        x:
            Image of the model's input shape, pixels in [0, 1].
        label:
            The true class.
        config:
            Family, head, budget and seed.
        model:
            Any model exposing `head_loss` and `predict`.
        theta:
            Optional detection threshold; when given the result records whether
            the adversarial image is flagged.
        index:
            The example's position in its dataset, which selects its PRNG stream.
    """
    return _attack_one(x, label, config, model, theta, False, index)


def detection_aware_attack(
    x,
    label: int,
    config: AttackConfig,
    model,
    theta: Union[DetectionThreshold, float],
    index: int = 0,
) -> AttackResult:
    """
    Alternate a fooling step of size alpha * beta on the configured head with a
    step of size alpha * (1 - beta) that lowers the reconstruction error of the
    current prediction (raises it with `config.recon_ascent`).
    """
    if model.recon is None:
        raise ConfigError("the detection-aware attack needs a reconstruction network")
    return _attack_one(x, label, config, model, theta, True, index)


def run_attacks(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    config: AttackConfig,
    theta: Optional[Union[DetectionThreshold, float]] = None,
    detection_aware: bool = False,
    jobs: int = 1,
    indices: Optional[Sequence[int]] = None,
    loss_fn: Optional[LossFn] = None,
) -> List[AttackResult]:
    """
    Attack a whole split in batches of `config.batch_size`, on up to `jobs`
    threads. Results come back in input order whatever `jobs` is.

    A fixed target class that is also the label of any example raises
    `ConfigError`. `loss_fn(x_adv, classes)`, returning one loss per example,
    replaces the configured head's cross-entropy when given.
    """
    if detection_aware and model.recon is None:
        raise ConfigError("the detection-aware attack needs a reconstruction network")
    images = model.as_batch(np.asarray(images)).data
    labels = np.asarray(labels, dtype=np.int64)
    indices = np.arange(len(labels)) if indices is None else np.asarray(indices, dtype=np.int64)

    if config.is_targeted and config.targeted != "random":
        clashes = int(np.sum(labels == int(config.targeted)))
        if clashes:
            raise ConfigError(f"target class {config.targeted} is the true label of {clashes} examples")

    threshold = _threshold_value(theta)
    chunks = [slice(start, start + config.batch_size) for start in range(0, len(labels), config.batch_size)]

    def work(chunk: slice) -> List[AttackResult]:
        targets = resolve_targets(labels[chunk], config, indices[chunk], model.num_classes)
        batch = _BatchAttack(model, images[chunk], labels[chunk], indices[chunk], config, targets, threshold, detection_aware, loss_fn)
        return batch.run()

    results: List[AttackResult] = []
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for batch_results in pool.map(work, chunks):
                results.extend(batch_results)
    else:
        for chunk in chunks:
            results.extend(work(chunk))

    if results:
        rate = sum(r.success for r in results) / len(results)
        logger.info(
            "%s on %s head: %d examples, success rate %.4f",
            config.family.value,
            config.target_head.value,
            len(results),
            rate,
        )
    return results
