"""
The capsule network forward pass: primary capsules, voting, dynamic routing
and the logit heads the attacks compute their losses on.

Shapes used throughout, with an optional leading batch axis B:

- primary capsules u: (B, N, d_in)
- votes: (B, N, M, d_out)
- coupling coefficients c and routing logits b: (B, N, M)
- output capsules v: (B, M, d_out)
"""
from __future__ import annotations

import logging
import threading
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from capsattack import ops
from capsattack.config import CapsNetConfig, ReconNetConfig
from capsattack.enums import LossKind, MaskMode, ModelKind, TargetHead, VoteVariant
from capsattack.errors import ConfigError, ContractError
from capsattack.layers import ConvBackbone, Module
from capsattack.reconstruction import ReconNet, mask_classes, reconstruct_masked
from capsattack.tensor import Tensor, no_grad

__all__ = (
    "CapsNet",
    "CouplingCoefficients",
    "ForwardResult",
    "compute_votes",
    "dynamic_routing",
    "caps_logits",
    "vote_logits",
    "per_vote_losses",
    "margin_loss",
    "routing_counter",
)

logger = logging.getLogger(__name__)

LENGTH_FLOOR = 1e-12
M_PLUS = 0.9
M_MINUS = 0.1
DOWN_WEIGHT = 0.5


class RoutingCounter(threading.local):
    """Counts executions of the routing loop on the current thread."""

    def __init__(self) -> None:
        self.value = 0

    def increment(self) -> None:
        self.value += 1

    def reset(self) -> None:
        self.value = 0


routing_counter = RoutingCounter()


class CouplingCoefficients:
    """
    The routing weights of one forward pass.

    Attributes:
        c: Final coupling coefficients, softmax of `b` over classes.
        b: The routing logits the final coefficients were computed from.
        history: The coefficients of every iteration, oldest first.
    """

    def __init__(self, c: Tensor, b: Tensor, history: List[np.ndarray]) -> None:
        self.c = c
        self.b = b
        self.history = history

    @property
    def iterations(self) -> int:
        return len(self.history)

    def __repr__(self):
        return f"<capsattack.CouplingCoefficients shape={self.c.shape} iterations={self.iterations}>"


class ForwardResult:
    """Prediction and internals of a forward pass, kept for analysis."""

    def __init__(self, prediction: np.ndarray, capsules: Tensor, votes: Tensor, coupling: CouplingCoefficients) -> None:
        self.prediction = prediction
        self.capsules = capsules
        self.votes = votes
        self.coupling = coupling

    @property
    def lengths(self) -> np.ndarray:
        return np.sqrt(np.sum(self.capsules.data**2, axis=-1))

    def __repr__(self):
        return f"<capsattack.ForwardResult prediction={self.prediction.tolist()}>"


def compute_votes(u: Tensor, weights: Tensor, num_classes: int) -> Tensor:
    """
    The vote of primary capsule i for class j is u_i^T applied to the columns
    [j * d_out, (j + 1) * d_out) of weights[i].

    Args:
        u: Primary capsules of shape ([B,] N, d_in).
        weights: Transformation of shape (N, d_in, M * d_out).
        num_classes: M.

    Returns:
        Votes of shape ([B,] N, M, d_out).
    """
    single = u.ndim == 2
    if single:
        u = ops.reshape(u, (1,) + u.shape)
    batch, num_primary, in_dim = u.shape
    if weights.ndim != 3 or weights.shape[:2] != (num_primary, in_dim):
        raise ConfigError(f"transformation of shape {weights.shape} does not fit primary capsules {u.shape[1:]}")
    if weights.shape[2] % num_classes:
        raise ConfigError(f"{weights.shape[2]} vote features do not split into {num_classes} classes")
    out_dim = weights.shape[2] // num_classes

    votes = ops.matmul(ops.reshape(u, (batch, num_primary, 1, in_dim)), weights)
    votes = ops.reshape(votes, (batch, num_primary, num_classes, out_dim))
    if single:
        votes = ops.reshape(votes, votes.shape[1:])
    return votes


def dynamic_routing(votes: Tensor, iterations: int) -> Tuple[Tensor, CouplingCoefficients]:
    """
    Routing by agreement, unrolled so gradients flow through every iteration.

    The routing logits start at zero on every call and accumulate the agreement
    v_j . u_hat_{j|i} after each iteration except the last.

    Args:
        votes: Tensor of shape ([B,] N, M, d_out).
        iterations: r >= 1.

    Returns:
        The output capsules ([B,] M, d_out) and the coupling coefficients.
    """
    if iterations < 1:
        raise ConfigError(f"routing needs at least one iteration, got {iterations}")
    routing_counter.increment()

    single = votes.ndim == 3
    if single:
        votes = ops.reshape(votes, (1,) + votes.shape)
    batch, num_primary, num_classes, out_dim = votes.shape

    b = Tensor(np.zeros((batch, num_primary, num_classes), dtype=votes.data.dtype))
    history = []
    for t in range(iterations):
        c = ops.softmax(b, axis=-1)
        history.append(c.data.copy())
        s = ops.sum(ops.mul(ops.reshape(c, c.shape + (1,)), votes), axis=1)
        v = ops.squash(s)
        if t < iterations - 1:
            agreement = ops.sum(ops.mul(ops.reshape(v, (batch, 1, num_classes, out_dim)), votes), axis=-1)
            b = ops.add(b, agreement)

    if single:
        v = ops.reshape(v, v.shape[1:])
        c = ops.reshape(c, c.shape[1:])
        b = ops.reshape(b, b.shape[1:])
        history = [h[0] for h in history]
    return v, CouplingCoefficients(c, b, history)


def _log_length(a: Tensor) -> Tensor:
    return ops.log(ops.clamp_min(ops.l2_norm(a, axis=-1), LENGTH_FLOOR))


def caps_logits(v: Tensor) -> Tensor:
    """Z_j = log |v_j|, with lengths clamped at 1e-12."""
    return _log_length(v)


def vote_logits(votes: Tensor, variant: Union[VoteVariant, str] = VoteVariant.average_then_squash) -> Tensor:
    """
    Class logits computed from the votes alone, without routing.

    average-then-squash: Z_j = log |g(mean_i u_hat_{j|i})|
    squash-then-average: Z_j = log |mean_i g(u_hat_{j|i})|
    """
    variant = VoteVariant(variant)
    axis = votes.ndim - 3
    if variant is VoteVariant.average_then_squash:
        return _log_length(ops.squash(ops.mean(votes, axis=axis)))
    return _log_length(ops.mean(ops.squash(votes), axis=axis))


def per_vote_losses(votes: Tensor, labels: Union[int, Sequence[int], np.ndarray], reduction: str = "sum") -> Tensor:
    """
    The cross-entropy of every single vote's logits against the label,
    averaged over primary capsules.

    Args:
        votes: Tensor of shape ([B,] N, M, d_out).
        labels: One class per example.
        reduction: "none" keeps one loss per example, "sum" or "mean" reduce them.
    """
    single = votes.ndim == 3
    if single:
        votes = ops.reshape(votes, (1,) + votes.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    batch, num_primary = votes.shape[:2]
    logits = _log_length(ops.squash(votes))
    per_example = ops.mean(ops.cross_entropy(logits, np.repeat(labels[:, None], num_primary, axis=1), "none"), axis=-1)
    if reduction == "none":
        return ops.reshape(per_example, ()) if single else per_example
    if reduction == "mean":
        return ops.mean(per_example)
    return ops.sum(per_example)


def margin_loss(lengths: Tensor, labels: Union[Sequence[int], np.ndarray]) -> Tensor:
    """
    Summed margin loss on capsule lengths:
    T_k max(0, 0.9 - |v_k|)^2 + 0.5 (1 - T_k) max(0, |v_k| - 0.1)^2.
    """
    target = ops.one_hot(labels, lengths.shape[-1], dtype=lengths.data.dtype)
    present = ops.mul(ops.square(ops.relu(ops.sub(M_PLUS, lengths))), target)
    absent = ops.mul(ops.square(ops.relu(ops.sub(lengths, M_MINUS))), DOWN_WEIGHT * (1 - target))
    return ops.sum(ops.add(present, absent))


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(scores, axis=-1)


class CapsNet(Module):
    """
    A capsule network with dynamic routing and an optional reconstruction network.

    Args:
        config:
            The architecture.
        recon_config:
            Widths of the reconstruction network, or None for a model without one.
        seed:
            Seed of the weight initialisation.
    """

    kind = ModelKind.capsnet

    def __init__(self, config: CapsNetConfig, recon_config: Optional[ReconNetConfig] = None, seed: int = 0) -> None:
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.seed = int(seed)
        self.backbone = self.add_module("backbone", ConvBackbone(config.input_shape, config.backbone, rng))
        shape = (config.num_primary, config.primary_dim, config.num_classes * config.out_dim)
        self.weights = self.register("weights", rng.normal(0.0, 0.05, size=shape).astype(np.float32))

        self.recon_config = recon_config
        self.recon = None
        if recon_config is not None:
            self.recon = self.add_module("recon", ReconNet(recon_config, config.capsule_features, config.input_shape, rng))

    def __repr__(self):
        return f"<capsattack.CapsNet N={self.config.num_primary} M={self.num_classes} r={self.config.routing_iters}>"

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.config.input_shape

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def as_batch(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        """Validate `x` against the input shape, adding a batch axis when missing."""
        dtype = self.weights.data.dtype
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=dtype))
        elif x.data.dtype != dtype:
            if x.requires_grad:
                raise ContractError(f"input precision {x.precision.value} differs from the model's")
            x = Tensor(x.data.astype(dtype))
        if x.shape == self.input_shape:
            x = ops.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ConfigError(f"expected images of shape {self.input_shape}, got {x.shape}")
        return x

    def extract_primary(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        """Primary capsules (B, N, d_in) from `primary_dim` consecutive channels per position."""
        features = self.backbone(self.as_batch(x))
        batch, channels, height, width = features.shape
        dim = self.config.primary_dim
        u = ops.reshape(features, (batch, channels // dim, dim, height, width))
        u = ops.transpose(u, (0, 1, 3, 4, 2))
        u = ops.reshape(u, (batch, self.config.num_primary, dim))
        if self.config.squash_primary:
            u = ops.squash(u)
        return u

    def votes(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        return compute_votes(self.extract_primary(x), self.weights, self.num_classes)

    def forward(self, x: Union[Tensor, np.ndarray]) -> ForwardResult:
        votes = self.votes(x)
        v, coupling = dynamic_routing(votes, self.config.routing_iters)
        lengths = np.sqrt(np.sum(v.data**2, axis=-1))
        return ForwardResult(argmax_lowest(lengths), v, votes, coupling)

    __call__ = forward

    def predict(self, x: Union[Tensor, np.ndarray]) -> np.ndarray:
        with no_grad():
            return self.forward(x).prediction

    def head_logits(self, x: Union[Tensor, np.ndarray], head: Union[TargetHead, str]) -> Tensor:
        """
        Logits of one attack surface. The vote heads never run the routing loop.
        """
        head = TargetHead(head)
        if head is TargetHead.caps:
            return caps_logits(self.forward(x).capsules)
        if not head.bypasses_routing:
            raise ConfigError(f"a capsule network has no {head.value} head")
        if head is TargetHead.votes_v2:
            raise ConfigError("votes-v2 averages per-vote losses and has no single set of logits")
        variant = VoteVariant.average_then_squash if head is TargetHead.votes else VoteVariant.squash_then_average
        return vote_logits(self.votes(x), variant)

    def head_loss(self, x: Union[Tensor, np.ndarray], labels: np.ndarray, head: Union[TargetHead, str]) -> Tensor:
        """Per-example cross-entropy of the chosen head, shape (B,)."""
        head = TargetHead(head)
        if head is TargetHead.votes_v2:
            return per_vote_losses(self.votes(x), labels, reduction="none")
        return ops.cross_entropy(self.head_logits(x, head), labels, reduction="none")

    def reconstruct(
        self,
        x: Union[Tensor, np.ndarray],
        mask: Union[MaskMode, str] = MaskMode.winner,
        labels: Optional[np.ndarray] = None,
    ) -> Tuple[np.ndarray, Tensor]:
        """
        Reconstruct `x` from one output capsule per example, the winning capsule
        by default or the ground-truth one with `mask="ground-truth"`.
        """
        if self.recon is None:
            raise ConfigError("the model has no reconstruction network")
        result = self.forward(x)
        keep = mask_classes(mask, result.prediction, labels)
        return result.prediction, reconstruct_masked(self.recon, result.capsules, keep)

    def loss_terms(self, x: Union[Tensor, np.ndarray], labels: np.ndarray, loss: Union[LossKind, str]) -> Tuple[Tensor, Optional[Tensor]]:
        """
        Summed classification loss and summed squared reconstruction error,
        the latter masked with the ground-truth capsule (None without a
        reconstruction network).
        """
        x = self.as_batch(x)
        v = self.forward(x).capsules
        if LossKind(loss) is LossKind.margin:
            classification = margin_loss(ops.l2_norm(v, axis=-1), labels)
        else:
            classification = ops.cross_entropy(caps_logits(v), labels)
        if self.recon is None:
            return classification, None
        x_hat = reconstruct_masked(self.recon, v, labels)
        return classification, ops.sum(ops.square(ops.sub(x_hat, x)))

    def describe(self) -> dict:
        return {
            "kind": self.kind.value,
            "config": self.config.to_dict(),
            "recon": None if self.recon_config is None else self.recon_config.to_dict(),
            "seed": self.seed,
        }
