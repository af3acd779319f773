"""
CNN baselines sharing the capsule network's backbone and reconstruction stack.

CNN+CR groups the activations of a linear layer into one group per class, sums
each group into a logit and reconstructs from the masked groups. CNN+R feeds the
same activations to a separate linear classifier and reconstructs from all of
them without masking.
"""
from __future__ import annotations

from typing import Optional, Tuple, Union

import numpy as np

from capsattack import ops
from capsattack.capsnet import argmax_lowest
from capsattack.config import BaselineConfig, ReconNetConfig
from capsattack.enums import LossKind, MaskMode, ModelKind, TargetHead
from capsattack.errors import ConfigError, ContractError
from capsattack.layers import ConvBackbone, DenseStack, Module
from capsattack.reconstruction import ReconNet, mask_classes, reconstruct_masked
from capsattack.tensor import Tensor, no_grad

__all__ = ("CNNBaseline",)


class CNNBaseline(Module):
    """
    Args:
        config:
            Backbone and group sizes.
        kind:
            ModelKind.cnn_cr or ModelKind.cnn_r.
        recon_config:
            Widths of the reconstruction network, or None.
        seed:
            Seed of the weight initialisation.
    """

    def __init__(
        self,
        config: BaselineConfig,
        kind: Union[ModelKind, str] = ModelKind.cnn_cr,
        recon_config: Optional[ReconNetConfig] = None,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.kind = ModelKind(kind)
        if self.kind is ModelKind.capsnet:
            raise ConfigError("use CapsNet for capsule networks")
        rng = np.random.default_rng(seed)
        self.config = config
        self.seed = int(seed)
        self.backbone = self.add_module("backbone", ConvBackbone(config.input_shape, config.backbone, rng))
        features = int(np.prod(config.feature_shape))
        self.linear = self.add_module("linear", DenseStack([features, config.capsule_features], rng))
        self.classifier = None
        if self.kind is ModelKind.cnn_r:
            self.classifier = self.add_module("classifier", DenseStack([config.capsule_features, config.num_classes], rng))

        self.recon_config = recon_config
        self.recon = None
        if recon_config is not None:
            self.recon = self.add_module("recon", ReconNet(recon_config, config.capsule_features, config.input_shape, rng))

    def __repr__(self):
        return f"<capsattack.CNNBaseline kind={self.kind.value} M={self.num_classes}>"

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.config.input_shape

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def as_batch(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        dtype = self.linear.weights[0].data.dtype
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

    def activations(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        """The M * group_dim activations the logits and reconstructions come from."""
        features = self.backbone(self.as_batch(x))
        return self.linear(ops.reshape(features, (features.shape[0], -1)))

    def logits_and_activations(self, x) -> Tuple[Tensor, Tensor]:
        a = self.activations(x)
        if self.kind is ModelKind.cnn_r:
            return self.classifier(a), a
        groups = ops.reshape(a, (a.shape[0], self.num_classes, self.config.group_dim))
        return ops.sum(groups, axis=-1), a

    def predict(self, x: Union[Tensor, np.ndarray]) -> np.ndarray:
        with no_grad():
            logits, _ = self.logits_and_activations(x)
        return argmax_lowest(logits.data)

    def head_logits(self, x: Union[Tensor, np.ndarray], head: Union[TargetHead, str]) -> Tensor:
        head = TargetHead(head)
        if head is not TargetHead.logits:
            raise ConfigError(f"a {self.kind.value} model has no {head.value} head")
        return self.logits_and_activations(x)[0]

    def head_loss(self, x: Union[Tensor, np.ndarray], labels: np.ndarray, head: Union[TargetHead, str]) -> Tensor:
        return ops.cross_entropy(self.head_logits(x, head), labels, reduction="none")

    def _reconstruct_from(self, a: Tensor, classes: np.ndarray) -> Tensor:
        if self.kind is ModelKind.cnn_r:
            return self.recon(a)
        groups = ops.reshape(a, (a.shape[0], self.num_classes, self.config.group_dim))
        return reconstruct_masked(self.recon, groups, classes)

    def reconstruct(
        self,
        x: Union[Tensor, np.ndarray],
        mask: Union[MaskMode, str] = MaskMode.winner,
        labels: Optional[np.ndarray] = None,
    ) -> Tuple[np.ndarray, Tensor]:
        if self.recon is None:
            raise ConfigError("the model has no reconstruction network")
        logits, a = self.logits_and_activations(x)
        prediction = argmax_lowest(logits.data)
        keep = mask_classes(mask, prediction, labels)
        return prediction, self._reconstruct_from(a, keep)

    def loss_terms(self, x: Union[Tensor, np.ndarray], labels: np.ndarray, loss: Union[LossKind, str]) -> Tuple[Tensor, Optional[Tensor]]:
        """Baselines always train with cross-entropy on their logits."""
        x = self.as_batch(x)
        logits, a = self.logits_and_activations(x)
        classification = ops.cross_entropy(logits, labels)
        if self.recon is None:
            return classification, None
        x_hat = self._reconstruct_from(a, labels)
        return classification, ops.sum(ops.square(ops.sub(x_hat, x)))

    def describe(self) -> dict:
        return {
            "kind": self.kind.value,
            "config": self.config.to_dict(),
            "recon": None if self.recon_config is None else self.recon_config.to_dict(),
            "seed": self.seed,
        }
