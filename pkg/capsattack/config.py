from __future__ import annotations

from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from capsattack.enums import AtMode, AttackFamily, LossKind, TargetHead, TwoStageSchedule
from capsattack.errors import ConfigError
from capsattack.utils import load_presets

__all__ = (
    "LayerSpec",
    "CapsNetConfig",
    "ReconNetConfig",
    "BaselineConfig",
    "AttackConfig",
    "TrainConfig",
    "DataConfig",
    "preset",
    "conv_output_shape",
)

ACTIVATIONS = ("relu", "none")


def preset(section: str, name: str) -> dict:
    """Return a copy of the named entry of a `presets.json` section."""
    presets = load_presets()
    try:
        return presets[section][name]
    except KeyError:
        choices = ", ".join(sorted(presets.get(section, {})))
        raise ConfigError(f"unknown {section} preset {name!r} (choose from {choices})") from None


class BaseConfig:
    @classmethod
    def from_dict(cls, conf_dict: Dict[str, Any]):
        try:
            return cls(**conf_dict)
        except TypeError as e:
            raise ConfigError(f"invalid {cls.__name__}: {e}") from None

    def to_dict(self) -> dict:
        raise NotImplementedError

    def replace(self, **changes):
        values = self.to_dict()
        values.update(changes)
        return self.from_dict(values)

    def __eq__(self, other):
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    def __repr__(self):
        fields = " ".join(f"{k}={v}" for k, v in self.to_dict().items())
        return f"<capsattack.{self.__class__.__name__} {fields}>"


class LayerSpec(BaseConfig):
    """One convolution of a backbone stack."""

    def __init__(self, channels: int, kernel: int, stride: int = 1, activation: str = "relu") -> None:
        if channels < 1 or kernel < 1 or stride < 1:
            raise ConfigError("layer channels, kernel and stride must be positive")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        self.channels = int(channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.activation = activation

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "activation": self.activation,
        }


def _layers(backbone: Sequence[Union[LayerSpec, dict]]) -> List[LayerSpec]:
    return [b if isinstance(b, LayerSpec) else LayerSpec.from_dict(b) for b in backbone]


def conv_output_shape(input_shape: Sequence[int], backbone: Sequence[LayerSpec]) -> Tuple[int, int, int]:
    channels, height, width = input_shape
    for layer in backbone:
        if layer.kernel > height or layer.kernel > width:
            raise ConfigError(f"kernel {layer.kernel} does not fit a {height}x{width} feature map")
        height = (height - layer.kernel) // layer.stride + 1
        width = (width - layer.kernel) // layer.stride + 1
        channels = layer.channels
    return channels, height, width


class CapsNetConfig(BaseConfig):
    """
    Shape of a capsule network.

    Primary capsules group `primary_dim` consecutive channels of the backbone
    output at every spatial position, so the last backbone layer's channel count
    must be a multiple of `primary_dim`.

    Args:
        input_shape:
            (channels, height, width) of the images.
        backbone:
            Convolutions applied to the image, in order.
        primary_dim:
            d_in, the length of a primary capsule.
        num_classes:
            M, the number of output capsules.
        out_dim:
            d_out, the length of an output capsule.
        routing_iters:
            r, the number of dynamic routing iterations.
        squash_primary:
            Whether primary capsules go through the squash nonlinearity.
        num_primary:
            Optional N. Checked against the value implied by the backbone.
    """

    def __init__(
        self,
        input_shape: Sequence[int],
        backbone: Sequence[Union[LayerSpec, dict]],
        primary_dim: int,
        num_classes: int,
        out_dim: int,
        routing_iters: int = 3,
        squash_primary: bool = True,
        num_primary: Optional[int] = None,
    ) -> None:
        if len(input_shape) != 3:
            raise ConfigError("input_shape must be (channels, height, width)")
        if routing_iters < 1:
            raise ConfigError(f"routing_iters must be >= 1, got {routing_iters}")
        if num_classes < 2 or primary_dim < 1 or out_dim < 1:
            raise ConfigError("num_classes must be >= 2 and capsule dimensions positive")

        self.input_shape = tuple(int(v) for v in input_shape)
        self.backbone = _layers(backbone)
        if not self.backbone:
            raise ConfigError("the backbone needs at least one convolution")
        self.primary_dim = int(primary_dim)
        self.num_classes = int(num_classes)
        self.out_dim = int(out_dim)
        self.routing_iters = int(routing_iters)
        self.squash_primary = bool(squash_primary)

        channels, height, width = self.feature_shape
        if channels % self.primary_dim:
            raise ConfigError(f"backbone channels {channels} are not a multiple of primary_dim {self.primary_dim}")
        if num_primary is not None and int(num_primary) != self.num_primary:
            raise ConfigError(
                f"backbone output holds {channels * height * width} values, "
                f"not num_primary * primary_dim = {int(num_primary) * self.primary_dim}"
            )

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        return conv_output_shape(self.input_shape, self.backbone)

    @property
    def num_primary(self) -> int:
        channels, height, width = self.feature_shape
        return channels * height * width // self.primary_dim

    @property
    def capsule_features(self) -> int:
        return self.num_classes * self.out_dim

    @classmethod
    def preset(cls, name: str) -> "CapsNetConfig":
        return cls.from_dict(preset("models", name))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "backbone": [layer.to_dict() for layer in self.backbone],
            "primary_dim": self.primary_dim,
            "num_classes": self.num_classes,
            "out_dim": self.out_dim,
            "routing_iters": self.routing_iters,
            "squash_primary": self.squash_primary,
        }


class ReconNetConfig(BaseConfig):
    """Hidden widths of the fully connected reconstruction stack."""

    def __init__(self, widths: Sequence[int]) -> None:
        if any(int(w) < 1 for w in widths):
            raise ConfigError("reconstruction widths must be positive")
        self.widths = [int(w) for w in widths]

    @classmethod
    def preset(cls, name: str) -> "ReconNetConfig":
        return cls.from_dict(preset("recon", name))

    def to_dict(self) -> dict:
        return {"widths": list(self.widths)}


class BaselineConfig(BaseConfig):
    """
    Shape of the CNN+CR / CNN+R baselines: the backbone feeds a linear layer with
    `num_classes * group_dim` activations.
    """

    def __init__(
        self,
        input_shape: Sequence[int],
        backbone: Sequence[Union[LayerSpec, dict]],
        num_classes: int,
        group_dim: int = 16,
    ) -> None:
        if len(input_shape) != 3:
            raise ConfigError("input_shape must be (channels, height, width)")
        if num_classes < 2 or group_dim < 1:
            raise ConfigError("num_classes must be >= 2 and group_dim positive")
        self.input_shape = tuple(int(v) for v in input_shape)
        self.backbone = _layers(backbone)
        if not self.backbone:
            raise ConfigError("the backbone needs at least one convolution")
        self.num_classes = int(num_classes)
        self.group_dim = int(group_dim)
        conv_output_shape(self.input_shape, self.backbone)

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        return conv_output_shape(self.input_shape, self.backbone)

    @property
    def capsule_features(self) -> int:
        return self.num_classes * self.group_dim

    @classmethod
    def preset(cls, name: str) -> "BaselineConfig":
        return cls.from_dict(preset("baselines", name))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "backbone": [layer.to_dict() for layer in self.backbone],
            "num_classes": self.num_classes,
            "group_dim": self.group_dim,
        }


class AttackConfig(BaseConfig):
    """
    Settings of one attack. Fields left as None are filled from the `attacks`
    section of `presets.json` for the chosen family.

    Args:
        family:
            fgsm, bim, pgd or mim.
        target_head:
            The output the loss is computed on (logits, caps, votes, votes-v1, votes-v2).
        epsilon:
            Radius of the l-infinity ball, in pixel units.
        alpha:
            Step size. Defaults to a family-specific fraction of epsilon.
        iterations:
            Number of gradient steps.
        momentum_decay:
            mu, the MIM gradient accumulation factor.
        random_start:
            Start from a uniform draw in the ball instead of zero.
        targeted:
            None for untargeted attacks, a class index, or "random" to draw a
            non-ground-truth target per example.
        beta:
            Balance between the two stages of the detection-aware attack.
        seed:
            Base seed; example i uses the stream seed XOR i.
        recon_ascent:
            Make the detection-aware second stage ascend the reconstruction error.
        schedule:
            alternate or sequential ordering of the two detection-aware stages.
        batch_size:
            Examples perturbed together.
    """

    def __init__(
        self,
        family: Union[AttackFamily, str] = AttackFamily.pgd,
        target_head: Optional[Union[TargetHead, str]] = None,
        epsilon: Optional[float] = None,
        alpha: Optional[float] = None,
        iterations: Optional[int] = None,
        momentum_decay: Optional[float] = None,
        random_start: Optional[bool] = None,
        targeted: Optional[Union[int, str]] = None,
        beta: Optional[float] = None,
        seed: int = 0,
        recon_ascent: bool = False,
        schedule: Union[TwoStageSchedule, str] = TwoStageSchedule.alternate,
        batch_size: Optional[int] = None,
    ) -> None:
        try:
            self.family = AttackFamily(family)
            common = preset("attacks", "common")
            defaults = preset("attacks", self.family.value)
            self.target_head = TargetHead(common["target_head"] if target_head is None else target_head)
            self.schedule = TwoStageSchedule(schedule)
        except ValueError as e:
            raise ConfigError(str(e)) from None

        self.epsilon = float(common["epsilon"] if epsilon is None else epsilon)
        if self.family is AttackFamily.fgsm:
            self.alpha = self.epsilon if alpha is None else float(alpha)
        else:
            self.alpha = defaults["alpha_fraction"] * self.epsilon if alpha is None else float(alpha)
        self.iterations = int(defaults["iterations"] if iterations is None else iterations)
        self.momentum_decay = float(defaults["momentum_decay"] if momentum_decay is None else momentum_decay)
        self.random_start = bool(defaults["random_start"] if random_start is None else random_start)
        self.beta = float(common["beta"] if beta is None else beta)
        self.seed = int(seed)
        self.recon_ascent = bool(recon_ascent)
        self.batch_size = int(common["batch_size"] if batch_size is None else batch_size)

        if targeted is not None and targeted != "random":
            try:
                targeted = int(targeted)
            except (TypeError, ValueError):
                raise ConfigError(f"targeted must be a class index or 'random', got {targeted!r}") from None
            if targeted < 0:
                raise ConfigError("targeted class must be non-negative")
        self.targeted = targeted

        self._validate()

    def _validate(self) -> None:
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.family is AttackFamily.fgsm:
            if self.iterations != 1:
                raise ConfigError("fgsm runs exactly one iteration")
            if abs(self.alpha - self.epsilon) > 1e-12:
                raise ConfigError("fgsm steps with alpha == epsilon")
        else:
            if self.iterations < 1:
                raise ConfigError("multi-step attacks need at least one iteration")
            if self.alpha > self.epsilon + 1e-12:
                raise ConfigError(f"alpha {self.alpha} exceeds epsilon {self.epsilon}")
            if self.alpha <= 0 and self.epsilon > 0:
                raise ConfigError("alpha must be positive")

    @property
    def is_targeted(self) -> bool:
        return self.targeted is not None

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "target_head": self.target_head.value,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "iterations": self.iterations,
            "momentum_decay": self.momentum_decay,
            "random_start": self.random_start,
            "targeted": self.targeted,
            "beta": self.beta,
            "seed": self.seed,
            "recon_ascent": self.recon_ascent,
            "schedule": self.schedule.value,
            "batch_size": self.batch_size,
        }


class TrainConfig(BaseConfig):
    """
    Optimisation schedule. SGD with momentum; the learning rate drops from `lr`
    to `decayed_lr` at `decay_epoch`.
    """

    def __init__(
        self,
        epochs: int,
        batch_size: int,
        lr: float,
        decay_epoch: int,
        decayed_lr: float,
        momentum: float = 0.9,
        loss: Union[LossKind, str] = LossKind.margin,
        recon_weight: float = 0.0005,
        at_mode: Union[AtMode, str] = AtMode.none,
        at_iterations: int = 8,
        at_epsilon: float = 0.031,
        at_alpha: Optional[float] = None,
        at_alpha_fraction: float = 0.25,
        votes_weight: float = 1.0,
        seed: int = 0,
    ) -> None:
        try:
            self.loss = LossKind(loss)
            self.at_mode = AtMode(at_mode)
        except ValueError as e:
            raise ConfigError(str(e)) from None

        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.lr = float(lr)
        self.decay_epoch = int(decay_epoch)
        self.decayed_lr = float(decayed_lr)
        self.momentum = float(momentum)
        self.recon_weight = float(recon_weight)
        self.at_iterations = int(at_iterations)
        self.at_epsilon = float(at_epsilon)
        self.at_alpha_fraction = float(at_alpha_fraction)
        self.at_alpha = self.at_alpha_fraction * self.at_epsilon if at_alpha is None else float(at_alpha)
        self.votes_weight = float(votes_weight)
        self.seed = int(seed)

        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.epochs > 0 and not self.decay_epoch < self.epochs:
            raise ConfigError(f"decay_epoch {self.decay_epoch} must be < epochs {self.epochs}")
        if self.at_iterations < 0 or self.at_epsilon < 0 or self.at_alpha < 0:
            raise ConfigError("adversarial training settings must be non-negative")

    def lr_at(self, epoch: int) -> float:
        """Learning rate of the zero-based `epoch`."""
        return self.lr if epoch < self.decay_epoch else self.decayed_lr

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        values = preset("training", name)
        values.update(overrides)
        return cls.from_dict(values)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "decay_epoch": self.decay_epoch,
            "decayed_lr": self.decayed_lr,
            "momentum": self.momentum,
            "loss": self.loss.value,
            "recon_weight": self.recon_weight,
            "at_mode": self.at_mode.value,
            "at_iterations": self.at_iterations,
            "at_epsilon": self.at_epsilon,
            "at_alpha": self.at_alpha,
            "at_alpha_fraction": self.at_alpha_fraction,
            "votes_weight": self.votes_weight,
            "seed": self.seed,
        }


class DataConfig(BaseConfig):
    """
    Where images come from: "synthetic" or a directory holding the four
    MNIST-style IDX files.
    """

    def __init__(
        self,
        source: str = "synthetic",
        classes: int = 8,
        train_per_class: int = 100,
        validation_per_class: int = 25,
        test_per_class: int = 25,
        size: int = 16,
        validation_fraction: float = 0.1,
    ) -> None:
        if not 0.0 <= validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if min(train_per_class, validation_per_class, test_per_class) < 0:
            raise ConfigError("per-class counts must be non-negative")
        self.source = str(source)
        self.classes = int(classes)
        self.train_per_class = int(train_per_class)
        self.validation_per_class = int(validation_per_class)
        self.test_per_class = int(test_per_class)
        self.size = int(size)
        self.validation_fraction = float(validation_fraction)

    @property
    def is_synthetic(self) -> bool:
        return self.source == "synthetic"

    @classmethod
    def preset(cls, name: str = "synthetic") -> "DataConfig":
        return cls.from_dict(preset("data", name))

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "classes": self.classes,
            "train_per_class": self.train_per_class,
            "validation_per_class": self.validation_per_class,
            "test_per_class": self.test_per_class,
            "size": self.size,
            "validation_fraction": self.validation_fraction,
        }
