from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np

from capsattack import ops
from capsattack.config import LayerSpec, conv_output_shape
from capsattack.enums import Precision
from capsattack.errors import ConfigError, IncompatibilityError
from capsattack.tensor import Parameter, Tensor, dtype_of

__all__ = ("Module", "ConvBackbone", "DenseStack", "he_normal")


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class Module:
    """
    A container of named parameters and child modules.

    Parameter names are dotted paths ("backbone.0.weight") and are unique
    within the root module.
    """

    def __init__(self) -> None:
        self._parameters: "OrderedDict[str, Parameter]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def register(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._parameters or name in self._children:
            raise ConfigError(f"duplicate parameter name {name!r}")
        param = Parameter(name, data)
        self._parameters[name] = param
        return param

    def add_module(self, name: str, module: "Module") -> "Module":
        if name in self._parameters or name in self._children:
            raise ConfigError(f"duplicate module name {name!r}")
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    @property
    def precision(self) -> Precision:
        params = self.parameters()
        return params[0].precision if params else Precision.single

    def to_precision(self, precision: Union[Precision, str]) -> "Module":
        """Convert every parameter in place; returns self."""
        dtype = dtype_of(precision)
        for param in self.parameters():
            param.data = param.data.astype(dtype)
            param.grad = None
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, param.data.copy()) for name, param in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise IncompatibilityError("checkpoint does not match the architecture", missing)
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise IncompatibilityError(f"tensor {name} has shape {value.shape}, expected {param.shape}")
            param.data = np.ascontiguousarray(value, dtype=param.data.dtype)
            param.grad = None

    def __repr__(self):
        return f"<capsattack.{self.__class__.__name__} parameters={len(self.parameters())}>"


class ConvBackbone(Module):
    """A stack of valid convolutions with bias, each optionally followed by relu."""

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec], rng: np.random.Generator) -> None:
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        self.output_shape = conv_output_shape(self.input_shape, self.layers)

        in_channels = self.input_shape[0]
        self.weights: List[Parameter] = []
        self.biases: List[Parameter] = []
        for i, layer in enumerate(self.layers):
            fan_in = in_channels * layer.kernel * layer.kernel
            shape = (layer.channels, in_channels, layer.kernel, layer.kernel)
            self.weights.append(self.register(f"{i}.weight", he_normal(rng, shape, fan_in)))
            self.biases.append(self.register(f"{i}.bias", np.zeros((layer.channels, 1, 1), dtype=np.float32)))
            in_channels = layer.channels

    def __call__(self, x: Tensor) -> Tensor:
        for layer, weight, bias in zip(self.layers, self.weights, self.biases):
            x = ops.add(ops.conv2d(x, weight, stride=layer.stride), bias)
            if layer.activation == "relu":
                x = ops.relu(x)
        return x


class DenseStack(Module):
    """
    Fully connected layers with relu between them and an optional sigmoid at the end.
    """

    def __init__(
        self,
        widths: Sequence[int],
        rng: np.random.Generator,
        final_sigmoid: bool = False,
    ) -> None:
        super().__init__()
        self.widths = [int(w) for w in widths]
        self.final_sigmoid = final_sigmoid
        self.weights: List[Parameter] = []
        self.biases: List[Parameter] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.weights.append(self.register(f"{i}.weight", he_normal(rng, (fan_in, fan_out), fan_in)))
            self.biases.append(self.register(f"{i}.bias", np.zeros((fan_out,), dtype=np.float32)))

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            x = ops.add(ops.matmul(x, weight), bias)
            if i < last:
                x = ops.relu(x)
            elif self.final_sigmoid:
                x = ops.sigmoid(x)
        return x
