"""Parameter containers and the convolutional building blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Module:
    """Registers Tensor attributes as parameters and Module attributes as children.

    Parameter names are dotted paths in registration order, e.g.
    ``enc0.conv1.weight``.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_child(self, name: str, module: "Module") -> None:
        self._children[name] = module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              gain: float = 2.0) -> Tensor:
    """Fan-in scaled normal init: gain 2 for ReLU layers, 1 for linear ones."""
    w = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
    return Tensor(w.astype(np.float32), requires_grad=True)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, rng: np.random.Generator,
                 gain: float = 2.0):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel_size}")
        self.weight = he_normal(rng, (out_ch, in_ch, kernel_size, kernel_size),
                                in_ch * kernel_size * kernel_size, gain)
        self.bias = zeros((out_ch,))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=1, padding="same")


class ConvTranspose2d(Module):
    """2x upsampling transpose convolution (kernel 2, stride 2)."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.weight = he_normal(rng, (in_ch, out_ch, 2, 2), in_ch, gain=1.0)
        self.bias = zeros((out_ch,))

    def forward(self, x):
        return T.conv2d_transpose(x, self.weight, self.bias, stride=2)


class ResidualBlock(Module):
    """relu(conv(relu(conv(x))) + shortcut(x)).

    The shortcut is the identity when channel counts match and a 1x1
    convolution otherwise.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        if in_ch < 1 or out_ch < 1:
            raise ConfigError(f"channel counts must be >= 1, got {in_ch} -> {out_ch}")
        self.conv1 = Conv2d(in_ch, out_ch, kernel_size, rng)
        # conv2 and the projection feed the sum, not a ReLU directly
        self.conv2 = Conv2d(out_ch, out_ch, kernel_size, rng, gain=1.0)
        self.shortcut = Conv2d(in_ch, out_ch, 1, rng, gain=1.0) if in_ch != out_ch else None

    def forward(self, x):
        h = T.relu(self.conv1(x))
        h = self.conv2(h)
        skip = x if self.shortcut is None else self.shortcut(x)
        return T.relu(T.add(h, skip))


class DoubleConv(Module):
    """conv -> relu -> conv -> relu, as in the plain U-Net and SegNet stages."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, kernel_size, rng)
        self.conv2 = Conv2d(out_ch, out_ch, kernel_size, rng)

    def forward(self, x):
        return T.relu(self.conv2(T.relu(self.conv1(x))))


def build_residual_block(in_ch: int, out_ch: int, kernel_size: int, seed: int = 0) -> ResidualBlock:
    return ResidualBlock(in_ch, out_ch, kernel_size, np.random.default_rng(seed))
