"""The model families: plain U-Net, SegNet, residual U-Net and the ensemble.

All families map an (N, 1, H, W) image batch to an (N, 1, H, W) map of
crack probabilities. H and W must be divisible by ``2 ** depth``.
"""

from __future__ import annotations

import fnmatch
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Conv2d, ConvTranspose2d, DoubleConv, Module, ResidualBlock
from .tensor import Tensor

FAMILIES = ("unet", "segnet", "resunet", "ensemble", "pixel")


@dataclass
class ResUNetConfig:
    """Shape hyperparameters shared by the U-Net, residual U-Net and SegNet builders."""

    kernel_size: int = 3
    depth: int = 3
    base_filters: int = 16
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be an odd int >= 3, got {self.kernel_size}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_filters < 1:
            raise ConfigError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ConfigError("only single-channel input and output are supported")


@dataclass
class EnsembleConfig:
    base_kernel_sizes: tuple[int, ...] = (3, 5, 7, 9)
    meta_channels: int = 16
    meta_hidden: int = 2

    def __post_init__(self):
        self.base_kernel_sizes = tuple(int(k) for k in self.base_kernel_sizes)
        if len(self.base_kernel_sizes) < 2:
            raise ConfigError("an ensemble needs at least 2 bases")
        for k in self.base_kernel_sizes:
            if k < 3 or k % 2 == 0:
                raise ConfigError(f"base kernel sizes must be odd and >= 3, got {k}")
        if self.meta_channels < 1 or self.meta_hidden < 0:
            raise ConfigError("meta_channels must be >= 1 and meta_hidden >= 0")

    @property
    def base_count(self) -> int:
        return len(self.base_kernel_sizes)


class Model(Module):
    """A top-level network: a family tag, a config echo and a forward pass."""

    family = ""

    def config_dict(self) -> dict:
        raise NotImplementedError

    def trainable(self) -> dict[str, bool]:
        return {name: p.requires_grad for name, p in self.named_parameters()}

    def predict(self, x) -> np.ndarray:
        """Inference-mode forward on a float array; returns a float32 array."""
        with T.no_grad():
            return self.forward(T.as_tensor(x)).data

    def _check_input(self, x: Tensor, depth: int) -> None:
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"{self.family}: expected input (N, 1, H, W), got {x.shape}")
        h, w = x.shape[2:]
        m = 2 ** depth
        if h % m or w % m:
            raise ShapeError(
                f"{self.family}: input {h}x{w} is not divisible by 2**depth = {m}"
            )


def _widths(cfg: ResUNetConfig) -> list[int]:
    return [cfg.base_filters * 2 ** i for i in range(cfg.depth + 1)]


class _UNetBase(Model):
    block_cls: type = DoubleConv

    def __init__(self, cfg: ResUNetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        k = cfg.kernel_size
        ch = _widths(cfg)
        prev = cfg.in_channels
        for i in range(cfg.depth):
            self.add_child(f"enc{i}", self.block_cls(prev, ch[i], k, rng))
            prev = ch[i]
        self.bottleneck = self.block_cls(prev, ch[cfg.depth], k, rng)
        for i in reversed(range(cfg.depth)):
            self.add_child(f"up{i}", ConvTranspose2d(ch[i + 1], ch[i], rng))
            self.add_child(f"dec{i}", self.block_cls(2 * ch[i], ch[i], k, rng))
        self.head = Conv2d(ch[0], cfg.out_channels, 1, rng, gain=1.0)

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    def forward(self, x):
        self._check_input(x, self.cfg.depth)
        c = self._children
        skips = []
        h = x
        for i in range(self.cfg.depth):
            h = c[f"enc{i}"](h)
            skips.append(h)
            h, _ = T.maxpool2d(h)
        h = self.bottleneck(h)
        for i in reversed(range(self.cfg.depth)):
            h = c[f"up{i}"](h)
            h = T.concat_channels(h, skips[i])
            h = c[f"dec{i}"](h)
        return T.sigmoid(self.head(h))


class UNet(_UNetBase):
    family = "unet"
    block_cls = DoubleConv


class ResidualUNet(_UNetBase):
    family = "resunet"
    block_cls = ResidualBlock


class SegNet(Model):
    """Encoder/decoder without skips; decoding reuses the encoder's pool indices."""

    family = "segnet"

    def __init__(self, cfg: ResUNetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        k = cfg.kernel_size
        ch = _widths(cfg)
        prev = cfg.in_channels
        for i in range(cfg.depth):
            self.add_child(f"enc{i}", DoubleConv(prev, ch[i], k, rng))
            prev = ch[i]
        for i in reversed(range(cfg.depth)):
            self.add_child(f"dec{i}", DoubleConv(ch[i], ch[max(i - 1, 0)], k, rng))
        self.head = Conv2d(ch[0], cfg.out_channels, 1, rng, gain=1.0)

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    def forward(self, x):
        self._check_input(x, self.cfg.depth)
        c = self._children
        pools = []
        h = x
        for i in range(self.cfg.depth):
            h = c[f"enc{i}"](h)
            size = h.shape[2:]
            h, idx = T.maxpool2d(h)
            pools.append((idx, size))
        for i in reversed(range(self.cfg.depth)):
            idx, size = pools[i]
            h = T.max_unpool2d(h, idx, size)
            h = c[f"dec{i}"](h)
        return T.sigmoid(self.head(h))


class _Group(Module):
    def forward(self, x):
        raise TypeError("a parameter group has no forward pass")


class MetaBlock(Module):
    """Hidden 3x3 conv+relu layers followed by a 1x1 sigmoid head."""

    def __init__(self, in_ch: int, channels: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        prev = in_ch
        for i in range(hidden):
            self.add_child(f"conv{i}", Conv2d(prev, channels, 3, rng))
            prev = channels
        self.head = Conv2d(prev, 1, 1, rng, gain=1.0)

    def forward(self, x):
        h = x
        for i in range(self.hidden):
            h = T.relu(self._children[f"conv{i}"](h))
        return T.sigmoid(self.head(h))


class Ensemble(Model):
    """Frozen base models whose probability maps feed a convolutional meta-block."""

    family = "ensemble"

    def __init__(self, bases: list[Model], cfg: EnsembleConfig, seed: int = 0):
        super().__init__()
        if len(bases) < 2:
            raise ConfigError("an ensemble needs at least 2 bases")
        if len(bases) != cfg.base_count:
            raise ConfigError(f"got {len(bases)} bases but config lists {cfg.base_count} kernel sizes")
        self.cfg = cfg
        self.bases = list(bases)
        group = _Group()
        for i, b in enumerate(self.bases):
            group.add_child(str(i), b)
        self.base = group
        self.meta = MetaBlock(len(bases), cfg.meta_channels, cfg.meta_hidden, np.random.default_rng(seed))
        for _, p in group.named_parameters():
            p.requires_grad = False

    def config_dict(self) -> dict:
        return {
            "ensemble": {**asdict(self.cfg), "base_kernel_sizes": list(self.cfg.base_kernel_sizes)},
            "bases": [{"family": b.family, **b.config_dict()} for b in self.bases],
        }

    def base_outputs(self, x: Tensor) -> Tensor:
        maps = [b(x) for b in self.bases]
        shape = maps[0].shape
        for m in maps[1:]:
            if m.shape != shape:
                raise ShapeError(f"ensemble bases disagree on output shape: {shape} vs {m.shape}")
        out = maps[0]
        for m in maps[1:]:
            out = T.concat_channels(out, m)
        return out

    def forward(self, x):
        return self.meta(self.base_outputs(x))


class PixelLogistic(Model):
    """Per-pixel logistic regression (a single 1x1 conv).

    Used as a baseline and as a hand-settable fixture for evaluation tests.
    """

    family = "pixel"

    def __init__(self, seed: int = 0):
        super().__init__()
        self.head = Conv2d(1, 1, 1, np.random.default_rng(seed), gain=1.0)

    def config_dict(self) -> dict:
        return {}

    def forward(self, x):
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"pixel: expected input (N, 1, H, W), got {x.shape}")
        return T.sigmoid(self.head(x))


def build_residual_unet(cfg: ResUNetConfig | None = None, seed: int = 0) -> ResidualUNet:
    return ResidualUNet(cfg or ResUNetConfig(), seed)


def build_unet(cfg: ResUNetConfig | None = None, seed: int = 0) -> UNet:
    return UNet(cfg or ResUNetConfig(), seed)


def build_segnet(cfg: ResUNetConfig | None = None, seed: int = 0) -> SegNet:
    return SegNet(cfg or ResUNetConfig(), seed)


def build_ensemble(bases: list[Model], cfg: EnsembleConfig | None = None, seed: int = 0) -> Ensemble:
    """Wrap trained ``bases`` and freeze them; only the meta-block stays trainable."""
    return Ensemble(bases, cfg or EnsembleConfig(), seed)


def build_model(family: str, config: dict, seed: int = 0) -> Model:
    """Rebuild an (untrained) model from a family tag and its config echo."""
    if family in ("unet", "segnet", "resunet"):
        cfg = ResUNetConfig(**config)
        return {"unet": UNet, "segnet": SegNet, "resunet": ResidualUNet}[family](cfg, seed)
    if family == "ensemble":
        bases = []
        for i, bc in enumerate(config["bases"]):
            bc = dict(bc)
            bases.append(build_model(bc.pop("family"), bc, seed + i))
        return Ensemble(bases, EnsembleConfig(**config["ensemble"]), seed)
    if family == "pixel":
        return PixelLogistic(seed)
    raise ConfigError(f"unknown model family {family!r}; expected one of {FAMILIES}")


def set_trainable(model: Module, pattern: str, flag: bool) -> list[str]:
    """Set ``requires_grad`` on parameters whose names match the glob ``pattern``.

    Returns the matched names. Raises ConfigError when nothing matches.
    """
    matched = [name for name, _ in model.named_parameters() if fnmatch.fnmatchcase(name, pattern)]
    if not matched:
        raise ConfigError(f"pattern {pattern!r} matches no parameter")
    params = model.parameters()
    for name in matched:
        params[name].requires_grad = bool(flag)
    return matched


def count_parameters(model: Module, trainable_only: bool = False) -> int:
    return sum(p.size for _, p in model.named_parameters() if p.requires_grad or not trainable_only)
