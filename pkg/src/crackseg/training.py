"""BCE training loop, optimizers and the two-stage ensemble protocol."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .architectures import (EnsembleConfig, Model, ResUNetConfig, build_ensemble,
                            build_residual_unet)
from .data import Dataset, batches
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 15
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_csv(self, record_timing: bool = False) -> str:
        """``epoch,train_loss,val_loss,seconds``; the seconds column is left
        empty unless ``record_timing`` so that reruns are byte-identical."""
        lines = ["epoch,train_loss,val_loss,seconds"]
        for i, (tr, va, s) in enumerate(zip(self.train_loss, self.val_loss, self.seconds), 1):
            sec = f"{s:.3f}" if record_timing else ""
            lines.append(f"{i},{tr!r},{va!r},{sec}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "History":
        rows = [line.split(",") for line in text.strip().splitlines()]
        if not rows or rows[0] != ["epoch", "train_loss", "val_loss", "seconds"]:
            raise DataError("not a history CSV (bad header)")
        h = cls()
        for r in rows[1:]:
            h.train_loss.append(float(r[1]))
            h.val_loss.append(float(r[2]))
            h.seconds.append(float(r[3]) if r[3] else math.nan)
        return h


# ----------------------------------------------------------------------------
# Optimizers
# ----------------------------------------------------------------------------

def init_optimizer_state(params: dict[str, T.Tensor], cfg: TrainConfig) -> dict:
    state: dict = {"step": 0}
    if cfg.optimizer == "adam":
        state["m"] = {n: np.zeros_like(p.data) for n, p in params.items()}
        state["v"] = {n: np.zeros_like(p.data) for n, p in params.items()}
    return state


def optimizer_step(params: dict[str, T.Tensor], state: dict, cfg: TrainConfig) -> None:
    """Update every trainable parameter in place from its ``.grad``.

    Parameters with ``requires_grad`` off are left untouched.
    """
    if "step" not in state or (cfg.optimizer == "adam" and ("m" not in state or "v" not in state)):
        raise ConfigError("optimizer state is not initialized")
    state["step"] += 1
    t = state["step"]
    lr = np.float32(cfg.learning_rate)
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if cfg.optimizer == "sgd":
            p.data -= lr * g
            continue
        if name not in state["m"]:
            raise ConfigError(f"optimizer state has no entry for parameter {name!r}")
        m = state["m"][name]
        v = state["v"][name]
        m *= np.float32(cfg.beta1)
        m += np.float32(1 - cfg.beta1) * g
        v *= np.float32(cfg.beta2)
        v += np.float32(1 - cfg.beta2) * g * g
        m_hat = m / np.float32(1 - cfg.beta1 ** t)
        v_hat = v / np.float32(1 - cfg.beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + np.float32(cfg.adam_eps))


# ----------------------------------------------------------------------------
# Training loops
# ----------------------------------------------------------------------------

def dataset_loss(model: Model, ds: Dataset, batch_size: int = 32) -> float:
    """Sample-weighted mean BCE over ``ds`` in inference mode."""
    total, count = 0.0, 0
    with T.no_grad():
        for b in batches(ds, batch_size, seed=0, epoch=0):
            loss = T.bce_loss(model(b.images), b.masks).item()
            total += loss * len(b.ids)
            count += len(b.ids)
    return total / count


def train_model(model: Model, train: Dataset, val: Dataset, cfg: TrainConfig,
                on_epoch: Callable[[int, History], None] | None = None) -> History:
    if len(train) == 0 or len(val) == 0:
        raise DataError("train and validation datasets must be nonempty")
    params = model.parameters()
    state = init_optimizer_state(params, cfg)
    history = History()
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        total, count = 0.0, 0
        for b_idx, b in enumerate(batches(train, cfg.batch_size, cfg.seed, epoch)):
            model.zero_grad()
            loss = T.bce_loss(model(b.images), b.masks)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(epoch + 1, b_idx, value)
            loss.backward()
            optimizer_step(params, state, cfg)
            model.zero_grad()
            total += value * len(b.ids)
            count += len(b.ids)
        val_loss = dataset_loss(model, val, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise NumericalError(epoch + 1, -1, val_loss)
        history.train_loss.append(total / count)
        history.val_loss.append(val_loss)
        history.seconds.append(time.perf_counter() - start)
        log.info("%s epoch %d/%d train %.5f val %.5f (%.1fs)", model.family, epoch + 1,
                 cfg.epochs, history.train_loss[-1], val_loss, history.seconds[-1])
        if on_epoch is not None:
            on_epoch(epoch, history)
    return history


def train_ensemble_two_stage(
    base_cfgs: Sequence[ResUNetConfig],
    train: Dataset,
    val: Dataset,
    stage1_cfg: TrainConfig,
    stage2_cfg: TrainConfig,
    ensemble_cfg: EnsembleConfig | None = None,
    on_base_trained: Callable[[int, Model, History], None] | None = None,
) -> tuple[Model, list[History]]:
    """Train each residual U-Net alone, then freeze them and fit the meta-block.

    Base ``i`` uses seed ``stage1_cfg.seed + i`` for both initialization and
    batch order. Returns the ensemble and five histories (bases, then meta).
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("train and validation datasets must be nonempty")
    if ensemble_cfg is None:
        ensemble_cfg = EnsembleConfig(base_kernel_sizes=tuple(c.kernel_size for c in base_cfgs))
    elif tuple(c.kernel_size for c in base_cfgs) != ensemble_cfg.base_kernel_sizes:
        raise ConfigError("base configs and ensemble config disagree on kernel sizes")

    bases, histories = [], []
    for i, bc in enumerate(base_cfgs):
        cfg_i = replace(stage1_cfg, seed=stage1_cfg.seed + i)
        model = build_residual_unet(bc, seed=cfg_i.seed)
        hist = train_model(model, train, val, cfg_i)
        bases.append(model)
        histories.append(hist)
        if on_base_trained is not None:
            on_base_trained(i, model, hist)

    ensemble = build_ensemble(bases, ensemble_cfg, seed=stage2_cfg.seed)
    histories.append(train_model(ensemble, train, val, stage2_cfg))
    return ensemble, histories
