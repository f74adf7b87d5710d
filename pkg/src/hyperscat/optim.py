"""Adam, L1/L2 losses and the epoch-driven training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, _make

logger = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    "matching": {"epochs": 100, "loss": "l2"},
    "inverse": {"epochs": 150, "loss": "l1"},
    "misr": {"epochs": 60, "loss": "l2"},
}
MISR_EPOCH_CHOICES = (30, 60)


class NonFiniteLossError(FloatingPointError):
    pass


def loss_l2(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"loss_l2: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def backward(g):
        return (float(g) * 2.0 * diff / n,)

    return _make(np.asarray((diff * diff).mean()), (pred,), backward, "l2")


def loss_l1(pred: Tensor, target) -> Tensor:
    """Mean absolute error over all elements."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"loss_l1: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def backward(g):
        return (float(g) * np.sign(diff) / n,)

    return _make(np.asarray(np.abs(diff).mean()), (pred,), backward, "l1")


LOSSES = {"l1": loss_l1, "l2": loss_l2}


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} with shape {p.shape} has no gradient")
        adam_step(self.state, self.params, [p.grad for p in self.params])


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(grads) != len(params) or any(g is None for g in grads):
        raise ValueError("adam_step: every parameter needs a gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainConfig:
    stage: str = "matching"
    parity: str = "none"
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    loss: str = "l2"
    lr: float = 1e-3

    @classmethod
    def for_stage(cls, stage: str, parity: str = "none", **overrides) -> "TrainConfig":
        if stage not in STAGE_DEFAULTS:
            raise ValueError(f"unknown stage {stage!r}")
        base = dict(stage=stage, parity=parity, **STAGE_DEFAULTS[stage])
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def train(net, dataset, config: TrainConfig, rng: Optional[np.random.Generator] = None):
    """Fit ``net`` to ``dataset = (inputs, targets)`` with Adam.

    Items are indexed along axis 0 and shuffled each epoch with a generator
    seeded from ``config.seed``.  Returns ``(net, log)`` where ``log`` holds
    ``(epoch, mean_loss)`` pairs.
    """
    inputs, targets = dataset
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(inputs)
    if n == 0:
        raise ValueError(f"{config.stage}: empty dataset")
    if len(targets) != n:
        raise ValueError(f"{config.stage}: {n} inputs but {len(targets)} targets")
    loss_fn = LOSSES[config.loss]
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    opt = Adam(net.parameters(), lr=config.lr)
    net.train()
    log: list[tuple[int, float]] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(net(inputs[idx]), targets[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"{config.stage}/{config.parity}: non-finite loss {value} at epoch {epoch}"
                )
            loss.backward()
            opt.step()
            total += value * len(idx)
        log.append((epoch, total / n))
        logger.debug("%s/%s epoch %d loss %.6g", config.stage, config.parity, epoch, total / n)
    net.eval()
    return net, log


def write_loss_csv(log, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in log:
            writer.writerow([epoch, repr(float(loss))])
