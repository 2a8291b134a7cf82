"""Plain SGD and the warm-up learning-rate schedule."""
from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor

BASE_LR = 2e-4
WARMUP_LR = 1e-7


def sgd_step(params: Iterable[Tensor] | Mapping[str, Tensor], lr: float, grads=None) -> None:
    """``p <- p - lr * g`` in place; a missing gradient counts as zero.

    ``grads`` defaults to each tensor's accumulated ``.grad``.
    """
    params = list(params.values()) if isinstance(params, Mapping) else list(params)
    if grads is None:
        grads = [p.grad for p in params]
    grads = list(grads)
    if len(grads) != len(params):
        raise ContractError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        new = p.data - lr * g
        new.setflags(write=False)
        p.data = new


def lr_schedule(epoch: int, base_lr: float = BASE_LR, warmup_lr: float = WARMUP_LR,
                warmup_epochs: int = 1) -> float:
    """Fixed warm-up rate for the first epoch(s), then a constant base rate (1-indexed)."""
    if epoch < 1:
        raise ContractError(f"epochs are 1-indexed, got {epoch}")
    return warmup_lr if epoch <= warmup_epochs else base_lr
