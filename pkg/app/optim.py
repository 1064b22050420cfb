from typing import Dict, Optional

import numpy as np

from app.exception import DomainError
from app.tensor import Tensor


class SGD:
    """SGD with optional momentum and L2 weight decay, updating tensors in place.

    Momentum follows the usual buffer form: buf = momentum * buf + (grad + wd * p).
    """

    def __init__(self, params: Dict[str, Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def direction(self, name: str) -> np.ndarray:
        """The step direction for one parameter without touching any state."""
        p = self.params[name]
        d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad.copy()
        if self.momentum and name in self.buffers:
            d = self.momentum * self.buffers[name] + d
        return d

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            d = self.direction(name)
            if self.momentum:
                self.buffers[name] = d
            p.data -= lr * d

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"{name}.momentum": buf.copy() for name, buf in self.buffers.items()}


def lr_schedule(epoch: int, base_lr: float = 0.1, warmup_epochs: int = 10, decay_epochs=(16, 50)) -> float:
    """Linear warm-up from base_lr/10, then step decays by 0.1 and 0.01."""
    if epoch < 0:
        raise DomainError(f"epoch must be non-negative, got {epoch}")
    first_decay, second_decay = decay_epochs
    if epoch >= second_decay:
        return base_lr * 0.01
    if epoch >= first_decay:
        return base_lr * 0.1
    if epoch < warmup_epochs and warmup_epochs > 1:
        start = base_lr / 10.0
        return start + (base_lr - start) * epoch / (warmup_epochs - 1)
    return base_lr
