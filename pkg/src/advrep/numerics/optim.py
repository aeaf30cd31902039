"""Parameter groups and plain SGD."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor

GROUPS = ("theta_e", "theta_d", "theta_id", "theta_pc")


class ParamSet:
    """Named trainable tensors that all belong to one parameter group.

    Non-trainable buffers (batch-norm running statistics) travel with the set so
    that checkpoints capture the complete state of a module.
    """

    def __init__(self, group: str):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}; expected one of {GROUPS}")
        self.group = group
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r} in {self.group}")
        tensor.requires_grad = True
        tensor.name = name
        self.params[name] = tensor
        return tensor

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self.buffers[name] = value
        return value

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k in self.params:
                self.params[k].data[...] = v
            elif k in self.buffers:
                self.buffers[k][...] = v
            else:
                raise KeyError(f"{self.group} has no entry {k!r}")

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()


@dataclass
class SgdState:
    learning_rate: float
    enabled: dict[str, bool] = field(default_factory=lambda: {g: True for g in GROUPS})

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")

    def only(self, *groups: str) -> "SgdState":
        """Same learning rate with exactly ``groups`` enabled."""
        return SgdState(self.learning_rate, {g: g in groups for g in GROUPS})


def sgd_step(params: Iterable[ParamSet], state: SgdState) -> None:
    """theta <- theta - lr * grad for enabled groups, then clear every gradient."""
    params = list(params)
    for ps in params:
        if not state.enabled.get(ps.group, False):
            continue
        for t in ps:
            if t.grad is None:
                continue
            t.data -= t.data.dtype.type(state.learning_rate) * t.grad
    for ps in params:
        ps.zero_grad()
