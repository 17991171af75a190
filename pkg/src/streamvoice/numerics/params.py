from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


@dataclass
class Parameter:
    """A trainable array with a same-shaped gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    trainable: bool = True

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class ParamStore:
    """Ordered name -> Parameter mapping shared by the model parts."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Parameter(name, np.ascontiguousarray(value, dtype=self.dtype), trainable=trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def n_values(self, trainable_only: bool = True) -> int:
        ps = self.trainable() if trainable_only else list(self)
        return int(sum(p.value.size for p in ps))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self._params.items():
            v = np.asarray(state[k])
            if v.shape != p.value.shape:
                raise ValueError(f"{k}: shape {v.shape} != {p.value.shape}")
            p.value[...] = v.astype(self.dtype)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for p in self._params.values():
            out.add(p.name, p.value, trainable=p.trainable)
        return out
