"""Named parameter storage and deterministic initializers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Tuple

import numpy as np

from .errors import ParameterError
from .tensor import Tensor, get_dtype

BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


class ParamStore(OrderedDict):
    """Ordered map from hierarchical parameter name to Tensor.

    Trainable parameters carry ``requires_grad=True``; batch-norm running
    statistics are stored alongside them as non-trainable buffers.
    """

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, copy=True), requires_grad=trainable, name=name)
        self[name] = t
        return t

    def get_param(self, name: str) -> Tensor:
        try:
            return self[name]
        except KeyError:
            raise ParameterError(f"missing parameter {name!r}") from None

    def trainable_items(self) -> Iterator[Tuple[str, Tensor]]:
        return ((k, v) for k, v in self.items() if v.requires_grad)

    def num_parameters(self, prefix: str = "", trainable_only: bool = True) -> int:
        return sum(
            v.data.size
            for k, v in self.items()
            if k.startswith(prefix) and (v.requires_grad or not trainable_only)
        )

    def names(self, prefix: str = ""):
        return [k for k in self if k.startswith(prefix)]

    def astype(self, dtype) -> "ParamStore":
        """Deep copy with every array cast to ``dtype``."""
        out = ParamStore()
        for k, v in self.items():
            out[k] = Tensor.wrap(np.array(v.data, dtype=dtype, copy=True), v.requires_grad, k)
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.items():
            out[k] = Tensor.wrap(v.data.copy(), v.requires_grad, k)
        return out

    def replace(self, name: str, data) -> None:
        old = self.get_param(name)
        if np.shape(data) != old.shape:
            raise ParameterError(f"shape mismatch for {name!r}: {np.shape(data)} vs {old.shape}")
        self[name] = Tensor.wrap(np.asarray(data, dtype=old.dtype), old.requires_grad, name)


class Initializer:
    """Seeded parameter factory used while building a model schema."""

    def __init__(self, store: ParamStore, rng: np.random.Generator):
        self.store = store
        self.rng = rng

    def matrix(self, name, fan_in, fan_out, shape=None):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        shape = shape or (fan_in, fan_out)
        self.store.add(name, self.rng.uniform(-limit, limit, size=shape).astype(get_dtype()))

    def zeros(self, name, shape, trainable=True):
        self.store.add(name, np.zeros(shape, dtype=get_dtype()), trainable)

    def ones(self, name, shape, trainable=True):
        self.store.add(name, np.ones(shape, dtype=get_dtype()), trainable)

    def embedding(self, name, rows, dim):
        table = self.rng.uniform(-0.1, 0.1, size=(rows, dim)).astype(get_dtype())
        table[0] = 0.0
        self.store.add(name, table)

    def linear(self, prefix, fan_in, fan_out):
        self.matrix(f"{prefix}.weight", fan_in, fan_out)
        self.zeros(f"{prefix}.bias", (fan_out,))
