"""Minimal container for parameters, buffers and child modules."""
from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from .autograd import Parameter


class Module:
    def __init__(self):
        self._params: Dict[str, Parameter] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, data, init=None) -> Parameter:
        if name in self._params or name in self._children:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(data, name=name, init=init)
        self._params[name] = p
        return p

    def add_buffer(self, name: str, data: np.ndarray) -> None:
        self._buffers[name] = np.array(data, dtype=np.float64)

    def add_child(self, name: str, module: "Module") -> "Module":
        if name in self._children or name in self._params:
            raise ValueError(f"duplicate child name {name!r}")
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            if head not in self._buffers:
                raise KeyError(dotted)
            self._buffers[head] = np.array(value, dtype=np.float64)
