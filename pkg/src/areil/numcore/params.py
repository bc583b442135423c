"""Named parameter arrays with gradient buffers and Adam moment state.

Everything is float64. The store is insertion-ordered and single-writer:
one training step mutates it at a time.
"""

import numpy as np

from areil.errors import NumericError
from areil.numcore import kernels


class Parameter:
    """A value array with a paired gradient and Adam moments of equal shape."""

    __slots__ = ("name", "value", "grad", "m", "v")

    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParameterStore:
    """Ordered collection of uniquely named parameters plus the Adam step count."""

    def __init__(self):
        self._params = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        param = Parameter(name, value)
        self._params[name] = param
        return param

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def zero_grads(self):
        for p in self._params.values():
            p.grad[:] = 0.0

    def values_snapshot(self):
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_values(self, snapshot):
        for name, arr in snapshot.items():
            self._params[name].value[:] = arr

    def adam_step(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        """One Adam update over every parameter; zeroes gradients afterward."""
        for p in self._params.values():
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        self.step_count += 1
        bias1 = 1.0 - beta1 ** self.step_count
        bias2 = 1.0 - beta2 ** self.step_count
        for p in self._params.values():
            kernels.adam_update(
                p.value.reshape(-1), p.grad.reshape(-1),
                p.m.reshape(-1), p.v.reshape(-1),
                lr, beta1, beta2, eps, bias1, bias2,
            )
            p.grad[:] = 0.0


def uniform_init(rng, rows, cols):
    """Uniform init in [-0.5/sqrt(cols), 0.5/sqrt(cols)]."""
    half = 0.5 / np.sqrt(cols)
    return rng.uniform(-half, half, size=(rows, cols))
