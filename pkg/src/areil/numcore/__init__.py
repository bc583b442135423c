"""Deterministic numeric kernel: sparse propagation, parameter store, Adam,
and finite-difference gradient checking."""

from areil.numcore.gradcheck import GradCheckReport, grad_check
from areil.numcore.kernels import (
    HAVE_COMPILED,
    USE_COMPILED,
    backend_name,
    spmm,
)
from areil.numcore.params import Parameter, ParameterStore, uniform_init

__all__ = [
    "GradCheckReport",
    "grad_check",
    "HAVE_COMPILED",
    "USE_COMPILED",
    "backend_name",
    "spmm",
    "Parameter",
    "ParameterStore",
    "uniform_init",
]
