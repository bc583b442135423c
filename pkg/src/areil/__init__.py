"""Dual-domain recommendation engine: disentangled user embeddings,
graph-convolutional enhancement, attention-gated cross-domain transfer,
and adversarial (gradient-reversal) domain classification."""

__version__ = "0.1.0"

from areil.config import RunConfig, load_config  # noqa: E402
from areil.model import Model, ModelConfig  # noqa: E402

__all__ = ["Model", "ModelConfig", "RunConfig", "load_config", "__version__"]
