"""Run configuration: structured key = value text with sections.

Every field has a default; unknown sections or keys are hard errors. The
canonical serialization feeds the config digest embedded in all outputs.
"""

import configparser
import hashlib
import io
from dataclasses import dataclass, fields

from areil.errors import ConfigError
from areil.model import ModelConfig

_SCHEMA = {
    "data": {
        "manifest_dir": str,
        "raw_x": str,
        "raw_y": str,
        "delimiter": str,
        "positive_threshold": float,
    },
    "model": {
        "embed_dim": int,
        "gcn_layers": int,
        "gamma_s": float,
        "gamma_t": float,
        "lambda1": float,
        "lambda2": float,
        "grl_lambda_max": float,
        "classifier_hidden": int,
        "variant": str,
    },
    "train": {
        "learning_rate": float,
        "batch_size": int,
        "negatives_per_positive": int,
        "max_epochs": int,
        "patience": int,
        "seed": int,
        "beta1": float,
        "beta2": float,
        "eps": float,
    },
    "run": {
        "out_dir": str,
        "k": int,
        "threads": int,
    },
}


@dataclass
class RunConfig:
    # [data]
    manifest_dir: str = ""
    raw_x: str = ""
    raw_y: str = ""
    delimiter: str = ","
    positive_threshold: float = 0.0
    # [model]
    embed_dim: int = 64
    gcn_layers: int = 3
    gamma_s: float = 0.9
    gamma_t: float = 0.9
    lambda1: float = 0.01
    lambda2: float = 0.001
    grl_lambda_max: float = 1.0
    classifier_hidden: int = 0
    variant: str = "full"
    # [train]
    learning_rate: float = 0.001
    batch_size: int = 1024
    negatives_per_positive: int = 1
    max_epochs: int = 1000
    patience: int = 10
    seed: int = 2024
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # [run]
    out_dir: str = "runs"
    k: int = 20
    threads: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.k < 1:
            raise ConfigError("k must be >= 1")

    def model_config(self):
        return ModelConfig(
            embed_dim=self.embed_dim,
            gcn_layers=self.gcn_layers,
            gamma_s=self.gamma_s,
            gamma_t=self.gamma_t,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            grl_lambda_max=self.grl_lambda_max,
            classifier_hidden=self.classifier_hidden,
            variant=self.variant,
        )

    def to_text(self):
        """Canonical serialization (fixed section and key order)."""
        out = io.StringIO()
        for section, keys in _SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {getattr(self, key)}\n")
            out.write("\n")
        return out.getvalue()

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def replace(self, **overrides):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(overrides)
        return RunConfig(**values)


def parse_config_text(text):
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            caster = _SCHEMA[section][key]
            try:
                values[key] = caster(raw)
            except ValueError:
                raise ConfigError(
                    f"bad value for {key!r} in [{section}]: {raw!r}"
                ) from None
    return RunConfig(**values)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
