"""Configuration dataclasses shared across modules."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any

from .errors import DomainError

METRICS = ("euclidean", "hyperbolic", "spherical")


@dataclass(frozen=True)
class DomainBounds:
    """Radii and margins that keep every parameter in a compact set."""

    R_E: float = 3.0
    R_H: float = 0.95
    delta_S: float = 0.05
    B_phi: float = 10.0
    S_max: float = 5.0

    def __post_init__(self):
        for name in ("R_E", "R_H", "delta_S", "B_phi", "S_max"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be positive and finite, got {v}")
        if self.R_H >= 1.0:
            raise DomainError(f"R_H must be < 1, got {self.R_H}")
        if self.delta_S >= 1.0:
            raise DomainError(f"delta_S must be < 1, got {self.delta_S}")


@dataclass(frozen=True)
class FeatureConfig:
    window: int = 5
    max_path_len: int = 3
    S_max: float = 5.0
    directed: bool = False  # reserved; only the undirected oracle is implemented

    def __post_init__(self):
        if self.window < 0:
            raise DomainError("window must be >= 0")
        if self.max_path_len < 1:
            raise DomainError("max_path_len must be >= 1")
        if not self.S_max > 0:
            raise DomainError("S_max must be > 0")
        if self.directed:
            raise DomainError("directed graph distance is not implemented")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-2
    inner_steps: int = 5
    lambda0: float = 1.0
    lambda_min: float = 1e-3
    lambda_gate: float = 1e-3
    lambda_rad: float = 1e-4
    lambda_corr: float = 1e-3
    eps_gate: float = 1e-8
    tol: float = 1e-6
    seed: int = 0
    metrics: tuple = METRICS
    dims: tuple = (2, 2, 2)
    n_candidates: int | None = None  # None: every entity is a candidate
    k_neg: int = 16
    k_min: int = 8
    c_cond: float = 1e6
    maxent_tol: float = 1e-8
    maxent_max_iter: int = 100
    init_scale: float = 0.5  # initial ball radius as a fraction of R_E / R_H
    transport_scale: float = 0.1
    learn_translations: bool = False
    per_bin: bool = False
    safeguard: bool = True
    normalize_nll: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.inner_steps < 0:
            raise DomainError("epochs must be >= 1 and inner_steps >= 0")
        for name in ("lambda0", "lambda_min", "eps_gate", "maxent_tol", "c_cond"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        for name in ("lr", "lambda_gate", "lambda_rad", "lambda_corr", "init_scale", "transport_scale"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if not self.tol > 0:
            raise DomainError("tol must be positive (use math.inf for a single iteration)")
        if len(self.metrics) != len(self.dims) or not self.metrics:
            raise DomainError("metrics and dims must be non-empty and of equal length")
        for m in self.metrics:
            if m not in METRICS:
                raise DomainError(f"unknown metric {m!r}")
        if self.k_neg < 1:
            raise DomainError("k_neg must be >= 1")


def to_dict(obj) -> dict[str, Any]:
    d = dataclasses.asdict(obj)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
        elif isinstance(v, float) and math.isinf(v):
            d[k] = "inf"
    return d


def from_dict(cls, data: dict[str, Any] | None):
    if not data:
        return cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k not in names:
            raise DomainError(f"unknown {cls.__name__} field {k!r}")
        if isinstance(v, list):
            v = tuple(v)
        if v == "inf":
            v = math.inf
        kwargs[k] = v
    return cls(**kwargs)


__all__ = ["METRICS", "DomainBounds", "FeatureConfig", "TrainConfig", "to_dict", "from_dict"]
