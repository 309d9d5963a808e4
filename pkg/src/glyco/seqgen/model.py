from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..preprocess import ScalerParams
from .config import ModelConfig
from .network import init_params


class ModeError(ValueError):
    """Operation called on a model whose stochasticity mode does not support it."""


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Named parameter arrays plus the scaler and config they were trained with.

    Names are dotted paths; ``enc.*`` (history encoder), ``out.*`` (outcome
    decoder, including the ``out.logsd`` table) and ``trt.*`` (treatment
    decoder).  Arrays are treated as immutable.
    """

    arrays: dict[str, np.ndarray]
    scaler: ScalerParams
    config: ModelConfig
    trained: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.arrays.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {k} has non-finite entries")

    def with_arrays(self, arrays: dict[str, np.ndarray], **changes) -> "ModelParams":
        return replace(self, arrays=dict(arrays), **changes)

    def with_config(self, **changes) -> "ModelParams":
        return replace(self, config=self.config.with_(**changes))

    def mark_trained(self) -> "ModelParams":
        return replace(self, trained=True)

    def require(self, *modes: str) -> None:
        if modes and self.config.mode not in modes:
            raise ModeError(f"operation needs mode in {modes}, model is {self.config.mode!r}")

    def require_trained(self) -> None:
        if not self.trained:
            raise UntrainedModelError("model parameters are untrained; train or load a checkpoint first")

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def init_model(cfg: ModelConfig, scaler: ScalerParams, rng: np.random.Generator) -> ModelParams:
    return ModelParams(init_params(cfg, rng), scaler, cfg)
