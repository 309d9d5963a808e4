from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

MODES = ("parametric", "latent", "autoregressive")
# conditioning channels that can be switched off for ablations
ALL_CHANNELS = ("past-y", "past-x", "past-v", "future-x", "future-v", "static")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and optimisation settings.

    Defaults follow a one-layer encoder and decoder with 64 features, 16 heads,
    hidden width 100 for both the feed-forward blocks and the input embedding,
    learning rate 1e-3 and mini-batches of 8 patients.
    """

    d_model: int = 64
    heads: int = 16
    enc_layers: int = 1
    dec_layers: int = 1
    ffn_hidden: int = 100
    embed_hidden: int = 100
    latent_dim: int = 16
    K: int = 24
    history: int = 48
    prior_sd: float = 1.0
    mode: str = "parametric"
    lr: float = 1e-3
    batch: int = 8
    windows_per_patient: int = 4
    steps: int = 1500
    eval_every: int = 100
    max_val_windows: int = 256
    kl_weight: float = 1.0
    include: tuple[str, ...] = ALL_CHANNELS
    outcome_dim: int = 1
    treatment_dim: int = 2
    covariate_dim: int = 1
    static_dim: int = 3

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        unknown = set(self.include) - set(ALL_CHANNELS)
        if unknown:
            raise ValueError(f"unknown conditioning channel(s): {sorted(unknown)}")
        if self.K < 1 or self.history < 1:
            raise ValueError("K and history must be positive")
        if self.prior_sd <= 0:
            raise ValueError("prior_sd must be positive")

    @property
    def sd_rows(self) -> int:
        """Rows of the outcome sd table: hours ahead, or one step in autoregressive mode."""
        return 1 if self.mode == "autoregressive" else self.K

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_json(self) -> dict:
        d = asdict(self)
        d["include"] = list(self.include)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        if "include" in obj:
            obj["include"] = tuple(obj["include"])
        return cls(**obj)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)
