from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters shared by every stage of a run.

    ``lam`` weights the alignment loss against distillation; ``inner_lr`` and
    ``outer_lr`` are the plain-descent step of the target-model adaptation and
    the Adam step of the selector update. ``plan_grad`` picks whether meta-
    gradients see the transport plan move ("implicit") or hold it fixed
    ("envelope").
    """

    lam: float = 0.3
    epsilon: float = 0.01
    inner_steps: int = 5
    inner_lr: float = 0.01
    outer_lr: float = 0.01
    weight_decay: float = 5e-4
    max_outer_epochs: int = 200
    seed: int = 0
    label_ratio: float = 0.1

    hidden_dim: int = 64
    source_lr: float = 0.01
    source_epochs: int = 2000
    early_stop_patience: int = 50
    early_stop_delta: float = 1e-5
    dropout: float = 0.0
    standardize: bool = False

    ssl_epochs: int = 300
    ssl_lr: float = 0.01
    mask_ratio: float = 0.15
    num_clusters: int = 10
    ssl_edge_cap: int = 4000
    ssl_share_encoder: bool = False

    selector_hidden: int = 16
    use_global: bool = True
    use_local: bool = True

    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 1000
    final_steps: int | None = None
    plateau_patience: int = 20
    plateau_delta: float = 1e-6
    plan_grad: str = "implicit"

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        for name in ("inner_steps", "max_outer_epochs", "source_epochs", "ssl_epochs",
                     "hidden_dim", "num_clusters", "selector_hidden", "sinkhorn_max_iter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("inner_lr", "outer_lr", "weight_decay", "source_lr", "ssl_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 < self.label_ratio <= 1.0:
            raise ValueError("label_ratio must lie in (0, 1]")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.plan_grad not in ("implicit", "envelope"):
            raise ValueError(f"plan_grad must be 'implicit' or 'envelope', got {self.plan_grad!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        return self

    def update(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides).validate()

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]
