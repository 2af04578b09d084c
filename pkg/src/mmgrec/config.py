"""Training configuration. Defaults follow the published hyperparameter table."""
import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError
from .model import ScoringMode


@dataclass
class TrainConfig:
    d: int = 64
    gcn_layers: int = 2
    lr: float = 0.001
    batch_size: int = 256
    neg_ratio: int = 1
    max_epochs: int = 100
    patience: int = 5
    eval_ks: tuple[int, ...] = (10, 20)
    seed: int = 0
    scoring: ScoringMode = ScoringMode.DOT
    hidden: int = 128
    eval_negatives: int = 100
    k_core: int = 5
    fixed_gate: float | None = None
    early_stopping: bool = True

    def __post_init__(self):
        self.scoring = ScoringMode(self.scoring)
        self.eval_ks = tuple(int(k) for k in self.eval_ks)
        self.validate()

    def validate(self):
        for name in ("d", "batch_size", "neg_ratio", "max_epochs", "patience", "hidden",
                     "eval_negatives", "k_core"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.gcn_layers <= 4:
            raise ConfigError("gcn_layers must be in [0, 4]")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not self.eval_ks or min(self.eval_ks) < 1:
            raise ConfigError("eval_ks must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.fixed_gate is not None and not 0.0 <= self.fixed_gate <= 1.0:
            raise ConfigError("fixed_gate must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scoring"] = self.scoring.value
        out["eval_ks"] = list(self.eval_ks)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})
