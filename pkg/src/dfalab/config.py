"""Experiment configuration: one flat key = value text block describes a
run completely. Flags override file values; unknown keys are rejected;
every run writes its resolved config next to its outputs so any result can
be reproduced from that file alone.
"""

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

ACQUIRERS = ("learned", "random", "complete", "static")

# dataset name -> (acquirer hidden units, lstm layers)
DATASET_DEFAULTS = {
    "m-forda": (4, 2),
    "spoken-arabic": (8, 3),
}


@dataclass
class ExperimentConfig:
    dataset: str = "m-forda"
    data_dir: str = ""
    output_dir: str = ""
    acquirer: str = "learned"
    budget: int = 5
    temperature: float = 1.0
    penalty_scale: float = 100.0
    acquirer_hidden: int = 4
    lstm_layers: int = 2
    batch_size: int = 1000
    learning_rate: float = 0.001
    max_epochs: int = 200
    patience: int = 20
    val_fraction: float = 0.1
    forest_trees: int = 100
    train_limit: int = 0
    seed: int = 0
    eval_seed: int = 9999

    def __post_init__(self):
        if self.acquirer not in ACQUIRERS:
            raise ValueError(f"acquirer must be one of {ACQUIRERS}, "
                             f"got {self.acquirer!r}")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size/max_epochs must be >= 1, patience >= 0")

    def apply_dataset_defaults(self) -> "ExperimentConfig":
        if self.dataset in DATASET_DEFAULTS:
            hidden, layers = DATASET_DEFAULTS[self.dataset]
            self.acquirer_hidden = hidden
            self.lstm_layers = layers
        return self

    def to_text(self) -> str:
        lines = ["[experiment]"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#") or line.startswith("["):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"config line {lineno}: expected key = value, "
                                 f"got {raw!r}")
            key = key.strip()
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = known[key](value.strip())
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def cell_key(self) -> str:
        """Canonical identity of the experiment cell: everything except the
        seed and output location."""
        skip = {"seed", "output_dir"}
        parts = [f"{k}={v}" for k, v in sorted(asdict(self).items())
                 if k not in skip]
        return "|".join(parts)

    def config_hash(self) -> str:
        return hashlib.sha256(self.cell_key().encode()).hexdigest()[:12]
