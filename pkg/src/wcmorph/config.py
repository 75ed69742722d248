"""Run configuration: a flat ``key=value`` file with a complete default set.

Defaults::

    seed=0
    n_identities=120
    images_per_identity=10
    train_identities=100
    embedding_dim=16
    fr_epochs=120
    fr_lr=0.001
    fr_margin=0.8
    fr_scale=32.0
    morpher_epochs=160
    morpher_lr=0.001
    gamma1=1.0
    gamma2=0.1
    batch_size=64
    iters=200
    step=0.05
    pairs=50
    bins=64
    impostor_cap=20000

Blank lines and lines starting with ``#`` are ignored. Unknown keys are an
error so typos do not pass silently.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import FormatError


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_identities: int = 120
    images_per_identity: int = 10
    train_identities: int = 100
    embedding_dim: int = 16
    fr_epochs: int = 120
    fr_lr: float = 1e-3
    fr_margin: float = 0.8
    fr_scale: float = 32.0
    morpher_epochs: int = 160
    morpher_lr: float = 1e-3
    gamma1: float = 1.0
    gamma2: float = 0.1
    batch_size: int = 64
    iters: int = 200
    step: float = 0.05
    pairs: int = 50
    bins: int = 64
    impostor_cap: int = 20000

    def __post_init__(self):
        if not 0 < self.train_identities < self.n_identities:
            raise ValueError("train_identities must be between 1 and n_identities - 1")
        if self.images_per_identity < 2:
            raise ValueError("images_per_identity must be at least 2")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    # stage seeds are fixed offsets of the run seed so stages stay independent
    def stage_seed(self, stage: str) -> int:
        offsets = {"data": 0, "fr_white": 1, "morpher": 2, "fr_black": 3, "scores": 4}
        return (self.seed + offsets[stage]) % 2**64

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def override(self, **values) -> "RunConfig":
        return replace(self, **{k: v for k, v in values.items() if v is not None})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"config line {n}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise FormatError(f"config line {n}: unknown key {key!r}")
            try:
                values[key] = int(value) if types[key] in (int, "int") else float(value)
            except ValueError as exc:
                raise FormatError(f"config line {n}: bad value for {key}: {value!r}") from exc
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())
